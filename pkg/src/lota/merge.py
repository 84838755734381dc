"""Lossless adapter merge and the binary checkpoint container.

Container layout (all integers little-endian)::

    header   "LOTA" | u16 version | u16 n_layers | u32 crc
    per layer:
      quant    u8 flags | u8 bits | u32 group_size | u32 d_in | u32 d_out
               | u32 words[ceil(d_in*d_out*bits/32)]
               | f32 scales[n_groups*d_out] | f32 zeros[n_groups*d_out] | u32 crc
      adapter  (flags & 1) u32 rank | u32 omega_num | u32 omega_den
               | u32 a_words | u32 b_words | u32 crc
      mask     (flags & 2) u8 bits[ceil(d_in*d_out/8)] | u32 crc

Each ``crc`` is the CRC-32 of the bytes of its own section.
"""

from __future__ import annotations

import io
import struct
import zlib
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import kernels
from .layers import QLinearTA, ZeroOnlyLinear
from .quant import QuantError, QuantizedLinear
from .tern import AdapterError, TernaryAdapter, decode_ternary, encode_ternary

MAGIC = b"LOTA"
VERSION = 1
FLAG_ADAPTER = 1
FLAG_MASK = 2


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    pass


def merge(layer) -> QuantizedLinear:
    """Fold a ternary adapter into the integer grid and zero factors.

    The grid becomes ``clamp(W_int + hat_w)`` and each group's zero becomes
    ``z + s * mu``; scales are untouched. A plain :class:`QuantizedLinear`
    is returned unchanged.
    """
    if isinstance(layer, QuantizedLinear):
        return layer
    if isinstance(layer, ZeroOnlyLinear):
        return merge_zero_only(layer)
    w_eff, zeros, _, _ = layer.merged_state()
    q = layer.base
    return QuantizedLinear.from_ints(w_eff, q.scales, zeros, q.bits, q.group_size)


def merge_zero_only(layer: ZeroOnlyLinear) -> QuantizedLinear:
    q = layer.base
    zeros = layer.zeros().astype(np.float32)
    return QuantizedLinear(q.bits, q.group_size, q.d_in, q.d_out, q.packed.copy(), q.scales, zeros)


@dataclass(eq=False)
class LayerRecord:
    """One checkpointed layer. Adapter and boundary mask are optional."""

    base: QuantizedLinear
    adapter: TernaryAdapter | None = None
    boundary_mask: np.ndarray | None = None

    @classmethod
    def of(cls, layer) -> "LayerRecord":
        if isinstance(layer, LayerRecord):
            return layer
        if isinstance(layer, QuantizedLinear):
            return cls(layer)
        if isinstance(layer, QLinearTA):
            return cls(layer.base, layer.adapter, layer.boundary_mask)
        raise TypeError(f"cannot checkpoint {type(layer).__name__}")

    def to_layer(self):
        if self.adapter is None:
            return self.base
        return QLinearTA(self.base, self.adapter, self.boundary_mask)

    def equals(self, other: "LayerRecord") -> bool:
        if not self.base.equals(other.base):
            return False
        if (self.adapter is None) != (other.adapter is None):
            return False
        if self.adapter is not None and not self.adapter.equals(other.adapter):
            return False
        if (self.boundary_mask is None) != (other.boundary_mask is None):
            return False
        return self.boundary_mask is None or np.array_equal(self.boundary_mask, other.boundary_mask)


# --------------------------------------------------------------------------- #
# Encoding
# --------------------------------------------------------------------------- #
def _section(buf: io.BytesIO, payload: bytes) -> None:
    buf.write(payload)
    buf.write(struct.pack("<I", zlib.crc32(payload)))


def _u32_range(value: int, what: str) -> int:
    if not 0 <= value < 2**32:
        raise CheckpointError(f"{what} {value} does not fit in u32")
    return value


def dumps(layers) -> bytes:
    records = [LayerRecord.of(x) for x in layers]
    if len(records) >= 2**16:
        raise CheckpointError("too many layers")
    buf = io.BytesIO()
    _section(buf, MAGIC + struct.pack("<HH", VERSION, len(records)))
    for rec in records:
        q = rec.base
        flags = (FLAG_ADAPTER if rec.adapter is not None else 0) | (
            FLAG_MASK if rec.boundary_mask is not None else 0
        )
        _section(
            buf,
            struct.pack("<BBIII", flags, q.bits, q.group_size, q.d_in, q.d_out)
            + q.packed.astype("<u4").tobytes()
            + q.scales.astype("<f4").tobytes()
            + q.zeros.astype("<f4").tobytes(),
        )
        if rec.adapter is not None:
            ad = rec.adapter
            if ad.a.shape[0] != q.d_in or ad.b.shape[1] != q.d_out:
                raise CheckpointError("adapter shape does not match its layer")
            om = ad.omega
            _section(
                buf,
                struct.pack(
                    "<III", ad.rank, _u32_range(om.numerator, "omega numerator"),
                    _u32_range(om.denominator, "omega denominator"),
                )
                + encode_ternary(ad.a).astype("<u4").tobytes()
                + encode_ternary(ad.b).astype("<u4").tobytes(),
            )
        if rec.boundary_mask is not None:
            mask = np.asarray(rec.boundary_mask, dtype=np.uint8)
            if mask.size != (q.d_in * q.d_out + 7) // 8:
                raise CheckpointError("boundary mask size does not match its layer")
            _section(buf, mask.tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0
        self.start = 0

    def begin(self) -> None:
        self.start = self.pos

    def take(self, n: int) -> memoryview:
        if n < 0 or self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint: needed {n} bytes at offset {self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: str, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(count * dt.itemsize), dtype=dt).copy()

    def end(self, what: str) -> None:
        payload = self.data[self.start : self.pos]
        (crc,) = self.unpack("<I")
        if zlib.crc32(payload) != crc:
            raise ChecksumError(f"checksum mismatch in {what} section at offset {self.start}")


def loads(data: bytes) -> list[LayerRecord]:
    r = _Reader(bytes(data))
    r.begin()
    if bytes(r.take(4)) != MAGIC:
        raise CheckpointError("bad magic: not a LOTA checkpoint")
    version, n_layers = r.unpack("<HH")
    r.end("header")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    records = []
    for index in range(n_layers):
        r.begin()
        flags, bits, group_size, d_in, d_out = r.unpack("<BBIII")
        if flags & ~(FLAG_ADAPTER | FLAG_MASK):
            raise CheckpointError(f"layer {index}: unknown section flags {flags:#x}")
        if bits not in (2, 3, 4) or group_size == 0 or d_in == 0 or d_out == 0 or d_in % group_size:
            raise CheckpointError(f"layer {index}: invalid quantization header")
        n = d_in * d_out
        words = r.array("<u4", kernels.n_words(n, bits))
        n_groups = (d_in // group_size) * d_out
        scales = r.array("<f4", n_groups).reshape(d_in // group_size, d_out)
        zeros = r.array("<f4", n_groups).reshape(d_in // group_size, d_out)
        r.end(f"layer {index} quant")
        try:
            base = QuantizedLinear(bits, group_size, d_in, d_out, words, scales, zeros)
        except QuantError as exc:
            raise CheckpointError(f"layer {index}: {exc}") from exc
        adapter = mask = None
        if flags & FLAG_ADAPTER:
            r.begin()
            rank, num, den = r.unpack("<III")
            if rank == 0 or den == 0:
                raise CheckpointError(f"layer {index}: invalid adapter header")
            a_words = r.array("<u4", kernels.n_words(d_in * rank, 2))
            b_words = r.array("<u4", kernels.n_words(rank * d_out, 2))
            r.end(f"layer {index} adapter")
            try:
                adapter = TernaryAdapter(
                    decode_ternary(a_words, (d_in, rank)),
                    decode_ternary(b_words, (rank, d_out)),
                    Fraction(num, den),
                )
            except AdapterError as exc:
                raise CheckpointError(f"layer {index}: {exc}") from exc
            if adapter.omega.denominator != den:
                raise CheckpointError(f"layer {index}: omega {num}/{den} is not in lowest terms")
        if flags & FLAG_MASK:
            r.begin()
            mask = r.array("u1", (n + 7) // 8)
            r.end(f"layer {index} mask")
        records.append(LayerRecord(base, adapter, mask))
    if r.pos != len(r.data):
        raise CheckpointError(f"{len(r.data) - r.pos} trailing bytes after last layer")
    return records


def save_checkpoint(layers, path) -> None:
    Path(path).write_bytes(dumps(layers))


def load_checkpoint(path) -> list[LayerRecord]:
    return loads(Path(path).read_bytes())
