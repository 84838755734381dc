"""Group-wise asymmetric affine quantization with bit-packed storage.

Groups are contiguous runs of ``group_size`` input rows inside one output
column, so a ``(d_in, d_out)`` weight has ``(d_in // group_size, d_out)``
scale and zero factors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels

SUPPORTED_BITS = (2, 3, 4)
SCALE_FLOOR = 1e-8


class QuantError(ValueError):
    pass


def _check_bits(bits: int) -> None:
    if bits not in SUPPORTED_BITS:
        raise QuantError(f"bits must be one of {SUPPORTED_BITS}, got {bits}")


@dataclass(eq=False)
class QuantizedLinear:
    """Frozen N-bit weights of a ``d_in -> d_out`` linear map.

    ``packed`` holds the integer grid indices LSB-first in little-endian
    32-bit words, row-major over ``(d_in, d_out)``.
    """

    bits: int
    group_size: int
    d_in: int
    d_out: int
    packed: np.ndarray
    scales: np.ndarray
    zeros: np.ndarray
    _w_int: np.ndarray | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        _check_bits(self.bits)
        if self.d_in < 1 or self.d_out < 1:
            raise QuantError("dimensions must be positive")
        if self.group_size < 1 or self.d_in % self.group_size:
            raise QuantError(f"group_size {self.group_size} does not divide d_in {self.d_in}")
        self.packed = np.ascontiguousarray(self.packed, dtype=np.uint32)
        self.scales = np.ascontiguousarray(self.scales, dtype=np.float32)
        self.zeros = np.ascontiguousarray(self.zeros, dtype=np.float32)
        if self.packed.shape != (kernels.n_words(self.d_in * self.d_out, self.bits),):
            raise QuantError("packed word count does not match dimensions")
        if self.scales.shape != self.group_shape or self.zeros.shape != self.group_shape:
            raise QuantError(f"scale/zero factors must have shape {self.group_shape}")
        if not (np.all(self.scales > 0) and np.all(np.isfinite(self.scales)) and np.all(np.isfinite(self.zeros))):
            raise QuantError("scales must be positive and finite, zeros finite")

    @property
    def qmax(self) -> int:
        return (1 << self.bits) - 1

    @property
    def n_groups(self) -> int:
        return self.d_in // self.group_size

    @property
    def group_shape(self) -> tuple[int, int]:
        return (self.d_in // self.group_size, self.d_out)

    @property
    def w_int(self) -> np.ndarray:
        """Unpacked ``(d_in, d_out)`` uint8 grid indices (cached, read-only)."""
        if self._w_int is None:
            w = unpack_ints(self.packed, self.bits, (self.d_in, self.d_out))
            w.setflags(write=False)
            self._w_int = w
        return self._w_int

    @classmethod
    def from_ints(cls, w_int, scales, zeros, bits: int, group_size: int) -> "QuantizedLinear":
        w_int = np.asarray(w_int)
        d_in, d_out = w_int.shape
        return cls(bits, group_size, d_in, d_out, pack_ints(w_int, bits), scales, zeros)

    def boundary_flags(self) -> np.ndarray:
        w = self.w_int
        return (w == 0) | (w == self.qmax)

    def equals(self, other: "QuantizedLinear") -> bool:
        """Bit-exact comparison, including float factors."""
        return (
            (self.bits, self.group_size, self.d_in, self.d_out)
            == (other.bits, other.group_size, other.d_in, other.d_out)
            and np.array_equal(self.packed, other.packed)
            and self.scales.tobytes() == other.scales.tobytes()
            and self.zeros.tobytes() == other.zeros.tobytes()
        )


def quantize(w, bits: int, group_size: int) -> QuantizedLinear:
    """Round-to-nearest (ties to even) min/max quantization of a dense weight.

    Examples
    --------
    >>> q = quantize(np.array([[0.0], [1.0], [2.0], [3.0]]), bits=2, group_size=4)
    >>> q.w_int.ravel().tolist(), float(q.scales[0, 0]), float(q.zeros[0, 0])
    ([0, 1, 2, 3], 1.0, 0.0)
    """
    _check_bits(bits)
    w = np.asarray(w, dtype=np.float32)
    if w.ndim != 2 or w.shape[0] < 1 or w.shape[1] < 1:
        raise QuantError(f"expected a non-empty 2-D weight, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise QuantError("weight contains non-finite entries")
    d_in, d_out = w.shape
    if group_size < 1 or d_in % group_size:
        raise QuantError(f"group_size {group_size} does not divide d_in {d_in}")

    groups = w.reshape(d_in // group_size, group_size, d_out)
    lo = groups.min(axis=1)
    hi = groups.max(axis=1)
    qmax = (1 << bits) - 1
    scales = np.maximum((hi.astype(np.float64) - lo) / qmax, SCALE_FLOOR).astype(np.float32)
    zeros = lo
    q = np.rint((groups - zeros[:, None, :].astype(np.float64)) / scales[:, None, :])
    w_int = np.clip(q, 0, qmax).astype(np.uint8).reshape(d_in, d_out)
    return QuantizedLinear.from_ints(w_int, scales, zeros, bits, group_size)


def dequantize(q: QuantizedLinear) -> np.ndarray:
    return kernels.dequantize_grid(q.w_int, q.scales, q.zeros, q.group_size)


def pack_ints(values, bits: int) -> np.ndarray:
    """Pack unsigned integers of width ``bits`` into little-endian 32-bit words.

    Fields go LSB-first in row-major element order; with ``bits=3`` a field
    may straddle two words.

    >>> hex(int(pack_ints(np.arange(1, 9), 4)[0]))
    '0x87654321'
    """
    _check_bits(bits)
    v = np.asarray(values)
    if v.size and (v.min() < 0 or v.max() > (1 << bits) - 1):
        raise QuantError(f"values out of range for {bits}-bit fields")
    return kernels.pack_bits(v, bits)


def unpack_ints(words, bits: int, dims) -> np.ndarray:
    _check_bits(bits)
    dims = tuple(int(d) for d in np.atleast_1d(dims))
    n = int(np.prod(dims))
    words = np.asarray(words, dtype=np.uint32)
    if words.size != kernels.n_words(n, bits):
        raise QuantError(f"{words.size} words cannot hold {n} fields of {bits} bits")
    return kernels.unpack_bits(words, bits, n).reshape(dims)
