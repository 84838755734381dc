"""Hot numeric kernels.

Every kernel exists twice: a numba ``@njit`` loop (``*_nb``) and a vectorised
numpy twin (``*_np``). The public names dispatch to one of them according to
:data:`lota._accel.USE_NUMBA`. Both variants are bit-identical on every
output; ``tests/test_kernels.py`` holds them to that.
"""

from __future__ import annotations

import numpy as np

from ._accel import BACKEND, USE_NUMBA, njit

__all__ = [
    "BACKEND",
    "pack_bits",
    "unpack_bits",
    "pack_bools",
    "unpack_bools",
    "dequantize_grid",
    "ternary_effect",
    "apply_adapter",
]


# --------------------------------------------------------------------------- #
# N-bit fields in little-endian 32-bit words
# --------------------------------------------------------------------------- #
def n_words(n: int, bits: int) -> int:
    return (n * bits + 31) // 32


def pack_bits_np(values: np.ndarray, bits: int) -> np.ndarray:
    v = np.ascontiguousarray(values, dtype=np.uint8).ravel()
    shifts = np.arange(bits, dtype=np.uint8)
    stream = ((v[:, None] >> shifts) & 1).astype(np.uint8).ravel()
    raw = np.packbits(stream, bitorder="little")
    out = np.zeros(n_words(v.size, bits) * 4, dtype=np.uint8)
    out[: raw.size] = raw
    return out.view("<u4").astype(np.uint32)


def unpack_bits_np(words: np.ndarray, bits: int, n: int) -> np.ndarray:
    raw = np.ascontiguousarray(words, dtype="<u4").view(np.uint8)
    stream = np.unpackbits(raw, bitorder="little")[: n * bits].reshape(n, bits)
    weights = (1 << np.arange(bits)).astype(np.uint8)
    return (stream * weights).sum(axis=1, dtype=np.uint32).astype(np.uint8)


@njit(cache=True)
def pack_bits_nb(values, bits):
    n = values.size
    out = np.zeros((n * bits + 31) // 32, dtype=np.uint32)
    mask = np.uint64((1 << bits) - 1)
    for idx in range(n):
        pos = idx * bits
        w = pos >> 5
        off = np.uint64(pos & 31)
        v = np.uint64(values[idx]) & mask
        out[w] |= np.uint32((v << off) & np.uint64(0xFFFFFFFF))
        if (pos & 31) + bits > 32:
            out[w + 1] |= np.uint32(v >> (np.uint64(32) - off))
    return out


@njit(cache=True)
def unpack_bits_nb(words, bits, n):
    out = np.empty(n, dtype=np.uint8)
    mask = np.uint64((1 << bits) - 1)
    for idx in range(n):
        pos = idx * bits
        w = pos >> 5
        off = np.uint64(pos & 31)
        v = np.uint64(words[w]) >> off
        if (pos & 31) + bits > 32:
            v |= np.uint64(words[w + 1]) << (np.uint64(32) - off)
        out[idx] = np.uint8(v & mask)
    return out


# --------------------------------------------------------------------------- #
# Boolean masks, 8 per byte, LSB-first
# --------------------------------------------------------------------------- #
def pack_bools_np(flags: np.ndarray) -> np.ndarray:
    return np.packbits(np.ascontiguousarray(flags, dtype=bool).ravel(), bitorder="little")


def unpack_bools_np(data: np.ndarray, n: int) -> np.ndarray:
    return np.unpackbits(np.asarray(data, dtype=np.uint8), count=n, bitorder="little").astype(bool)


@njit(cache=True)
def pack_bools_nb(flags):
    n = flags.size
    out = np.zeros((n + 7) // 8, dtype=np.uint8)
    for idx in range(n):
        if flags[idx]:
            out[idx >> 3] |= np.uint8(1 << (idx & 7))
    return out


@njit(cache=True)
def unpack_bools_nb(data, n):
    out = np.empty(n, dtype=np.bool_)
    for idx in range(n):
        out[idx] = (data[idx >> 3] >> (idx & 7)) & 1 == 1
    return out


# --------------------------------------------------------------------------- #
# Group-wise dequantisation: s * q + z in float32
# --------------------------------------------------------------------------- #
def dequantize_grid_np(w_int, scales, zeros, group_size):
    s = np.repeat(scales, group_size, axis=0)
    z = np.repeat(zeros, group_size, axis=0)
    return w_int.astype(np.float32) * s + z


@njit(cache=True)
def dequantize_grid_nb(w_int, scales, zeros, group_size):
    d_in, d_out = w_int.shape
    out = np.empty((d_in, d_out), dtype=np.float32)
    for i in range(d_in):
        g = i // group_size
        for j in range(d_out):
            out[i, j] = np.float32(w_int[i, j]) * scales[g, j] + zeros[g, j]
    return out


# --------------------------------------------------------------------------- #
# Ternary adapter effect: hat_w and per-group integer sums
# --------------------------------------------------------------------------- #
def ternary_effect_np(a, b, num, den, group_size):
    # Integer-valued float64 products are exact for |entries| << 2**53.
    delta = np.rint(a.astype(np.float64) @ b.astype(np.float64)).astype(np.int64)
    hat = (np.sign(delta) * (den * np.abs(delta) > num)).astype(np.int8)
    d_in, d_out = delta.shape
    n_groups = d_in // group_size
    delta_sum = delta.reshape(n_groups, group_size, d_out).sum(axis=1)
    hat_sum = hat.astype(np.int64).reshape(n_groups, group_size, d_out).sum(axis=1)
    return hat, delta_sum, hat_sum


@njit(cache=True)
def ternary_effect_nb(a, b, num, den, group_size):
    d_in, r = a.shape
    d_out = b.shape[1]
    n_groups = d_in // group_size
    hat = np.zeros((d_in, d_out), dtype=np.int8)
    delta_sum = np.zeros((n_groups, d_out), dtype=np.int64)
    hat_sum = np.zeros((n_groups, d_out), dtype=np.int64)
    acc = np.empty(d_out, dtype=np.int64)
    for i in range(d_in):
        acc[:] = 0
        for k in range(r):
            ak = a[i, k]
            if ak == 0:
                continue
            for j in range(d_out):
                acc[j] += ak * b[k, j]
        g = i // group_size
        for j in range(d_out):
            d = acc[j]
            delta_sum[g, j] += d
            mag = d if d >= 0 else -d
            if den * mag > num:
                h = 1 if d > 0 else -1
                hat[i, j] = h
                hat_sum[g, j] += h
    return hat, delta_sum, hat_sum


# --------------------------------------------------------------------------- #
# Boundary-checked grid adjustment
# --------------------------------------------------------------------------- #
def apply_adapter_np(w_int, hat, boundary, qmax):
    w = w_int.astype(np.int16)
    h = hat.astype(np.int16)
    sat = boundary & (((w == qmax) & (h > 0)) | ((w == 0) & (h < 0)))
    eff = np.where(sat, w, w + h).astype(np.uint8)
    return eff, sat


@njit(cache=True)
def apply_adapter_nb(w_int, hat, boundary, qmax):
    d_in, d_out = w_int.shape
    eff = np.empty((d_in, d_out), dtype=np.uint8)
    sat = np.zeros((d_in, d_out), dtype=np.bool_)
    for i in range(d_in):
        for j in range(d_out):
            w = np.int16(w_int[i, j])
            h = np.int16(hat[i, j])
            if boundary[i, j] and ((w == qmax and h > 0) or (w == 0 and h < 0)):
                sat[i, j] = True
                eff[i, j] = np.uint8(w)
            else:
                eff[i, j] = np.uint8(w + h)
    return eff, sat


# --------------------------------------------------------------------------- #
# Dispatch
# --------------------------------------------------------------------------- #
def pack_bits(values: np.ndarray, bits: int) -> np.ndarray:
    v = np.ascontiguousarray(values, dtype=np.uint8).ravel()
    return pack_bits_nb(v, bits) if USE_NUMBA else pack_bits_np(v, bits)


def unpack_bits(words: np.ndarray, bits: int, n: int) -> np.ndarray:
    w = np.ascontiguousarray(words, dtype=np.uint32)
    return unpack_bits_nb(w, bits, n) if USE_NUMBA else unpack_bits_np(w, bits, n)


# np.packbits beats the jitted loop, so the mask kernels always take numpy.
def pack_bools(flags: np.ndarray) -> np.ndarray:
    return pack_bools_np(flags)


def unpack_bools(data: np.ndarray, n: int) -> np.ndarray:
    return unpack_bools_np(data, n)


def dequantize_grid(w_int, scales, zeros, group_size: int) -> np.ndarray:
    """Float32 ``scales * w_int + zeros`` with (s, z) repeated over each group of rows."""
    if USE_NUMBA:
        return dequantize_grid_nb(np.ascontiguousarray(w_int), scales, zeros, group_size)
    return dequantize_grid_np(w_int, scales, zeros, group_size)


def ternary_effect(a, b, num: int, den: int, group_size: int):
    """Return ``(hat_w, delta_group_sum, hat_group_sum)`` for factors ``a @ b``.

    ``hat_w[i, j] = sign(d) if |d| > num/den else 0`` with ``d`` the exact
    integer product entry; the comparison is done as ``den*|d| > num``.
    """
    a = np.ascontiguousarray(a, dtype=np.int8)
    b = np.ascontiguousarray(b, dtype=np.int8)
    if USE_NUMBA:
        return ternary_effect_nb(a, b, np.int64(num), np.int64(den), group_size)
    return ternary_effect_np(a, b, num, den, group_size)


def apply_adapter(w_int, hat, boundary, qmax: int):
    """Return ``(effective_ints, saturated)``.

    Only elements flagged in ``boundary`` are checked; interior grid points
    cannot leave the grid under a +-1 adjustment.
    """
    if USE_NUMBA:
        return apply_adapter_nb(
            np.ascontiguousarray(w_int), np.ascontiguousarray(hat),
            np.ascontiguousarray(boundary), np.int16(qmax),
        )
    return apply_adapter_np(w_int, hat, boundary, qmax)
