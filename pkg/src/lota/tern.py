"""Ternary low-rank adapters and their effect on the integer grid.

The adapter factors ``a`` (d_in x r) and ``b`` (r x d_out) take values in
{-1, 0, 1}. Their integer product ``delta`` is thresholded into a ternary grid
adjustment ``hat_w``; the sub-threshold residual is averaged per region into
an offset factor ``mu`` that is later folded into the zero factors.

The threshold ``omega`` is held as a :class:`fractions.Fraction` so the strict
comparison ``|delta| > omega`` is exact.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from numbers import Rational

import numpy as np

from . import kernels
from .quant import QuantError, pack_ints, unpack_ints

INIT_THRESHOLD_RATIO = 0.75


class AdapterError(ValueError):
    pass


def as_fraction(value) -> Fraction:
    if isinstance(value, Rational):
        return Fraction(value)
    if isinstance(value, float):
        # via repr so that 0.75 or 0.875 stay short decimals
        return Fraction(repr(value))
    return Fraction(str(value))


def omega_from_ratio(ratio, rank: int) -> Fraction:
    """``omega = ratio * rank`` as an exact fraction, e.g. 0.75 * 64 -> 48."""
    return as_fraction(ratio) * rank


@dataclass(eq=False)
class TernaryAdapter:
    a: np.ndarray
    b: np.ndarray
    omega: Fraction

    def __post_init__(self):
        self.a = np.ascontiguousarray(self.a, dtype=np.int8)
        self.b = np.ascontiguousarray(self.b, dtype=np.int8)
        self.omega = as_fraction(self.omega)
        if self.a.ndim != 2 or self.b.ndim != 2 or self.a.shape[1] != self.b.shape[0]:
            raise AdapterError(f"incompatible factor shapes {self.a.shape} and {self.b.shape}")
        if self.rank < 1:
            raise AdapterError("rank must be positive")
        if not (0 < self.omega < self.rank):
            raise AdapterError(f"omega must lie in (0, {self.rank}), got {self.omega}")
        for m in (self.a, self.b):
            if np.any(np.abs(m.astype(np.int16)) > 1):
                raise AdapterError("adapter factors must be ternary")

    @property
    def rank(self) -> int:
        return self.a.shape[1]

    @property
    def d_in(self) -> int:
        return self.a.shape[0]

    @property
    def d_out(self) -> int:
        return self.b.shape[1]

    def copy(self) -> "TernaryAdapter":
        return TernaryAdapter(self.a.copy(), self.b.copy(), self.omega)

    def equals(self, other: "TernaryAdapter") -> bool:
        return (
            self.omega == other.omega
            and np.array_equal(self.a, other.a)
            and np.array_equal(self.b, other.b)
        )


@dataclass(eq=False)
class AdapterEffect:
    """Derived state of an adapter at a layer's group granularity."""

    hat_w: np.ndarray  # int8 (d_in, d_out)
    mu: np.ndarray  # float64 (n_groups, d_out)


def ternarize_samples(samples) -> np.ndarray:
    """Map floats to {-1, 0, 1} with threshold 0.75 * mean(|samples|).

    >>> ternarize_samples(np.array([0.8, -0.8, 0.1, -0.1])).tolist()
    [1, -1, 0, 0]
    """
    samples = np.asarray(samples, dtype=np.float64)
    t = INIT_THRESHOLD_RATIO * np.mean(np.abs(samples))
    return (np.sign(samples) * (np.abs(samples) > t)).astype(np.int8)


def init_adapter(d_in: int, d_out: int, rank: int, omega, seed) -> TernaryAdapter:
    """Kaiming-normal ``a`` ternarized by the mean-magnitude rule; ``b = 0``."""
    if rank < 1 or rank > min(d_in, d_out):
        raise AdapterError(f"rank {rank} must lie in [1, min({d_in}, {d_out})]")
    omega = as_fraction(omega)
    if not (0 < omega < rank):
        raise AdapterError(f"omega must lie in (0, {rank}), got {omega}")
    rng = np.random.default_rng(seed)
    samples = rng.normal(0.0, np.sqrt(2.0 / d_in), size=(d_in, rank))
    return TernaryAdapter(ternarize_samples(samples), np.zeros((rank, d_out), np.int8), omega)


def auxiliary(adapter: TernaryAdapter) -> np.ndarray:
    """Exact integer product ``a @ b``; entries lie in [-rank, rank]."""
    return adapter.a.astype(np.int32) @ adapter.b.astype(np.int32)


def ternarize(delta, omega) -> np.ndarray:
    """``sign(delta)`` where ``|delta| > omega`` (strictly), else 0."""
    omega = as_fraction(omega)
    delta = np.asarray(delta, dtype=np.int64)
    keep = omega.denominator * np.abs(delta) > omega.numerator
    return (np.sign(delta) * keep).astype(np.int8)


def offset_matrix(delta, hat_w, omega) -> np.ndarray:
    """``delta - omega * hat_w`` (float64; exact for dyadic omega)."""
    return np.asarray(delta, dtype=np.float64) - float(as_fraction(omega)) * np.asarray(hat_w)


def _regions(granularity, d_in: int, d_out: int) -> tuple[int, int]:
    """Region block shape ``(rows, cols)`` for a granularity setting."""
    if granularity == "tensor":
        return d_in, d_out
    if granularity == "channel":
        return d_in, 1
    g = int(granularity)
    if g < 1 or d_in % g:
        raise AdapterError(f"group size {g} does not divide d_in {d_in}")
    return g, 1


def offsets(delta, hat_w, omega, rank: int, granularity="tensor") -> np.ndarray:
    """Offset factors ``mu`` per region: sum of the offset matrix / (rank * |region|).

    ``granularity`` is ``"tensor"``, ``"channel"`` (one region per output
    column) or an integer group size (contiguous input rows per column).
    The result has shape ``(d_in // rows, d_out // cols)``.
    """
    delta = np.asarray(delta, dtype=np.int64)
    hat_w = np.asarray(hat_w, dtype=np.int64)
    if delta.shape != hat_w.shape or delta.ndim != 2:
        raise AdapterError("delta and hat_w must be 2-D arrays of equal shape")
    omega = as_fraction(omega)
    d_in, d_out = delta.shape
    rows, cols = _regions(granularity, d_in, d_out)
    shape = (d_in // rows, rows, d_out // cols, cols)
    delta_sum = delta.reshape(shape).sum(axis=(1, 3))
    hat_sum = hat_w.reshape(shape).sum(axis=(1, 3))
    return _mu_from_sums(delta_sum, hat_sum, omega, rank, rows * cols)


def _mu_from_sums(delta_sum, hat_sum, omega: Fraction, rank: int, region_size: int) -> np.ndarray:
    # integer numerator/denominator, one float64 rounding
    num = omega.denominator * np.asarray(delta_sum, np.int64) - omega.numerator * np.asarray(hat_sum, np.int64)
    return num / float(omega.denominator * rank * region_size)


def adapter_effect(adapter: TernaryAdapter, group_size: int) -> AdapterEffect:
    """``hat_w`` and per-group ``mu`` for a layer quantized with ``group_size``."""
    if adapter.d_in % group_size:
        raise AdapterError(f"group size {group_size} does not divide d_in {adapter.d_in}")
    om = adapter.omega
    hat, delta_sum, hat_sum = kernels.ternary_effect(
        adapter.a, adapter.b, om.numerator, om.denominator, group_size
    )
    return AdapterEffect(hat, _mu_from_sums(delta_sum, hat_sum, om, adapter.rank, group_size))


# --------------------------------------------------------------------------- #
# 2-bit ternary codes: 00 = 0, 01 = +1, 10 = -1, 11 invalid
# --------------------------------------------------------------------------- #
_ENCODE = np.array([2, 0, 1], dtype=np.uint8)  # index by value + 1
_DECODE = np.array([0, 1, -1, 0], dtype=np.int8)


def encode_ternary(m) -> np.ndarray:
    m = np.asarray(m)
    if np.any(np.abs(m.astype(np.int16)) > 1):
        raise AdapterError("matrix is not ternary")
    return pack_ints(_ENCODE[m.astype(np.int64) + 1], 2)


def decode_ternary(words, dims) -> np.ndarray:
    try:
        codes = unpack_ints(words, 2, dims)
    except QuantError as exc:
        raise AdapterError(str(exc)) from exc
    if np.any(codes == 3):
        raise AdapterError("invalid ternary code 0b11")
    return _DECODE[codes]
