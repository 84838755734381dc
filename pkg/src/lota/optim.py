"""t-SignSGD for ternary factors and a clipped SGD baseline."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class SigmaSchedule:
    """Share of largest-magnitude gradients selected per step, in percent.

    Linear from ``start_pct`` to ``end_pct`` over the first
    ``decay_fraction`` of training, then constant at ``tail_pct``.
    """

    total_steps: int
    start_pct: float = 5.0
    end_pct: float = 0.1
    decay_fraction: float = 0.8
    tail_pct: float = 0.01

    def __post_init__(self):
        if self.total_steps < 0:
            raise ScheduleError("total_steps must be non-negative")
        if not (self.start_pct >= self.end_pct >= self.tail_pct > 0):
            raise ScheduleError("need start_pct >= end_pct >= tail_pct > 0")
        if not (0 < self.decay_fraction <= 1):
            raise ScheduleError("decay_fraction must lie in (0, 1]")
        if self.start_pct > 100:
            raise ScheduleError("percentages cannot exceed 100")


def sigma_at(schedule: SigmaSchedule, t: int) -> float:
    """Selected percentage at step ``t``.

    >>> sigma_at(SigmaSchedule(100), 40)
    2.55
    """
    if not (0 <= t <= schedule.total_steps):
        raise ScheduleError(f"step {t} outside [0, {schedule.total_steps}]")
    decay_end = schedule.decay_fraction * schedule.total_steps
    if t >= decay_end:
        return schedule.tail_pct
    frac = t / decay_end
    return schedule.start_pct - (schedule.start_pct - schedule.end_pct) * frac


@dataclass
class TSignState:
    schedule: SigmaSchedule
    tau: float = 1e-9
    step: int = 0

    def __post_init__(self):
        if not self.tau > 0:
            raise ScheduleError("tau must be positive")

    @property
    def pct(self) -> float:
        return sigma_at(self.schedule, min(self.step, self.schedule.total_steps))

    def advance(self) -> None:
        self.step += 1


def nearest_rank(n: int, pct: float) -> int:
    """Number of elements in the top ``pct`` percent of ``n`` (ceil, at least 1)."""
    k = math.ceil(Fraction(repr(float(pct))) * n / 100)
    return max(1, min(n, k))


def percentile_threshold(magnitudes: np.ndarray, pct: float) -> float:
    """Nearest-rank cut: the k-th largest magnitude with ``k = nearest_rank(n, pct)``."""
    flat = np.ravel(magnitudes)
    k = nearest_rank(flat.size, pct)
    return float(np.partition(flat, flat.size - k)[flat.size - k])


def select_updates(grads: np.ndarray, pct: float, tau: float) -> np.ndarray:
    """Boolean mask of elements t-SignSGD moves this step.

    Elements at or above the percentile cut are taken (so ties at the cut
    are all included) provided their magnitude exceeds ``tau``.
    """
    mag = np.abs(grads)
    sigma = percentile_threshold(mag, pct)
    return (mag >= sigma) & (mag > tau)


def tsign_step(params: np.ndarray, grads: np.ndarray, state: TSignState) -> np.ndarray:
    """One learning-rate-free ternary update of a single tensor.

    Does not advance ``state``; call :meth:`TSignState.advance` once per
    training iteration after all tensors have been stepped.
    """
    params = np.asarray(params)
    grads = np.asarray(grads)
    if params.shape != grads.shape:
        raise ValueError(f"shape mismatch: params {params.shape}, grads {grads.shape}")
    if np.any(np.abs(params.astype(np.int16)) > 1):
        raise ValueError("params must be ternary")
    if grads.size == 0:
        return params.copy()
    sel = select_updates(grads, state.pct, state.tau)
    step = np.sign(grads).astype(np.int16) * sel
    return np.clip(params.astype(np.int16) - step, -1, 1).astype(params.dtype)


def clip_by_global_norm(grads, max_norm):
    if max_norm is None:
        return list(grads), None
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))
    if norm <= max_norm or norm == 0:
        return list(grads), norm
    factor = max_norm / norm
    return [g * np.asarray(factor, dtype=g.dtype) for g in grads], norm


def sgd_step(params, grads, lr: float, max_grad_norm=None):
    """Global-norm clipping followed by ``p - lr * g``; returns new arrays."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    clipped, _ = clip_by_global_norm(grads, max_grad_norm)
    return [p - np.asarray(lr, dtype=p.dtype) * g for p, g in zip(params, clipped)]
