"""Layers with analytic backward passes.

All layers compute ``y = x @ W`` for a batch ``x`` of shape ``(n, d_in)``,
i.e. the column form ``W^T x`` applied row-wise. Each layer exposes
``forward(x) -> (y, cache)`` and ``backward(cache, grad_y) -> (grads, grad_x)``
where ``grads`` maps parameter names to gradient arrays.

The ternary-adapted layer evaluates the merged expression directly: the
clamped grid ``W_int + hat_w`` dequantized with shifted zeros ``z + s*mu``.
Merging is therefore exact by construction (see :mod:`lota.merge`).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .quant import QuantizedLinear, dequantize
from .tern import AdapterEffect, TernaryAdapter, adapter_effect, init_adapter


class ShapeError(ValueError):
    pass


def _check_input(x: np.ndarray, d_in: int) -> None:
    if x.ndim != 2 or x.shape[1] != d_in:
        raise ShapeError(f"expected input of shape (n, {d_in}), got {x.shape}")


def _check_grad(g: np.ndarray, n: int, d_out: int) -> None:
    if g.shape != (n, d_out):
        raise ShapeError(f"expected upstream gradient of shape ({n}, {d_out}), got {g.shape}")


def shifted_zeros(zeros, scales, mu) -> np.ndarray:
    """``z + s * mu`` evaluated in float64 and rounded once to float32."""
    return (zeros.astype(np.float64) + scales.astype(np.float64) * mu).astype(np.float32)


def forward_base(q: QuantizedLinear, x) -> np.ndarray:
    x = np.asarray(x)
    _check_input(x, q.d_in)
    return x @ dequantize(q)


class FrozenLinear:
    """Quantized layer without adaptation."""

    def __init__(self, base: QuantizedLinear):
        self.base = base

    d_in = property(lambda self: self.base.d_in)
    d_out = property(lambda self: self.base.d_out)

    def params(self) -> dict:
        return {}

    def weights(self) -> np.ndarray:
        return dequantize(self.base)

    def forward(self, x, **_):
        _check_input(x, self.d_in)
        w = self.weights()
        return x @ w, (x, w)

    def backward(self, cache, grad_y):
        x, w = cache
        _check_grad(grad_y, x.shape[0], self.d_out)
        return {}, grad_y @ w.T


class DenseLinear(FrozenLinear):
    """Full-precision float weights (teacher models)."""

    def __init__(self, w):
        self.w = np.asarray(w, dtype=np.float32)

    d_in = property(lambda self: self.w.shape[0])
    d_out = property(lambda self: self.w.shape[1])

    def weights(self) -> np.ndarray:
        return self.w


# --------------------------------------------------------------------------- #
# Ternary adaptation
# --------------------------------------------------------------------------- #
@dataclass(eq=False)
class QLinearTA:
    base: QuantizedLinear
    adapter: TernaryAdapter
    boundary_mask: np.ndarray | None = None  # packed bits, 8 per byte
    _boundary: np.ndarray | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if (self.adapter.d_in, self.adapter.d_out) != (self.base.d_in, self.base.d_out):
            raise ShapeError("adapter shape does not match the quantized layer")
        if self.boundary_mask is None:
            self.boundary_mask = kernels.pack_bools(self.base.boundary_flags())
        self.boundary_mask = np.ascontiguousarray(self.boundary_mask, dtype=np.uint8)
        n = self.base.d_in * self.base.d_out
        if self.boundary_mask.shape != ((n + 7) // 8,):
            raise ShapeError("boundary mask size does not match the quantized layer")

    @classmethod
    def attach(cls, base: QuantizedLinear, rank: int, omega, seed) -> "QLinearTA":
        return cls(base, init_adapter(base.d_in, base.d_out, rank, omega, seed))

    d_in = property(lambda self: self.base.d_in)
    d_out = property(lambda self: self.base.d_out)

    @property
    def boundary(self) -> np.ndarray:
        if self._boundary is None:
            n = self.base.d_in * self.base.d_out
            self._boundary = kernels.unpack_bools(self.boundary_mask, n).reshape(
                self.base.d_in, self.base.d_out
            )
        return self._boundary

    def params(self) -> dict:
        return {"a": self.adapter.a, "b": self.adapter.b}

    def effect(self) -> AdapterEffect:
        return adapter_effect(self.adapter, self.base.group_size)

    def merged_state(self):
        """``(effective_ints, shifted_zeros, saturated, effect)`` for the current adapter."""
        eff = self.effect()
        w_eff, sat = kernels.apply_adapter(self.base.w_int, eff.hat_w, self.boundary, self.base.qmax)
        return w_eff, shifted_zeros(self.base.zeros, self.base.scales, eff.mu), sat, eff

    def weights(self) -> np.ndarray:
        w_eff, z, _, _ = self.merged_state()
        return kernels.dequantize_grid(w_eff, self.base.scales, z, self.base.group_size)

    def _row_scales(self):
        return np.repeat(self.base.scales, self.base.group_size, axis=0)

    def relaxed_weights(self, a, b, sat=None, mu=None) -> np.ndarray:
        """Continuous surrogate ``W_q + (s/omega) * (a @ b) * (1 - sat) + s * mu``.

        ``sat`` and ``mu`` default to the values of the current integer
        adapter and are treated as constants.
        """
        if sat is None or mu is None:
            _, _, sat0, eff = self.merged_state()
            sat = sat0 if sat is None else sat
            mu = eff.mu if mu is None else mu
        s = self._row_scales().astype(np.float64)
        g = self.base.group_size
        w_q = dequantize(self.base).astype(np.float64)
        delta = np.asarray(a, np.float64) @ np.asarray(b, np.float64)
        return w_q + s / float(self.adapter.omega) * delta * ~sat + s * np.repeat(mu, g, axis=0)

    def forward(self, x, *, relaxed=False, factors=None):
        _check_input(x, self.d_in)
        w_eff, z, sat, eff = self.merged_state()
        if relaxed:
            a, b = factors if factors is not None else (self.adapter.a, self.adapter.b)
            a = np.asarray(a, np.float64)
            b = np.asarray(b, np.float64)
            w = self.relaxed_weights(a, b, sat, eff.mu)
        else:
            a, b = self.adapter.a, self.adapter.b
            w = kernels.dequantize_grid(w_eff, self.base.scales, z, self.base.group_size)
        return x @ w, (x, w, sat, a, b)

    def backward(self, cache, grad_y):
        x, w, sat, a, b = cache
        _check_grad(grad_y, x.shape[0], self.d_out)
        dtype = np.result_type(x, grad_y)
        coef = self._row_scales().astype(dtype) / dtype.type(float(self.adapter.omega))
        grad_delta = (x.T @ grad_y) * coef
        grad_delta[sat] = 0
        grads = {
            "a": grad_delta @ b.astype(dtype).T,
            "b": a.astype(dtype).T @ grad_delta,
        }
        return grads, grad_y @ w.T.astype(dtype, copy=False)


def forward_ta(layer: QLinearTA, x, **kw) -> np.ndarray:
    return layer.forward(np.asarray(x), **kw)[0]


def backward_ta(layer: QLinearTA, x, grad_y, **kw):
    """Return ``(grad_a, grad_b, grad_x)`` of the straight-through surrogate."""
    _, cache = layer.forward(np.asarray(x), **kw)
    grads, gx = layer.backward(cache, np.asarray(grad_y))
    return grads["a"], grads["b"], gx


# --------------------------------------------------------------------------- #
# LoRA baseline
# --------------------------------------------------------------------------- #
@dataclass(eq=False)
class LoRALinear:
    base: QuantizedLinear
    a: np.ndarray
    b: np.ndarray
    alpha: float

    def __post_init__(self):
        if self.a.shape[0] != self.base.d_in or self.b.shape[1] != self.base.d_out:
            raise ShapeError("LoRA factors do not match the quantized layer")
        if self.a.shape[1] != self.b.shape[0]:
            raise ShapeError("LoRA factor ranks differ")
        if not np.all(np.isfinite(self.a)):
            raise ValueError("LoRA factor a must be finite")

    @classmethod
    def attach(cls, base: QuantizedLinear, rank: int, alpha: float, seed, dtype=np.float32):
        rng = np.random.default_rng(seed)
        a = rng.normal(0.0, 1.0 / np.sqrt(base.d_in), size=(base.d_in, rank)).astype(dtype)
        return cls(base, a, np.zeros((rank, base.d_out), dtype), alpha)

    d_in = property(lambda self: self.base.d_in)
    d_out = property(lambda self: self.base.d_out)

    @property
    def rank(self) -> int:
        return self.a.shape[1]

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def params(self) -> dict:
        return {"a": self.a, "b": self.b}

    def weights(self) -> np.ndarray:
        return dequantize(self.base) + self.a.dtype.type(self.scaling) * (self.a @ self.b)

    def forward(self, x, **_):
        _check_input(x, self.d_in)
        w = self.weights()
        return x @ w, (x, w)

    def backward(self, cache, grad_y):
        x, w = cache
        _check_grad(grad_y, x.shape[0], self.d_out)
        g_w = (x.T @ grad_y) * self.a.dtype.type(self.scaling)
        return {"a": g_w @ self.b.T, "b": self.a.T @ g_w}, grad_y @ w.T


def forward_lora(layer: LoRALinear, x) -> np.ndarray:
    return layer.forward(np.asarray(x))[0]


def backward_lora(layer: LoRALinear, x, grad_y):
    """Return ``(grad_a, grad_b, grad_x)``."""
    _, cache = layer.forward(np.asarray(x))
    grads, gx = layer.backward(cache, np.asarray(grad_y))
    return grads["a"], grads["b"], gx


# --------------------------------------------------------------------------- #
# Zero-factor-only baseline
# --------------------------------------------------------------------------- #
@dataclass(eq=False)
class ZeroOnlyLinear:
    """Trainable shift of each group's zero factor; the integer grid is fixed."""

    base: QuantizedLinear
    zero_deltas: np.ndarray

    def __post_init__(self):
        if self.zero_deltas.shape != self.base.group_shape:
            raise ShapeError(f"zero deltas must have shape {self.base.group_shape}")

    @classmethod
    def attach(cls, base: QuantizedLinear, dtype=np.float32):
        return cls(base, np.zeros(base.group_shape, dtype))

    d_in = property(lambda self: self.base.d_in)
    d_out = property(lambda self: self.base.d_out)

    def params(self) -> dict:
        return {"zero_deltas": self.zero_deltas}

    def zeros(self) -> np.ndarray:
        return self.base.zeros + self.zero_deltas

    def weights(self) -> np.ndarray:
        q = self.base
        z = self.zeros()
        if z.dtype == np.float32:
            return kernels.dequantize_grid(q.w_int, q.scales, z, q.group_size)
        g = q.group_size
        s = np.repeat(q.scales, g, axis=0).astype(z.dtype)
        return s * q.w_int + np.repeat(z, g, axis=0)

    def forward(self, x, **_):
        _check_input(x, self.d_in)
        w = self.weights()
        return x @ w, (x, w)

    def backward(self, cache, grad_y):
        x, w = cache
        _check_grad(grad_y, x.shape[0], self.d_out)
        g_w = x.T @ grad_y
        g_z = g_w.reshape(self.base.n_groups, self.base.group_size, self.d_out).sum(axis=1)
        return {"zero_deltas": g_z}, grad_y @ w.T


def forward_zero_only(layer: ZeroOnlyLinear, x) -> np.ndarray:
    return layer.forward(np.asarray(x))[0]


def backward_zero_only(layer: ZeroOnlyLinear, x, grad_y):
    """Return ``(grad_zero_deltas, grad_x)``."""
    _, cache = layer.forward(np.asarray(x))
    grads, gx = layer.backward(cache, np.asarray(grad_y))
    return grads["zero_deltas"], gx


# --------------------------------------------------------------------------- #
# Losses and the MLP stack
# --------------------------------------------------------------------------- #
def mse_loss(pred, target):
    """Mean squared error over all entries and its gradient w.r.t. ``pred``."""
    diff = pred - target
    loss = float(np.mean(np.square(diff, dtype=np.float64)))
    return loss, (2.0 / diff.size) * diff


def cross_entropy_loss(logits, labels):
    """Mean softmax cross-entropy for integer ``labels``."""
    logits = np.asarray(logits)
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    loss = float(-np.mean(log_p[np.arange(n), labels], dtype=np.float64))
    grad = np.exp(log_p)
    grad[np.arange(n), labels] -= 1
    return loss, grad / n


LOSSES = {"mse": mse_loss, "xent": cross_entropy_loss}


class MLP:
    """Linear layers with ReLU between them and a loss head."""

    def __init__(self, layers, loss: str = "mse"):
        if not layers:
            raise ValueError("an MLP needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.d_out != nxt.d_in:
                raise ShapeError(f"layer widths do not chain: {prev.d_out} -> {nxt.d_in}")
        if loss not in LOSSES:
            raise ValueError(f"unknown loss {loss!r}")
        self.layers = list(layers)
        self.loss = loss

    @property
    def d_in(self) -> int:
        return self.layers[0].d_in

    @property
    def d_out(self) -> int:
        return self.layers[-1].d_out

    def __call__(self, x):
        return mlp_forward(self, x)[0]


def mlp_forward(model: MLP, x, *, relaxed=False, factors=None):
    """Return ``(output, caches)``. ``factors[i]`` overrides layer i's relaxed factors."""
    caches = []
    h = np.asarray(x)
    last = len(model.layers) - 1
    for i, layer in enumerate(model.layers):
        kw = {}
        if relaxed and isinstance(layer, QLinearTA):
            kw = {"relaxed": True, "factors": factors[i] if factors else None}
        h, cache = layer.forward(h, **kw)
        pre = h
        if i < last:
            h = np.maximum(pre, 0)
        caches.append((cache, pre))
    return h, caches


def mlp_backward(model: MLP, caches, grad_out):
    """Per-layer gradient dicts, first layer first."""
    grads = [None] * len(model.layers)
    g = grad_out
    for i in range(len(model.layers) - 1, -1, -1):
        cache, pre = caches[i]
        if i < len(model.layers) - 1:
            g = g * (pre > 0)
        grads[i], g = model.layers[i].backward(cache, g)
    return grads


def loss_and_grads(model: MLP, x, y, **kw):
    out, caches = mlp_forward(model, x, **kw)
    loss, g = LOSSES[model.loss](out, y)
    return loss, mlp_backward(model, caches, g)


def evaluate(model: MLP, x, y) -> float:
    return LOSSES[model.loss](mlp_forward(model, x)[0], y)[0]
