"""Randomised property checks runnable without pytest (``lota selftest``)."""

from __future__ import annotations

from fractions import Fraction

import numpy as np

from . import kernels
from .layers import QLinearTA, forward_base
from .merge import LayerRecord, dumps, loads, merge
from .quant import pack_ints, quantize, unpack_ints
from .tern import TernaryAdapter, decode_ternary, encode_ternary


def random_omega(rng, rank: int) -> Fraction:
    den = int(rng.choice([1, 2, 3, 7, 8]))
    if rank * den < 2:
        den = 2
    return Fraction(int(rng.integers(1, rank * den)), den)


def random_ta_layer(rng, bits=None, adversarial=False) -> QLinearTA:
    """Small random quantized layer with a random ternary adapter.

    With ``adversarial=True`` the adapter pushes every boundary weight
    outward: ``b`` is the identity and ``a`` carries the outward sign, so
    ``hat_w == a`` under ``omega = 1/2``.
    """
    bits = bits or int(rng.choice([2, 3, 4]))
    group = int(rng.choice([1, 2, 4, 8]))
    d_in = group * int(rng.integers(1, 5))
    d_out = int(rng.integers(1, 9))
    w = rng.normal(size=(d_in, d_out)).astype(np.float32) * np.float32(rng.uniform(0.1, 3))
    q = quantize(w, bits, group)
    if adversarial:
        w_int = q.w_int
        a = rng.integers(-1, 2, size=(d_in, d_out)).astype(np.int8)
        a[w_int == q.qmax] = 1
        a[w_int == 0] = -1
        return QLinearTA(q, TernaryAdapter(a, np.eye(d_out, dtype=np.int8), Fraction(1, 2)))
    rank = int(rng.integers(1, 6))
    a = rng.integers(-1, 2, size=(d_in, rank)).astype(np.int8)
    b = rng.integers(-1, 2, size=(rank, d_out)).astype(np.int8)
    return QLinearTA(q, TernaryAdapter(a, b, random_omega(rng, rank)))


def check_losslessness(n=1000, seed=0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    for i in range(n):
        bits = (2, 3, 4)[i % 3]
        layer = random_ta_layer(rng, bits)
        x = rng.normal(size=(int(rng.integers(1, 6)), layer.d_in)).astype(np.float32)
        y_train = layer.forward(x)[0]
        y_merged = forward_base(merge(layer), x)
        if not np.array_equal(y_train, y_merged):
            return False, f"case {i}: merged output differs from training forward"
    return True, f"{n} random layers"


def check_pack_roundtrip(n=1000, seed=1) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    for i in range(n):
        bits = (2, 3, 4)[i % 3]
        shape = tuple(int(s) for s in rng.integers(1, 12, size=2))
        v = rng.integers(0, 1 << bits, size=shape)
        if not np.array_equal(unpack_ints(pack_ints(v, bits), bits, shape), v):
            return False, f"case {i}: {bits}-bit round-trip failed"
        t = rng.integers(-1, 2, size=shape)
        if not np.array_equal(decode_ternary(encode_ternary(t), shape), t):
            return False, f"case {i}: ternary round-trip failed"
        f = rng.random(shape) < 0.5
        if not np.array_equal(kernels.unpack_bools(kernels.pack_bools(f), f.size).reshape(shape), f):
            return False, f"case {i}: mask round-trip failed"
    return True, f"{n} random matrices"


def check_checkpoint_roundtrip(n=100, seed=2) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    for i in range(n):
        layers = []
        for _ in range(int(rng.integers(0, 4))):
            layer = random_ta_layer(rng)
            layers.append(layer if rng.random() < 0.5 else merge(layer))
        data = dumps(layers)
        back = loads(data)
        if dumps(back) != data:
            return False, f"case {i}: re-serialisation differs"
        if not all(LayerRecord.of(a).equals(b) for a, b in zip(layers, back)):
            return False, f"case {i}: loaded state differs"
    return True, f"{n} random checkpoints"


def check_grid_preservation(n=300, seed=3) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    for i in range(n):
        layer = random_ta_layer(rng, (2, 3, 4)[i % 3], adversarial=True)
        q = layer.base
        hat = layer.effect().hat_w
        expected = np.clip(q.w_int.astype(np.int16) + hat, 0, q.qmax)
        w = merge(layer).w_int
        if w.max() > q.qmax or not np.array_equal(w, expected):
            return False, f"case {i}: merged grid left [0, {q.qmax}]"
    return True, f"{n} adversarial adapters"


SUITES = {
    "losslessness": check_losslessness,
    "pack_roundtrip": check_pack_roundtrip,
    "checkpoint_roundtrip": check_checkpoint_roundtrip,
    "grid_preservation": check_grid_preservation,
}


def run_all() -> list[tuple[str, bool, str]]:
    results = []
    for name, fn in SUITES.items():
        try:
            ok, detail = fn()
        except Exception as exc:  # a crash is a failed property, not a selftest crash
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append((name, ok, detail))
    return results
