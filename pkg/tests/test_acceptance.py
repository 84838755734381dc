"""Numbered acceptance criteria, one test each.

Every test prints a ``PASS``/``FAIL`` line with the measured quantity and
the tolerance it was held to, whether or not pytest captures output.
"""

import time
from fractions import Fraction

import numpy as np
import pytest

from lota import kernels
from lota.harness import RunConfig, bench_inference, run_recovery
from lota.layers import (
    MLP,
    FrozenLinear,
    LoRALinear,
    QLinearTA,
    ZeroOnlyLinear,
    backward_lora,
    backward_ta,
    backward_zero_only,
    forward_base,
    forward_lora,
    forward_ta,
    forward_zero_only,
)
from lota.merge import ChecksumError, dumps, loads, merge
from lota.optim import SigmaSchedule, TSignState, select_updates, sigma_at, tsign_step
from lota.quant import dequantize, pack_ints, quantize, unpack_ints
from lota.selftest import random_ta_layer
from lota.tern import TernaryAdapter, decode_ternary, encode_ternary

pytestmark = pytest.mark.acceptance

# relative-reduction target for criterion 8, calibrated once on seed 0
# (measured 0.499; seeds 1-3 give 0.541, 0.558, 0.504)
RECOVERY_SEED = 0
RECOVERY_TARGET = 0.30


@pytest.fixture
def verdict(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")
        assert ok, detail
    return emit


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)


def fd(f, p, eps=1e-6):
    g = np.zeros_like(p)
    for idx in np.ndindex(p.shape):
        old = p[idx]
        p[idx] = old + eps
        up = f()
        p[idx] = old - eps
        g[idx] = (up - f()) / (2 * eps)
        p[idx] = old
    return g


def brute_rank(n, pct):
    target = Fraction(repr(pct))
    return next(k for k in range(1, n + 1) if Fraction(100 * k, n) >= target)


def test_1_losslessness(verdict):
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    cases, mismatches = 0, 0
    for i in range(1200):
        layer = random_ta_layer(rng, (2, 3, 4)[i % 3], adversarial=i % 10 == 0)
        x = rng.normal(size=(int(rng.integers(1, 6)), layer.d_in)).astype(np.float32)
        mismatches += not np.array_equal(forward_ta(layer, x), forward_base(merge(layer), x))
        cases += 1
    # adapters that went through training, not just random draws
    _, model = run_recovery(RunConfig(steps=40, dims=(32, 64, 8), group_size=16, rank=8,
                                      n_train=512, n_eval=64))
    x = rng.normal(size=(16, 32)).astype(np.float32)
    for layer in model.layers:
        mismatches += not np.array_equal(forward_ta(layer, x[:, :layer.d_in]),
                                         forward_base(merge(layer), x[:, :layer.d_in]))
        cases += 1
        x = np.maximum(forward_ta(layer, x[:, :layer.d_in]), 0)
    elapsed = time.perf_counter() - t0
    verdict(1, mismatches == 0 and elapsed < 60,
            f"{cases} layers, {mismatches} mismatches (exact equality), {elapsed:.1f}s (< 60s)")


def test_2_zero_init_identity(verdict, tmp_path):
    from lota.cli import main

    rng = np.random.default_rng(2)
    base = quantize(rng.normal(size=(64, 32)), 2, 16)
    x = rng.normal(size=(8, 64)).astype(np.float32)
    y0 = forward_base(base, x)
    same = [
        np.array_equal(forward_ta(QLinearTA.attach(base, 16, 12, 0), x), y0),
        np.array_equal(forward_lora(LoRALinear.attach(base, 16, 32.0, 0), x), y0),
        np.array_equal(forward_zero_only(ZeroOnlyLinear.attach(base), x), y0),
    ]
    q, t, m = (tmp_path / n for n in ("q.lota", "t.lota", "m.lota"))
    small = ["--set", "dims=[32,64,8]", "--group-size", "16", "--rank", "8"]
    codes = [main(["quantize", "--out", str(q)] + small),
             main(["finetune", "--in", str(q), "--out", str(t), "--steps", "0"] + small),
             main(["merge", "--in", str(t), "--out", str(m)])]
    noop = m.read_bytes() == q.read_bytes()
    verdict(2, all(same) and codes == [0, 0, 0] and noop,
            f"zero adapters bit-identical (ta, lora, zero-only) = {same}; "
            f"finetune --steps 0 then merge byte-identical to input = {noop}")


def test_3_grid_preservation(verdict):
    rng = np.random.default_rng(3)
    total = inside = layers = 0
    mismatch = 0
    for i in range(600):
        layer = random_ta_layer(rng, (2, 3, 4)[i % 3], adversarial=i % 2 == 0)
        q = layer.base
        w = merge(layer).w_int
        total += w.size
        inside += int(np.count_nonzero(w <= q.qmax))
        expected = np.clip(q.w_int.astype(np.int16) + layer.effect().hat_w, 0, q.qmax)
        mismatch += not np.array_equal(w, expected)
        layers += 1
    verdict(3, inside == total and mismatch == 0,
            f"{inside}/{total} merged weights in [0, 2^N-1] over {layers} layers "
            f"(300 adversarial); {mismatch} differ from the clip oracle")


def test_4_ternary_closure_and_schedule(verdict):
    rng = np.random.default_rng(4)
    steps = 10_000
    state = TSignState(SigmaSchedule(steps))
    a = rng.integers(-1, 2, size=(40, 25)).astype(np.int8)
    b = rng.integers(-1, 2, size=(25, 10)).astype(np.int8)
    bad_counts = 0
    for _ in range(steps):
        for p in (a, b):
            g = rng.normal(size=p.shape)
            k = brute_rank(p.size, state.pct)
            sel = int(select_updates(g, state.pct, state.tau).sum())
            ties = int(np.count_nonzero(np.abs(g) == np.sort(np.abs(g).ravel())[::-1][k - 1])) - 1
            bad_counts += not (k <= sel <= k + ties)
        a = tsign_step(a, rng.normal(size=a.shape), state)
        b = tsign_step(b, rng.normal(size=b.shape), state)
        state.advance()
    closed = set(np.unique(a)) <= {-1, 0, 1} and set(np.unique(b)) <= {-1, 0, 1}
    sch = SigmaSchedule(100)
    sched = (sigma_at(sch, 0) == 5.0 and sigma_at(sch, 80) == 0.01
             and all(sigma_at(sch, t) == 0.01 for t in range(80, 101))
             and abs(sigma_at(sch, 79) - (5.0 - 4.9 * 79 / 80)) < 1e-12)
    # approaching 0.8T from below the linear part tends to the 0.1% end point
    limit = sigma_at(SigmaSchedule(10**6), 799_999)
    verdict(4, closed and bad_counts == 0 and sched and abs(limit - 0.1) < 1e-4,
            f"{steps} steps: entries ternary = {closed}; update-count mismatches = {bad_counts}; "
            f"sigma(0)=5.0, sigma(t>=0.8T)=0.01 and linear limit {limit:.5f} -> 0.1 = {sched}")


def test_5_scale_invariance(verdict):
    rng = np.random.default_rng(5)
    state = TSignState(SigmaSchedule(100))
    differing = 0
    trials = 0
    for t in range(200):
        state.step = t % 100
        p = rng.integers(-1, 2, size=(64, 16)).astype(np.int8)
        g = rng.normal(size=p.shape)
        ref = tsign_step(p, g, state)
        for c in (1e-3, 1.0, 1e3):
            differing += not np.array_equal(tsign_step(p, c * g, state), ref)
            trials += 1
    verdict(5, differing == 0, f"{trials} scaled updates, {differing} differ (bit-for-bit)")


def test_6_gradient_correctness(verdict):
    rng = np.random.default_rng(6)
    worst = 0.0
    layers = 0
    for _ in range(20):
        bits = int(rng.choice([2, 3, 4]))
        base = quantize(rng.normal(size=(4, 4)), bits, 2)
        r = int(rng.integers(1, 5))
        ad = TernaryAdapter(rng.integers(-1, 2, size=(4, r)).astype(np.int8),
                            rng.integers(-1, 2, size=(r, 4)).astype(np.int8),
                            Fraction(int(rng.integers(1, 2 * r)), 2))
        ta = QLinearTA(base, ad)
        fa, fb = rng.normal(size=ad.a.shape), rng.normal(size=ad.b.shape)
        x, up = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        f = lambda: float(np.sum(forward_ta(ta, x, relaxed=True, factors=(fa, fb)) * up))
        ga, gb, gx = backward_ta(ta, x, up, relaxed=True, factors=(fa, fb))
        worst = max(worst, rel_err(ga, fd(f, fa)), rel_err(gb, fd(f, fb)), rel_err(gx, fd(f, x)))

        lora = LoRALinear(base, rng.normal(size=(4, 2)), rng.normal(size=(2, 4)), 4.0)
        f = lambda: float(np.sum(forward_lora(lora, x) * up))
        ga, gb, gx = backward_lora(lora, x, up)
        worst = max(worst, rel_err(ga, fd(f, lora.a)), rel_err(gb, fd(f, lora.b)), rel_err(gx, fd(f, x)))

        zo = ZeroOnlyLinear(base, rng.normal(size=base.group_shape))
        f = lambda: float(np.sum(forward_zero_only(zo, x) * up))
        gz, gx = backward_zero_only(zo, x, up)
        worst = max(worst, rel_err(gz, fd(f, zo.zero_deltas)), rel_err(gx, fd(f, x)))
        layers += 3
    verdict(6, worst <= 1e-4, f"{layers} layers (relaxed ternary, LoRA, zero-only), "
            f"max relative error {worst:.2e} (<= 1e-4, float64)")


def test_7_round_trips(verdict):
    rng = np.random.default_rng(7)
    fails = []
    for bits in (2, 3, 4):
        for _ in range(300):
            shape = tuple(int(s) for s in rng.integers(1, 12, size=2))
            v = rng.integers(0, 1 << bits, size=shape)
            if not np.array_equal(unpack_ints(pack_ints(v, bits), bits, shape), v):
                fails.append(f"pack{bits}")
    for _ in range(300):
        shape = tuple(int(s) for s in rng.integers(1, 12, size=2))
        t = rng.integers(-1, 2, size=shape)
        if not np.array_equal(decode_ternary(encode_ternary(t), shape), t):
            fails.append("ternary")
        f = rng.random(shape) < 0.5
        if not np.array_equal(kernels.unpack_bools(kernels.pack_bools(f), f.size).reshape(shape), f):
            fails.append("mask")
    for _ in range(50):
        layers = [random_ta_layer(rng) for _ in range(int(rng.integers(0, 4)))]
        data = dumps(layers)
        if dumps(loads(data)) != data:
            fails.append("checkpoint")
    data = bytearray(dumps([quantize(rng.normal(size=(16, 8)), 4, 8)]))
    data[12 + 14] ^= 0x04  # first packed-weight byte
    try:
        loads(bytes(data))
        detected = False
    except ChecksumError:
        detected = True
    verdict(7, not fails and detected,
            f"pack 2/3/4-bit, ternary codes, boolean masks, checkpoint bytes: {len(fails)} failures; "
            f"flipped weight byte detected by checksum = {detected}")


def test_8_desk_scale_recovery(verdict):
    config = RunConfig(seed=RECOVERY_SEED)
    assert (config.bits, config.steps, config.dims) == (2, 300, (64, 256, 256, 16))
    t0 = time.perf_counter()
    report, _ = run_recovery(config)
    elapsed = time.perf_counter() - t0
    red = report.relative_reduction
    ok = (report.final_eval_loss < report.baseline_eval_loss and red >= RECOVERY_TARGET
          and elapsed < 300 and report.merged_eval_loss == report.final_eval_loss)
    verdict(8, ok, f"2-bit seed {RECOVERY_SEED}: baseline {report.baseline_eval_loss:.4f} -> "
            f"final {report.final_eval_loss:.4f}, relative reduction {red:.3f} (>= {RECOVERY_TARGET}), "
            f"merged eval equal = {report.merged_eval_loss == report.final_eval_loss}, {elapsed:.1f}s (< 300s)")


def test_9_benchmark_ordering(verdict):
    rows = bench_inference(bits_list=(2, 3, 4), batch_sizes=(1, 128), warmup=3, reps=15)
    slow = [(r["bits"], r["batch"]) for r in rows if r["merged_outputs_per_s"] < r["unmerged_outputs_per_s"]]
    speedups = ", ".join(f"{r['bits']}b/n={r['batch']}: {r['speedup']:.1f}x" for r in rows)
    verdict(9, not slow, f"merged >= unmerged median throughput at every setting; {speedups}")


def test_10_quantization_bound(verdict):
    rng = np.random.default_rng(10)
    worst = -np.inf
    for i in range(1000):
        bits = (2, 3, 4)[i % 3]
        g = int(rng.choice([1, 2, 4, 8, 16]))
        w = (rng.normal(size=(g * int(rng.integers(1, 5)), int(rng.integers(1, 9))))
             * rng.uniform(0.01, 4)).astype(np.float32)
        q = quantize(w, bits, g)
        s = np.repeat(q.scales, g, axis=0).astype(np.float64)
        excess = np.abs(dequantize(q).astype(np.float64) - w) - s / 2
        worst = max(worst, float(excess.max()))
    verdict(10, worst <= 1e-6, f"1000 matrices, max(|deq(q(W)) - W| - s/2) = {worst:.2e} (<= 1e-6)")
