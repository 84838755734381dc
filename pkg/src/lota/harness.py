"""Desk-scale teacher/student experiments and inference benchmarks."""

from __future__ import annotations

import csv
import dataclasses
import json
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import kernels
from ._accel import HAVE_NUMBA
from .layers import (
    MLP,
    DenseLinear,
    FrozenLinear,
    LoRALinear,
    QLinearTA,
    ZeroOnlyLinear,
    evaluate,
    forward_base,
    loss_and_grads,
)
from .merge import merge
from .optim import ScheduleError, SigmaSchedule, TSignState, sgd_step, tsign_step
from .quant import SUPPORTED_BITS, QuantizedLinear, dequantize, quantize
from .tern import init_adapter, omega_from_ratio

METHODS = ("lota", "lora", "zero-only")
TASKS = ("recovery", "specific")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    bits: int = 2
    group_size: int = 64
    rank: int = 64
    omega_frac: float = 0.75
    sigma_start: float = 5.0
    sigma_end: float = 0.1
    sigma_tail: float = 0.01
    decay_frac: float = 0.8
    tau: float = 1e-9
    steps: int = 300
    batch_size: int = 64
    task: str = "recovery"
    method: str = "lota"
    lr: float = 0.05
    max_grad_norm: float | None = 0.3
    lora_alpha: float | None = None  # defaults to 2 * rank
    dims: tuple = (64, 256, 256, 16)
    n_train: int = 8192
    n_eval: int = 1024
    loss: str = "mse"
    eval_every: int = 1

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.validate()

    def validate(self) -> None:
        if self.bits not in SUPPORTED_BITS:
            raise ConfigError(f"bits must be one of {SUPPORTED_BITS}")
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}")
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}")
        if self.loss != "mse":
            raise ConfigError("the teacher tasks use the mse loss")
        if len(self.dims) < 2 or min(self.dims) < 1:
            raise ConfigError("dims needs at least an input and an output width")
        if any(d % self.group_size for d in self.dims[:-1]):
            raise ConfigError(f"group_size {self.group_size} must divide every layer input width")
        if self.rank < 1:
            raise ConfigError("rank must be positive")
        if not (0 < self.omega_frac < 1):
            raise ConfigError("omega_frac must lie in (0, 1)")
        if self.steps < 0 or self.batch_size < 1 or self.n_train < 1 or self.n_eval < 1:
            raise ConfigError("steps, batch_size and sample counts must be positive")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be positive")
        if self.lr < 0 or (self.max_grad_norm is not None and self.max_grad_norm <= 0):
            raise ConfigError("lr must be >= 0 and max_grad_norm > 0")
        try:
            self.schedule()
            TSignState(self.schedule(), tau=self.tau)
        except ScheduleError as exc:
            raise ConfigError(str(exc)) from exc

    def schedule(self) -> SigmaSchedule:
        return SigmaSchedule(
            self.steps, self.sigma_start, self.sigma_end, self.decay_frac, self.sigma_tail
        )

    def layer_rank(self, d_in: int, d_out: int) -> int:
        return min(self.rank, d_in, d_out)

    def layer_omega(self, rank: int) -> Fraction:
        return omega_from_ratio(self.omega_frac, rank)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["dims"] = list(self.dims)
        return d

    def with_overrides(self, overrides: dict) -> "RunConfig":
        d = self.to_dict()
        d.update(overrides)
        return RunConfig.from_dict(d)


@dataclass
class Task:
    teacher: MLP
    base_model: MLP  # full-precision weights the student is quantized from
    x_train: np.ndarray
    y_train: np.ndarray
    x_eval: np.ndarray
    y_eval: np.ndarray


@dataclass
class RunReport:
    train_loss: list
    eval_loss: list  # None where not evaluated
    final_eval_loss: float
    baseline_eval_loss: float
    teacher_eval_loss: float
    merged_eval_loss: float | None = None
    throughput: dict | None = None
    wall_clock: float = 0.0
    config: dict = field(default_factory=dict)

    @property
    def relative_reduction(self) -> float:
        if self.baseline_eval_loss == 0:
            return 0.0
        return 1.0 - self.final_eval_loss / self.baseline_eval_loss

    def summary(self) -> dict:
        return {
            "final_eval_loss": self.final_eval_loss,
            "baseline_eval_loss": self.baseline_eval_loss,
            "teacher_eval_loss": self.teacher_eval_loss,
            "merged_eval_loss": self.merged_eval_loss,
            "relative_reduction": self.relative_reduction,
            "final_train_loss": self.train_loss[-1] if self.train_loss else None,
            "steps": len(self.train_loss),
            "throughput": self.throughput,
            "wall_clock": self.wall_clock,
            "config": self.config,
        }

    def write(self, csv_path, json_path=None) -> None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "train_loss", "eval_loss"])
            for i, (tl, el) in enumerate(zip(self.train_loss, self.eval_loss)):
                w.writerow([i, repr(tl), "" if el is None else repr(el)])
        if json_path is not None:
            Path(json_path).write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------- #
# Task generation
# --------------------------------------------------------------------------- #
def _rngs(seed, n):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def gen_teacher_task(seed, dims=(64, 256, 256, 16), n_train=8192, n_eval=1024, task="recovery") -> Task:
    """Random ReLU teacher, Gaussian inputs, teacher outputs as targets.

    For ``task="specific"`` the targets come from the teacher with a random
    rank-4 perturbation on every layer, while the student still starts from
    the unperturbed teacher.
    """
    if task not in TASKS:
        raise ConfigError(f"task must be one of {TASKS}")
    w_rng, x_rng, p_rng = _rngs(seed, 3)
    weights = [
        w_rng.normal(0.0, np.sqrt(2.0 / d_in), size=(d_in, d_out)).astype(np.float32)
        for d_in, d_out in zip(dims[:-1], dims[1:])
    ]
    base = MLP([DenseLinear(w) for w in weights])
    teacher = base
    if task == "specific":
        shifted = []
        for w in weights:
            d_in, d_out = w.shape
            u = p_rng.normal(size=(d_in, 4)) / np.sqrt(d_in)
            v = p_rng.normal(size=(4, d_out)) * 0.25 * np.sqrt(2.0 / 4)
            shifted.append((w + u @ v).astype(np.float32))
        teacher = MLP([DenseLinear(w) for w in shifted])
    x = x_rng.normal(size=(n_train + n_eval, dims[0])).astype(np.float32)
    y = teacher(x)
    return Task(teacher, base, x[:n_train], y[:n_train], x[n_train:], y[n_train:])


def quantize_model(model: MLP, bits: int, group_size: int) -> list[QuantizedLinear]:
    return [quantize(layer.weights(), bits, group_size) for layer in model.layers]


def build_student(bases, config: RunConfig) -> MLP:
    """Wrap quantized bases (or checkpointed layers) with the configured adapter."""
    seeds = np.random.SeedSequence([config.seed, 1]).spawn(len(bases))
    layers = []
    for q, ss in zip(bases, seeds):
        seed = int(ss.generate_state(1)[0])
        if isinstance(q, QLinearTA):
            if config.method != "lota":
                raise ConfigError("layer already carries a ternary adapter; use method=lota")
            layers.append(QLinearTA(q.base, q.adapter.copy(), q.boundary_mask.copy()))
            continue
        r = config.layer_rank(q.d_in, q.d_out)
        if config.method == "lota":
            ad = init_adapter(q.d_in, q.d_out, r, config.layer_omega(r), seed)
            layers.append(QLinearTA(q, ad))
        elif config.method == "lora":
            alpha = config.lora_alpha if config.lora_alpha is not None else 2.0 * r
            layers.append(LoRALinear.attach(q, r, alpha, seed))
        else:
            layers.append(ZeroOnlyLinear.attach(q))
    return MLP(layers, loss=config.loss)


def frozen(bases) -> MLP:
    return MLP([FrozenLinear(merge(q) if isinstance(q, QLinearTA) else q) for q in bases])


# --------------------------------------------------------------------------- #
# Training
# --------------------------------------------------------------------------- #
def _update_lota(model: MLP, grads, state: TSignState) -> None:
    for layer, g in zip(model.layers, grads):
        ad = layer.adapter
        ad.a = tsign_step(ad.a, g["a"], state)
        ad.b = tsign_step(ad.b, g["b"], state)
    state.advance()


def _update_sgd(model: MLP, grads, config: RunConfig) -> None:
    params, flat = [], []
    for layer, g in zip(model.layers, grads):
        for name, p in layer.params().items():
            params.append(p)
            flat.append(g[name])
    for p, new in zip(params, sgd_step(params, flat, config.lr, config.max_grad_norm)):
        p[...] = new


def train(model: MLP, task: Task, config: RunConfig, log=None):
    """Run ``config.steps`` updates; return ``(train_losses, eval_losses)``."""
    rng = _rngs([config.seed, 2], 1)[0]
    state = TSignState(config.schedule(), tau=config.tau)
    n = task.x_train.shape[0]
    order = rng.permutation(n)
    cursor = 0
    train_losses, eval_losses = [], []
    for step in range(config.steps):
        if cursor + config.batch_size > n:
            order, cursor = rng.permutation(n), 0
        idx = order[cursor : cursor + config.batch_size]
        cursor += config.batch_size
        loss, grads = loss_and_grads(model, task.x_train[idx], task.y_train[idx])
        if config.method == "lota":
            _update_lota(model, grads, state)
        else:
            _update_sgd(model, grads, config)
        train_losses.append(loss)
        last = step == config.steps - 1
        if (step + 1) % config.eval_every == 0 or last:
            eval_losses.append(evaluate(model, task.x_eval, task.y_eval))
        else:
            eval_losses.append(None)
        if log is not None:
            log(step, loss, eval_losses[-1])
    return train_losses, eval_losses


def student_layers(model: MLP):
    """Checkpointable layers of a trained student (zero-only deltas merged)."""
    out = []
    for layer in model.layers:
        if isinstance(layer, QLinearTA):
            out.append(layer)
        elif isinstance(layer, ZeroOnlyLinear):
            out.append(merge(layer))
        elif isinstance(layer, FrozenLinear):
            out.append(layer.base)
        else:
            raise ConfigError(f"{type(layer).__name__} cannot be stored losslessly in a checkpoint")
    return out


def run_recovery(config: RunConfig, bases=None, task: Task | None = None, log=None):
    """Train an adapted student against the teacher; returns ``(report, model)``.

    ``bases`` replaces the freshly quantized teacher, e.g. layers loaded
    from a checkpoint.
    """
    config.validate()
    t0 = time.perf_counter()
    if task is None:
        task = gen_teacher_task(config.seed, config.dims, config.n_train, config.n_eval, config.task)
    if bases is None:
        bases = quantize_model(task.base_model, config.bits, config.group_size)
    model = build_student(bases, config)
    baseline = evaluate(frozen(bases), task.x_eval, task.y_eval)
    teacher = evaluate(task.base_model, task.x_eval, task.y_eval)
    train_losses, eval_losses = train(model, task, config, log=log)
    final = evaluate(model, task.x_eval, task.y_eval)
    merged = None
    if config.method in ("lota", "zero-only"):
        merged_model = MLP([FrozenLinear(merge(layer)) for layer in model.layers])
        merged = evaluate(merged_model, task.x_eval, task.y_eval)
    report = RunReport(
        train_losses, eval_losses, final, baseline, teacher, merged,
        wall_clock=time.perf_counter() - t0, config=config.to_dict(),
    )
    return report, model


# --------------------------------------------------------------------------- #
# Inference benchmark
# --------------------------------------------------------------------------- #
def _median_time(fn, warmup: int, reps: int) -> float:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(reps):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return float(np.median(times))


def bench_inference(
    bits_list=(2, 3, 4), batch_sizes=(1, 128), d_in=512, d_out=512, rank=64,
    omega_frac=0.75, group_size=64, seed=0, warmup=3, reps=10,
):
    """Median outputs/second of merged vs unmerged ternary-adapted forward.

    The merged path dequantizes the merged grid and multiplies; the
    unmerged path additionally recomputes ``hat_w`` and ``mu`` from the
    factors on every call. Both outputs are checked for bit-equality.
    """
    warmup, reps = max(warmup, 3), max(reps, 10)
    rng = np.random.default_rng(seed)
    w = rng.normal(0.0, np.sqrt(2.0 / d_in), size=(d_in, d_out)).astype(np.float32)
    results = []
    for bits in bits_list:
        q = quantize(w, bits, group_size)
        layer = QLinearTA.attach(q, rank, omega_from_ratio(omega_frac, rank), seed)
        layer.adapter.b = rng.integers(-1, 2, size=layer.adapter.b.shape).astype(np.int8)
        layer.adapter.a = np.where(rng.random(layer.adapter.a.shape) < 0.1, 1, layer.adapter.a).astype(np.int8)
        merged = merge(layer)
        merged.w_int  # unpack once, as a loaded inference layer would
        for n in batch_sizes:
            x = rng.normal(size=(n, d_in)).astype(np.float32)
            y_m = forward_base(merged, x)
            y_u = layer.forward(x)[0]
            if not np.array_equal(y_m, y_u):
                raise AssertionError(f"merged and unmerged outputs differ at bits={bits}, batch={n}")
            t_m = _median_time(lambda: forward_base(merged, x), warmup, reps)
            t_u = _median_time(lambda: layer.forward(x), warmup, reps)
            results.append({
                "bits": bits, "batch": n,
                "merged_outputs_per_s": n / t_m, "unmerged_outputs_per_s": n / t_u,
                "speedup": t_u / t_m,
            })
    return results


def bench_backends(d=512, rank=64, bits=3, group_size=64, seed=0, warmup=3, reps=10):
    """Median seconds per call of each kernel's numpy and numba variants."""
    rng = np.random.default_rng(seed)
    qmax = (1 << bits) - 1
    vals = rng.integers(0, qmax + 1, size=d * d).astype(np.uint8)
    w_int = vals.reshape(d, d)
    n_groups = d // group_size
    scales = rng.random((n_groups, d)).astype(np.float32)
    zeros = rng.normal(size=(n_groups, d)).astype(np.float32)
    a = rng.integers(-1, 2, size=(d, rank)).astype(np.int8)
    b = rng.integers(-1, 2, size=(rank, d)).astype(np.int8)
    hat = rng.integers(-1, 2, size=(d, d)).astype(np.int8)
    bnd = (w_int == 0) | (w_int == qmax)
    cases = {
        "pack_bits": (vals, bits),
        "unpack_bits": (kernels.pack_bits_np(vals, bits), bits, vals.size),
        "pack_bools": (bnd.ravel(),),
        "dequantize_grid": (w_int, scales, zeros, group_size),
        "ternary_effect": (a, b, np.int64(rank * 3 // 4), np.int64(1), group_size),
        "apply_adapter": (w_int, hat, bnd, np.int16(qmax)),
    }
    out = {}
    for name, args in cases.items():
        row = {"numpy": _median_time(lambda: getattr(kernels, name + "_np")(*args), warmup, reps)}
        if HAVE_NUMBA:
            row["numba"] = _median_time(lambda: getattr(kernels, name + "_nb")(*args), warmup, reps)
        out[name] = row
    return out
