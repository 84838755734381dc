"""``lota`` command line.

Exit codes: 0 ok, 1 usage, 2 config validation, 3 I/O or format, 4 selftest
failure. Errors go to stderr as a single JSON line.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import selftest
from .harness import (
    ConfigError,
    RunConfig,
    bench_backends,
    bench_inference,
    gen_teacher_task,
    quantize_model,
    run_recovery,
    student_layers,
)
from .layers import MLP, FrozenLinear, evaluate
from .merge import CheckpointError, load_checkpoint, merge, save_checkpoint
from .quant import QuantError, QuantizedLinear, quantize
from .tern import AdapterError

EXIT_USAGE, EXIT_CONFIG, EXIT_IO, EXIT_SELFTEST = 1, 2, 3, 4

# command-line flag -> RunConfig key
FLAG_KEYS = {
    "seed": "seed",
    "bits": "bits",
    "group_size": "group_size",
    "rank": "rank",
    "omega_frac": "omega_frac",
    "sigma_start": "sigma_start",
    "sigma_end": "sigma_end",
    "sigma_tail": "sigma_tail",
    "decay_frac": "decay_frac",
    "method": "method",
    "steps": "steps",
    "task": "task",
    "lr": "lr",
}


class UsageError(Exception):
    pass


class CLIError(Exception):
    def __init__(self, code: int, kind: str, message: str):
        super().__init__(message)
        self.code, self.kind = code, kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat JSON run config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--seed", type=int)
    p.add_argument("--bits", type=int, choices=(2, 3, 4))
    p.add_argument("--group-size", type=int)
    p.add_argument("--rank", type=int)
    p.add_argument("--omega-frac", type=float, help="omega / rank (default 0.75)")
    p.add_argument("--sigma-start", type=float)
    p.add_argument("--sigma-end", type=float)
    p.add_argument("--sigma-tail", type=float)
    p.add_argument("--decay-frac", type=float)
    p.add_argument("--method", choices=("lota", "lora", "zero-only"))
    p.add_argument("--steps", type=int)
    p.add_argument("--task", choices=("recovery", "specific"))
    p.add_argument("--lr", type=float, help="learning rate (lora / zero-only only)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lota", description="Ternary adaptation of quantized MLPs.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("quantize", help="FP weights (or the config's teacher) -> checkpoint")
    _common(p)
    p.add_argument("--weights", type=Path, help="raw little-endian f32 weights")
    p.add_argument("--meta", type=Path, help="JSON sidecar with layer shapes (default WEIGHTS.json)")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("finetune", help="train an adapter on the config's task")
    _common(p)
    p.add_argument("--in", dest="inp", type=Path, required=True)
    p.add_argument("--out", type=Path)
    p.add_argument("--report", type=Path, help="CSV loss log; summary JSON goes next to it")

    p = sub.add_parser("merge", help="fold adapters into the quantized weights")
    p.add_argument("--in", dest="inp", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the config's task")
    _common(p)
    p.add_argument("--in", dest="inp", type=Path, required=True)
    p.add_argument("--out", type=Path, help="metrics JSON path (default stdout)")

    p = sub.add_parser("bench", help="merged vs unmerged inference throughput")
    p.add_argument("--bits", type=int, nargs="+", default=[2, 3, 4], choices=(2, 3, 4))
    p.add_argument("--batch", type=int, nargs="+", default=[1, 128])
    p.add_argument("--dim", type=int, default=512)
    p.add_argument("--rank", type=int, default=64)
    p.add_argument("--reps", type=int, default=10)
    p.add_argument("--backends", action="store_true", help="also time numba vs numpy kernels")
    p.add_argument("--out", type=Path)

    p = sub.add_parser("selftest", help="run the losslessness and round-trip property suites")
    p.add_argument("--in", dest="inp", type=Path, help="also verify this checkpoint")
    return parser


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(args) -> RunConfig:
    data = {}
    if args.config is not None:
        try:
            data = json.loads(args.config.read_text())
        except OSError as exc:
            raise CLIError(EXIT_IO, "io", f"cannot read config: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise CLIError(EXIT_CONFIG, "config", f"config is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise CLIError(EXIT_CONFIG, "config", "config must be a JSON object")
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        data[key.strip()] = _parse_value(value)
    # precedence: config file < --set < dedicated flags
    for flag, key in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            data[key] = value
    try:
        return RunConfig.from_dict(data)
    except (ConfigError, TypeError, ValueError) as exc:
        raise CLIError(EXIT_CONFIG, "config", str(exc)) from exc


def _load(path: Path):
    try:
        return [rec.to_layer() for rec in load_checkpoint(path)]
    except OSError as exc:
        raise CLIError(EXIT_IO, "io", f"cannot read {path}: {exc.strerror}") from exc
    except (CheckpointError, QuantError, AdapterError, ValueError) as exc:
        raise CLIError(EXIT_IO, "format", f"{path}: {exc}") from exc


def _save(layers, path: Path, inputs=()) -> None:
    if any(path.resolve() == Path(p).resolve() for p in inputs):
        raise UsageError("output path must differ from input paths")
    try:
        save_checkpoint(layers, path)
    except OSError as exc:
        raise CLIError(EXIT_IO, "io", f"cannot write {path}: {exc}") from exc


def _dims_of(layers) -> tuple:
    return (layers[0].d_in,) + tuple(layer.d_out for layer in layers)


def _task_config(config: RunConfig, layers) -> RunConfig:
    if not layers:
        raise CLIError(EXIT_CONFIG, "config", "checkpoint has no layers")
    try:
        return config.with_overrides({"dims": list(_dims_of(layers))})
    except ConfigError as exc:
        raise CLIError(EXIT_CONFIG, "config", str(exc)) from exc


def _read_weights(weights: Path, meta: Path | None):
    meta = meta or weights.with_name(weights.name + ".json")
    try:
        info = json.loads(meta.read_text())
        raw = np.fromfile(weights, dtype="<f4")
    except OSError as exc:
        raise CLIError(EXIT_IO, "io", f"cannot read weights: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CLIError(EXIT_IO, "format", f"weights sidecar is not valid JSON: {exc}") from exc
    shapes = info.get("shapes") or ([info["shape"]] if "shape" in info else None)
    if not shapes:
        raise CLIError(EXIT_IO, "format", "sidecar needs 'shapes': [[d_in, d_out], ...]")
    mats, offset = [], 0
    for d_in, d_out in shapes:
        n = int(d_in) * int(d_out)
        if offset + n > raw.size:
            raise CLIError(EXIT_IO, "format", "weights file is shorter than the sidecar shapes")
        mats.append(raw[offset : offset + n].reshape(int(d_in), int(d_out)))
        offset += n
    if offset != raw.size:
        raise CLIError(EXIT_IO, "format", "weights file is longer than the sidecar shapes")
    return mats


def cmd_quantize(args) -> int:
    config = load_config(args)
    if args.weights is None:
        task = gen_teacher_task(config.seed, config.dims, config.n_train, config.n_eval, config.task)
        layers = quantize_model(task.base_model, config.bits, config.group_size)
    else:
        try:
            layers = [quantize(w, config.bits, config.group_size) for w in _read_weights(args.weights, args.meta)]
        except QuantError as exc:
            raise CLIError(EXIT_CONFIG, "config", str(exc)) from exc
    _save(layers, args.out, [p for p in (args.weights, args.meta) if p])
    return 0


def cmd_finetune(args) -> int:
    config = load_config(args)
    layers = _load(args.inp)
    config = _task_config(config, layers)
    if args.out is not None and config.method == "lora":
        raise CLIError(EXIT_CONFIG, "config", "lora adapters cannot be stored losslessly; omit --out")
    try:
        report, model = run_recovery(config, bases=layers)
    except ConfigError as exc:
        raise CLIError(EXIT_CONFIG, "config", str(exc)) from exc
    if args.out is not None:
        _save(student_layers(model), args.out, [args.inp])
    summary = report.summary()
    if args.report is not None:
        try:
            report.write(args.report, args.report.with_suffix(".json"))
        except OSError as exc:
            raise CLIError(EXIT_IO, "io", f"cannot write report: {exc}") from exc
    print(json.dumps({k: summary[k] for k in ("final_eval_loss", "baseline_eval_loss", "steps")}))
    return 0


def cmd_merge(args) -> int:
    layers = _load(args.inp)
    _save([merge(layer) for layer in layers], args.out, [args.inp])
    return 0


def cmd_eval(args) -> int:
    config = load_config(args)
    layers = _load(args.inp)
    config = _task_config(config, layers)
    task = gen_teacher_task(config.seed, config.dims, config.n_train, config.n_eval, config.task)
    model = MLP([FrozenLinear(layer) if isinstance(layer, QuantizedLinear) else layer for layer in layers])
    metrics = {
        "task": config.task,
        "seed": config.seed,
        "dims": list(config.dims),
        "eval_loss": evaluate(model, task.x_eval, task.y_eval),
        "train_loss": evaluate(model, task.x_train, task.y_train),
        "teacher_eval_loss": evaluate(task.base_model, task.x_eval, task.y_eval),
    }
    text = json.dumps(metrics, sort_keys=True)
    if args.out is None:
        print(text)
    else:
        args.out.write_text(text + "\n")
    return 0


def cmd_bench(args) -> int:
    rows = bench_inference(tuple(args.bits), tuple(args.batch), args.dim, args.dim, args.rank, reps=args.reps)
    out = {"inference": rows}
    if args.backends:
        out["kernels"] = bench_backends(args.dim, args.rank, reps=args.reps)
    text = json.dumps(out, indent=2)
    if args.out is None:
        print(text)
    else:
        args.out.write_text(text + "\n")
    return 0


def cmd_selftest(args) -> int:
    if args.inp is not None:
        layers = _load(args.inp)
        for layer in layers:
            merge(layer)
    failed = False
    for name, ok, detail in selftest.run_all():
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        failed |= not ok
    return EXIT_SELFTEST if failed else 0


COMMANDS = {
    "quantize": cmd_quantize,
    "finetune": cmd_finetune,
    "merge": cmd_merge,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "selftest": cmd_selftest,
}


def _report(code: int, kind: str, message: str) -> int:
    print(json.dumps({"error": kind, "message": message, "exit_code": code}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required: " + ", ".join(COMMANDS))
        return COMMANDS[args.command](args)
    except UsageError as exc:
        return _report(EXIT_USAGE, "usage", str(exc))
    except CLIError as exc:
        return _report(exc.code, exc.kind, str(exc))


if __name__ == "__main__":
    sys.exit(main())
