"""Numba kernels against their numpy twins, per kernel and end to end.

    python benchmarks/bench_backends.py [--dim 512] [--rank 64] [--reps 20] [--json out.json]

Per-kernel numbers call ``kernels.*_np`` and ``kernels.*_nb`` directly in
this process. The end-to-end rows run the default 2-bit recovery and the
inference benchmark in fresh interpreters, once with ``LOTA_DISABLE_NUMBA=1``
and once without, because the backend is fixed at import time.
"""

import argparse
import json
import os
import subprocess
import sys

from lota._accel import HAVE_NUMBA
from lota.harness import bench_backends

E2E = """
import json, time
from lota import kernels
from lota.harness import RunConfig, bench_inference, run_recovery
run_recovery(RunConfig(steps=2))  # warm the jit cache
t = time.perf_counter(); report, _ = run_recovery(RunConfig()); train = time.perf_counter() - t
rows = bench_inference((2,), (1, 128))
print(json.dumps({"backend": kernels.BACKEND, "train_s": train, "final": report.final_eval_loss,
                  "merged_per_s": {r["batch"]: r["merged_outputs_per_s"] for r in rows},
                  "unmerged_per_s": {r["batch"]: r["unmerged_outputs_per_s"] for r in rows}}))
"""


def end_to_end(disable: bool) -> dict:
    env = dict(os.environ, LOTA_DISABLE_NUMBA="1" if disable else "0")
    out = subprocess.run([sys.executable, "-c", E2E], env=env, capture_output=True, text=True, check=True)
    return json.loads(out.stdout)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--dim", type=int, default=512)
    ap.add_argument("--rank", type=int, default=64)
    ap.add_argument("--reps", type=int, default=20)
    ap.add_argument("--skip-e2e", action="store_true")
    ap.add_argument("--json", help="also write the raw numbers here")
    args = ap.parse_args()

    per_kernel = bench_backends(d=args.dim, rank=args.rank, reps=args.reps)
    print(f"kernels at d={args.dim}, rank={args.rank} (median ms per call)")
    print(f"{'kernel':<18}{'numpy':>10}{'numba':>10}{'ratio':>8}")
    for name, row in per_kernel.items():
        nb = row.get("numba")
        ratio = f"{row['numpy'] / nb:.2f}x" if nb else "-"
        print(f"{name:<18}{row['numpy'] * 1e3:>10.3f}{(nb or float('nan')) * 1e3:>10.3f}{ratio:>8}")

    result = {"kernels": per_kernel}
    if not args.skip_e2e:
        runs = [end_to_end(True)] + ([end_to_end(False)] if HAVE_NUMBA else [])
        print("\nend to end (2-bit default recovery, 300 steps; 2-bit 512x512 inference)")
        for r in runs:
            print(f"{r['backend']:<8} train {r['train_s']:.2f}s  final loss {r['final']:.6f}  "
                  f"merged {r['merged_per_s']['1']:.0f}/{r['merged_per_s']['128']:.0f} out/s  "
                  f"unmerged {r['unmerged_per_s']['1']:.0f}/{r['unmerged_per_s']['128']:.0f} out/s (batch 1/128)")
        if len(runs) == 2:
            print("identical final loss across backends:", runs[0]["final"] == runs[1]["final"])
        result["end_to_end"] = runs
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(result, fh, indent=2)


if __name__ == "__main__":
    main()
