"""Sine-regression comparison grid: DKT (spectral, RBF), feature transfer, per-task deep kernel.

Writes OUT/benchmark.csv with one row per (method, kernel, mode), mean and std over seeds.

    python3 scripts/run_benchmark.py --iterations 50000 --seeds 0 1 2 --out runs/bench
"""

import argparse
import dataclasses
import time
from pathlib import Path

from dktlab.cli import BENCHMARK_GRID, run_benchmark, write_csv
from dktlab.experiments import ExperimentConfig


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--iterations", type=int, default=50_000)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--n-tasks", type=int, default=None, help="test tasks per seed (default 1000)")
    p.add_argument("--dk-tasks", type=int, default=None, help="test tasks per seed for the per-task baseline")
    p.add_argument("--out", default="runs/benchmark")
    args = p.parse_args()

    base = ExperimentConfig(iterations=args.iterations, seeds=args.seeds, n_tasks=args.n_tasks, out=args.out)
    rows = []
    t0 = time.perf_counter()
    shared = tuple(e for e in BENCHMARK_GRID if e[0] != "dk-baseline")
    per_task = tuple(e for e in BENCHMARK_GRID if e[0] == "dk-baseline")
    rows += run_benchmark(base, grid=shared)
    # the per-task baseline trains a network for every test task; allow a smaller count
    rows += run_benchmark(dataclasses.replace(base, n_tasks=args.dk_tasks), grid=per_task)
    write_csv(Path(args.out) / "benchmark.csv", base.provenance(),
              ["method", "kernel", "mode", "mse_mean", "mse_std", "runs"], rows)
    print(f"done in {time.perf_counter() - t0:.0f}s -> {Path(args.out) / 'benchmark.csv'}")


if __name__ == "__main__":
    main()
