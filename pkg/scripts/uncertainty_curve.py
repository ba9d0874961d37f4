"""Predictive mean and variance of a trained sine model on a dense grid over [-5, 10].

Trains DKT (default RBF kernel) in range, conditions on one test task's five
support points and writes x,mean,variance,truth for plotting.

    python3 scripts/uncertainty_curve.py --kernel rbf --iterations 20000 --out runs/curve.csv
"""

import argparse

import numpy as np

from dktlab.cli import write_csv
from dktlab.experiments import ExperimentConfig, train_model
from dktlab.gp import predict_regression
from dktlab.tasks import SineTaskConfig, sample_sine_task


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--kernel", default="rbf")
    p.add_argument("--iterations", type=int, default=20_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--task", type=int, default=0, help="index of the test task to condition on")
    p.add_argument("--out", default="runs/uncertainty_curve.csv")
    args = p.parse_args()

    cfg = ExperimentConfig(kernel=args.kernel, iterations=args.iterations, seeds=[args.seed])
    model, _ = train_model(cfg, args.seed)
    task = sample_sine_task(SineTaskConfig(seed=args.seed), "test_in", args.task)
    grid = np.linspace(-5.0, 10.0, 301)
    post = predict_regression(model.kernel, model.backbone, task.support_x, task.support_y, grid,
                              full_cov=False)
    truth = task.amplitude * np.sin(grid + task.phase)
    write_csv(args.out, cfg.provenance(), ["x", "mean", "variance", "truth"],
              [(float(a), float(b), float(c), float(d)) for a, b, c, d in zip(grid, post.mean, post.variance, truth)])
    for lo, hi in ((-1, 1), (5, 8), (8, 10)):
        sel = (grid >= lo) & (grid <= hi)
        print(f"x in [{lo}, {hi}]: mean variance {post.variance[sel].mean():.4f}")
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
