"""Few-shot classification on the synthetic cluster family with temperature calibration.

Trains DKT with the chosen kernel, reports test accuracy of the trained and
the untrained model, then fits a temperature on one split and reports ECE on
another.

    python3 scripts/classification_demo.py --kernel bncossim --iterations 20000 --shots 1
"""

import argparse
import json

from dktlab.cli import calibration_report
from dktlab.experiments import ExperimentConfig, build_dkt, evaluate_model, train_model


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--kernel", default="bncossim")
    p.add_argument("--iterations", type=int, default=20_000)
    p.add_argument("--ways", type=int, default=5)
    p.add_argument("--shots", type=int, default=1)
    p.add_argument("--within-std", type=float, default=0.25)
    p.add_argument("--n-tasks", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    cfg = ExperimentConfig(experiment="synth-classification", kernel=args.kernel, ways=args.ways,
                           shots=args.shots, within_std=args.within_std, iterations=args.iterations,
                           n_tasks=args.n_tasks, seeds=[args.seed])
    untrained = evaluate_model(cfg, build_dkt(cfg, args.seed), args.seed)
    model, _ = train_model(cfg, args.seed)
    trained = evaluate_model(cfg, model, args.seed)
    print(f"accuracy untrained {untrained:.4f} trained {trained:.4f} ({args.n_tasks} episodes)")
    report = calibration_report(model, cfg, cal_seed=args.seed, test_seed=args.seed + 1)
    report.pop("per_bin")
    print(json.dumps(report, indent=2))


if __name__ == "__main__":
    main()
