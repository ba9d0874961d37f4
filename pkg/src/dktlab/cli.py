"""``dkt-lab`` command line: train, eval, gradcheck, calibrate, dump-tasks, benchmark.

Exit codes: 0 success, 1 runtime failure (including aborted training),
2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import FeatureTransferModel
from .checkpoint import CheckpointError, load_checkpoint, rng_digest, save_checkpoint
from .checks import TOLERANCE, gradcheck_suite
from .experiments import (EXPERIMENTS, METHODS, MODES, ExperimentConfig, evaluate_model, method_label,
                          test_tasks, train_model)
from .gp import predict_regression
from .kernels import KERNEL_NAMES
from .metrics import calibrate_temperature, ece, nll, softmax
from .tasks import write_tasks
from .trainer import DKTModel, TrainingAborted, evaluate_classification


class UsageError(Exception):
    pass


def fmt(x: float) -> str:
    return repr(float(x))


def _header(lines, fh) -> None:
    for line in lines:
        fh.write(f"# {line}\n")


def write_csv(path, provenance, columns, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as fh:
        _header(provenance, fh)
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(fmt(v) if isinstance(v, float) else str(v) for v in row) + "\n")


def default_seeds() -> list[int]:
    env = os.environ.get("DKTLAB_SEED")
    if env is None:
        return [0]
    try:
        return [int(env)]
    except ValueError:
        raise UsageError(f"DKTLAB_SEED must be an integer, got {env!r}") from None


def config_from_args(args) -> ExperimentConfig:
    base: dict = {}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            base = json.load(fh)
        if not isinstance(base, dict):
            raise UsageError("config file must hold a JSON object")
    fields = {f.name for f in dataclasses.fields(ExperimentConfig)}
    for key, value in vars(args).items():
        if key in fields and value is not None:
            base[key] = value
    if getattr(args, "seed", None) is not None:
        base["seeds"] = [args.seed]
    base.setdefault("seeds", default_seeds())
    try:
        return ExperimentConfig.from_dict(base)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


# ---------------------------------------------------------------------------
# model <-> checkpoint


def _save_model(path, model, config: ExperimentConfig, seed: int) -> None:
    meta = {"experiment": config.experiment, "method": config.method,
            "config": json.dumps(config.echo(), sort_keys=True), "train_seed": seed,
            "rng_digest": rng_digest([seed])}
    if isinstance(model, FeatureTransferModel):
        save_checkpoint(path, None, model.mlp, meta)
    else:
        save_checkpoint(path, model.kernel, model.backbone, meta)


def _load_model(path, config: ExperimentConfig):
    try:
        kernel, backbone, meta = load_checkpoint(path)
    except (OSError, CheckpointError) as exc:
        raise UsageError(f"cannot load checkpoint {path}: {exc}") from None
    if meta.get("experiment") != config.experiment:
        raise UsageError(f"checkpoint is for {meta.get('experiment')!r}, not {config.experiment!r}")
    if meta.get("method") == "feature-transfer":
        return FeatureTransferModel(backbone), meta
    if kernel is None:
        raise UsageError("checkpoint holds no kernel")
    return DKTModel(kernel, backbone), meta


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    config = config_from_args(args)
    if config.method == "dk-baseline":
        raise UsageError("dk-baseline is fit per task; run `eval --method dk-baseline` instead")
    seed = config.seeds[0]
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    model, losses = train_model(config, seed)
    wall = time.perf_counter() - t0
    ckpt = Path(config.checkpoint) if config.checkpoint else out / "checkpoint.ckpt"
    _save_model(ckpt, model, config, seed)
    if config.trace:
        write_csv(out / "trace.csv", config.provenance(), ["iteration", "loss"],
                  [(i, float(l)) for i, l in enumerate(losses)])
    final = losses[-1] if losses else float("nan")
    print(f"final_loss={fmt(final)} wall_time_s={wall:.2f} checkpoint={ckpt}")
    return 0


def _results_rows(config: ExperimentConfig, scores: list[float]):
    mode = config.mode if config.experiment == "sine-regression" else f"{config.ways}way{config.shots}shot"
    label = method_label(config)
    rows = [(label, config.kernel, mode, s, 0.0, 1) for s in scores]
    rows.append((label, config.kernel, mode, float(np.mean(scores)), float(np.std(scores)), len(scores)))
    return rows


def _columns(config: ExperimentConfig):
    metric = "mse" if config.experiment == "sine-regression" else "acc"
    return ["method", "kernel", "mode", f"{metric}_mean", f"{metric}_std", "runs"]


def cmd_eval(args) -> int:
    config = config_from_args(args)
    model = None
    if config.method != "dk-baseline":
        if not config.checkpoint:
            raise UsageError("eval needs --checkpoint for this method")
        model, meta = _load_model(config.checkpoint, config)
        if meta.get("method") != config.method:
            raise UsageError(f"checkpoint method {meta.get('method')!r} != --method {config.method!r}")
    scores = [evaluate_model(config, model, s) for s in config.seeds]
    out = Path(config.out)
    write_csv(out / "results.csv", config.provenance(), _columns(config), _results_rows(config, scores))
    if config.predictions and config.experiment == "sine-regression" and isinstance(model, DKTModel):
        task = test_tasks(config, config.seeds[0], 1)[0]
        post = predict_regression(model.kernel, model.backbone, task.support_x, task.support_y,
                                  task.query_x, full_cov=False)
        write_csv(config.predictions, config.provenance(), ["x", "mean", "variance", "truth"],
                  [(float(x), float(m), float(v), float(t))
                   for x, m, v, t in zip(task.query_x, post.mean, post.variance, task.query_y)])
    metric = "mse" if config.experiment == "sine-regression" else "accuracy"
    print(f"{method_label(config)} {config.kernel} {metric} mean={fmt(np.mean(scores))} "
          f"std={fmt(np.std(scores))} runs={len(scores)}")
    return 0


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else default_seeds()[0]
    results = gradcheck_suite(seed)
    failed = 0
    for name, err in results:
        ok = err < TOLERANCE
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'} {name} max_rel_err={err:.3e}")
    print(f"{len(results) - failed}/{len(results)} checks passed (tolerance {TOLERANCE:g})")
    return 0 if failed == 0 else 1


def calibration_report(model: DKTModel, config: ExperimentConfig, cal_seed: int, test_seed: int,
                       bins: int = 15) -> dict:
    if cal_seed == test_seed:
        raise ValueError("calibration and test seeds must differ")
    cal = evaluate_classification(model, test_tasks(config, cal_seed), workers=config.workers)
    tst = evaluate_classification(model, test_tasks(config, test_seed), workers=config.workers)
    cal_logits, cal_labels = np.vstack(cal.means), np.concatenate(cal.labels)
    tst_logits, tst_labels = np.vstack(tst.means), np.concatenate(tst.labels)
    t = calibrate_temperature(cal_logits, cal_labels)
    report = ece(softmax(tst_logits, t), tst_labels, bins)
    report.temperature = t
    report.nll_before = nll(cal_logits, cal_labels, 1.0)
    report.nll_after = nll(cal_logits, cal_labels, t)
    out = report.as_dict()
    out.update({
        "calibration_seed": cal_seed,
        "test_seed": test_seed,
        "seeds_disjoint": cal_seed != test_seed,
        "tasks_per_split": len(cal.means),
        "ece_calibration_split_T1": ece(softmax(cal_logits, 1.0), cal_labels, bins).ece,
        "ece_calibration_split_calibrated": ece(softmax(cal_logits, t), cal_labels, bins).ece,
        "ece_test_uncalibrated_sigmoid": ece(np.vstack(tst.probs), tst_labels, bins).ece,
        "test_accuracy": tst.accuracy,
    })
    return out


def cmd_calibrate(args) -> int:
    config = config_from_args(args)
    if config.experiment != "synth-classification":
        raise UsageError("calibrate needs a synth-classification checkpoint")
    if not config.checkpoint:
        raise UsageError("calibrate needs --checkpoint")
    model, _ = _load_model(config.checkpoint, config)
    seed = config.seeds[0]
    report = calibration_report(model, config, cal_seed=seed, test_seed=seed + 1, bins=args.bins)
    text = json.dumps(report, indent=2)
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "calibration.json", "w", newline="\n") as fh:
        fh.write(text + "\n")
    print(text)
    return 0


def cmd_dump_tasks(args) -> int:
    config = config_from_args(args)
    n = config.n_tasks if config.n_tasks is not None else 10
    tasks = test_tasks(dataclasses.replace(config, tasks_file=None), config.seeds[0], n,
                       split=args.split)
    path = Path(args.file) if args.file else Path(config.out) / "tasks.txt"
    path.parent.mkdir(parents=True, exist_ok=True)
    write_tasks(path, tasks, config.provenance())
    print(f"wrote {len(tasks)} tasks to {path}")
    return 0


BENCHMARK_GRID = (
    ("dkt", "spectral", 1),
    ("dkt", "rbf", 1),
    ("feature-transfer", "rbf", 1),
    ("feature-transfer", "rbf", 100),
    ("dk-baseline", "rbf", 1),
    ("dk-baseline", "spectral", 1),
)


def run_benchmark(config: ExperimentConfig, grid=BENCHMARK_GRID, log=print):
    """Train each method once per seed and score it in and out of range."""
    rows = []
    ft_cache = {}
    for method, kernel, steps in grid:
        cfg = dataclasses.replace(config, method=method, kernel=kernel, ft_steps=steps)
        for mode in MODES:
            scores = []
            for seed in cfg.seeds:
                if method == "dk-baseline":
                    model = None
                elif method == "feature-transfer":
                    if seed not in ft_cache:
                        ft_cache[seed], _ = train_model(cfg, seed)
                    model = ft_cache[seed]
                else:
                    key = (kernel, seed)
                    if key not in ft_cache:
                        ft_cache[key], _ = train_model(cfg, seed)
                    model = ft_cache[key]
                scores.append(evaluate_model(dataclasses.replace(cfg, mode=mode), model, seed))
            label = method_label(cfg)
            rows.append((label, kernel, mode, float(np.mean(scores)), float(np.std(scores)), len(scores)))
            log(f"{label} {kernel} {mode} mse={np.mean(scores):.4f}±{np.std(scores):.4f}")
    return rows


def cmd_benchmark(args) -> int:
    config = config_from_args(args)
    rows = run_benchmark(config)
    write_csv(Path(config.out) / "benchmark.csv", config.provenance(),
              ["method", "kernel", "mode", "mse_mean", "mse_std", "runs"], rows)
    return 0


# ---------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of ExperimentConfig keys (flags override it)")
    p.add_argument("--experiment", choices=EXPERIMENTS)
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--kernel", choices=KERNEL_NAMES)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--shots", type=int)
    p.add_argument("--ways", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--seed", type=int, help="single seed (falls back to $DKTLAB_SEED)")
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--n-tasks", dest="n_tasks", type=int)
    p.add_argument("--ft-steps", dest="ft_steps", type=int, choices=(1, 100))
    p.add_argument("--dk-budget", dest="dk_budget", type=int)
    p.add_argument("--within-std", dest="within_std", type=float)
    p.add_argument("--workers", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--checkpoint")
    p.add_argument("--tasks-file", dest="tasks_file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dkt-lab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"dkt-lab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _common(p)
    p.add_argument("--trace", action="store_true", default=None, help="write trace.csv")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on fresh test tasks")
    _common(p)
    p.add_argument("--predictions", help="CSV of the first task's predictive distribution")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("calibrate", help="temperature scaling and ECE for a classification checkpoint")
    _common(p)
    p.add_argument("--bins", type=int, default=15)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("dump-tasks", help="write sampled tasks as records")
    _common(p)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--file", help="output path (default OUT/tasks.txt)")
    p.set_defaults(func=cmd_dump_tasks)

    p = sub.add_parser("benchmark", help="sine-regression grid: DKT, feature transfer, DKBaseline")
    _common(p)
    p.set_defaults(func=cmd_benchmark)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"dkt-lab: error: {exc}", file=sys.stderr)
        return 2
    except TrainingAborted as exc:
        print(f"dkt-lab: training aborted: {exc}", file=sys.stderr)
        return 1
    except (RuntimeError, ValueError, OSError) as exc:
        print(f"dkt-lab: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
