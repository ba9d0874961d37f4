"""Experiment configuration and the train/evaluate recipes behind the CLI."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .backbone import MLP, MLPConfig
from .baselines import (DKBaselineConfig, FeatureTransferConfig, FeatureTransferModel,
                        finetune_and_eval, train_dk_baseline, train_feature_transfer)
from .kernels import KERNEL_NAMES, make_kernel
from .tasks import (SineTaskConfig, SyntheticFamilyConfig, read_tasks, sample_classification_task,
                    sample_sine_task)
from .trainer import DKTModel, TrainConfig, TrainResult, evaluate_classification, evaluate_regression, train_dkt

EXPERIMENTS = ("sine-regression", "synth-classification")
METHODS = ("dkt", "feature-transfer", "dk-baseline")
MODES = ("in-range", "out-range")
MODE_TO_TASK = {"in-range": "test_in", "out-range": "test_out"}

# settings that never influence numeric results and so stay out of provenance headers
_PATH_KEYS = ("out", "checkpoint", "tasks_file", "predictions", "trace")


@dataclass
class ExperimentConfig:
    experiment: str = "sine-regression"
    method: str = "dkt"
    kernel: str = "spectral"
    mode: str = "in-range"
    shots: int = 1
    ways: int = 5
    query_per_class: int = 16
    iterations: int = 20_000
    seeds: list[int] = field(default_factory=lambda: [0])
    n_tasks: int | None = None
    ft_steps: int = 1
    dk_budget: int = 100
    alpha: float = 1e-4
    beta: float = 1e-3
    latent_dim: int = 40
    hidden_dims: list[int] = field(default_factory=lambda: [40, 40])
    within_std: float = 0.25
    eval_every: int = 1000
    val_tasks: int = 100
    workers: int = 1
    out: str = "runs"
    checkpoint: str | None = None
    tasks_file: str | None = None
    predictions: str | None = None
    trace: bool = False

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.experiment!r}; valid: {', '.join(EXPERIMENTS)}")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; valid: {', '.join(METHODS)}")
        if self.kernel not in KERNEL_NAMES:
            raise ValueError(f"unknown kernel {self.kernel!r}; valid kernels: {', '.join(KERNEL_NAMES)}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; valid: {', '.join(MODES)}")
        if self.ft_steps not in (1, 100):
            raise ValueError("ft_steps must be 1 or 100")
        if self.iterations < 0 or self.workers < 1 or not self.seeds:
            raise ValueError("iterations >= 0, workers >= 1 and at least one seed are required")
        if self.experiment == "synth-classification" and self.method != "dkt":
            raise ValueError("only the dkt method is defined for synth-classification")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    @property
    def eval_tasks(self) -> int:
        if self.n_tasks is not None:
            return self.n_tasks
        return 3000 if self.experiment == "synth-classification" else 1000

    def echo(self) -> dict:
        d = dataclasses.asdict(self)
        for k in _PATH_KEYS:
            d.pop(k, None)
        return d

    def provenance(self) -> list[str]:
        return [f"dktlab {__version__}",
                "config " + json.dumps(self.echo(), sort_keys=True),
                "seeds " + ",".join(str(s) for s in self.seeds)]


def family(config: ExperimentConfig, seed: int) -> SyntheticFamilyConfig:
    return SyntheticFamilyConfig(within_std=config.within_std, seed=seed)


def train_source(config: ExperimentConfig, seed: int):
    if config.experiment == "sine-regression":
        sine = SineTaskConfig(seed=seed)
        return lambda i: sample_sine_task(sine, "train", i)
    gen = family(config, seed)
    return lambda i: sample_classification_task(gen, config.ways, config.shots,
                                                config.query_per_class, "train", i)


def test_tasks(config: ExperimentConfig, seed: int, n: int | None = None, split: str = "test",
               offset: int = 0) -> list:
    """Evaluation episodes; ``seed`` keys the test stream independently of training."""
    n = config.eval_tasks if n is None else n
    if config.tasks_file:
        return read_tasks(config.tasks_file)[:n]
    if config.experiment == "sine-regression":
        sine = SineTaskConfig(seed=seed)
        return [sample_sine_task(sine, MODE_TO_TASK[config.mode], offset + i) for i in range(n)]
    gen = family(config, seed)
    return [sample_classification_task(gen, config.ways, config.shots, config.query_per_class,
                                       split, offset + i) for i in range(n)]


def build_dkt(config: ExperimentConfig, seed: int) -> DKTModel:
    in_dim = 1 if config.experiment == "sine-regression" else 2
    mlp = MLP(MLPConfig(in_dim, list(config.hidden_dims), config.latent_dim, "relu", seed))
    lengthscale = 1.0 if config.experiment == "sine-regression" else math.sqrt(config.latent_dim)
    return DKTModel(make_kernel(config.kernel, config.latent_dim, lengthscale=lengthscale), mlp)


def train_model(config: ExperimentConfig, seed: int):
    """Train the configured method for one seed.

    Returns ``(model, losses)``; the model is a DKTModel or FeatureTransferModel.
    """
    if config.method == "dkt":
        model = build_dkt(config, seed)
        tc = TrainConfig(iterations=config.iterations, alpha=config.alpha, beta=config.beta, seed=seed,
                         eval_every=config.eval_every if config.experiment == "synth-classification" else 0)
        validate = None
        if config.experiment == "synth-classification":
            val = test_tasks(dataclasses.replace(config, tasks_file=None), seed, config.val_tasks, "val")
            validate = lambda m: evaluate_classification(m, val).accuracy
        res: TrainResult = train_dkt(train_source(config, seed), model.kernel, model.backbone, tc, validate)
        return res.model, res.losses
    if config.method == "feature-transfer":
        ft = train_feature_transfer(train_source(config, seed),
                                    FeatureTransferConfig(config.iterations, 1e-3, list(config.hidden_dims), seed))
        return ft, []
    raise ValueError("dk-baseline has no shared training phase; it is fit per task at evaluation")


def method_label(config: ExperimentConfig) -> str:
    if config.method == "feature-transfer":
        return f"feature-transfer/{config.ft_steps}"
    return config.method


def evaluate_model(config: ExperimentConfig, model, seed: int) -> float:
    """Mean query MSE (regression) or accuracy (classification) on fresh test tasks."""
    tasks = test_tasks(config, seed)
    if config.method == "dk-baseline":
        dk = DKBaselineConfig(budget=config.dk_budget, seed=seed)
        return float(np.mean([train_dk_baseline(t, config.kernel, dk) for t in tasks]))
    if isinstance(model, FeatureTransferModel):
        return float(np.mean([finetune_and_eval(model, t, config.ft_steps) for t in tasks]))
    if config.experiment == "sine-regression":
        return evaluate_regression(model, tasks, workers=config.workers).mse_mean
    return evaluate_classification(model, tasks, workers=config.workers).accuracy
