"""Comparison methods for the sine benchmark: feature transfer and a per-task deep kernel."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .backbone import MLP, MLPConfig
from .gp import dkt_task_loss, predict_regression
from .kernels import make_kernel
from .metrics import mse
from .tasks import RegressionTask
from .trainer import ParamGroup, TrainConfig


@dataclass
class FeatureTransferConfig:
    iterations: int = 20_000
    lr: float = 1e-3
    hidden_dims: list[int] = field(default_factory=lambda: [40, 40])
    seed: int = 0


class FeatureTransferModel:
    """A scalar-output MLP regressor shared across tasks."""

    def __init__(self, mlp: MLP):
        self.mlp = mlp

    def predict(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64).reshape(-1, 1)
        return self.mlp.forward(x).values.ravel()

    def clone(self) -> "FeatureTransferModel":
        return FeatureTransferModel(self.mlp.clone())


def _sq_loss(mlp: MLP, x, y) -> ad.Tensor:
    pred = mlp.forward(np.asarray(x, dtype=np.float64).reshape(-1, 1))
    r = pred - ad.Tensor(np.asarray(y, dtype=np.float64).reshape(-1, 1))
    return ad.tsum(ad.square(r)) / float(r.shape[0])


def _sgd_fit(mlp: MLP, batches, lr: float) -> list[float]:
    params = mlp.tensors()
    group = ParamGroup(params, lr)
    config = TrainConfig(iterations=1, alpha=lr, beta=lr)
    losses = []
    for x, y in batches:
        ad.zero_grad(params)
        with ad.GradTape() as tape:
            loss = _sq_loss(mlp, x, y)
        ad.backward(tape, loss)
        losses.append(loss.item())
        group.step(config)
    ad.zero_grad(params)
    return losses


def train_feature_transfer(task_source, config: FeatureTransferConfig) -> FeatureTransferModel:
    """Pretrain one regressor on the pooled points of one task per step (squared error, Adam)."""
    mlp = MLP(MLPConfig(input_dim=1, hidden_dims=list(config.hidden_dims), output_dim=1,
                        seed=config.seed))

    def batches():
        for i in range(config.iterations):
            t = task_source(i)
            yield t.x, t.y

    _sgd_fit(mlp, batches(), config.lr)
    return FeatureTransferModel(mlp)


def finetune_and_eval(base: FeatureTransferModel, task: RegressionTask, steps: int,
                      lr: float = 1e-3) -> float:
    """Fine-tune a copy on the support set with ``steps`` full-batch Adam steps; query MSE."""
    if steps < 0:
        raise ValueError("steps must be >= 0")
    model = base.clone()
    if lr > 0 and steps > 0:
        _sgd_fit(model.mlp, ((task.support_x, task.support_y) for _ in range(steps)), lr)
    return mse(model.predict(task.query_x), task.query_y)


@dataclass
class DKBaselineConfig:
    budget: int = 100
    alpha: float = 1e-3
    beta: float = 1e-3
    noise: float = 0.01
    seed: int = 0


def train_dk_baseline(task: RegressionTask, kernel_family: str,
                      config: DKBaselineConfig = DKBaselineConfig()) -> float:
    """Fit a fresh deep kernel on the support points only, then score the query set."""
    mlp = MLP(MLPConfig(seed=config.seed))
    kernel = make_kernel(kernel_family, mlp.config.output_dim, noise=config.noise)
    support_only = RegressionTask(task.support_x, task.support_y, np.zeros(0), np.zeros(0))
    groups = [ParamGroup(kernel.tensors(), config.alpha), ParamGroup(mlp.tensors(), config.beta)]
    tc = TrainConfig(iterations=config.budget, alpha=config.alpha, beta=config.beta)
    params = [t for g in groups for t in g.tensors]
    for _ in range(config.budget):
        ad.zero_grad(params)
        with ad.GradTape() as tape:
            loss = dkt_task_loss(kernel, mlp, support_only)
        ad.backward(tape, loss)
        for g in groups:
            g.step(tc)
    ad.zero_grad(params)
    post = predict_regression(kernel, mlp, task.support_x, task.support_y, task.query_x,
                              full_cov=False)
    return mse(post.mean, task.query_y)
