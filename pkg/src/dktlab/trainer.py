"""Episodic training of a deep kernel and the evaluation loops."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .backbone import MLP
from .gp import CholeskyFailure, classify, dkt_task_loss, predict_regression
from .kernels import KernelSpec
from .metrics import mse

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 20_000
    alpha: float = 1e-4          # kernel hyperparameters
    beta: float = 1e-3           # backbone weights
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    eval_every: int = 0
    jitter_schedule: tuple[float, ...] = (1e-6, 1e-4, 1e-2)
    max_skip_fraction: float = 0.01

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("step sizes must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray, lr: float,
              betas=(0.9, 0.999), eps: float = 1e-8) -> np.ndarray:
    """One bias-corrected Adam update; returns the new parameters.

    A non-finite gradient leaves both parameters and state untouched.
    """
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError("parameter, gradient and moment lengths differ")
    if not np.isfinite(grads).all():
        log.warning("non-finite gradient, Adam step skipped")
        return params
    b1, b2 = betas
    state.step += 1
    state.m = b1 * state.m + (1 - b1) * grads
    state.v = b2 * state.v + (1 - b2) * grads * grads
    m_hat = state.m / (1 - b1 ** state.step)
    v_hat = state.v / (1 - b2 ** state.step)
    return params - lr * m_hat / (np.sqrt(v_hat) + eps)


class ParamGroup:
    """A list of tensors viewed as one flat vector, with its own Adam state."""

    def __init__(self, tensors: list[ad.Tensor], lr: float):
        self.tensors = tensors
        self.lr = lr
        self.sizes = [t.values.size for t in tensors]
        self.state = AdamState.zeros(sum(self.sizes))

    def flat(self) -> np.ndarray:
        if not self.tensors:
            return np.zeros(0)
        return np.concatenate([t.values.ravel() for t in self.tensors])

    def flat_grad(self) -> np.ndarray:
        if not self.tensors:
            return np.zeros(0)
        return np.concatenate([np.zeros(t.values.size) if t.grad is None else t.grad.ravel()
                               for t in self.tensors])

    def load(self, flat: np.ndarray) -> None:
        pos = 0
        for t, k in zip(self.tensors, self.sizes):
            t.values = flat[pos:pos + k].reshape(t.values.shape).copy()
            pos += k

    def step(self, config: TrainConfig) -> None:
        if not self.tensors:
            return
        self.load(adam_step(self.state, self.flat(), self.flat_grad(), self.lr,
                            config.adam_betas, config.adam_eps))


@dataclass
class DKTModel:
    kernel: KernelSpec
    backbone: MLP | None

    def clone(self) -> "DKTModel":
        return DKTModel(self.kernel.clone(), None if self.backbone is None else self.backbone.clone())


@dataclass
class TrainResult:
    model: DKTModel
    losses: list[float] = field(default_factory=list)
    skipped: int = 0
    best_score: float | None = None


def train_dkt(task_source: Callable[[int], object], kernel: KernelSpec, backbone: MLP | None,
              config: TrainConfig, validate: Callable[[DKTModel], float] | None = None) -> TrainResult:
    """One task per step: pooled negative log marginal likelihood, backward, two Adam updates.

    ``task_source(i)`` returns the task for iteration ``i``. When ``validate``
    is given and ``config.eval_every > 0``, the parameters with the highest
    validation score are returned instead of the final iterate.
    """
    model = DKTModel(kernel, backbone)
    groups = [ParamGroup(kernel.tensors(), config.alpha)]
    if backbone is not None:
        groups.append(ParamGroup(backbone.tensors(), config.beta))
    losses: list[float] = []
    skipped = 0
    budget = config.max_skip_fraction * config.iterations
    best_score, best_model = None, None
    all_tensors = [t for g in groups for t in g.tensors]

    for it in range(config.iterations):
        task = task_source(it)
        ad.zero_grad(all_tensors)
        try:
            with ad.GradTape() as tape:
                loss = dkt_task_loss(kernel, backbone, task)
            ad.backward(tape, loss)
            grads_ok = all(t.grad is None or np.isfinite(t.grad).all() for t in all_tensors)
        except (CholeskyFailure, ad.NonFiniteError) as exc:
            log.warning("iteration %d skipped: %s", it, exc)
            loss, grads_ok = None, False
        if not grads_ok:
            skipped += 1
            losses.append(float("nan"))
            if skipped > budget:
                raise TrainingAborted(f"{skipped} of {it + 1} steps skipped (task index {it})")
            continue
        losses.append(loss.item())
        for g in groups:
            g.step(config)
        if validate is not None and config.eval_every > 0 and (it + 1) % config.eval_every == 0:
            score = validate(model)
            if best_score is None or score > best_score:
                best_score, best_model = score, model.clone()

    ad.zero_grad(all_tensors)
    if best_model is not None:
        final = validate(model)
        if final <= best_score:
            _copy_into(model, best_model)
        else:
            best_score = final
    return TrainResult(model, losses, skipped, best_score)


def _copy_into(dst: DKTModel, src: DKTModel) -> None:
    for k, t in dst.kernel.params.items():
        t.values = src.kernel.params[k].values.copy()
    if dst.backbone is not None:
        for a, b in zip(dst.backbone.tensors(), src.backbone.tensors()):
            a.values = b.values.copy()


def _map(fn, items, workers: int):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


@dataclass
class RegressionEval:
    mse_mean: float
    per_task: np.ndarray


def evaluate_regression(model: DKTModel, tasks, workers: int = 1) -> RegressionEval:
    """Posterior-mean MSE on each task's query set, conditioning on the support."""
    def one(task):
        post = predict_regression(model.kernel, model.backbone, task.support_x, task.support_y,
                                  task.query_x, full_cov=False)
        return mse(post.mean, task.query_y)

    per_task = np.array(_map(one, list(tasks), workers))
    return RegressionEval(float(per_task.mean()), per_task)


@dataclass
class ClassificationEval:
    accuracy: float
    per_task: np.ndarray
    means: list[np.ndarray]
    probs: list[np.ndarray]
    labels: list[np.ndarray]


def evaluate_classification(model: DKTModel, tasks, workers: int = 1) -> ClassificationEval:
    def one(task):
        pred = classify(model.kernel, model.backbone, task.support_x, task.support_labels,
                        task.query_x, n_classes=task.ways)
        return float(np.mean(pred.predictions == task.query_labels)), pred

    out = _map(one, list(tasks), workers)
    tasks = list(tasks)
    return ClassificationEval(float(np.mean([a for a, _ in out])),
                              np.array([a for a, _ in out]),
                              [p.means for _, p in out], [p.probs for _, p in out],
                              [t.query_labels for t in tasks])
