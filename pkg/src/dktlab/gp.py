"""Exact GP inference: marginal likelihood, posterior, and the per-task DKT loss."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .kernels import (KernelSpec, GramMatrix, add_noise_and_jitter, features, latent_diag, latent_gram,
                      prepare_features)
from .tasks import ClassificationTask, RegressionTask

JITTER_SCHEDULE = (1e-6, 1e-4, 1e-2)
LOG_2PI = math.log(2.0 * math.pi)


class CholeskyFailure(RuntimeError):
    """Factorization failed at every jitter level."""


@dataclass
class Posterior:
    mean: np.ndarray
    cov: np.ndarray
    includes_noise: bool = False

    @property
    def variance(self) -> np.ndarray:
        return np.maximum(np.diag(self.cov), 0.0)


@dataclass
class LabelEncoding:
    targets: np.ndarray
    class_count: int


def encode_labels(labels, n_classes: int) -> LabelEncoding:
    """One-versus-rest +/-1 targets, one column per class."""
    labels = np.asarray(labels, dtype=int).ravel()
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    targets = -np.ones((labels.size, n_classes))
    targets[np.arange(labels.size), labels] = 1.0
    return LabelEncoding(targets, n_classes)


def log_marginal_likelihood(k_noisy: Tensor, y) -> Tensor:
    """log N(y | 0, K), summed over the columns of ``y`` when it is a matrix."""
    return lml_from_cholesky(ad.cholesky(k_noisy), y)


def lml_from_cholesky(L: Tensor, y) -> Tensor:
    y = y if isinstance(y, Tensor) else Tensor(y)
    n, c = y.shape
    alpha = ad.solve_cholesky(L, y)
    fit = ad.tsum(y * alpha)
    return -0.5 * fit - (0.5 * c) * ad.logdet_from_chol(L) - 0.5 * n * c * LOG_2PI


def factorize(gram_self: GramMatrix, kernel: KernelSpec, schedule=JITTER_SCHEDULE):
    """Add noise and jitter, escalating the jitter until Cholesky succeeds."""
    last = None
    for jitter in schedule:
        k = add_noise_and_jitter(gram_self, kernel, jitter)
        try:
            return k, ad.cholesky(k), jitter
        except ad.NotPositiveDefinite as exc:
            last = exc
    raise CholeskyFailure(f"Cholesky failed up to jitter {schedule[-1]}: {last}")


def posterior(k_train_noisy, k_cross, k_test, y, with_noise: bool = False,
              noise: float = 0.0) -> Posterior:
    """Gaussian conditioning of test values on noisy training targets."""
    k_test = np.asarray(getattr(k_test, "values", k_test), dtype=np.float64)
    m = k_test.shape[0]
    y = np.asarray(getattr(y, "values", y), dtype=np.float64).reshape(-1, 1)
    if y.shape[0] == 0:
        cov = k_test.copy()
        mean = np.zeros(m)
    else:
        L = ad.cholesky(k_train_noisy if isinstance(k_train_noisy, Tensor) else Tensor(k_train_noisy))
        kc = Tensor(getattr(k_cross, "values", k_cross))
        mean = (kc.values.T @ ad.solve_cholesky(L, Tensor(y)).values).ravel()
        v = ad.solve_cholesky(L, kc).values
        cov = k_test - kc.values.T @ v
        cov = 0.5 * (cov + cov.T)
    if with_noise:
        cov = cov + noise * np.eye(m)
    return Posterior(mean, cov, with_noise)


def _column(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(-1, 1) if x.ndim == 1 else x


def task_features(kernel: KernelSpec, backbone, x) -> Tensor:
    """Backbone features of a whole batch with batch-level preparation applied."""
    return prepare_features(kernel, features(backbone, Tensor(_column(x))))


def dkt_task_loss(kernel: KernelSpec, backbone, task) -> Tensor:
    """Negative log marginal likelihood over support and query pooled."""
    if isinstance(task, ClassificationTask):
        x, y = task.x, encode_labels(task.labels, task.ways).targets
    elif isinstance(task, RegressionTask):
        x, y = task.x, task.y.reshape(-1, 1)
    else:
        raise TypeError(f"unsupported task type {type(task).__name__}")
    if len(x) == 0:
        raise ValueError("task is empty")
    h = task_features(kernel, backbone, x)
    g = GramMatrix(latent_gram(kernel, h, h), True)
    _, L, _ = factorize(g, kernel)
    return -lml_from_cholesky(L, y)


def _blocks(kernel: KernelSpec, backbone, xs, xq, need_test: bool = True):
    xs, xq = _column(xs), _column(xq)
    h = task_features(kernel, backbone, np.vstack([xs, xq]))
    n = xs.shape[0]
    hs, hq = ad.rows(h, 0, n), ad.rows(h, n, h.shape[0])
    k_ss = GramMatrix(latent_gram(kernel, hs, hs), True)
    if need_test == "diag":
        k_qq = np.diag(latent_diag(kernel, hq))
    else:
        k_qq = latent_gram(kernel, hq, hq).values if need_test else None
    return k_ss, latent_gram(kernel, hs, hq), k_qq


def predict_regression(kernel: KernelSpec, backbone, support_x, support_y, query_x,
                       with_noise: bool = True, full_cov: bool = True) -> Posterior:
    """Predictive distribution at ``query_x`` conditioned on the support set only.

    With ``full_cov=False`` only the marginal variances are computed and
    ``cov`` is returned as a diagonal matrix.
    """
    xs = _column(support_x)
    if xs.shape[0] == 0:
        raise ValueError("support set is empty")
    xq = _column(query_x)
    noise = kernel.constrained("noise")
    if xq.shape[0] == 0:
        return Posterior(np.zeros(0), np.zeros((0, 0)), with_noise)
    k_ss, k_sq, k_qq = _blocks(kernel, backbone, xs, xq, need_test=True if full_cov else "diag")
    k, L, _ = factorize(k_ss, kernel)
    y = np.asarray(support_y, dtype=np.float64).reshape(-1, 1)
    mean = (k_sq.values.T @ ad.solve_cholesky(L, Tensor(y)).values).ravel()
    v = ad.solve_cholesky(L, k_sq).values
    if full_cov:
        cov = k_qq - k_sq.values.T @ v
        cov = 0.5 * (cov + cov.T)
    else:
        cov = np.diag(np.diag(k_qq) - np.einsum("ij,ij->j", k_sq.values, v))
    if with_noise:
        cov = cov + noise * np.eye(cov.shape[0])
    return Posterior(mean, cov, with_noise)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


@dataclass
class ClassPrediction:
    means: np.ndarray        # m x C posterior means (pre-sigmoid)
    sigmoids: np.ndarray     # m x C, each in (0, 1)
    probs: np.ndarray        # sigmoids renormalized per row
    predictions: np.ndarray  # argmax of the sigmoids


def classify(kernel: KernelSpec, backbone, support_x, support_labels, query_x,
             n_classes: int | None = None) -> ClassPrediction:
    labels = np.asarray(support_labels, dtype=int)
    C = n_classes if n_classes is not None else int(labels.max()) + 1
    missing = sorted(set(range(C)) - set(labels.tolist()))
    if missing:
        raise ValueError(f"support has no examples of classes {missing}")
    Y = encode_labels(labels, C).targets
    k_ss, k_sq, _ = _blocks(kernel, backbone, support_x, query_x, need_test=False)
    k, L, _ = factorize(k_ss, kernel)
    means = k_sq.values.T @ ad.solve_cholesky(L, Tensor(Y)).values
    sig = sigmoid(means)
    probs = sig / sig.sum(axis=1, keepdims=True)
    return ClassPrediction(means, sig, probs, np.argmax(sig, axis=1))
