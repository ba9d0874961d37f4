"""Regression/classification metrics and temperature calibration."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax


def mse(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    target = np.asarray(target, dtype=np.float64).ravel()
    if pred.shape != target.shape:
        raise ValueError(f"length mismatch: {pred.size} vs {target.size}")
    if pred.size == 0:
        raise ValueError("mse of an empty vector")
    return float(np.mean((pred - target) ** 2))


def accuracy(pred_labels, labels) -> float:
    return float(np.mean(np.asarray(pred_labels) == np.asarray(labels)))


def nll(logits, labels, temperature: float = 1.0) -> float:
    """Mean categorical negative log-likelihood of softmax(logits / T)."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    lp = log_softmax(logits / temperature, axis=1)
    return float(-np.mean(lp[np.arange(labels.size), labels]))


def softmax(logits, temperature: float = 1.0) -> np.ndarray:
    return np.exp(log_softmax(np.asarray(logits, dtype=np.float64) / temperature, axis=1))


def calibrate_temperature(logits, labels, bounds=(-3.0, 3.0), tol: float = 1e-4) -> float:
    """Temperature minimizing the NLL, by golden-section search over log T.

    T = 1 is returned if the search ends up no better than it.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    if logits.ndim != 2 or logits.shape[0] < 1:
        raise ValueError("logits must be a non-empty n x C array")
    if logits.shape[1] < 2:
        raise ValueError("temperature scaling needs at least two classes")
    if labels.shape != (logits.shape[0],):
        raise ValueError("one label per row of logits is required")

    def f(log_t):
        return nll(logits, labels, math.exp(log_t))

    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = bounds
    c, d = b - inv_phi * (b - a), a + inv_phi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = f(d)
    t = math.exp(0.5 * (a + b))
    return t if nll(logits, labels, t) <= nll(logits, labels, 1.0) else 1.0


@dataclass
class CalibrationReport:
    temperature: float
    ece: float
    bin_count: int
    per_bin: list[tuple[float, float, float]]
    nll_before: float = float("nan")
    nll_after: float = float("nan")

    def as_dict(self) -> dict:
        return {
            "temperature": self.temperature,
            "ece": self.ece,
            "bin_count": self.bin_count,
            "per_bin": [list(t) for t in self.per_bin],
            "nll_before": self.nll_before,
            "nll_after": self.nll_after,
        }


def ece(probs, labels, bins: int = 15) -> CalibrationReport:
    """Expected calibration error over equal-width confidence bins (lo, hi]."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    if probs.ndim != 2 or probs.shape[0] != labels.size or probs.shape[0] == 0:
        raise ValueError("probs must be n x C with one label per row")
    if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("rows of probs must be non-negative and sum to 1")
    conf = probs.max(axis=1)
    correct = (probs.argmax(axis=1) == labels).astype(np.float64)
    edges = np.linspace(0.0, 1.0, bins + 1)
    idx = np.clip(np.searchsorted(edges, conf, side="left") - 1, 0, bins - 1)
    n = conf.size
    counts = np.bincount(idx, minlength=bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=bins)
    acc_sum = np.bincount(idx, weights=correct, minlength=bins)
    per_bin = []
    total = 0.0
    for b in range(bins):
        if counts[b] == 0:
            per_bin.append((0.0, 0.0, 0.0))
            continue
        c, a, w = conf_sum[b] / counts[b], acc_sum[b] / counts[b], counts[b] / n
        per_bin.append((float(c), float(a), float(w)))
        total += w * abs(c - a)
    return CalibrationReport(1.0, float(total), bins, per_bin)
