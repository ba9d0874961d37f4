"""Episodic task generation and the line-oriented task record format.

Record format, one task per line, semicolon separated::

    mode;C;K;x_1;...;x_n;y_1;...;y_n

Regression tasks use mode ``train``, ``test_in`` or ``test_out``, C=1 and
K = support size; x values are scalars. Classification tasks use mode
``cls``, x rows are 2-D and written flattened (x1_1;x1_2;x2_1;...), labels
are integers; the first C*K examples are the support set. Floats are
written with ``repr`` so a round trip is exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

REGRESSION_MODES = ("train", "test_in", "test_out")


def task_rng(seed: int, index: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator keyed by (run seed, stream, task index)."""
    key = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, int(stream), int(index)]).generate_state(2)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass
class RegressionTask:
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    mode: str = "train"
    amplitude: float = float("nan")
    phase: float = float("nan")

    @property
    def x(self) -> np.ndarray:
        return np.concatenate([self.support_x, self.query_x])

    @property
    def y(self) -> np.ndarray:
        return np.concatenate([self.support_y, self.query_y])

    def same_data(self, other: "RegressionTask") -> bool:
        return (self.mode == other.mode
                and all(np.array_equal(getattr(self, f), getattr(other, f))
                        for f in ("support_x", "support_y", "query_x", "query_y")))


@dataclass
class ClassificationTask:
    support_x: np.ndarray        # (C*K, 2)
    support_labels: np.ndarray   # (C*K,) ints in [0, C)
    query_x: np.ndarray
    query_labels: np.ndarray
    ways: int
    shots: int

    @property
    def x(self) -> np.ndarray:
        return np.vstack([self.support_x, self.query_x])

    @property
    def labels(self) -> np.ndarray:
        return np.concatenate([self.support_labels, self.query_labels])

    def same_data(self, other: "ClassificationTask") -> bool:
        return (self.ways == other.ways and self.shots == other.shots
                and all(np.array_equal(getattr(self, f), getattr(other, f))
                        for f in ("support_x", "support_labels", "query_x", "query_labels")))


@dataclass
class SineTaskConfig:
    amplitude_range: tuple[float, float] = (0.1, 5.0)
    phase_range: tuple[float, float] = (0.0, math.pi)
    x_range_train: tuple[float, float] = (-5.0, 5.0)
    x_range_test_out: tuple[float, float] = (-5.0, 10.0)
    noise_sigma: float = 0.1
    n_support: int = 5
    n_query_train: int = 5
    n_query_test: int = 200
    seed: int = 0


def sample_sine_task(config: SineTaskConfig, mode: str, index: int = 0) -> RegressionTask:
    """y = A sin(x + phase) + N(0, noise_sigma^2)."""
    if mode not in REGRESSION_MODES:
        raise ValueError(f"mode must be one of {REGRESSION_MODES}")
    rng = task_rng(config.seed, index, stream=REGRESSION_MODES.index(mode))
    amp = rng.uniform(*config.amplitude_range)
    phase = rng.uniform(*config.phase_range)
    lo, hi = config.x_range_test_out if mode == "test_out" else config.x_range_train
    n_query = config.n_query_train if mode == "train" else config.n_query_test
    xs = rng.uniform(lo, hi, size=config.n_support)
    xq = rng.uniform(lo, hi, size=n_query)
    noise_s = rng.standard_normal(config.n_support) * config.noise_sigma
    noise_q = rng.standard_normal(n_query) * config.noise_sigma
    return RegressionTask(xs, amp * np.sin(xs + phase) + noise_s,
                          xq, amp * np.sin(xq + phase) + noise_q,
                          mode=mode, amplitude=amp, phase=phase)


@dataclass
class SyntheticFamilyConfig:
    """Ring of 2-D Gaussian clusters split into disjoint train/val/test classes."""

    n_classes: int = 100
    spacing: float = 1.0
    within_std: float = 0.25          # in units of the spacing
    split: tuple[int, int, int] = (64, 16, 20)
    split_seed: int = 0
    seed: int = 0

    @property
    def radius(self) -> float:
        return self.n_classes * self.spacing / (2.0 * math.pi)

    def centers(self) -> np.ndarray:
        angles = 2.0 * math.pi * np.arange(self.n_classes) / self.n_classes
        return self.radius * np.column_stack([np.cos(angles), np.sin(angles)])

    def classes(self, split: str) -> np.ndarray:
        if sum(self.split) > self.n_classes:
            raise ValueError("split sizes exceed the class library")
        perm = np.random.default_rng(self.split_seed).permutation(self.n_classes)
        a, b, _ = self.split
        parts = {"train": perm[:a], "val": perm[a:a + b], "test": perm[a + b:sum(self.split)]}
        return np.sort(parts[split])


SPLITS = ("train", "val", "test")


def sample_classification_task(gen: SyntheticFamilyConfig, ways: int, shots: int,
                               query_per_class: int = 16, split: str = "train",
                               index: int = 0) -> ClassificationTask:
    pool = gen.classes(split)
    if ways > pool.size:
        raise ValueError(f"{ways}-way task needs {ways} classes, split {split!r} has {pool.size}")
    rng = task_rng(gen.seed, index, stream=10 + SPLITS.index(split))
    chosen = rng.choice(pool, size=ways, replace=False)
    centers = gen.centers()[chosen]
    std = gen.within_std * gen.spacing

    def draw(count):
        xs = centers[:, None, :] + std * rng.standard_normal((ways, count, 2))
        labels = np.repeat(np.arange(ways), count)
        return xs.reshape(-1, 2), labels

    sx, sl = draw(shots)
    qx, ql = draw(query_per_class)
    return ClassificationTask(sx, sl, qx, ql, ways, shots)


# ---------------------------------------------------------------------------
# records


class RecordError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


def task_to_record(task) -> str:
    if isinstance(task, RegressionTask):
        head = [task.mode, "1", str(task.support_x.size)]
        xs = np.concatenate([task.support_x, task.query_x])
        ys = np.concatenate([task.support_y, task.query_y])
        return ";".join(head + [repr(float(v)) for v in xs] + [repr(float(v)) for v in ys])
    if isinstance(task, ClassificationTask):
        head = ["cls", str(task.ways), str(task.shots)]
        xs = task.x.ravel()
        return ";".join(head + [repr(float(v)) for v in xs] + [str(int(v)) for v in task.labels])
    raise TypeError(f"cannot serialize {type(task).__name__}")


def record_to_task(line: str, lineno: int | None = None):
    fields = line.strip().split(";")
    if len(fields) < 3:
        raise RecordError("record needs at least mode;C;K", lineno)
    mode = fields[0]
    try:
        ways, shots = int(fields[1]), int(fields[2])
    except ValueError:
        raise RecordError("C and K must be integers", lineno) from None
    body = fields[3:]
    try:
        if mode in REGRESSION_MODES:
            if len(body) % 2:
                raise RecordError("regression record needs as many y as x values", lineno)
            n = len(body) // 2
            if not 0 < shots <= n:
                raise RecordError("support size out of range", lineno)
            xs = np.array([float(v) for v in body[:n]])
            ys = np.array([float(v) for v in body[n:]])
            return RegressionTask(xs[:shots], ys[:shots], xs[shots:], ys[shots:], mode=mode)
        if mode == "cls":
            if len(body) % 3:
                raise RecordError("classification record needs 2 inputs and 1 label per example", lineno)
            n = len(body) // 3
            s = ways * shots
            if ways < 1 or shots < 1 or s > n:
                raise RecordError("support size out of range", lineno)
            xs = np.array([float(v) for v in body[: 2 * n]]).reshape(n, 2)
            labels = np.array([int(v) for v in body[2 * n:]])
            if labels.size and (labels.min() < 0 or labels.max() >= ways):
                raise RecordError("label out of range", lineno)
            return ClassificationTask(xs[:s], labels[:s], xs[s:], labels[s:], ways, shots)
    except ValueError as exc:
        if isinstance(exc, RecordError):
            raise
        raise RecordError(f"bad number: {exc}", lineno) from None
    raise RecordError(f"unknown mode {mode!r}", lineno)


def write_tasks(path, tasks, header_lines=()) -> None:
    with open(path, "w", newline="\n") as fh:
        for h in header_lines:
            fh.write(f"# {h}\n")
        for t in tasks:
            fh.write(task_to_record(t) + "\n")


def read_tasks(path) -> list:
    tasks = []
    with open(path) as fh:
        for i, line in enumerate(fh, start=1):
            if not line.strip() or line.startswith("#"):
                continue
            tasks.append(record_to_task(line, i))
    return tasks
