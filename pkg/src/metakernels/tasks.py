"""Synthetic few-shot regression tasks: Gaussian clusters, quadratic labels.

Each task draws a center mu ~ N(0, I_d) and a spread nu ~ Unif(low, high),
samples points x ~ N(mu, nu^2 I), and labels them y = nu * ||x - mu||^2.
Labels are computed from the raw points; kernel computations consume the
row-normalized copies, so both views are kept.

Randomness is organized as one named stream per task (a SeedSequence spawn
key), so adding tasks or points never reshuffles the draws of other tasks.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, replace

import numpy as np

from .composite import TestTask, TrainingSet
from .kernels import normalize_inputs

__all__ = [
    "TaskDistributionConfig",
    "SyntheticTrainingSet",
    "SyntheticTestTask",
    "sample_training_set",
    "sample_test_task",
    "save_tasks",
    "load_tasks",
]

_TRAIN_STREAM = 0
_TEST_STREAM = 1
_FLOAT_FMT = "%.17g"  # round-trips float64 exactly


@dataclass(frozen=True)
class TaskDistributionConfig:
    input_dim: int = 10
    num_train_tasks: int = 20
    points_per_task: int = 10
    support_size: int = 5
    query_size: int = 10
    nu_range: tuple = (1.3, 1.6)
    seed: int = 0

    def __post_init__(self):
        for name in ("input_dim", "num_train_tasks", "points_per_task",
                     "support_size", "query_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        low, high = self.nu_range
        if not low < high:
            raise ValueError(f"nu_range must satisfy low < high, got {self.nu_range}")
        object.__setattr__(self, "nu_range", (float(low), float(high)))


@dataclass(frozen=True)
class SyntheticTrainingSet:
    """A TrainingSet plus the raw (unnormalized) points and task parameters."""

    train: TrainingSet
    raw_xs: tuple
    mus: tuple
    nus: tuple


@dataclass(frozen=True)
class SyntheticTestTask:
    task: TestTask
    raw_query: np.ndarray
    raw_support: np.ndarray
    mu: np.ndarray
    nu: float


def _stream(seed: int, kind: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(kind, index)))


def _draw_task(rng, n_points: int, config: TaskDistributionConfig):
    d = config.input_dim
    mu = rng.standard_normal(d)
    nu = rng.uniform(*config.nu_range)
    x = mu + nu * rng.standard_normal((n_points, d))
    y = nu * ((x - mu) ** 2).sum(axis=1)
    return mu, nu, x, y


def sample_training_set(config: TaskDistributionConfig) -> SyntheticTrainingSet:
    """Draw N training tasks, each from its own seed stream."""
    xs, ys, raws, mus, nus = [], [], [], [], []
    for i in range(config.num_train_tasks):
        rng = _stream(config.seed, _TRAIN_STREAM, i)
        mu, nu, x, y = _draw_task(rng, config.points_per_task, config)
        raws.append(x)
        xs.append(normalize_inputs(x))
        ys.append(y)
        mus.append(mu)
        nus.append(nu)
    return SyntheticTrainingSet(
        train=TrainingSet(xs=tuple(xs), ys=tuple(ys)),
        raw_xs=tuple(raws),
        mus=tuple(mus),
        nus=tuple(nus),
    )


def sample_test_task(config: TaskDistributionConfig, task_seed: int) -> SyntheticTestTask:
    """Draw one unseen task: fresh (mu, nu), support and query point sets."""
    rng = _stream(config.seed, _TEST_STREAM, task_seed)
    d = config.input_dim
    mu = rng.standard_normal(d)
    nu = rng.uniform(*config.nu_range)
    support = mu + nu * rng.standard_normal((config.support_size, d))
    query = mu + nu * rng.standard_normal((config.query_size, d))
    support_y = nu * ((support - mu) ** 2).sum(axis=1)
    query_y = nu * ((query - mu) ** 2).sum(axis=1)
    return SyntheticTestTask(
        task=TestTask(
            query_x=normalize_inputs(query),
            query_y=query_y,
            support_x=normalize_inputs(support),
            support_y=support_y,
        ),
        raw_query=query,
        raw_support=support,
        mu=mu,
        nu=nu,
    )


def save_tasks(path, training: SyntheticTrainingSet, test_tasks=(), test_ids=None):
    """Write tasks as plain-text rows: task id, role, d input columns, label.

    Raw (unnormalized) points are stored; loading re-normalizes.  Floats are
    printed with 17 significant digits so the round trip is exact.
    """
    d = training.train.dim
    buf = io.StringIO()
    header = ["task_id", "role"] + [f"x{j}" for j in range(d)] + ["label"]
    buf.write(",".join(header) + "\n")

    def write_rows(task_id, role, x, y):
        for row, label in zip(x, y):
            cells = [str(task_id), role]
            cells += [_FLOAT_FMT % v for v in row]
            cells.append(_FLOAT_FMT % label)
            buf.write(",".join(cells) + "\n")

    for i, (x, y) in enumerate(zip(training.raw_xs, training.train.ys)):
        write_rows(i, "train", x, y)
    if test_ids is None:
        test_ids = range(len(test_tasks))
    for tid, tt in zip(test_ids, test_tasks):
        write_rows(tid, "support", tt.raw_support, tt.task.support_y)
        write_rows(tid, "query", tt.raw_query, tt.task.query_y)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(buf.getvalue())


def load_tasks(path):
    """Read a task file back into (TrainingSet, {test id: TestTask})."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        if header[:2] != ["task_id", "role"] or header[-1] != "label":
            raise ValueError(f"unrecognized task file header: {header!r}")
        d = len(header) - 3
        rows = {"train": {}, "support": {}, "query": {}}
        for line in fh:
            cells = line.strip().split(",")
            tid, role = int(cells[0]), cells[1]
            if role not in rows:
                raise ValueError(f"unknown role {role!r} in task file")
            x = np.array([float(v) for v in cells[2:2 + d]])
            y = float(cells[2 + d])
            rows[role].setdefault(tid, []).append((x, y))

    def collect(bucket):
        x = np.vstack([r[0] for r in bucket])
        y = np.array([r[1] for r in bucket])
        return x, y

    xs, ys = [], []
    for tid in sorted(rows["train"]):
        x, y = collect(rows["train"][tid])
        xs.append(normalize_inputs(x))
        ys.append(y)
    training = TrainingSet(xs=tuple(xs), ys=tuple(ys)) if xs else None

    tests = {}
    for tid in sorted(rows["query"]):
        qx, qy = collect(rows["query"][tid])
        sx, sy = collect(rows["support"][tid])
        tests[tid] = TestTask(
            query_x=normalize_inputs(qx), query_y=qy,
            support_x=normalize_inputs(sx), support_y=sy,
        )
    return training, tests
