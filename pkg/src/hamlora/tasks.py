"""Synthetic class-incremental streams and evaluation over them.

Each class is an isotropic Gaussian around a seeded mean of norm equal to
the configured separation. In clustered mode the class means of related
tasks are drawn around shared super-cluster directions (tasks are assigned
to super-clusters round-robin), which gives similarity-based grouping real
structure to discover; uniform mode draws every class mean independently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError
from .tensorops import RngState

STREAM_MODES = ("clustered", "uniform")


@dataclass
class TaskDataset:
    task_id: int
    class_ids: tuple[int, ...]
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray


@dataclass
class StreamSpec:
    num_tasks: int = 20
    classes_per_task: int = 2
    input_dim: int = 32
    train_per_class: int = 100
    test_per_class: int = 100
    separation: float = 6.0
    mode: str = "clustered"
    num_clusters: int = 2
    cluster_spread: float = 0.3  # task-direction jitter around its super-cluster center
    class_spread: float = 0.75  # class-mean jitter around the task direction
    seed: int = 0

    def validate(self) -> None:
        if self.num_tasks < 1:
            raise ConfigError("num_tasks must be >= 1")
        for name in ("classes_per_task", "input_dim", "train_per_class", "test_per_class"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.separation < 0:
            raise ConfigError("separation must be >= 0")
        if self.mode not in STREAM_MODES:
            raise ConfigError(f"mode must be one of {STREAM_MODES}, got {self.mode!r}")
        if self.num_clusters < 1:
            raise ConfigError("num_clusters must be >= 1")
        if self.cluster_spread < 0:
            raise ConfigError("cluster_spread must be >= 0")
        if self.class_spread < 0:
            raise ConfigError("class_spread must be >= 0")


def _unit(v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v)
    return v / norm if norm > 0 else v


def generate_stream(spec: StreamSpec) -> list[TaskDataset]:
    """Deterministic stream of tasks with disjoint class id ranges.

    Clustered mode is two-level: every task gets a direction near its
    (round-robin assigned) super-cluster center, and each class mean sits
    near the task direction. Tasks sharing a super-cluster therefore pose
    related problems while their classes stay mutually separable.
    """
    spec.validate()
    rng = RngState(spec.seed)
    if spec.mode == "clustered":
        centers = [_unit(rng.normal(spec.input_dim)) for _ in range(spec.num_clusters)]
    stream = []
    next_class = 0
    for t in range(spec.num_tasks):
        class_ids = tuple(range(next_class, next_class + spec.classes_per_task))
        next_class += spec.classes_per_task
        if spec.mode == "clustered":
            task_dir = _unit(
                centers[t % spec.num_clusters]
                + spec.cluster_spread * rng.normal(spec.input_dim)
            )
        else:
            task_dir = _unit(rng.normal(spec.input_dim))
        train_parts, test_parts = [], []
        for cid in class_ids:
            direction = _unit(task_dir + spec.class_spread * rng.normal(spec.input_dim))
            mean = spec.separation * direction
            n = spec.train_per_class + spec.test_per_class
            samples = mean + rng.normal((n, spec.input_dim))
            train_parts.append((samples[: spec.train_per_class], cid))
            test_parts.append((samples[spec.train_per_class :], cid))
        train_x = np.concatenate([x for x, _ in train_parts])
        train_y = np.concatenate([np.full(len(x), cid) for x, cid in train_parts])
        test_x = np.concatenate([x for x, _ in test_parts])
        test_y = np.concatenate([np.full(len(x), cid) for x, cid in test_parts])
        stream.append(TaskDataset(t, class_ids, train_x, train_y, test_x, test_y))
    return stream


def evaluate(model, datasets: list[TaskDataset]) -> list[float]:
    """Top-1 accuracy per task over all classes the model knows.

    Prediction never sees the task identity; task_id only buckets the
    accuracies. Raises InputError if a dataset contains a class id the
    model's head does not cover.
    """
    accuracies = []
    for ds in datasets:
        if len(ds.test_y) and int(np.max(ds.test_y)) >= model.num_classes:
            raise InputError(
                f"task {ds.task_id} contains class {int(np.max(ds.test_y))}, "
                f"model only covers {model.num_classes} classes"
            )
        logits = model.logits(ds.test_x)
        predictions = np.argmax(logits, axis=1)
        accuracies.append(float(np.mean(predictions == ds.test_y)))
    return accuracies


def export_stream(stream: list[TaskDataset], train_path, test_path) -> None:
    """Columnar text dump, one example per line: task_id, class_id, then the
    input coordinates. Train and test splits go to separate files."""
    for path, split in ((train_path, "train"), (test_path, "test")):
        lines = []
        for ds in stream:
            xs = getattr(ds, f"{split}_x")
            ys = getattr(ds, f"{split}_y")
            for x, y in zip(xs, ys):
                coords = ",".join(repr(float(v)) for v in x)
                lines.append(f"{ds.task_id},{int(y)},{coords}")
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def import_stream(train_path, test_path) -> list[TaskDataset]:
    """Rebuild a stream from the columnar dumps written by export_stream."""

    def read(path):
        per_task: dict[int, list[tuple[int, list[float]]]] = {}
        order: list[int] = []
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                fields = line.split(",")
                task_id, class_id = int(fields[0]), int(fields[1])
                if task_id not in per_task:
                    per_task[task_id] = []
                    order.append(task_id)
                per_task[task_id].append((class_id, [float(v) for v in fields[2:]]))
        return order, per_task

    train_order, train = read(train_path)
    _, test = read(test_path)
    stream = []
    for task_id in train_order:
        train_rows = train[task_id]
        test_rows = test.get(task_id, [])
        class_ids = tuple(sorted({cid for cid, _ in train_rows}))
        stream.append(
            TaskDataset(
                task_id=task_id,
                class_ids=class_ids,
                train_x=np.array([x for _, x in train_rows]),
                train_y=np.array([cid for cid, _ in train_rows]),
                test_x=np.array([x for _, x in test_rows]),
                test_y=np.array([cid for cid, _ in test_rows]),
            )
        )
    return stream
