"""Data model for task adapters, group adapters, and the group registry.

A layer adapter factors a weight delta as b @ a with b of shape (d, r) and
a of shape (r, k); the rank r stays well below min(d, k) for freshly created
task adapters, while group adapters grow their rank by r with every member
they absorb.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .tensorops import Matrix, RngState, as_matrix, matmul


@dataclass
class LayerAdapter:
    """Low-rank factors for one adapted layer: delta weight = b @ a."""

    b: Matrix  # output-side factor, (d, r)
    a: Matrix  # input-side factor, (r, k)

    def __post_init__(self):
        self.b = as_matrix(self.b)
        self.a = as_matrix(self.a)
        if self.b.shape[1] != self.a.shape[0]:
            raise ShapeError(
                f"factor ranks disagree: b is {self.b.shape}, a is {self.a.shape}"
            )

    @property
    def rank(self) -> int:
        return self.b.shape[1]

    @property
    def out_dim(self) -> int:
        return self.b.shape[0]

    @property
    def in_dim(self) -> int:
        return self.a.shape[1]

    def copy(self) -> "LayerAdapter":
        return LayerAdapter(self.b.copy(), self.a.copy())


def delta_weight(layer: LayerAdapter) -> Matrix:
    """Materialize the (d, k) weight delta b @ a."""
    return matmul(layer.b, layer.a)


@dataclass
class TaskAdapter:
    """Per-task adapter: one LayerAdapter per adapted backbone layer plus a
    learnable importance scalar alpha."""

    task_id: int
    layers: list[LayerAdapter]
    alpha: float = 1.0

    def copy(self) -> "TaskAdapter":
        return TaskAdapter(self.task_id, [l.copy() for l in self.layers], self.alpha)


def new_task_adapter(
    task_id: int,
    layer_shapes: list[tuple[int, int]],
    rank: int,
    rng: RngState,
    init_std: float = 0.02,
) -> TaskAdapter:
    """Fresh adapter: b ~ N(0, init_std), a = 0, alpha = 1.

    Zero-initialized a makes the initial delta zero, so training starts from
    the backbone-plus-groups model. Rank must not exceed min(d, k) at
    creation; only concatenation may grow past that.
    """
    layers = []
    for d, k in layer_shapes:
        if rank > min(d, k):
            raise ShapeError(f"rank {rank} exceeds min{d, k} for a fresh adapter")
        b = rng.normal((d, rank), std=init_std)
        a = np.zeros((rank, k))
        layers.append(LayerAdapter(b, a))
    return TaskAdapter(task_id=task_id, layers=layers, alpha=1.0)


@dataclass
class AdapterGroup:
    """Consolidated group adapter with grown rank and a running-mean alpha.

    member_count starts at 0 for a just-created empty group and reaches 1
    with the first insertion; a registry only ever exposes groups that have
    absorbed at least one member.
    """

    group_id: int
    layers: list[LayerAdapter] = field(default_factory=list)
    alpha_g: float = 0.0
    member_count: int = 0
    member_task_ids: list[int] = field(default_factory=list)


@dataclass
class GroupRegistry:
    """Ordered collection of groups, capped at g_max."""

    g_max: int
    tau_sim: float
    groups: list[AdapterGroup] = field(default_factory=list)


def nonzero_parameter_count(adapter: TaskAdapter | AdapterGroup) -> int:
    """Entries with |value| > 0 across all factor matrices."""
    return int(
        sum(np.count_nonzero(l.b) + np.count_nonzero(l.a) for l in adapter.layers)
    )
