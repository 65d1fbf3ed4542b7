"""Per-task consolidation: group association, alpha running average,
selective pruning, and intra-group concatenation.

The pipeline runs once after each task is trained: decide which group the
new adapter belongs to (or create one while under the cap), prune the
adapter's factors to the largest magnitudes, then concatenate it into the
group, growing the group rank by the adapter rank and folding the adapter's
alpha into the group's running mean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adapters import AdapterGroup, GroupRegistry, LayerAdapter, TaskAdapter, delta_weight
from .errors import ShapeError
from .tensorops import abs_cosine, magnitude_mask, vectorize

GROUPING_RULES = ("similarity", "orthogonality")


def similarity(adapter: TaskAdapter, group: AdapterGroup, all_layers: bool = False) -> float:
    """Absolute cosine similarity between materialized deltas.

    Uses the last adapted layer only by default; all_layers=True averages
    the per-layer similarities instead (a sensitivity-analysis option).
    """
    if not adapter.layers or not group.layers:
        raise ShapeError("similarity needs at least one layer on both sides")
    indices = range(len(adapter.layers)) if all_layers else [len(adapter.layers) - 1]
    scores = [
        abs_cosine(
            vectorize(delta_weight(adapter.layers[i])),
            vectorize(delta_weight(group.layers[i])),
        )
        for i in indices
    ]
    return float(np.mean(scores))


@dataclass(frozen=True)
class GroupDecision:
    """Outcome of group association: join an existing group or create one."""

    create_new: bool
    group_id: int | None
    similarities: tuple[float, ...]


def assign_group(
    adapter: TaskAdapter,
    registry: GroupRegistry,
    rule: str = "similarity",
    all_layers: bool = False,
) -> GroupDecision:
    """Pick the group for a freshly trained adapter.

    similarity rule: join the most similar group when its score clears
    tau_sim; otherwise create a group while under g_max; at the cap, join
    the most similar group regardless of the threshold. The orthogonality
    rule inverts both the argmax and the threshold direction, grouping the
    least similar adapters together.
    """
    if rule not in GROUPING_RULES:
        raise ShapeError(f"unknown grouping rule {rule!r}")
    if not registry.groups:
        return GroupDecision(create_new=True, group_id=None, similarities=())
    sims = tuple(similarity(adapter, g, all_layers) for g in registry.groups)
    if rule == "similarity":
        best = int(np.argmax(sims))
        clears = sims[best] >= registry.tau_sim
    else:
        best = int(np.argmin(sims))
        clears = sims[best] <= registry.tau_sim
    if clears or len(registry.groups) >= registry.g_max:
        return GroupDecision(create_new=False, group_id=registry.groups[best].group_id,
                             similarities=sims)
    return GroupDecision(create_new=True, group_id=None, similarities=sims)


def update_group_alpha(group: AdapterGroup, alpha_j: float) -> None:
    """Fold a member alpha into the group's running mean.

    A just-created group (member_count == 0) simply takes the member's
    alpha; otherwise alpha_g += (alpha_j - alpha_g) / (count + 1), which
    keeps alpha_g the arithmetic mean of every alpha ever inserted.
    """
    if group.member_count == 0:
        group.alpha_g = float(alpha_j)
    else:
        group.alpha_g = group.alpha_g + (alpha_j - group.alpha_g) / (group.member_count + 1)
    group.member_count += 1


def prune(adapter: TaskAdapter, keep_fraction: float) -> TaskAdapter:
    """Zero all but the top-ceil(k*n) magnitudes of each factor matrix.

    Each b and each a is pruned independently with its own threshold;
    shapes and alpha are unchanged.
    """
    layers = [
        LayerAdapter(
            l.b * magnitude_mask(l.b, keep_fraction),
            l.a * magnitude_mask(l.a, keep_fraction),
        )
        for l in adapter.layers
    ]
    return TaskAdapter(task_id=adapter.task_id, layers=layers, alpha=adapter.alpha)


def concat_into_group(group: AdapterGroup, pruned: TaskAdapter) -> None:
    """Absorb a pruned adapter: widen b, stack a, update alpha and membership.

    Concatenating [b_G, b] with [a_G; a] makes the group delta the exact sum
    of member deltas, while the group rank grows by the member's rank.
    """
    if not group.layers:
        group.layers = [l.copy() for l in pruned.layers]
    else:
        if len(group.layers) != len(pruned.layers):
            raise ShapeError(
                f"group has {len(group.layers)} layers, adapter has {len(pruned.layers)}"
            )
        merged = []
        for gl, pl in zip(group.layers, pruned.layers):
            if gl.out_dim != pl.out_dim or gl.in_dim != pl.in_dim:
                raise ShapeError(
                    f"layer dims ({gl.out_dim}, {gl.in_dim}) vs ({pl.out_dim}, {pl.in_dim})"
                )
            merged.append(
                LayerAdapter(
                    np.concatenate([gl.b, pl.b], axis=1),
                    np.concatenate([gl.a, pl.a], axis=0),
                )
            )
        group.layers = merged
    update_group_alpha(group, pruned.alpha)
    group.member_task_ids.append(pruned.task_id)


def ham_consolidate(
    adapter: TaskAdapter,
    registry: GroupRegistry,
    keep_fraction: float,
    rule: str = "similarity",
    all_layers: bool = False,
) -> GroupDecision:
    """Run the full consolidation step for one freshly trained adapter.

    Association happens on the unpruned adapter; pruning is applied after
    the group is chosen, then the pruned adapter is concatenated in.
    """
    decision = assign_group(adapter, registry, rule=rule, all_layers=all_layers)
    if decision.create_new:
        group = AdapterGroup(group_id=len(registry.groups))
        registry.groups.append(group)
    else:
        group = next(g for g in registry.groups if g.group_id == decision.group_id)
    pruned_adapter = prune(adapter, keep_fraction)
    concat_into_group(group, pruned_adapter)
    return decision
