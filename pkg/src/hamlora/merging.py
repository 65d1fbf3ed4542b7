"""Final consolidation of adapters into a single per-layer delta, plus the
baseline merge operations (linear, TIES, DARE-TIES) used for comparison.

All merge operations are pure: they never mutate their inputs and are
deterministic given their arguments (DARE takes an explicit seed).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adapters import GroupRegistry, delta_weight
from .backbone import FrozenBackbone
from .errors import ConfigError, ShapeError, StateError
from .tensorops import Matrix, RngState, as_matrix, magnitude_mask

MERGE_ALGORITHMS = ("ham", "linear", "ties", "dare_ties")


@dataclass
class MergedDelta:
    """Per-layer merged weight delta plus provenance.

    When the merge is linear in its inputs (ham/linear), `factors` carries an
    exact low-rank factorization of each layer delta: the concatenation of
    the scaled member b factors against the stacked a factors. Nonlinear
    merges (ties, dare_ties) leave factors as None.
    """

    layer_deltas: list[Matrix]
    provenance: list[tuple[int, float]]  # (source id, alpha at merge time)
    factors: list[tuple[Matrix, Matrix]] | None = None


def merge_ham(registry: GroupRegistry) -> MergedDelta:
    """Equal-weight average of alpha-scaled group deltas:
    (1/M) * sum_i alpha_Gi * b_Gi a_Gi per layer."""
    if not registry.groups:
        raise StateError("cannot merge an empty registry")
    m = len(registry.groups)
    n_layers = len(registry.groups[0].layers)
    deltas = []
    factors = []
    for idx in range(n_layers):
        acc = np.zeros_like(delta_weight(registry.groups[0].layers[idx]))
        for g in registry.groups:
            acc = acc + g.alpha_g * delta_weight(g.layers[idx])
        deltas.append(acc / m)
        factors.append(
            (
                np.concatenate([(g.alpha_g / m) * g.layers[idx].b for g in registry.groups], axis=1),
                np.concatenate([g.layers[idx].a for g in registry.groups], axis=0),
            )
        )
    provenance = [(g.group_id, g.alpha_g) for g in registry.groups]
    return MergedDelta(deltas, provenance, factors)


def _check_same_shapes(deltas: list[Matrix]) -> list[Matrix]:
    if not deltas:
        raise ConfigError("merge needs at least one delta")
    deltas = [as_matrix(d) for d in deltas]
    shape = deltas[0].shape
    for d in deltas[1:]:
        if d.shape != shape:
            raise ShapeError(f"delta shapes differ: {shape} vs {d.shape}")
    return deltas


def merge_linear(deltas: list[Matrix], weights: list[float]) -> Matrix:
    """Parameter-wise weighted average: sum(w_i * d_i) / sum(w_i)."""
    deltas = _check_same_shapes(deltas)
    if len(weights) != len(deltas):
        raise ConfigError(f"{len(weights)} weights for {len(deltas)} deltas")
    total = float(sum(weights))
    if total == 0.0:
        raise ConfigError("merge weights sum to zero")
    acc = np.zeros_like(deltas[0])
    for w, d in zip(weights, deltas):
        acc = acc + w * d
    return acc / total


def merge_ties(deltas: list[Matrix], trim_fraction: float = 0.2, lam: float = 1.0) -> Matrix:
    """Trim, elect signs, disjoint-mean.

    1. Each delta keeps only its top-trim_fraction magnitudes.
    2. Per entry, the elected sign is the sign of the summed trimmed values.
    3. Only trimmed values agreeing with the elected sign are averaged
       (divided by the number of agreeing values, not by all deltas), then
       scaled by lam. Entries whose trimmed sum is exactly zero come out zero.
    """
    deltas = _check_same_shapes(deltas)
    if not 0.0 < trim_fraction <= 1.0:
        raise ConfigError(f"trim_fraction must be in (0, 1], got {trim_fraction}")
    trimmed = [d * magnitude_mask(d, trim_fraction) for d in deltas]
    elected = np.sign(sum(trimmed))
    agree_sum = np.zeros_like(deltas[0])
    agree_count = np.zeros_like(deltas[0])
    for t in trimmed:
        agrees = (np.sign(t) == elected) & (t != 0.0)
        agree_sum += np.where(agrees, t, 0.0)
        agree_count += agrees
    return lam * agree_sum / np.maximum(agree_count, 1.0)


def dare_mask(delta: Matrix, drop_prob: float, rng: RngState) -> Matrix:
    """Random drop with rescale: zero entries with probability p, scale
    survivors by 1/(1-p) so the result is unbiased in expectation."""
    if not 0.0 <= drop_prob < 1.0:
        raise ConfigError(f"drop_prob must be in [0, 1), got {drop_prob}")
    delta = as_matrix(delta)
    keep = rng.random(delta.shape) >= drop_prob
    return delta * keep / (1.0 - drop_prob)


def merge_dare_ties(
    deltas: list[Matrix],
    drop_prob: float,
    lam: float = 1.0,
    seed: int = 0,
    trim_fraction: float = 1.0,
) -> Matrix:
    """DARE's drop-and-rescale on each delta, then the TIES sign election
    and disjoint mean. With drop_prob = 0 this reduces exactly to
    merge_ties at the same trim_fraction."""
    deltas = _check_same_shapes(deltas)
    rng = RngState(seed)
    masked = [dare_mask(d, drop_prob, rng) for d in deltas]
    return merge_ties(masked, trim_fraction=trim_fraction, lam=lam)


def merge_sources(
    sources: list[tuple[int, float, list]],
    algorithm: str,
    *,
    ties_trim_fraction: float = 0.2,
    dare_drop_prob: float = 0.5,
    lam: float = 1.0,
    seed: int = 0,
) -> MergedDelta:
    """Merge a list of (source_id, alpha, layers) into one MergedDelta.

    Every algorithm consumes the alpha-scaled materialized deltas; ham and
    linear coincide (equal-weight mean) and produce an exact factorization,
    ties and dare_ties are nonlinear and produce dense deltas only.
    """
    if algorithm not in MERGE_ALGORITHMS:
        raise ConfigError(f"unknown merge algorithm {algorithm!r}")
    if not sources:
        raise StateError("cannot merge zero sources")
    m = len(sources)
    n_layers = len(sources[0][2])
    deltas = []
    factors = [] if algorithm in ("ham", "linear") else None
    for idx in range(n_layers):
        if any(len(layers) != n_layers for (_, _, layers) in sources):
            raise ShapeError("sources disagree on the number of adapted layers")
        scaled = _check_same_shapes(
            [alpha * delta_weight(layers[idx]) for (_, alpha, layers) in sources]
        )
        if algorithm in ("ham", "linear"):
            acc = np.zeros_like(scaled[0])
            for s in scaled:
                acc = acc + s
            deltas.append(acc / m)
            factors.append(
                (
                    np.concatenate([(alpha / m) * layers[idx].b for (_, alpha, layers) in sources], axis=1),
                    np.concatenate([layers[idx].a for (_, alpha, layers) in sources], axis=0),
                )
            )
        elif algorithm == "ties":
            deltas.append(merge_ties(scaled, trim_fraction=ties_trim_fraction, lam=lam))
        else:
            deltas.append(
                merge_dare_ties(scaled, drop_prob=dare_drop_prob, lam=lam, seed=seed + idx)
            )
    provenance = [(sid, alpha) for (sid, alpha, _) in sources]
    return MergedDelta(deltas, provenance, factors)


class FinalModel:
    """Evaluation view: frozen backbone with the merged delta folded in.

    Snapshots the effective weights and the head at construction time, so
    the view stays valid even if the backbone's head grows afterwards.
    """

    def __init__(self, backbone: FrozenBackbone, merged: MergedDelta):
        if len(merged.layer_deltas) != len(backbone.layers):
            raise ShapeError(
                f"{len(merged.layer_deltas)} deltas for {len(backbone.layers)} layers"
            )
        self._weights = []
        for (w, bias), delta in zip(backbone.layers, merged.layer_deltas):
            delta = as_matrix(delta)
            if delta.shape != w.shape:
                raise ShapeError(f"delta {delta.shape} does not match layer {w.shape}")
            self._weights.append((w + delta, bias.copy()))
        self._head_w = backbone.head_w.copy()
        self._head_b = backbone.head_b.copy()

    @property
    def num_classes(self) -> int:
        return self._head_w.shape[0]

    def logits(self, x) -> np.ndarray:
        u = np.atleast_2d(np.asarray(x, dtype=np.float64))
        for w, bias in self._weights:
            u = np.maximum(u @ w.T + bias, 0.0)
        out = u @ self._head_w.T + self._head_b
        return out[0] if np.asarray(x).ndim == 1 else out


def finalize(backbone: FrozenBackbone, merged: MergedDelta) -> FinalModel:
    """Build the single evaluation model: frozen weights plus merged delta."""
    return FinalModel(backbone, merged)
