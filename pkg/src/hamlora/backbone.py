"""Frozen base network and its two forward-pass regimes.

The backbone is a small MLP: linear layers with ReLU between them and a
linear classification head that grows as classes arrive. Hidden-layer
weights and biases never change after construction; only the head and the
adapters riding on the hidden layers carry learnable state.

During training each adapted layer computes

    z = x W0^T + sum_j alpha_Gj (x A_Gj^T) B_Gj^T + alpha (x A^T) B^T + bias

i.e. the frozen weight plus every frozen group adapter scaled by its group
factor plus the current task adapter scaled by its own factor. The final
(merged) regime instead folds a single per-layer delta into the frozen
weight and runs a plain forward.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .adapters import GroupRegistry, TaskAdapter
from .errors import InputError, ShapeError
from .tensorops import Matrix, RngState, require_finite


@dataclass
class ForwardContext:
    """What rides on top of the frozen backbone in a training-time forward.

    Group matrices are always frozen; group_alphas_trainable marks whether
    the group scaling factors belong to the trainable set (they do during
    task training, not during evaluation).
    """

    registry: GroupRegistry | None = None
    current: TaskAdapter | None = None
    group_alphas_trainable: bool = False

    def groups(self):
        return self.registry.groups if self.registry is not None else []


@dataclass
class LayerCache:
    inputs: np.ndarray  # (n, k) input to this layer
    pre: np.ndarray  # (n, d) pre-activation
    current_proj: np.ndarray | None  # (n, r) = inputs @ a^T for the current adapter
    current_contrib: np.ndarray | None  # (n, d) unscaled current-adapter output
    group_contribs: list[np.ndarray]  # per group, (n, d) unscaled output


@dataclass
class ForwardCache:
    layers: list[LayerCache]
    features: np.ndarray  # (n, H) input to the head
    logits: np.ndarray  # (n, C)


def _promote(x, dim: int):
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
        was_vector = True
    elif arr.ndim == 2:
        was_vector = False
    else:
        raise ShapeError(f"input must be a vector or a batch, got ndim={arr.ndim}")
    if arr.shape[1] != dim:
        raise ShapeError(f"input dimension {arr.shape[1]} does not match backbone {dim}")
    return arr, was_vector


class FrozenBackbone:
    """Fixed MLP weights plus an expandable classification head."""

    def __init__(self, layers: list[tuple[Matrix, np.ndarray]], feature_dim: int, rng: RngState):
        self.layers = []
        for w, bias in layers:
            w = np.array(w, dtype=np.float64)
            bias = np.array(bias, dtype=np.float64)
            if bias.shape != (w.shape[0],):
                raise ShapeError(f"bias shape {bias.shape} does not match weight {w.shape}")
            w.setflags(write=False)
            bias.setflags(write=False)
            self.layers.append((w, bias))
        self.feature_dim = feature_dim
        self.head_w = np.zeros((0, feature_dim))
        self.head_b = np.zeros((0,))
        self._rng = rng

    @classmethod
    def build(
        cls,
        input_dim: int,
        hidden_dims: list[int],
        rng: RngState,
        weight_scale: float = 1.5,
    ) -> "FrozenBackbone":
        """Random frozen features: He-scaled weights times weight_scale, zero
        biases.

        weight_scale > 1 keeps the frozen features dominant over adapter
        perturbations, which is what keeps per-task heads calibrated once
        everything is evaluated through a single merged model (the analog of
        adapting a strong pre-trained network rather than a weak one).
        """
        layers = []
        fan_in = input_dim
        for width in hidden_dims:
            w = rng.normal((width, fan_in), std=weight_scale * np.sqrt(2.0 / fan_in))
            layers.append((w, np.zeros(width)))
            fan_in = width
        return cls(layers, feature_dim=fan_in, rng=rng)

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def num_classes_seen(self) -> int:
        return self.head_w.shape[0]

    def layer_shapes(self) -> list[tuple[int, int]]:
        """(d, k) of every adapted layer, in forward order."""
        return [(w.shape[0], w.shape[1]) for w, _ in self.layers]

    def expand_head(self, new_classes: int) -> None:
        """Append rows for newly arrived classes; existing rows untouched."""
        if new_classes < 1:
            raise InputError(f"expand_head needs at least one class, got {new_classes}")
        rows = self._rng.normal((new_classes, self.feature_dim), std=0.02)
        self.head_w = np.concatenate([self.head_w, rows], axis=0)
        self.head_b = np.concatenate([self.head_b, np.zeros(new_classes)])

    def frozen_checksum(self) -> str:
        """Digest over all frozen weights and biases; stable across a run."""
        h = hashlib.sha256()
        for w, bias in self.layers:
            h.update(w.tobytes())
            h.update(bias.tobytes())
        return h.hexdigest()

    def _check_adapter_layer(self, idx: int, layer) -> None:
        d, k = self.layers[idx][0].shape
        if layer.out_dim != d or layer.in_dim != k:
            raise ShapeError(
                f"adapter layer {idx} is ({layer.out_dim}, {layer.in_dim}), "
                f"backbone layer is ({d}, {k})"
            )

    def forward_train(self, x, ctx: ForwardContext):
        """Training-time forward. Returns (logits, cache).

        The cache records, per layer, the input, the pre-activation, and the
        unscaled contribution of each adapter source, which is exactly what
        the backward pass needs.
        """
        X, was_vector = _promote(x, self.input_dim)
        groups = ctx.groups()
        u = X
        layer_caches = []
        for idx, (w, bias) in enumerate(self.layers):
            z = u @ w.T + bias
            group_contribs = []
            for g in groups:
                la = g.layers[idx]
                self._check_adapter_layer(idx, la)
                contrib = (u @ la.a.T) @ la.b.T
                z = z + g.alpha_g * contrib
                group_contribs.append(contrib)
            cur_proj = cur_contrib = None
            if ctx.current is not None:
                la = ctx.current.layers[idx]
                self._check_adapter_layer(idx, la)
                cur_proj = u @ la.a.T
                cur_contrib = cur_proj @ la.b.T
                z = z + ctx.current.alpha * cur_contrib
            layer_caches.append(LayerCache(u, z, cur_proj, cur_contrib, group_contribs))
            u = np.maximum(z, 0.0)
        logits = u @ self.head_w.T + self.head_b
        require_finite(logits, "logits")
        cache = ForwardCache(layer_caches, features=u, logits=logits)
        return (logits[0] if was_vector else logits), cache

    def forward_final(self, x, layer_deltas: list[Matrix]):
        """Plain forward with per-layer deltas folded into the frozen weights."""
        X, was_vector = _promote(x, self.input_dim)
        if len(layer_deltas) != len(self.layers):
            raise ShapeError(
                f"{len(layer_deltas)} deltas for {len(self.layers)} layers"
            )
        u = X
        for (w, bias), delta in zip(self.layers, layer_deltas):
            delta = np.asarray(delta, dtype=np.float64)
            if delta.shape != w.shape:
                raise ShapeError(f"delta shape {delta.shape} does not match layer {w.shape}")
            z = u @ (w + delta).T + bias
            u = np.maximum(z, 0.0)
        logits = u @ self.head_w.T + self.head_b
        return logits[0] if was_vector else logits
