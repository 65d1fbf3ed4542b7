"""Per-task optimization of the current adapter, its alpha, the group alphas,
and the head rows owned by the task's classes.

Gradients are derived by hand for this specific architecture rather than by
a generic autodiff: the trainable set is small and fixed (current adapter
factors, its importance scalar, one scalar per group, head rows for the
task's classes), and a hand-written backward pass keeps the whole run
bit-deterministic. gradient_audit cross-checks every analytic gradient
against central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adapters import GroupRegistry, TaskAdapter, new_task_adapter
from .backbone import ForwardContext, FrozenBackbone
from .errors import InputError, TrainingError
from .tensorops import RngState

TASK_RNG_TAG_BASE = 1000  # task t trains with rng child(TASK_RNG_TAG_BASE + t)


@dataclass
class Gradients:
    """Analytic gradients for the trainable set of one batch."""

    layer_grads: list[tuple[np.ndarray, np.ndarray]]  # per layer (d_b, d_a)
    alpha: float
    group_alphas: list[float]
    head_w: np.ndarray  # (C, H); rows outside the unmasked classes are zero
    head_b: np.ndarray  # (C,)


@dataclass
class TrainReport:
    final_loss: float
    epoch_losses: list[float]
    adapter: TaskAdapter
    group_alphas: list[float]


def softmax_cross_entropy(logits: np.ndarray, targets: np.ndarray, allowed: np.ndarray):
    """Mean cross-entropy over the batch, restricted to the allowed classes.

    Classes outside `allowed` are treated as if their logit were -inf: they
    never enter the softmax and receive zero gradient. Returns
    (loss, d_loss/d_logits) with the gradient already averaged over the batch.
    """
    allowed = np.asarray(allowed, dtype=np.intp)
    n = logits.shape[0]
    position = {int(c): i for i, c in enumerate(allowed)}
    try:
        target_pos = np.array([position[int(y)] for y in targets], dtype=np.intp)
    except KeyError as exc:
        raise InputError(f"target class {exc} is not among the unmasked classes") from exc
    sub = logits[:, allowed]
    sub = sub - sub.max(axis=1, keepdims=True)
    exp = np.exp(sub)
    probs = exp / exp.sum(axis=1, keepdims=True)
    rows = np.arange(n)
    # an underflowed probability yields an infinite loss, which the training
    # loop reports as divergence; no need for numpy to warn about it
    with np.errstate(divide="ignore"):
        loss = float(-np.mean(np.log(probs[rows, target_pos])))
    d_sub = probs.copy()
    d_sub[rows, target_pos] -= 1.0
    d_sub /= n
    d_logits = np.zeros_like(logits)
    d_logits[:, allowed] = d_sub
    return loss, d_logits


def loss_and_gradients(
    backbone: FrozenBackbone,
    x: np.ndarray,
    y: np.ndarray,
    ctx: ForwardContext,
    allowed_classes: np.ndarray | None = None,
):
    """Batched loss plus gradients for the full trainable set.

    The gradient of each group alpha is the inner product of the upstream
    pre-activation gradient with that group's unscaled per-layer contribution,
    summed over layers and the batch; the current adapter's alpha gradient is
    the same inner product against its own contribution.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y)
    if x.shape[0] == 0:
        raise InputError("empty batch")
    if allowed_classes is None:
        allowed_classes = np.arange(backbone.num_classes_seen)
    logits, cache = backbone.forward_train(x, ctx)
    loss, d_logits = softmax_cross_entropy(logits, y, allowed_classes)

    d_head_w = d_logits.T @ cache.features
    d_head_b = d_logits.sum(axis=0)
    d_u = d_logits @ backbone.head_w

    groups = ctx.groups()
    n_layers = len(backbone.layers)
    layer_grads: list = [None] * n_layers
    d_alpha = 0.0
    d_group_alphas = [0.0] * len(groups)

    for idx in range(n_layers - 1, -1, -1):
        lc = cache.layers[idx]
        d_z = d_u * (lc.pre > 0)
        for j, contrib in enumerate(lc.group_contribs):
            d_group_alphas[j] += float(np.sum(d_z * contrib))
        if ctx.current is not None:
            la = ctx.current.layers[idx]
            d_alpha += float(np.sum(d_z * lc.current_contrib))
            d_b = ctx.current.alpha * (d_z.T @ lc.current_proj)
            d_a = ctx.current.alpha * ((d_z @ la.b).T @ lc.inputs)
            layer_grads[idx] = (d_b, d_a)
        if idx > 0:
            w, _ = backbone.layers[idx]
            d_u = d_z @ w
            for j, g in enumerate(groups):
                la = g.layers[idx]
                d_u = d_u + g.alpha_g * ((d_z @ la.b) @ la.a)
            if ctx.current is not None:
                la = ctx.current.layers[idx]
                d_u = d_u + ctx.current.alpha * ((d_z @ la.b) @ la.a)

    if ctx.current is None:
        layer_grads = []
    grads = Gradients(layer_grads, d_alpha, d_group_alphas, d_head_w, d_head_b)
    return loss, grads


@dataclass
class AdamWState:
    """Moment accumulators for a fixed set of named parameters."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(
    state: AdamWState,
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    decay_params: set[str] = frozenset(),
) -> None:
    """One decoupled-weight-decay Adam step, updating `params` in place.

    Decay applies only to names in `decay_params` (matrices); alpha scalars
    and biases are never decayed.
    """
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        if state.weight_decay != 0.0 and name in decay_params:
            p *= 1.0 - state.lr * state.weight_decay
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def _collect_params(adapter, registry, backbone, class_rows, train_alpha):
    """Trainable tensors by name. Factor matrices are the adapter's own
    arrays, so in-place optimizer updates flow straight into the forward."""
    params: dict[str, np.ndarray] = {}
    decay: set[str] = set()
    for i, layer in enumerate(adapter.layers):
        params[f"layer{i}.b"] = layer.b
        params[f"layer{i}.a"] = layer.a
        decay.update({f"layer{i}.b", f"layer{i}.a"})
    if train_alpha:
        params["alpha"] = np.array(adapter.alpha)
    for j, g in enumerate(registry.groups):
        params[f"group{j}.alpha"] = np.array(g.alpha_g)
    params["head.w"] = backbone.head_w[class_rows].copy()
    params["head.b"] = backbone.head_b[class_rows].copy()
    decay.add("head.w")
    return params, decay


def _sync_params(params, adapter, registry, backbone, class_rows, train_alpha):
    if train_alpha:
        adapter.alpha = float(params["alpha"])
    for j, g in enumerate(registry.groups):
        g.alpha_g = float(params[f"group{j}.alpha"])
    backbone.head_w[class_rows] = params["head.w"]
    backbone.head_b[class_rows] = params["head.b"]


def train_task(
    dataset,
    backbone: FrozenBackbone,
    registry: GroupRegistry,
    cfg,
    *,
    initial_adapter: TaskAdapter | None = None,
    train_alpha: bool = True,
    mask_to_task: bool = True,
    rng: RngState | None = None,
) -> TrainReport:
    """Optimize the current adapter (and alphas, and this task's head rows)
    on one task's training split.

    With mask_to_task (the default), the loss softmax covers only this
    task's classes and only their head rows train, which keeps earlier
    heads untouched. mask_to_task=False is the conventional sequential
    fine-tuning regime: the softmax spans every class seen so far and the
    whole head trains, so old-class logits get actively suppressed.

    Group adapter matrices and all frozen backbone weights are untouched;
    only the group scaling factors move, and they are written back to the
    registry. Raises TrainingError on a non-finite loss.
    """
    n = len(dataset.train_y)
    if n == 0:
        raise InputError(f"task {dataset.task_id} has an empty training split")
    if rng is None:
        rng = RngState(cfg.seed).child(TASK_RNG_TAG_BASE + dataset.task_id)
    adapter = initial_adapter if initial_adapter is not None else new_task_adapter(
        dataset.task_id, backbone.layer_shapes(), cfg.rank, rng
    )
    ctx = ForwardContext(registry=registry, current=adapter, group_alphas_trainable=True)
    if mask_to_task:
        class_rows = np.asarray(dataset.class_ids, dtype=np.intp)
    else:
        class_rows = np.arange(backbone.num_classes_seen, dtype=np.intp)
    allowed = class_rows
    params, decay = _collect_params(adapter, registry, backbone, class_rows, train_alpha)
    state = AdamWState(
        lr=cfg.lr, weight_decay=cfg.weight_decay,
        beta1=cfg.adam_beta1, beta2=cfg.adam_beta2, eps=cfg.adam_eps,
    )

    epoch_losses = []
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        batch_losses = []
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            loss, grads = loss_and_gradients(
                backbone, dataset.train_x[idx], dataset.train_y[idx], ctx, allowed
            )
            if not np.isfinite(loss):
                raise TrainingError(
                    f"loss diverged on task {dataset.task_id} (loss={loss})"
                )
            grad_dict = {}
            for i, (d_b, d_a) in enumerate(grads.layer_grads):
                grad_dict[f"layer{i}.b"] = d_b
                grad_dict[f"layer{i}.a"] = d_a
            if train_alpha:
                grad_dict["alpha"] = np.array(grads.alpha)
            for j, d_ga in enumerate(grads.group_alphas):
                grad_dict[f"group{j}.alpha"] = np.array(d_ga)
            grad_dict["head.w"] = grads.head_w[class_rows]
            grad_dict["head.b"] = grads.head_b[class_rows]
            adamw_step(state, params, grad_dict, decay)
            _sync_params(params, adapter, registry, backbone, class_rows, train_alpha)
            batch_losses.append(loss)
        epoch_losses.append(float(np.mean(batch_losses)))

    return TrainReport(
        final_loss=epoch_losses[-1],
        epoch_losses=epoch_losses,
        adapter=adapter,
        group_alphas=[g.alpha_g for g in registry.groups],
    )


def gradient_audit(
    backbone: FrozenBackbone,
    x: np.ndarray,
    y: np.ndarray,
    ctx: ForwardContext,
    allowed_classes: np.ndarray | None = None,
    step: float = 1e-5,
) -> dict[str, float]:
    """Max relative error between analytic and central-finite-difference
    gradients, per trainable tensor.

    Perturbs every scalar of every trainable tensor in place by +-step and
    re-evaluates the loss. Relative error uses max(|analytic|, |numeric|,
    1e-6) as the denominator so that jointly-vanishing gradients compare
    as equal instead of as 0/0.
    """
    if allowed_classes is None:
        allowed_classes = np.arange(backbone.num_classes_seen)
    _, grads = loss_and_gradients(backbone, x, y, ctx, allowed_classes)

    def loss_only():
        loss, _ = loss_and_gradients(backbone, x, y, ctx, allowed_classes)
        return loss

    class_rows = np.asarray(allowed_classes, dtype=np.intp)
    tensors: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for i, (d_b, d_a) in enumerate(grads.layer_grads):
        tensors[f"layer{i}.b"] = (ctx.current.layers[i].b, d_b)
        tensors[f"layer{i}.a"] = (ctx.current.layers[i].a, d_a)
    tensors["head.w"] = (backbone.head_w, grads.head_w)
    tensors["head.b"] = (backbone.head_b, grads.head_b)

    def rel_err(analytic, numeric):
        return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)

    worst: dict[str, float] = {}
    for name, (arr, analytic) in tensors.items():
        if name.startswith("head"):
            flat_idx = [
                (r,) if arr.ndim == 1 else (r, c)
                for r in class_rows
                for c in (range(arr.shape[1]) if arr.ndim == 2 else [None])
            ]
        else:
            flat_idx = list(np.ndindex(arr.shape))
        err = 0.0
        for ix in flat_idx:
            orig = arr[ix]
            arr[ix] = orig + step
            up = loss_only()
            arr[ix] = orig - step
            down = loss_only()
            arr[ix] = orig
            err = max(err, rel_err(analytic[ix], (up - down) / (2 * step)))
        worst[name] = err

    if ctx.current is not None:
        orig = ctx.current.alpha
        ctx.current.alpha = orig + step
        up = loss_only()
        ctx.current.alpha = orig - step
        down = loss_only()
        ctx.current.alpha = orig
        worst["alpha"] = rel_err(grads.alpha, (up - down) / (2 * step))
    for j, g in enumerate(ctx.groups()):
        orig = g.alpha_g
        g.alpha_g = orig + step
        up = loss_only()
        g.alpha_g = orig - step
        down = loss_only()
        g.alpha_g = orig
        worst[f"group{j}.alpha"] = rel_err(grads.group_alphas[j], (up - down) / (2 * step))
    return worst
