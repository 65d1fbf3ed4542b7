"""End-to-end experiment orchestration.

Three strategies share the loop "train on task t, build the current merged
model, evaluate on every task seen so far":

  ham            fresh adapter per task trained alongside the frozen group
                 adapters, consolidated into the registry, groups merged
                 after every task;
  naive_ft       one adapter trained sequentially across all tasks (the
                 catastrophic-forgetting baseline);
  per_task_merge independently trained adapter per task, all of them merged
                 by the configured baseline algorithm after every task.

run_experiment is pure compute; write_outputs handles all file emission
(atomically, so an interrupted run never leaves partial CSVs).
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .adapters import GroupRegistry, nonzero_parameter_count
from .backbone import FrozenBackbone
from .config import BACKBONE_RNG_TAG, MERGE_RNG_TAG_BASE, ExperimentConfig
from .grouping import ham_consolidate
from .merging import MergedDelta, finalize, merge_sources
from .metrics import AccuracyMatrix, average_accuracy, forgetting_measure
from .serialization import save_adapter
from .tasks import evaluate, generate_stream
from .tensorops import RngState
from .trainer import TASK_RNG_TAG_BASE, train_task


@dataclass
class RunResult:
    config: ExperimentConfig
    matrix: AccuracyMatrix
    aa: float
    fm: float | None
    merged: MergedDelta
    registry: GroupRegistry | None
    adapter_nonzeros: list[int]
    log_lines: list[str]


def _merge_for(cfg: ExperimentConfig, sources, seed: int) -> MergedDelta:
    return merge_sources(
        sources,
        cfg.merge_algorithm,
        ties_trim_fraction=cfg.ties_trim_fraction,
        dare_drop_prob=cfg.dare_drop_prob,
        seed=seed,
    )


def run_experiment(cfg: ExperimentConfig) -> RunResult:
    """Run one full continual-learning experiment per the config."""
    cfg.validate()
    stream = generate_stream(cfg.stream_spec())
    root_rng = RngState(cfg.seed)
    backbone = FrozenBackbone.build(
        cfg.input_dim,
        [cfg.hidden_dim, cfg.hidden_dim],
        root_rng.child(BACKBONE_RNG_TAG),
        weight_scale=cfg.backbone_scale,
    )
    frozen_digest = backbone.frozen_checksum()
    registry = GroupRegistry(g_max=cfg.g_max, tau_sim=cfg.tau_sim)
    matrix = AccuracyMatrix(cfg.num_tasks)
    log_lines: list[str] = []
    adapter_nonzeros: list[int] = []
    carried_adapter = None
    per_task_adapters = []
    merged = None

    for t, dataset in enumerate(stream):
        backbone.expand_head(len(dataset.class_ids))
        task_rng = root_rng.child(TASK_RNG_TAG_BASE + t)
        if cfg.strategy == "ham":
            report = train_task(dataset, backbone, registry, cfg, rng=task_rng)
            decision = ham_consolidate(
                adapter=report.adapter,
                registry=registry,
                keep_fraction=cfg.keep_fraction,
                rule=cfg.grouping,
                all_layers=cfg.similarity_all_layers,
            )
            verb = "created group" if decision.create_new else "joined group"
            target = registry.groups[-1].group_id if decision.create_new else decision.group_id
            log_lines.append(f"task {t} {verb} {target}")
            sources = [(g.group_id, g.alpha_g, g.layers) for g in registry.groups]
            merged = _merge_for(cfg, sources, seed=root_rng.child(MERGE_RNG_TAG_BASE + t).seed)
        elif cfg.strategy == "naive_ft":
            # conventional sequential fine-tuning: full softmax over every
            # class seen so far, whole head trains
            report = train_task(
                dataset,
                backbone,
                GroupRegistry(g_max=cfg.g_max, tau_sim=cfg.tau_sim),
                cfg,
                initial_adapter=carried_adapter,
                train_alpha=False,
                mask_to_task=False,
                rng=task_rng,
            )
            carried_adapter = report.adapter
            sources = [(carried_adapter.task_id, carried_adapter.alpha, carried_adapter.layers)]
            merged = merge_sources(sources, "linear")
        else:  # per_task_merge
            report = train_task(
                dataset,
                backbone,
                GroupRegistry(g_max=cfg.g_max, tau_sim=cfg.tau_sim),
                cfg,
                train_alpha=False,
                rng=task_rng,
            )
            per_task_adapters.append(report.adapter)
            sources = [(a.task_id, a.alpha, a.layers) for a in per_task_adapters]
            merged = _merge_for(cfg, sources, seed=root_rng.child(MERGE_RNG_TAG_BASE + t).seed)
        for epoch, loss in enumerate(report.epoch_losses):
            log_lines.append(f"task {t} epoch {epoch} loss {loss!r}")
        adapter_nonzeros.append(nonzero_parameter_count(report.adapter))
        model = finalize(backbone, merged)
        matrix.add_row(evaluate(model, stream[: t + 1]))

    if backbone.frozen_checksum() != frozen_digest:
        raise AssertionError("frozen backbone weights changed during the run")
    aa = average_accuracy(matrix)
    fm = forgetting_measure(matrix) if cfg.num_tasks >= 2 else None
    return RunResult(
        config=cfg,
        matrix=matrix,
        aa=aa,
        fm=fm,
        merged=merged,
        registry=registry if cfg.strategy == "ham" else None,
        adapter_nonzeros=adapter_nonzeros,
        log_lines=log_lines,
    )


def _atomic_write_text(path, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def summary_text(result: RunResult) -> str:
    cfg = result.config
    lines = [
        f"strategy = {cfg.strategy}",
        f"merge_algorithm = {cfg.merge_algorithm}",
        f"num_tasks = {cfg.num_tasks}",
        f"seed = {cfg.seed}",
        f"average_accuracy = {result.aa!r}",
        f"forgetting_measure = {result.fm!r}",
        f"per_task_adapter_nonzeros = {result.adapter_nonzeros}",
    ]
    if result.registry is not None:
        lines.append(f"num_groups = {len(result.registry.groups)}")
        for g in result.registry.groups:
            ranks = [layer.rank for layer in g.layers]
            lines.append(
                f"group {g.group_id}: members={g.member_task_ids} "
                f"member_count={g.member_count} alpha={g.alpha_g!r} "
                f"rank_per_layer={ranks} nonzero={nonzero_parameter_count(g)}"
            )
    merged_nonzero = int(sum(np.count_nonzero(d) for d in result.merged.layer_deltas))
    lines.append(f"merged_delta_nonzeros = {merged_nonzero}")
    return "\n".join(lines) + "\n"


def write_outputs(result: RunResult, outdir) -> None:
    """Emit CSV, summary, log, merged adapter, and (optionally) figures."""
    os.makedirs(outdir, exist_ok=True)
    _atomic_write_text(os.path.join(outdir, "accuracy_matrix.csv"), result.matrix.to_csv())
    _atomic_write_text(os.path.join(outdir, "summary.txt"), summary_text(result))
    _atomic_write_text(
        os.path.join(outdir, "train_log.txt"), "\n".join(result.log_lines) + "\n"
    )
    save_adapter(os.path.join(outdir, "merged_adapter.ham"), result.merged)
    if result.config.figures:
        from . import figures

        figures.accuracy_matrix_heatmap(
            result.matrix, os.path.join(outdir, "accuracy_matrix.png")
        )
        figures.task_accuracy_curves(
            result.matrix, os.path.join(outdir, "task_accuracy.png")
        )


def run_and_write(cfg: ExperimentConfig, outdir=None) -> RunResult:
    result = run_experiment(cfg)
    write_outputs(result, outdir if outdir is not None else cfg.output_dir)
    return result


def run_sweep(base_cfg: ExperimentConfig, grid: dict[str, list], outdir) -> tuple[list[dict], bool]:
    """One run per grid point; failures are recorded and do not stop the
    sweep. Returns (rows, any_failed) and writes sweep_results.csv plus one
    figure per swept parameter."""
    from dataclasses import replace

    from .config import grid_points

    os.makedirs(outdir, exist_ok=True)
    keys = list(grid)
    rows = []
    any_failed = False
    for index, point in enumerate(grid_points(grid)):
        cfg = replace(base_cfg, **point)
        label = "_".join(f"{k}={point[k]}" for k in keys)
        point_dir = os.path.join(outdir, f"point_{index:03d}_{label}")
        row = {"point": index, **point}
        try:
            result = run_and_write(cfg, point_dir)
            row.update(status="ok", aa=result.aa, fm=result.fm)
        except Exception as exc:  # record and continue
            any_failed = True
            row.update(status=f"failed: {type(exc).__name__}", aa=None, fm=None)
        rows.append(row)

    header = ["point", *keys, "status", "aa", "fm"]
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join("" if row[h] is None else repr(row[h]) if isinstance(row[h], float) else str(row[h]) for h in header))
    _atomic_write_text(os.path.join(outdir, "sweep_results.csv"), "\n".join(lines) + "\n")

    if base_cfg.figures:
        from . import figures

        for key in keys:
            numeric = [r for r in rows if r["status"] == "ok" and isinstance(r[key], (int, float))]
            if len({r[key] for r in numeric}) > 1:
                figures.sweep_curve(
                    key,
                    [r[key] for r in numeric],
                    [r["aa"] for r in numeric],
                    os.path.join(outdir, f"sweep_{key}.png"),
                )
    return rows, any_failed
