"""Experiment configuration: key = value files, validation, sweep grids.

Config files are plain text, one `key = value` per line, `#` starts a
comment. Every key has a default; unknown keys are rejected before any
compute starts. Sweep files use the same keys plus `sweep.<key> = v1, v2,
...` lines that define a cross-product grid over a whitelisted subset.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .errors import ConfigError
from .grouping import GROUPING_RULES
from .merging import MERGE_ALGORITHMS
from .tasks import STREAM_MODES, StreamSpec
from .tensorops import RngState

STRATEGIES = ("ham", "naive_ft", "per_task_merge")

# rng child tags, one per consumer
STREAM_RNG_TAG = 1
BACKBONE_RNG_TAG = 2
MERGE_RNG_TAG_BASE = 5000


@dataclass
class ExperimentConfig:
    # stream
    num_tasks: int = 20
    classes_per_task: int = 2
    input_dim: int = 32
    train_per_class: int = 100
    test_per_class: int = 100
    separation: float = 6.0
    stream_mode: str = "clustered"
    num_clusters: int = 0  # 0 means "use g_max"
    cluster_spread: float = 0.3
    class_spread: float = 0.75
    # model
    hidden_dim: int = 64
    backbone_scale: float = 1.5
    rank: int = 16
    # consolidation
    keep_fraction: float = 0.6
    g_max: int = 2
    tau_sim: float = 0.3
    grouping: str = "similarity"
    similarity_all_layers: bool = False
    # merging
    merge_algorithm: str = "ham"
    ties_trim_fraction: float = 0.2
    dare_drop_prob: float = 0.5
    # optimization
    strategy: str = "ham"
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 20
    weight_decay: float = 0.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    # run
    seed: int = 0
    output_dir: str = "out"
    figures: bool = True

    def validate(self) -> "ExperimentConfig":
        if not 0.0 < self.keep_fraction <= 1.0:
            raise ConfigError(f"keep_fraction must be in (0, 1], got {self.keep_fraction}")
        if self.g_max < 1:
            raise ConfigError(f"g_max must be >= 1, got {self.g_max}")
        if not 0.0 <= self.tau_sim <= 1.0:
            raise ConfigError(f"tau_sim must be in [0, 1], got {self.tau_sim}")
        if self.grouping not in GROUPING_RULES:
            raise ConfigError(f"grouping must be one of {GROUPING_RULES}, got {self.grouping!r}")
        if self.merge_algorithm not in MERGE_ALGORITHMS:
            raise ConfigError(
                f"merge_algorithm must be one of {MERGE_ALGORITHMS}, got {self.merge_algorithm!r}"
            )
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.rank < 1:
            raise ConfigError(f"rank must be >= 1, got {self.rank}")
        if self.rank > min(self.input_dim, self.hidden_dim):
            raise ConfigError(
                f"rank {self.rank} exceeds min(input_dim, hidden_dim) = "
                f"{min(self.input_dim, self.hidden_dim)}"
            )
        if self.hidden_dim < 1:
            raise ConfigError(f"hidden_dim must be >= 1, got {self.hidden_dim}")
        if self.backbone_scale <= 0:
            raise ConfigError(f"backbone_scale must be > 0, got {self.backbone_scale}")
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not 0.0 < self.ties_trim_fraction <= 1.0:
            raise ConfigError(
                f"ties_trim_fraction must be in (0, 1], got {self.ties_trim_fraction}"
            )
        if not 0.0 <= self.dare_drop_prob < 1.0:
            raise ConfigError(f"dare_drop_prob must be in [0, 1), got {self.dare_drop_prob}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        self.stream_spec()  # runs StreamSpec validation
        return self

    def stream_spec(self) -> StreamSpec:
        num_clusters = self.num_clusters if self.num_clusters > 0 else self.g_max
        spec = StreamSpec(
            num_tasks=self.num_tasks,
            classes_per_task=self.classes_per_task,
            input_dim=self.input_dim,
            train_per_class=self.train_per_class,
            test_per_class=self.test_per_class,
            separation=self.separation,
            mode=self.stream_mode,
            num_clusters=num_clusters,
            cluster_spread=self.cluster_spread,
            class_spread=self.class_spread,
            seed=RngState(self.seed).child(STREAM_RNG_TAG).seed,
        )
        spec.validate()
        return spec


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}

SWEEPABLE = (
    "keep_fraction",
    "g_max",
    "tau_sim",
    "grouping",
    "merge_algorithm",
    "num_tasks",
    "seed",
    "strategy",
)


def _parse_value(key: str, raw: str):
    typ = _FIELD_TYPES.get(key)
    if typ is None:
        raise ConfigError(f"unknown config key {key!r}")
    raw = raw.strip()
    try:
        if typ == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"cannot parse {key} = {raw!r} as {typ}") from exc


def _read_pairs(path) -> list[tuple[str, str]]:
    pairs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, raw = line.split("=", 1)
            pairs.append((key.strip(), raw.strip()))
    return pairs


def parse_config(path) -> ExperimentConfig:
    """Parse and validate a run config; sweep.* keys are rejected here."""
    cfg = ExperimentConfig()
    for key, raw in _read_pairs(path):
        if key.startswith("sweep."):
            raise ConfigError(f"sweep key {key!r} is not valid for a single run")
        setattr(cfg, key, _parse_value(key, raw))
    return cfg.validate()


def parse_sweep(path) -> tuple[ExperimentConfig, dict[str, list]]:
    """Parse a sweep config: base settings plus a grid of sweep.* lists.

    Returns (base config, grid). The grid maps field name to the list of
    values; the cross product defines the runs. At least one sweep key with
    at least one value is required.
    """
    cfg = ExperimentConfig()
    grid: dict[str, list] = {}
    for key, raw in _read_pairs(path):
        if key.startswith("sweep."):
            field_name = key[len("sweep.") :]
            if field_name not in SWEEPABLE:
                raise ConfigError(
                    f"{field_name!r} is not sweepable; choose from {SWEEPABLE}"
                )
            values = [v.strip() for v in raw.split(",") if v.strip()]
            if not values:
                raise ConfigError(f"sweep key {key!r} has no values")
            grid[field_name] = [_parse_value(field_name, v) for v in values]
        else:
            setattr(cfg, key, _parse_value(key, raw))
    if not grid:
        raise ConfigError("sweep config defines no sweep.* grid")
    cfg.validate()
    return cfg, grid


def grid_points(grid: dict[str, list]) -> list[dict]:
    """Cross product of the grid, in deterministic key order."""
    points = [{}]
    for key in grid:
        points = [{**p, key: v} for p in points for v in grid[key]]
    return points
