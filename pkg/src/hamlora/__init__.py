"""Continual learning with per-task low-rank adapters consolidated by
hierarchical adapter merging (HAM): similarity grouping, magnitude pruning,
rank-growing concatenation, and importance-weighted merging over a frozen
backbone."""

from .adapters import (
    AdapterGroup,
    GroupRegistry,
    LayerAdapter,
    TaskAdapter,
    delta_weight,
    new_task_adapter,
    nonzero_parameter_count,
)
from .backbone import ForwardContext, FrozenBackbone
from .config import ExperimentConfig, parse_config, parse_sweep
from .errors import (
    ConfigError,
    DegenerateInputError,
    FormatError,
    HamloraError,
    InputError,
    ShapeError,
    StateError,
    TrainingError,
)
from .grouping import assign_group, concat_into_group, ham_consolidate, prune, similarity, update_group_alpha
from .merging import (
    FinalModel,
    MergedDelta,
    finalize,
    merge_dare_ties,
    merge_ham,
    merge_linear,
    merge_sources,
    merge_ties,
)
from .metrics import AccuracyMatrix, average_accuracy, forgetting_measure
from .serialization import load_adapter, save_adapter
from .tasks import StreamSpec, TaskDataset, evaluate, export_stream, generate_stream, import_stream
from .tensorops import RngState, abs_cosine, magnitude_mask, magnitude_threshold, matmul, vectorize
from .trainer import TrainReport, adamw_step, gradient_audit, loss_and_gradients, train_task

__version__ = "0.1.0"
