"""Consistency-trained multi-exit 1-D convolutional networks.

Training jointly optimizes per-exit task loss and a confidence-gated
consistency loss between clean and perturbed views of each window;
inference exits at the first head whose normalized prediction entropy
falls below a threshold.
"""

from . import _threads  # noqa: F401  (must run before numpy-backed modules)

from .config import ConfigError, RunConfig, load_config, parse_config_text
from .data import (
    DataFileError,
    DatasetMeta,
    SplitSpec,
    WindowedDataset,
    channel_normalize,
    generate_synthetic,
    group_split,
    load_csv,
    load_windows_file,
    save_windows_file,
)
from .earlyexit import (
    ExitPolicy,
    ExitStats,
    InferenceTrace,
    batch_stats,
    infer_early_exit,
    normalized_entropy,
    sweep_thresholds,
)
from .estimator import ConsistentExitClassifier
from .metrics import CurvePoint, accuracy, cohens_kappa, confusion_matrix, emit_reports, macro_f1
from .model import (
    BlockSpec,
    CheckpointError,
    ExitHeadSpec,
    ModelConfig,
    MultiExitNet,
    build_network,
    default_model_config,
    load_checkpoint,
    save_checkpoint,
)
from .objectives import ExitLossBreakdown, LossConfig, kappa_schedule, total_loss
from .ops import GradCheckResult, grad_check
from .perturb import PerturbationConfig, random_perturb
from .tensor import Parameter, Tape, Tensor, backward, no_grad
from .trainer import (
    EpochRecord,
    EvalBundle,
    TrainConfig,
    TrainingError,
    TrainReport,
    evaluate,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "BlockSpec",
    "CheckpointError",
    "ConfigError",
    "ConsistentExitClassifier",
    "CurvePoint",
    "DataFileError",
    "DatasetMeta",
    "EpochRecord",
    "EvalBundle",
    "ExitHeadSpec",
    "ExitLossBreakdown",
    "ExitPolicy",
    "ExitStats",
    "GradCheckResult",
    "InferenceTrace",
    "LossConfig",
    "ModelConfig",
    "MultiExitNet",
    "Parameter",
    "PerturbationConfig",
    "RunConfig",
    "SplitSpec",
    "Tape",
    "Tensor",
    "TrainConfig",
    "TrainReport",
    "TrainingError",
    "WindowedDataset",
    "accuracy",
    "backward",
    "batch_stats",
    "build_network",
    "channel_normalize",
    "cohens_kappa",
    "confusion_matrix",
    "default_model_config",
    "emit_reports",
    "evaluate",
    "generate_synthetic",
    "grad_check",
    "group_split",
    "infer_early_exit",
    "kappa_schedule",
    "load_checkpoint",
    "load_config",
    "load_csv",
    "load_windows_file",
    "macro_f1",
    "no_grad",
    "normalized_entropy",
    "parse_config_text",
    "random_perturb",
    "save_checkpoint",
    "save_windows_file",
    "sweep_thresholds",
    "total_loss",
    "train",
    "__version__",
]
