"""Dual-teacher self-supervised distillation with Kolmogorov-Arnold projection heads."""

from .checkpoint import (Checkpoint, CheckpointError, CorruptionError, FormatError, MigrationError,
                         load_checkpoint, save_checkpoint)
from .config import ConfigError, RunConfig, load_config, parse_config
from .data import Dataset, DatasetSpec, gen_synthetic_dataset
from .evaluation import MetricsReport, compute_metrics, linear_probe
from .kan import KanHead, KanRegConfig, MlpHead, kan_forward, kan_reg_loss, segment_mask
from .spline import KnotGrid, SplineEdge, basis_matrix, bspline_basis, smoothness_gram
from .ssl import (DistillState, FeatureBank, LossBreakdown, bank_enqueue, build_state, ema_update,
                  relation_loss, style_loss, total_loss)
from .trainer import TrainConfig, lr_at_step, train, train_step

__version__ = "0.1.0"
