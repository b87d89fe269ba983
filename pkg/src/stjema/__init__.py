"""Self-supervised spatio-temporal pretraining for dynamic brain-connectivity graphs."""
from .config import TrainConfig, load_config
from .container import read_container, write_container
from .errors import ConfigError, DataError, FormatError, NumericError, StJemaError
from .graphbuild import DynamicGraph, build_dynamic_graph, pearson_fc, threshold_adjacency, window_bounds
from .masking import sample_mask_set
from .metrics import auroc, mae
from .model import ModelConfig, init_downstream_params, init_pretrain_params
from .objective import LossWeights, ema_update, stjema_loss
from .signal import RoiTimeSeries, SynthConfig, load_dataset, synth_dataset
from .trainer import Checkpoint, MetricsReport, finetune, linear_probe, pretrain

__all__ = [
    "Checkpoint",
    "ConfigError",
    "DataError",
    "DynamicGraph",
    "FormatError",
    "LossWeights",
    "MetricsReport",
    "ModelConfig",
    "NumericError",
    "RoiTimeSeries",
    "StJemaError",
    "SynthConfig",
    "TrainConfig",
    "auroc",
    "build_dynamic_graph",
    "ema_update",
    "finetune",
    "init_downstream_params",
    "init_pretrain_params",
    "linear_probe",
    "load_config",
    "load_dataset",
    "mae",
    "pearson_fc",
    "pretrain",
    "read_container",
    "sample_mask_set",
    "stjema_loss",
    "synth_dataset",
    "threshold_adjacency",
    "window_bounds",
    "write_container",
]
