"""Patch-token PM2.5 forecaster with a frozen decoder-only backbone and
rank-stabilized low-rank adapters."""

from .checkpoint import load_checkpoint, save_checkpoint
from .data import SplitPlan, StationSeries, SynthConfig, generate_synthetic, load_csv, make_samples, split
from .estimator import PatchLoraForecaster
from .evaluation import MetricsReport, evaluate, horizon_table, mse_mae, rank_sweep
from .exceptions import (ContractError, CorruptionError, DataError, DimensionError, FormatError, NumericError,
                         PatchLoraError, ProvenanceError, SchemaError)
from .model import ModelBundle, ModelConfig, build, forward, predict_raw
from .pretrain import PretrainConfig, pretrain_backbone
from .rslora import LoraAdapter, create_adapter, effective_weight
from .train import TrainRun, train_protocol, zero_shot_eval

__version__ = "0.1.0"

__all__ = [
    "ContractError", "CorruptionError", "DataError", "DimensionError", "FormatError", "LoraAdapter",
    "MetricsReport", "ModelBundle", "ModelConfig", "NumericError", "PatchLoraError", "PatchLoraForecaster",
    "PretrainConfig", "ProvenanceError", "SchemaError", "SplitPlan", "StationSeries", "SynthConfig", "TrainRun",
    "build", "create_adapter", "effective_weight", "evaluate", "forward", "generate_synthetic", "horizon_table",
    "load_checkpoint", "load_csv", "make_samples", "mse_mae", "predict_raw", "pretrain_backbone", "rank_sweep",
    "save_checkpoint", "split", "train_protocol", "zero_shot_eval",
]
