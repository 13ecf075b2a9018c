"""Configuration, checkpoints, metrics logs and the run orchestration behind the ``daalign`` command."""
from .checkpoint import CheckpointError, read_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config, parse_config, toy_benchmark_config
from .metrics import CsvLog, read_rows
from .runner import AblationResult, Datasets, TrainResult, load_datasets, run_ablation, run_eval, run_train

__all__ = ["CheckpointError", "read_checkpoint", "save_checkpoint", "ConfigError", "RunConfig", "load_config",
           "parse_config", "toy_benchmark_config", "CsvLog", "read_rows", "AblationResult", "Datasets",
           "TrainResult", "load_datasets", "run_ablation", "run_eval", "run_train"]
