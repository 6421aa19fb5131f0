from .checkpoint import Checkpoint, CheckpointError
from .config import TrainConfig
from .datasets import (
    CsvParseError,
    Dataset,
    DatasetError,
    generate_gaussian_ot,
    generate_toy,
    load_csv,
    make_dataset,
    parse_csv_text,
)
from .loop import HISTORY_FIELDS, History, TrainingAborted, build_stack, evaluate, gaussian_baseline_nll, moment_w2_bound, train
from .optim import AdamState, NonFiniteGradient, adam_step, clip_grad_norm

__all__ = [
    "AdamState",
    "Checkpoint",
    "CheckpointError",
    "CsvParseError",
    "Dataset",
    "DatasetError",
    "HISTORY_FIELDS",
    "History",
    "NonFiniteGradient",
    "TrainConfig",
    "TrainingAborted",
    "adam_step",
    "build_stack",
    "clip_grad_norm",
    "evaluate",
    "gaussian_baseline_nll",
    "generate_gaussian_ot",
    "generate_toy",
    "load_csv",
    "moment_w2_bound",
    "make_dataset",
    "parse_csv_text",
    "train",
]
