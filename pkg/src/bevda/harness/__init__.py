from .commands import (
    MODELS,
    PAPER_AP,
    CheckpointMismatch,
    Layout,
    StageError,
    cmd_eval,
    cmd_gen_data,
    cmd_run_table1,
    cmd_train_cyclegan,
    cmd_train_detector,
    cmd_translate,
    load_cyclegan,
    load_detector,
)
from .config import ConfigError, ExperimentConfig, from_ini, load_config, to_ini
from .datasets import DatasetError, load_dataset, read_manifest
from .domain_gap import ClassifierConfig, DomainClassifier, train_domain_classifier

__all__ = [
    "MODELS", "PAPER_AP", "CheckpointMismatch", "Layout", "StageError", "cmd_eval", "cmd_gen_data",
    "cmd_run_table1", "cmd_train_cyclegan", "cmd_train_detector", "cmd_translate", "load_cyclegan",
    "load_detector", "ConfigError", "ExperimentConfig", "from_ini", "load_config", "to_ini",
    "DatasetError", "load_dataset", "read_manifest", "ClassifierConfig", "DomainClassifier",
    "train_domain_classifier",
]
