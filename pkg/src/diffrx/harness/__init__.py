"""Experiment orchestration: configs, manifests, CLI subcommands."""

from .config import LinkConfig, config_from_dict, load_config, save_config
from .manifest import RunManifest, file_digest, read_manifest
from .runs import run_evaluate, run_generate, run_train

__all__ = [
    "LinkConfig", "config_from_dict", "load_config", "save_config",
    "RunManifest", "file_digest", "read_manifest",
    "run_generate", "run_train", "run_evaluate",
]
