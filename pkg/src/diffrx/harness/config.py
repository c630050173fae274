"""Experiment configuration: JSON files with field-level validation.

One LinkConfig drives a whole run: channel model, grid geometry, pilot
scheme, SNR points, modulation, diffusion schedule, model, trainer and
sampler settings. The canonical serialization (sorted keys, compact
separators) defines the config hash recorded in manifests, so key order
in the file never matters.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from ..chansim import ChannelModelConfig
from ..denoiser import DenoiserConfig
from ..diffusion import ScheduleSpec
from ..errors import ConfigurationError, DataFormatError
from ..pilots import PilotSpec
from ..sampler import SamplerConfig


@dataclass(frozen=True)
class DatasetSpec:
    n_train: int = 3000
    n_val: int = 200
    n_test: int = 300

    def __post_init__(self):
        for name in ("n_train", "n_val", "n_test"):
            if getattr(self, name) < 1:
                raise ConfigurationError(
                    f"dataset.{name}: must be >= 1, got {getattr(self, name)}")

    def to_dict(self) -> dict:
        return {"n_train": self.n_train, "n_val": self.n_val, "n_test": self.n_test}


@dataclass(frozen=True)
class TrainSpec:
    """Trainer knobs as they appear in config files."""

    epochs: int = 40
    batch_size: int = 32
    lr: float = 1e-3
    snr_range_db: tuple[float, float] = (10.0, 30.0)
    checkpoint_every: int = 5

    def to_dict(self) -> dict:
        return {"epochs": self.epochs, "batch_size": self.batch_size, "lr": self.lr,
                "snr_range_db": list(self.snr_range_db),
                "checkpoint_every": self.checkpoint_every}


@dataclass(frozen=True)
class LinkConfig:
    seed: int = 0
    channel: ChannelModelConfig = field(default_factory=ChannelModelConfig)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    pilot: PilotSpec = field(default_factory=PilotSpec)
    snr_db: tuple[float, ...] = (20.0,)
    modulation: str = "qpsk"
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    model: DenoiserConfig = field(default_factory=DenoiserConfig)
    train: TrainSpec = field(default_factory=TrainSpec)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    eval_frames: int = 100
    eval_grids: int = 100

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "channel": {
                "num_paths": self.channel.num_paths,
                "delay_spread": self.channel.delay_spread,
                "max_doppler": self.channel.max_doppler,
                "subcarrier_spacing": self.channel.subcarrier_spacing,
                "num_subcarriers": self.channel.num_subcarriers,
                "num_symbols": self.channel.num_symbols,
                "symbol_duration": self.channel.symbol_duration,
                "seed": self.channel.seed,
            },
            "dataset": self.dataset.to_dict(),
            "pilot": self.pilot.to_dict(),
            "snr_db": list(self.snr_db),
            "modulation": self.modulation,
            "schedule": self.schedule.to_dict(),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "sampler": self.sampler.to_dict(),
            "eval_frames": self.eval_frames,
            "eval_grids": self.eval_grids,
        }

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def with_pilot_spacing(self, spacing: int) -> "LinkConfig":
        return replace(self, pilot=replace(self.pilot, spacing=spacing))

    def train_config(self, seed: int | None = None):
        from ..trainer import TrainConfig
        return TrainConfig(
            epochs=self.train.epochs, batch_size=self.train.batch_size,
            lr=self.train.lr, seed=self.seed if seed is None else seed,
            snr_range_db=self.train.snr_range_db, pilot=self.pilot,
            checkpoint_every=self.train.checkpoint_every)


def _build_section(name: str, data: dict, builder):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{name}: expected an object, got {type(data).__name__}")
    try:
        return builder(**data)
    except TypeError as exc:
        raise ConfigurationError(f"{name}: {exc}") from None
    except ConfigurationError as exc:
        raise ConfigurationError(f"{name}: {exc}") from None


def config_from_dict(data: dict) -> LinkConfig:
    if not isinstance(data, dict):
        raise ConfigurationError("config root must be a JSON object")
    known = {"seed", "channel", "dataset", "pilot", "snr_db", "modulation",
             "schedule", "model", "train", "sampler", "eval_frames", "eval_grids"}
    unknown = set(data) - known
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {}
    if "seed" in data:
        if not isinstance(data["seed"], int) or data["seed"] < 0:
            raise ConfigurationError(f"seed: must be a non-negative integer, got {data['seed']!r}")
        kwargs["seed"] = data["seed"]
    if "channel" in data:
        kwargs["channel"] = _build_section("channel", data["channel"], ChannelModelConfig)
    if "dataset" in data:
        kwargs["dataset"] = _build_section("dataset", data["dataset"], DatasetSpec)
    if "pilot" in data:
        kwargs["pilot"] = _build_section("pilot", data["pilot"],
                                         lambda **kw: PilotSpec.from_dict(kw))
    if "snr_db" in data:
        snrs = data["snr_db"]
        if not isinstance(snrs, list) or not snrs:
            raise ConfigurationError("snr_db: must be a non-empty list of numbers")
        kwargs["snr_db"] = tuple(float(s) for s in snrs)
    if "modulation" in data:
        if data["modulation"].lower() not in ("qpsk", "16qam"):
            raise ConfigurationError(
                f"modulation: expected qpsk or 16qam, got {data['modulation']!r}")
        kwargs["modulation"] = data["modulation"].lower()
    if "schedule" in data:
        kwargs["schedule"] = _build_section("schedule", data["schedule"], ScheduleSpec)
    if "model" in data:
        kwargs["model"] = _build_section("model", data["model"], DenoiserConfig)
    if "train" in data:
        section = dict(data["train"])
        if "snr_range_db" in section:
            section["snr_range_db"] = tuple(section["snr_range_db"])
        kwargs["train"] = _build_section("train", section, TrainSpec)
    if "sampler" in data:
        kwargs["sampler"] = _build_section("sampler", data["sampler"], SamplerConfig)
    for name in ("eval_frames", "eval_grids"):
        if name in data:
            if not isinstance(data[name], int) or data[name] < 1:
                raise ConfigurationError(f"{name}: must be a positive integer")
            kwargs[name] = data[name]
    return LinkConfig(**kwargs)


def load_config(path) -> LinkConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return config_from_dict(data)


def save_config(path, config: LinkConfig) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
