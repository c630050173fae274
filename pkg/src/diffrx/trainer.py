"""Epsilon-prediction training for the conditional denoiser.

Each sample sees a uniformly drawn timestep and fresh Gaussian noise; the
pilot observation is regenerated every epoch with a fresh mask offset and a
per-sample SNR drawn from the configured range, so noise-level robustness
comes from training exposure rather than an explicit SNR input. Validation
uses draws frozen at startup so successive evaluations are comparable.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import numcore as nc
from .chansim import Dataset
from .denoiser import (
    DenoiserConfig,
    DenoiserParams,
    build_condition_batch,
    denoiser_forward,
    init_denoiser,
)
from .diffusion import NoiseSchedule, ScheduleSpec, q_sample_batch
from .errors import ConfigurationError, NumericsError
from .grid import ResourceGrid
from .pilots import PilotObservation, PilotSpec, observe_spec

LR_HALVING_MILESTONES = (0.6, 0.85)   # fractions of total epochs
DIVERGENCE_FACTOR = 10.0
DIVERGENCE_PATIENCE = 3


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    snr_range_db: tuple[float, float] = (10.0, 30.0)
    pilot: PilotSpec = field(default_factory=PilotSpec)
    checkpoint_every: int = 5          # epochs between periodic checkpoints
    joint_spacings: tuple[int, ...] | None = None  # joint multi-density mode

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigurationError(f"lr must be > 0, got {self.lr}")
        low, high = self.snr_range_db
        if low > high:
            raise ConfigurationError(f"snr range low {low} > high {high}")


def mse_loss(out: nc.Tensor, target: np.ndarray) -> nc.Tensor:
    diff = nc.sub(out, nc.Tensor(target))
    return nc.mean_all(nc.mul(diff, diff))


def train_step(params: DenoiserParams, batch: list[tuple[np.ndarray, PilotObservation]],
               sched: NoiseSchedule, rng: np.random.Generator, state: nc.AdamState,
               lr: float) -> float:
    """One Adam step on a batch of (complex channel grid, observation) pairs.

    Returns the scalar loss (mean squared error over real entries). Raises
    NumericsError with diagnostics if the loss goes non-finite.
    """
    b = len(batch)
    k, m = batch[0][0].shape
    x0 = np.empty((b, 2, k, m))
    for i, (h, _) in enumerate(batch):
        x0[i, 0] = h.real
        x0[i, 1] = h.imag
    t = rng.integers(1, sched.num_steps + 1, size=b)
    eps = rng.standard_normal((b, 2, k, m))
    x_t = q_sample_batch(x0, t, eps, sched)
    cond = build_condition_batch([obs for _, obs in batch], x_t)

    params.zero_grads()
    with nc.Graph() as graph:
        out = denoiser_forward(params, cond, t)
        loss = mse_loss(out, eps)
        value = loss.item()
        if not math.isfinite(value):
            raise NumericsError(
                f"non-finite training loss (lr={lr}, timesteps={t.tolist()})")
        graph.backward(loss)
    nc.adam_step(params.tensors, state, lr)
    return value


@dataclass
class TrainResult:
    params_best: DenoiserParams
    params_last: DenoiserParams
    history: list[dict]
    best_val: float
    init_val: float
    global_step: int


def _draw_epoch_observations(samples: np.ndarray, spec: PilotSpec,
                             snr_range: tuple[float, float],
                             rng: np.random.Generator,
                             spacings: tuple[int, ...] | None = None
                             ) -> list[PilotObservation]:
    observations = []
    for i in range(samples.shape[0]):
        draw_spec = spec
        if spacings is not None:
            draw_spec = replace(spec, spacing=int(spacings[rng.integers(len(spacings))]))
        snr = rng.uniform(*snr_range)
        grid = ResourceGrid.from_complex(samples[i])
        observations.append(observe_spec(grid, draw_spec, snr, rng))
    return observations


def _validation_loss(params: DenoiserParams, sched: NoiseSchedule, val_x0: np.ndarray,
                     val_obs: list[PilotObservation], val_t: np.ndarray,
                     val_eps: np.ndarray, batch_size: int) -> float:
    total = 0.0
    n = val_x0.shape[0]
    for start in range(0, n, batch_size):
        stop = min(start + batch_size, n)
        x_t = q_sample_batch(val_x0[start:stop], val_t[start:stop],
                             val_eps[start:stop], sched)
        cond = build_condition_batch(val_obs[start:stop], x_t)
        out = denoiser_forward(params, cond, val_t[start:stop])
        total += float(((out.data - val_eps[start:stop]) ** 2).sum())
    return total / val_eps.size


def _lr_at(base_lr: float, epoch: int, total_epochs: int) -> float:
    lr = base_lr
    for frac in LR_HALVING_MILESTONES:
        if epoch >= frac * total_epochs:
            lr *= 0.5
    return lr


def train(cfg: TrainConfig, train_ds: Dataset, val_ds: Dataset,
          model_config: DenoiserConfig, schedule_spec: ScheduleSpec,
          out_dir: str | Path | None = None, tag: str = "model",
          resume_from: str | Path | None = None) -> TrainResult:
    """Full training loop with frozen-draw validation and best-val retention.

    When out_dir is given, writes ckpt_<tag>_best.bin / ckpt_<tag>_last.bin
    (the latter includes Adam state for --resume) and metrics_<tag>.csv with
    columns step,epoch,train_loss,val_loss,lr,wall_ms.
    """
    if len(train_ds) < 1 or len(val_ds) < 1:
        raise ConfigurationError("train and val datasets must be non-empty")
    sched = schedule_spec.build()
    seeds = np.random.SeedSequence(cfg.seed).spawn(4)
    rng_init = np.random.default_rng(seeds[0])
    rng_obs = np.random.default_rng(seeds[1])
    rng_step = np.random.default_rng(seeds[2])
    rng_val = np.random.default_rng(seeds[3])

    params = init_denoiser(model_config, rng_init)
    state = nc.AdamState(params.tensors)
    start_epoch = 0
    global_step = 0
    if resume_from is not None:
        start_epoch, global_step = _load_resume(params, state, resume_from)

    # frozen validation draws for comparable loss values across checkpoints
    n_val = len(val_ds)
    k, m = train_ds.grid_shape
    val_x0 = np.stack([np.stack([s.real, s.imag]) for s in val_ds.samples])
    val_obs = _draw_epoch_observations(val_ds.samples, cfg.pilot, cfg.snr_range_db,
                                       rng_val, cfg.joint_spacings)
    val_t = rng_val.integers(1, sched.num_steps + 1, size=n_val)
    val_eps = rng_val.standard_normal((n_val, 2, k, m))

    init_val = _validation_loss(params, sched, val_x0, val_obs, val_t, val_eps,
                                cfg.batch_size)
    best_val = math.inf
    best_params = params.copy()
    history: list[dict] = []
    diverged_checks = 0
    start_time = time.perf_counter()

    out_path = Path(out_dir) if out_dir is not None else None
    meta_base = {
        "model": model_config.to_dict(),
        "schedule": schedule_spec.to_dict(),
        "pilot": cfg.pilot.to_dict(),
        "normalization": train_ds.normalization,
        "seed": cfg.seed,
        "tag": tag,
    }

    for epoch in range(start_epoch, cfg.epochs):
        lr = _lr_at(cfg.lr, epoch, cfg.epochs)
        observations = _draw_epoch_observations(train_ds.samples, cfg.pilot,
                                                cfg.snr_range_db, rng_obs,
                                                cfg.joint_spacings)
        order = rng_step.permutation(len(train_ds))
        epoch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = [(train_ds.samples[i], observations[i]) for i in idx]
            epoch_losses.append(train_step(params, batch, sched, rng_step, state, lr))
            global_step += 1

        val_loss = _validation_loss(params, sched, val_x0, val_obs, val_t, val_eps,
                                    cfg.batch_size)
        history.append({
            "step": global_step,
            "epoch": epoch,
            "train_loss": float(np.mean(epoch_losses)),
            "val_loss": val_loss,
            "lr": lr,
            "wall_ms": (time.perf_counter() - start_time) * 1e3,
        })
        if val_loss < best_val:
            best_val = val_loss
            best_params = params.copy()
        if val_loss > DIVERGENCE_FACTOR * init_val:
            diverged_checks += 1
            if diverged_checks >= DIVERGENCE_PATIENCE:
                raise NumericsError(
                    f"training diverged: val loss {val_loss:.3g} exceeded "
                    f"{DIVERGENCE_FACTOR}x initial {init_val:.3g} for "
                    f"{DIVERGENCE_PATIENCE} consecutive checks")
        else:
            diverged_checks = 0

        if out_path is not None and ((epoch + 1) % cfg.checkpoint_every == 0
                                     or epoch == cfg.epochs - 1):
            _save(out_path / f"ckpt_{tag}_best.bin", best_params, meta_base,
                  epoch, global_step)
            _save(out_path / f"ckpt_{tag}_last.bin", params, meta_base,
                  epoch, global_step, state=state)

    if out_path is not None:
        write_metrics_csv(out_path / f"metrics_{tag}.csv", history)
    return TrainResult(best_params, params, history, best_val, init_val, global_step)


def write_metrics_csv(path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["step", "epoch", "train_loss", "val_loss", "lr", "wall_ms"])
        writer.writeheader()
        writer.writerows(history)


def _save(path, params: DenoiserParams, meta_base: dict, epoch: int,
          global_step: int, state: nc.AdamState | None = None) -> None:
    tensors = {name: t.data for name, t in params.tensors.items()}
    if state is not None:
        for name in params.tensors:
            tensors[f"opt.m.{name}"] = state.m[name]
            tensors[f"opt.v.{name}"] = state.v[name]
    meta = dict(meta_base, epoch=epoch, global_step=global_step,
                opt_step=state.step if state is not None else 0)
    nc.save_checkpoint(path, tensors, meta)


def load_denoiser(path) -> tuple[DenoiserParams, dict]:
    """Load trainable tensors (optimizer entries stripped) plus metadata."""
    tensors, meta = nc.load_checkpoint(path)
    config = DenoiserConfig.from_dict(meta["model"])
    trainable = {name: nc.Tensor(arr, requires_grad=True)
                 for name, arr in tensors.items() if not name.startswith("opt.")}
    params = DenoiserParams(config, trainable)
    expected = init_denoiser(config, np.random.default_rng(0))
    if set(expected.tensors) != set(trainable):
        raise ConfigurationError(
            "checkpoint tensor names do not match the model config in its header")
    for name, t in expected.tensors.items():
        if trainable[name].shape != t.shape:
            raise ConfigurationError(
                f"checkpoint tensor '{name}' has shape {trainable[name].shape}, "
                f"config implies {t.shape}")
    return params, meta


def _load_resume(params: DenoiserParams, state: nc.AdamState, path) -> tuple[int, int]:
    tensors, meta = nc.load_checkpoint(path)
    for name, t in params.tensors.items():
        if name not in tensors:
            raise ConfigurationError(f"resume checkpoint is missing tensor '{name}'")
        t.data = tensors[name]
        if f"opt.m.{name}" in tensors:
            state.m[name] = tensors[f"opt.m.{name}"]
            state.v[name] = tensors[f"opt.v.{name}"]
    state.step = int(meta.get("opt_step", 0))
    return int(meta.get("epoch", -1)) + 1, int(meta.get("global_step", 0))
