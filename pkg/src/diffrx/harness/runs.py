"""Orchestration for the CLI subcommands: generate, train, evaluate, baseline.

Every run writes its artifacts plus a manifest into one output directory;
re-running with the same config, seed, and inputs reproduces the CSV bytes.
DM estimators are wrapped with transparent zero-pad/crop when the grid is
not divisible by 2^depth, and the pad sizes are recorded in the manifest.
"""

from __future__ import annotations

import csv
import os
from dataclasses import replace
from pathlib import Path

import numpy as np
from sklearn.utils.metaestimators import available_if

from ..chansim import Dataset, build_dataset, load_dataset, normalize_splits, save_dataset
from ..errors import ConfigurationError
from ..estimators import (
    ChannelEstimatorBase,
    LinearInterpolationEstimator,
    LmmseEstimator,
    nmse,
)
from ..grid import ResourceGrid
from ..pilots import PilotMask, PilotObservation, observe_spec
from ..receiver import LinkSimConfig, end_to_end_ber
from ..sampler import (
    BestOfNEstimator,
    DiffusionEstimator,
    SamplerConfig,
    nmse_vs_steps_sweep,
)
from ..trainer import load_denoiser, train
from .config import LinkConfig
from .manifest import RunManifest

DATASET_FILES = ("train.ds", "val.ds", "test.ds")
CLASSICAL = ("ls-linear", "lmmse")
DM_ESTIMATORS = ("dm-vanilla", "dm-repaint", "dm-best-of-n")
DEFAULT_ESTIMATORS = ("ls-linear", "lmmse", "dm-vanilla", "dm-repaint")


def worker_count() -> int:
    value = os.environ.get("DIFFRX_THREADS", "1")
    try:
        count = int(value)
    except ValueError:
        raise ConfigurationError(f"DIFFRX_THREADS must be an integer, got {value!r}")
    return max(1, count)


def prepare_out_dir(out_dir, force: bool) -> Path:
    path = Path(out_dir)
    if (path / "manifest.json").exists() and not force:
        raise ConfigurationError(
            f"{path} already holds a run (manifest.json present); use --force to overwrite")
    path.mkdir(parents=True, exist_ok=True)
    return path


def run_generate(config: LinkConfig, out_dir, force: bool = False) -> Path:
    out = prepare_out_dir(out_dir, force)
    rng = np.random.default_rng(config.seed)
    splits = build_dataset(config.channel, config.dataset.n_train,
                           config.dataset.n_val, config.dataset.n_test, rng,
                           max_workers=worker_count())
    splits = normalize_splits(*splits)
    manifest = RunManifest(config.config_hash(), "generate")
    for name, ds in zip(DATASET_FILES, splits):
        save_dataset(out / name, ds)
        manifest.add_output(out / name)
    manifest.write(out)
    return out


def load_splits(data_dir, config: LinkConfig) -> tuple[Dataset, Dataset, Dataset]:
    data_dir = Path(data_dir)
    splits = []
    expected = (config.channel.num_subcarriers, config.channel.num_symbols)
    for name in DATASET_FILES:
        path = data_dir / name
        if not path.exists():
            raise ConfigurationError(f"dataset file missing: {path}")
        ds = load_dataset(path)
        if ds.grid_shape != expected:
            raise ConfigurationError(
                f"{path}: grid {ds.grid_shape} does not match config {expected}")
        splits.append(ds)
    return tuple(splits)


def checkpoint_name(spacing: int) -> str:
    return f"ckpt_comb{spacing}_best.bin"


def run_train(config: LinkConfig, data_dir, out_dir, densities: list[int],
              force: bool = False, resume: bool = False) -> Path:
    out = prepare_out_dir(out_dir, force or resume)
    train_ds, val_ds, _ = load_splits(data_dir, config)
    manifest = RunManifest(config.config_hash(), "train")
    for name in DATASET_FILES[:2]:
        manifest.add_input(Path(data_dir) / name)
    final_val = {}
    for spacing in densities:
        cfg_d = config.with_pilot_spacing(spacing)
        tag = f"comb{spacing}"
        resume_from = out / f"ckpt_{tag}_last.bin"
        result = train(cfg_d.train_config(), train_ds, val_ds, config.model,
                       config.schedule, out_dir=out, tag=tag,
                       resume_from=resume_from if resume and resume_from.exists() else None)
        final_val[spacing] = result.best_val
        for suffix in ("best", "last"):
            manifest.add_output(out / f"ckpt_{tag}_{suffix}.bin")
        manifest.add_output(out / f"metrics_{tag}.csv")
    manifest.extra["final_val_loss"] = {str(k): v for k, v in final_val.items()}
    manifest.write(out)
    return out


def _inner_selects_candidates(est: "PadCropEstimator") -> bool:
    return hasattr(est.inner, "predict_batch_with_scorers")


class PadCropEstimator(ChannelEstimatorBase):
    """Zero-pads observations to pooling-compatible dims, crops the estimate."""

    def __init__(self, inner: ChannelEstimatorBase, factor: int):
        self.inner = inner
        self.factor = factor

    def _padded(self, obs: PilotObservation) -> PilotObservation:
        k, m = obs.ls_estimate.shape
        k_pad = (-k) % self.factor
        m_pad = 0 if m == 1 else (-m) % self.factor
        if k_pad == 0 and m_pad == 0:
            return obs
        pad = ((0, k_pad), (0, m_pad))
        ls = ResourceGrid(np.pad(obs.ls_estimate.re, pad), np.pad(obs.ls_estimate.im, pad))
        mask = PilotMask(np.pad(obs.mask.values, pad), scheme=obs.mask.scheme,
                         soft=obs.mask.soft)
        return PilotObservation(ls, mask, obs.noise_var)

    def pad_sizes(self, k: int, m: int) -> tuple[int, int]:
        return (-k) % self.factor, 0 if m == 1 else (-m) % self.factor

    def predict_batch(self, observations) -> list[ResourceGrid]:
        k, m = observations[0].ls_estimate.shape
        padded = [self._padded(o) for o in observations]
        outs = self.inner.predict_batch(padded)
        return [ResourceGrid(o.re[:k, :m], o.im[:k, :m]) for o in outs]

    def predict(self, obs: PilotObservation) -> ResourceGrid:
        return self.predict_batch([obs])[0]

    @available_if(_inner_selects_candidates)
    def predict_batch_with_scorers(self, observations, scorers) -> list[ResourceGrid]:
        k, m = observations[0].ls_estimate.shape

        def cropped_scorer(scorer):
            return lambda grid: scorer(ResourceGrid(grid.re[:k, :m], grid.im[:k, :m]))

        padded = [self._padded(o) for o in observations]
        outs = self.inner.predict_batch_with_scorers(
            padded, [cropped_scorer(s) for s in scorers])
        return [ResourceGrid(o.re[:k, :m], o.im[:k, :m]) for o in outs]


def build_estimator(name: str, config: LinkConfig, spacing: int,
                    train_ds: Dataset | None, ckpt_dir, seed: int):
    """Resolve a named estimator strategy; DM names need a checkpoint."""
    name = name.strip().lower()
    if name == "perfect":
        return "perfect"
    if name == "ls-linear":
        return LinearInterpolationEstimator()
    if name == "lmmse":
        if train_ds is None:
            raise ConfigurationError("lmmse needs the training dataset")
        return LmmseEstimator().fit(train_ds)
    if name in DM_ESTIMATORS:
        if ckpt_dir is None:
            raise ConfigurationError(f"estimator {name} needs --ckpt")
        ckpt = Path(ckpt_dir)
        path = ckpt / checkpoint_name(spacing) if ckpt.is_dir() else ckpt
        if not path.exists():
            return None  # absent row, not a failure
        pipeline = "vanilla" if name == "dm-vanilla" else "repaint"
        sampler_cfg = replace(config.sampler, pipeline=pipeline, seed=seed)
        if name == "dm-best-of-n":
            candidates = max(config.sampler.candidates, 2)
            sampler_cfg = replace(sampler_cfg, candidates=candidates)
            inner = BestOfNEstimator.from_checkpoint(path, sampler_cfg)
        else:
            inner = DiffusionEstimator.from_checkpoint(path, sampler_cfg)
        factor = 2 ** config.model.depth
        return PadCropEstimator(inner, factor)
    raise ConfigurationError(
        f"unknown estimator '{name}' "
        f"(perfect|ls-linear|lmmse|dm-vanilla|dm-repaint|dm-best-of-n)")


def _format(value) -> str:
    if value is None:
        return ""
    return str(value)


def write_csv(path, fieldnames: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fieldnames)
        for row in rows:
            writer.writerow([_format(row.get(name)) for name in fieldnames])


def baseline_rows(config: LinkConfig, estimators: list[str], densities: list[int],
                  splits, ckpt_dir, seed: int) -> list[dict]:
    """Mean NMSE per (estimator, density) on the test split at config SNRs."""
    train_ds, _, test_ds = splits
    n = min(config.eval_grids, len(test_ds))
    rows = []
    for spacing in densities:
        for name in estimators:
            estimator = build_estimator(name, config, spacing, train_ds, ckpt_dir, seed)
            for snr_db in config.snr_db:
                row = {"estimator": name, "density": f"1/{spacing}", "snr_db": snr_db,
                       "nmse_mean": None, "nmse_std": None, "n_grids": 0, "seed": seed}
                if estimator is not None:
                    rng = np.random.default_rng(
                        np.random.SeedSequence([seed, spacing, int(round(snr_db * 1000))]))
                    pilot = replace(config.pilot, spacing=spacing)
                    observations = [observe_spec(test_ds.grid(i), pilot, snr_db, rng)
                                    for i in range(n)]
                    if estimator == "perfect":
                        estimates = [test_ds.grid(i) for i in range(n)]
                    else:
                        estimates = estimator.predict_batch(observations)
                    values = [nmse(estimates[i], test_ds.grid(i)) for i in range(n)]
                    row.update(nmse_mean=float(np.mean(values)),
                               nmse_std=float(np.std(values)), n_grids=n)
                rows.append(row)
    return rows


def ber_rows(config: LinkConfig, estimators: list[str], densities: list[int],
             splits, ckpt_dir, seed: int) -> list[dict]:
    train_ds, _, _ = splits
    rows = []
    for spacing in densities:
        pilot = replace(config.pilot, spacing=spacing)
        sim = LinkSimConfig(channel=config.channel, pilot=pilot,
                            modulation=config.modulation, snr_db=config.snr_db,
                            n_frames=config.eval_frames, seed=seed,
                            normalization=train_ds.normalization)
        for name in estimators:
            estimator = build_estimator(name, config, spacing, train_ds, ckpt_dir, seed)
            if estimator is None:
                for snr_db in config.snr_db:
                    rows.append({"estimator": name, "snr_db": snr_db,
                                 "density": f"1/{spacing}", "ber": None,
                                 "nmse_mean": None, "n_bits": 0, "seed": seed})
                continue
            result = end_to_end_ber(sim, estimator)
            for stats in result.per_snr:
                rows.append({
                    "estimator": name, "snr_db": stats.snr_db,
                    "density": f"1/{spacing}", "ber": stats.ber,
                    "nmse_mean": stats.nmse_mean, "n_bits": stats.n_bits,
                    "seed": seed,
                })
    return rows


def run_evaluate(config: LinkConfig, data_dir, ckpt_dir, out_dir,
                 estimators: list[str], densities: list[int], steps: list[int],
                 seed: int, force: bool = False, skip_ber: bool = False) -> Path:
    out = prepare_out_dir(out_dir, force)
    splits = load_splits(data_dir, config)
    train_ds, _, test_ds = splits
    manifest = RunManifest(config.config_hash(), "evaluate")
    for name in DATASET_FILES:
        manifest.add_input(Path(data_dir) / name)

    dm_wanted = [e for e in estimators if e in DM_ESTIMATORS]
    if dm_wanted:
        params_by_density = {}
        for spacing in densities:
            path = Path(ckpt_dir) / checkpoint_name(spacing) if ckpt_dir else None
            if path is not None and path.exists():
                params_by_density[spacing] = load_denoiser(path)[0]
                manifest.add_input(path)
            else:
                params_by_density[spacing] = None
        pipelines = tuple(e.replace("dm-", "") for e in dm_wanted
                          if e in ("dm-vanilla", "dm-repaint"))
        if pipelines:
            rows = nmse_vs_steps_sweep(
                params_by_density, test_ds, densities, steps,
                config.schedule.build(), config.snr_db[0], seed,
                pipelines=pipelines, n_grids=config.eval_grids)
            write_csv(out / "nmse_vs_steps.csv",
                      ["density", "steps", "pipeline", "nmse_mean", "nmse_std",
                       "n_grids", "seed"], rows)
            manifest.add_output(out / "nmse_vs_steps.csv")

    rows = baseline_rows(config, estimators, densities, splits, ckpt_dir, seed)
    write_csv(out / "baseline.csv",
              ["estimator", "density", "snr_db", "nmse_mean", "nmse_std",
               "n_grids", "seed"], rows)
    manifest.add_output(out / "baseline.csv")

    if not skip_ber:
        rows = ber_rows(config, estimators, densities, splits, ckpt_dir, seed)
        write_csv(out / "ber_vs_snr.csv",
                  ["estimator", "snr_db", "density", "ber", "nmse_mean",
                   "n_bits", "seed"], rows)
        manifest.add_output(out / "ber_vs_snr.csv")

    factor = 2 ** config.model.depth
    k, m = config.channel.num_subcarriers, config.channel.num_symbols
    k_pad = (-k) % factor
    m_pad = 0 if m == 1 else (-m) % factor
    if dm_wanted and (k_pad or m_pad):
        manifest.extra["grid_padding"] = {"k_pad": k_pad, "m_pad": m_pad}
    manifest.write(out)
    return out
