"""Training loop: loss calibration, convergence smoke test, determinism."""

import math

import numpy as np
import pytest

from diffrx import numcore as nc
from diffrx.chansim import ChannelModelConfig, Dataset, draw_batch, normalize_splits
from diffrx.denoiser import DenoiserConfig, init_denoiser
from diffrx.diffusion import ScheduleSpec
from diffrx.errors import ConfigurationError, NumericsError
from diffrx.pilots import PilotSpec, observe_spec
from diffrx.grid import ResourceGrid
from diffrx.trainer import (
    TrainConfig,
    load_denoiser,
    train,
    train_step,
)

MODEL = DenoiserConfig(base_channels=8, depth=1, time_embed_dim=16)
SCHED_SPEC = ScheduleSpec(num_steps=100)
PILOT = PilotSpec(scheme="comb", spacing=4)


def toy_splits(n_train=64, n_val=16, k=16, seed=0):
    cfg = ChannelModelConfig(num_subcarriers=k)
    rng = np.random.default_rng(seed)
    total = draw_batch(cfg, n_train + n_val + 4, rng)
    train_ds = Dataset(total[:n_train], config=cfg)
    val_ds = Dataset(total[n_train:n_train + n_val], config=cfg)
    test_ds = Dataset(total[n_train + n_val:], config=cfg)
    return normalize_splits(train_ds, val_ds, test_ds)


def make_batch(ds, spec, snr_db, rng, size):
    batch = []
    for i in range(size):
        grid = ResourceGrid.from_complex(ds.samples[i])
        batch.append((ds.samples[i], observe_spec(grid, spec, snr_db, rng)))
    return batch


class TestTrainStep:
    def test_initial_loss_matches_noise_variance(self):
        # zero-initialized net predicts 0, so loss per complex element is
        # E|eps|^2 = 2.0 (two unit-variance real channels)
        train_ds, _, _ = toy_splits()
        rng = np.random.default_rng(1)
        params = init_denoiser(MODEL, rng)
        state = nc.AdamState(params.tensors)
        batch = make_batch(train_ds, PILOT, 20.0, rng, 32)
        loss = train_step(params, batch, SCHED_SPEC.build(), rng, state, lr=0.0)
        per_complex = 2.0 * loss
        assert per_complex == pytest.approx(2.0, rel=0.30)

    def test_smoothed_loss_decreases(self):
        # 200 steps on a small toy set; smoothed (window 20) start vs end
        sched = SCHED_SPEC.build()
        for seed in (0, 1, 2):
            train_ds, _, _ = toy_splits(n_train=96, seed=seed)
            rng = np.random.default_rng(seed + 100)
            params = init_denoiser(MODEL, rng)
            state = nc.AdamState(params.tensors)
            losses = []
            for step in range(200):
                idx = rng.permutation(len(train_ds))[:16]
                batch = make_batch(
                    Dataset(train_ds.samples[idx], normalization=train_ds.normalization),
                    PILOT, 20.0, rng, 16)
                losses.append(train_step(params, batch, sched, rng, state, lr=1e-3))
            assert np.mean(losses[-20:]) < np.mean(losses[:20]), f"seed {seed}"

    def test_identical_seed_identical_trajectory(self):
        def run():
            train_ds, _, _ = toy_splits()
            rng = np.random.default_rng(7)
            params = init_denoiser(MODEL, np.random.default_rng(3))
            state = nc.AdamState(params.tensors)
            sched = SCHED_SPEC.build()
            return [train_step(params, make_batch(train_ds, PILOT, 20.0, rng, 8),
                               sched, rng, state, 1e-3) for _ in range(5)]

        assert run() == run()

    def test_step_mutates_only_params_and_state(self):
        train_ds, _, _ = toy_splits()
        rng = np.random.default_rng(4)
        params = init_denoiser(MODEL, rng)
        state = nc.AdamState(params.tensors)
        samples_before = train_ds.samples.copy()
        batch = make_batch(train_ds, PILOT, 20.0, rng, 8)
        ls_before = [obs.ls_estimate.to_complex().copy() for _, obs in batch]
        train_step(params, batch, SCHED_SPEC.build(), rng, state, 1e-3)
        np.testing.assert_array_equal(train_ds.samples, samples_before)
        for (_, obs), before in zip(batch, ls_before):
            np.testing.assert_array_equal(obs.ls_estimate.to_complex(), before)
        assert state.step == 1

    def test_nan_loss_aborts_with_diagnostics(self):
        train_ds, _, _ = toy_splits()
        rng = np.random.default_rng(5)
        params = init_denoiser(MODEL, rng)
        params.tensors["enc0.conv1.w"].data[:] = np.nan
        state = nc.AdamState(params.tensors)
        batch = make_batch(train_ds, PILOT, 20.0, rng, 4)
        with pytest.raises(NumericsError, match="lr="):
            train_step(params, batch, SCHED_SPEC.build(), rng, state, 1e-3)

    def test_gradient_norm_finite_and_loss_nonnegative(self):
        train_ds, _, _ = toy_splits()
        rng = np.random.default_rng(6)
        params = init_denoiser(MODEL, rng)
        state = nc.AdamState(params.tensors)
        loss = train_step(params, make_batch(train_ds, PILOT, 20.0, rng, 8),
                          SCHED_SPEC.build(), rng, state, 1e-3)
        assert loss >= 0.0
        for t in params.tensors.values():
            assert np.isfinite(t.grad).all()


class TestTrainLoop:
    def _cfg(self, **kw):
        defaults = dict(epochs=3, batch_size=16, lr=1e-3, seed=11, pilot=PILOT,
                        snr_range_db=(10.0, 30.0), checkpoint_every=1)
        defaults.update(kw)
        return TrainConfig(**defaults)

    def test_best_never_worse_than_last(self, tmp_path):
        train_ds, val_ds, _ = toy_splits()
        result = train(self._cfg(), train_ds, val_ds, MODEL, SCHED_SPEC,
                       out_dir=tmp_path, tag="comb4")
        assert result.best_val <= result.history[-1]["val_loss"] + 1e-12

    def test_frozen_val_deterministic(self, tmp_path):
        train_ds, val_ds, _ = toy_splits()
        r1 = train(self._cfg(), train_ds, val_ds, MODEL, SCHED_SPEC)
        r2 = train(self._cfg(), train_ds, val_ds, MODEL, SCHED_SPEC)
        assert [h["val_loss"] for h in r1.history] == [h["val_loss"] for h in r2.history]
        assert [h["train_loss"] for h in r1.history] == [h["train_loss"] for h in r2.history]

    def test_checkpoint_bytes_deterministic(self, tmp_path):
        train_ds, val_ds, _ = toy_splits()
        d1, d2 = tmp_path / "a", tmp_path / "b"
        d1.mkdir(), d2.mkdir()
        train(self._cfg(), train_ds, val_ds, MODEL, SCHED_SPEC, out_dir=d1, tag="t")
        train(self._cfg(), train_ds, val_ds, MODEL, SCHED_SPEC, out_dir=d2, tag="t")
        assert (d1 / "ckpt_t_best.bin").read_bytes() == (d2 / "ckpt_t_best.bin").read_bytes()

    def test_metrics_csv_columns(self, tmp_path):
        train_ds, val_ds, _ = toy_splits()
        train(self._cfg(epochs=2), train_ds, val_ds, MODEL, SCHED_SPEC,
              out_dir=tmp_path, tag="m")
        header = (tmp_path / "metrics_m.csv").read_text().splitlines()[0]
        assert header == "step,epoch,train_loss,val_loss,lr,wall_ms"

    def test_density_tagged_checkpoints(self, tmp_path):
        train_ds, val_ds, _ = toy_splits()
        for spacing in (2, 4):
            spec = PilotSpec(scheme="comb", spacing=spacing)
            train(self._cfg(pilot=spec, epochs=1), train_ds, val_ds, MODEL,
                  SCHED_SPEC, out_dir=tmp_path, tag=spec.density_tag)
        assert (tmp_path / "ckpt_comb2_best.bin").exists()
        assert (tmp_path / "ckpt_comb4_best.bin").exists()
        meta2 = load_denoiser(tmp_path / "ckpt_comb2_best.bin")[1]
        assert meta2["pilot"]["spacing"] == 2

    def test_resume_continues_step_count(self, tmp_path):
        train_ds, val_ds, _ = toy_splits()
        first = train(self._cfg(epochs=2), train_ds, val_ds, MODEL, SCHED_SPEC,
                      out_dir=tmp_path, tag="r")
        resumed = train(self._cfg(epochs=4), train_ds, val_ds, MODEL, SCHED_SPEC,
                        out_dir=tmp_path, tag="r",
                        resume_from=tmp_path / "ckpt_r_last.bin")
        steps_per_epoch = math.ceil(len(train_ds) / 16)
        assert first.global_step == 2 * steps_per_epoch
        assert resumed.global_step == 4 * steps_per_epoch
        assert resumed.history[0]["epoch"] == 2

    def test_loaded_checkpoint_matches_trained_params(self, tmp_path):
        train_ds, val_ds, _ = toy_splits()
        result = train(self._cfg(epochs=1), train_ds, val_ds, MODEL, SCHED_SPEC,
                       out_dir=tmp_path, tag="x")
        params, meta = load_denoiser(tmp_path / "ckpt_x_last.bin")
        assert meta["schedule"]["num_steps"] == SCHED_SPEC.num_steps
        for name, t in result.params_last.tensors.items():
            np.testing.assert_array_equal(params.tensors[name].data, t.data)

    def test_lr_halving_schedule(self):
        train_ds, val_ds, _ = toy_splits(n_train=16, n_val=4)
        result = train(self._cfg(epochs=10, batch_size=16), train_ds, val_ds,
                       MODEL, SCHED_SPEC)
        lrs = [h["lr"] for h in result.history]
        assert lrs[0] == pytest.approx(1e-3)
        assert lrs[6] == pytest.approx(5e-4)   # >= 60% of epochs
        assert lrs[9] == pytest.approx(2.5e-4)  # >= 85% of epochs

    def test_invalid_config_rejected(self):
        with pytest.raises(ConfigurationError):
            TrainConfig(epochs=0)
        with pytest.raises(ConfigurationError):
            TrainConfig(snr_range_db=(20.0, 10.0))

    def test_joint_training_mode_runs(self):
        train_ds, val_ds, _ = toy_splits(n_train=16, n_val=4)
        cfg = self._cfg(epochs=1, joint_spacings=(2, 4, 8), batch_size=16)
        result = train(cfg, train_ds, val_ds, MODEL, SCHED_SPEC)
        assert len(result.history) == 1
