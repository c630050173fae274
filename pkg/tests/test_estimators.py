"""Baseline estimators: NMSE metric, covariance, linear and LMMSE interpolation."""

import math

import numpy as np
import pytest
from sklearn.base import clone

from diffrx.chansim import ChannelModelConfig, Dataset, draw_batch, normalize_dataset
from diffrx.errors import ConfigurationError, DimensionError, MetricError
from diffrx.estimators import (
    LMMSE_DIAG_REG,
    ChannelEstimatorBase,
    CovarianceModel,
    LinearInterpolationEstimator,
    LmmseEstimator,
    empirical_covariance,
    linear_interp,
    lmmse_interp,
    nmse,
)
from diffrx.grid import ResourceGrid
from diffrx.pilots import PilotMask, PilotObservation, comb_mask, observe


def gaussian_grids_from_cov(r: np.ndarray, n: int, rng) -> np.ndarray:
    """Draw h ~ CN(0, R) columns; independent oracle for matched-covariance tests."""
    vals, vecs = np.linalg.eigh(r)
    vals = np.clip(vals, 0.0, None)
    root = vecs * np.sqrt(vals)
    z = (rng.standard_normal((r.shape[0], n)) + 1j * rng.standard_normal((r.shape[0], n))) \
        / np.sqrt(2.0)
    return (root @ z).T[:, :, None]


def exp_correlation_matrix(k: int, coherence: float = 12.0) -> np.ndarray:
    """Exponentially correlated Hermitian test covariance."""
    idx = np.arange(k)
    lag = idx[:, None] - idx[None, :]
    return np.exp(-np.abs(lag) / coherence) * np.exp(-0.2j * lag / coherence)


def make_obs(h: np.ndarray, pos: np.ndarray, sigma2: float, rng) -> PilotObservation:
    k = h.shape[0]
    mask = PilotMask(np.isin(np.arange(k), pos).astype(float)[:, None], scheme="custom")
    noise = (rng.standard_normal(pos.size) + 1j * rng.standard_normal(pos.size)) \
        * math.sqrt(sigma2 / 2.0)
    ls = np.zeros((k, 1), dtype=complex)
    ls[pos, 0] = h[pos, 0] + noise
    return PilotObservation(ResourceGrid.from_complex(ls), mask, sigma2)


class TestNmse:
    def test_exact_match_zero(self):
        g = ResourceGrid(np.ones((4, 2)), np.zeros((4, 2)))
        assert nmse(g, g) == 0.0

    def test_zero_estimate_one(self):
        truth = ResourceGrid(np.ones((4, 2)), np.ones((4, 2)))
        assert nmse(ResourceGrid.zeros(4, 2), truth) == pytest.approx(1.0)

    def test_definition(self):
        rng = np.random.default_rng(0)
        truth = ResourceGrid.from_complex(rng.standard_normal((8, 1))
                                          + 1j * rng.standard_normal((8, 1)))
        err = rng.standard_normal((8, 1)) + 1j * rng.standard_normal((8, 1))
        err *= math.sqrt(0.1 * truth.power() * truth.re.size
                         / np.sum(np.abs(err) ** 2))
        est = ResourceGrid.from_complex(truth.to_complex() + err)
        assert nmse(est, truth) == pytest.approx(0.1, rel=1e-9)

    def test_zero_truth_rejected(self):
        with pytest.raises(MetricError):
            nmse(ResourceGrid.zeros(2, 2), ResourceGrid.zeros(2, 2))

    def test_scale_invariance(self):
        rng = np.random.default_rng(1)
        t = rng.standard_normal((6, 1)) + 1j * rng.standard_normal((6, 1))
        e = t + 0.1 * (rng.standard_normal((6, 1)) + 1j * rng.standard_normal((6, 1)))
        a = nmse(ResourceGrid.from_complex(e), ResourceGrid.from_complex(t))
        b = nmse(ResourceGrid.from_complex(3.7 * e), ResourceGrid.from_complex(3.7 * t))
        assert a == pytest.approx(b, rel=1e-12)


class TestCovariance:
    def test_identical_flat_channels(self):
        ds = Dataset(np.ones((10, 4, 1), dtype=complex))
        cov = empirical_covariance(ds)
        np.testing.assert_allclose(cov.matrix, np.ones((4, 4)))

    def test_iid_vectors_near_identity(self):
        rng = np.random.default_rng(2)
        n, k = 10_000, 8
        h = (rng.standard_normal((n, k, 1)) + 1j * rng.standard_normal((n, k, 1))) \
            / np.sqrt(2)
        cov = empirical_covariance(Dataset(h))
        assert np.max(np.abs(cov.matrix - np.eye(k))) < 0.1

    def test_hermitian_exact_after_symmetrization(self):
        rng = np.random.default_rng(3)
        cfg = ChannelModelConfig(num_subcarriers=16)
        cov = empirical_covariance(Dataset(draw_batch(cfg, 50, rng), config=cfg))
        np.testing.assert_array_equal(cov.matrix, cov.matrix.conj().T)
        assert cov.source == "empirical-from-train-set"

    def test_non_hermitian_rejected(self):
        r = np.eye(3, dtype=complex)
        r[0, 1] = 1.0
        with pytest.raises(ConfigurationError, match="Hermitian"):
            CovarianceModel.from_matrix(r)

    def test_non_psd_rejected(self):
        r = np.diag([1.0, -0.5]).astype(complex)
        with pytest.raises(ConfigurationError, match="PSD"):
            CovarianceModel.from_matrix(r)


class TestLinearInterp:
    def test_midpoint_linearity(self):
        h = np.zeros((8, 1), dtype=complex)
        h[0, 0] = 0.0
        h[4, 0] = 4.0
        obs = make_obs(h, np.array([0, 4]), 0.0, np.random.default_rng(0))
        est = linear_interp(obs).to_complex()
        assert est[2, 0] == pytest.approx(2.0)

    def test_all_ones_mask_returns_ls(self):
        rng = np.random.default_rng(4)
        h = rng.standard_normal((8, 1)) + 1j * rng.standard_normal((8, 1))
        obs = make_obs(h, np.arange(8), 0.0, rng)
        np.testing.assert_allclose(linear_interp(obs).to_complex(),
                                   obs.ls_estimate.to_complex())

    def test_flat_channel_exact(self):
        h = np.full((16, 1), 0.7 - 0.2j)
        obs = make_obs(h, np.array([3, 11]), 0.0, np.random.default_rng(5))
        np.testing.assert_allclose(linear_interp(obs).to_complex(), h, atol=1e-12)

    def test_edges_held_constant(self):
        h = np.zeros((8, 1), dtype=complex)
        h[2, 0] = 1.0 + 1.0j
        h[5, 0] = 3.0 - 1.0j
        obs = make_obs(h, np.array([2, 5]), 0.0, np.random.default_rng(6))
        est = linear_interp(obs).to_complex()
        assert est[0, 0] == est[1, 0] == est[2, 0]
        assert est[6, 0] == est[7, 0] == est[5, 0]

    def test_single_pilot_falls_back_with_flag(self):
        h = np.full((6, 1), 2.0 + 0.0j)
        obs = make_obs(h, np.array([3]), 0.0, np.random.default_rng(7))
        est = linear_interp(obs)
        assert est.meta.get("fallback") == "nearest-fill"
        np.testing.assert_allclose(est.to_complex(), h)

    def test_time_nearest_fill(self):
        mask = np.zeros((4, 3))
        mask[::2, 0] = 1.0
        ls = np.zeros((4, 3), dtype=complex)
        ls[::2, 0] = 1.0
        obs = PilotObservation(ResourceGrid.from_complex(ls),
                               PilotMask(mask, scheme="block"), 0.0)
        est = linear_interp(obs).to_complex()
        np.testing.assert_allclose(est[:, 1], est[:, 0])
        np.testing.assert_allclose(est[:, 2], est[:, 0])


class TestLmmse:
    def test_closed_form_2x2_oracle(self):
        # pilot at k=0 only: H_hat[1] = R[1,0] h_ls / (1 + sigma^2 + ridge)
        rho = 0.8 * np.exp(0.3j)
        r = np.array([[1.0, rho], [np.conj(rho), 1.0]])
        cov = CovarianceModel.from_matrix(r)
        sigma2 = 0.25
        h_ls = 1.3 - 0.4j
        mask = PilotMask(np.array([[1.0], [0.0]]))
        ls = ResourceGrid.from_complex(np.array([[h_ls], [0.0]]))
        obs = PilotObservation(ls, mask, sigma2)
        est = lmmse_interp(obs, cov).to_complex()
        denom = 1.0 + sigma2 + LMMSE_DIAG_REG
        assert est[0, 0] == pytest.approx(h_ls / denom, abs=1e-10)
        assert est[1, 0] == pytest.approx(np.conj(rho) * h_ls / denom, abs=1e-10)

    def test_noiseless_full_mask_recovers_h(self):
        rng = np.random.default_rng(8)
        r = exp_correlation_matrix(16)
        h = gaussian_grids_from_cov(r, 1, rng)[0]
        obs = make_obs(h, np.arange(16), 0.0, rng)
        est = lmmse_interp(obs, CovarianceModel.from_matrix(r))
        np.testing.assert_allclose(est.to_complex(), h, atol=1e-6)

    def test_infinite_noise_shrinks_to_zero(self):
        rng = np.random.default_rng(9)
        r = exp_correlation_matrix(8)
        h = gaussian_grids_from_cov(r, 1, rng)[0]
        obs = make_obs(h, np.arange(0, 8, 2), 1e12, rng)
        est = lmmse_interp(obs, CovarianceModel.from_matrix(r))
        assert est.power() < 1e-9

    def test_beats_linear_on_matched_gaussian(self):
        # LMMSE is the optimal linear estimator under matched statistics
        rng = np.random.default_rng(10)
        k, sigma2, trials = 32, 0.05, 500
        r = exp_correlation_matrix(k, coherence=6.0)
        cov = CovarianceModel.from_matrix(r)
        grids = gaussian_grids_from_cov(r, trials, rng)
        pos = np.arange(1, k, 4)
        lin_err = lm_err = 0.0
        for i in range(trials):
            obs = make_obs(grids[i], pos, sigma2, rng)
            truth = ResourceGrid.from_complex(grids[i])
            lin_err += nmse(linear_interp(obs), truth)
            lm_err += nmse(lmmse_interp(obs, cov), truth)
        assert lm_err / trials <= 1.05 * lin_err / trials

    def test_shrinkage_beats_raw_ls_at_full_density(self):
        rng = np.random.default_rng(11)
        k, sigma2, trials = 16, 0.5, 500
        r = exp_correlation_matrix(k)
        cov = CovarianceModel.from_matrix(r)
        grids = gaussian_grids_from_cov(r, trials, rng)
        ls_err = lm_err = 0.0
        for i in range(trials):
            obs = make_obs(grids[i], np.arange(k), sigma2, rng)
            truth = ResourceGrid.from_complex(grids[i])
            ls_err += nmse(obs.ls_estimate, truth)
            lm_err += nmse(lmmse_interp(obs, cov), truth)
        assert lm_err < ls_err

    def test_dim_mismatch(self):
        cov = CovarianceModel.from_matrix(np.eye(4, dtype=complex))
        h = np.ones((8, 1), dtype=complex)
        obs = make_obs(h, np.arange(0, 8, 2), 0.1, np.random.default_rng(12))
        with pytest.raises(DimensionError):
            lmmse_interp(obs, cov)


class TestSklearnApi:
    def test_linear_estimator_predicts(self):
        rng = np.random.default_rng(13)
        cfg = ChannelModelConfig(num_subcarriers=32)
        ds = normalize_dataset(Dataset(draw_batch(cfg, 4, rng)))
        mask = comb_mask(32, 1, 4, rng, randomize_offset=True)
        obs = observe(ds.grid(0), mask, 20.0, rng)
        est = LinearInterpolationEstimator().fit(ds).predict(obs)
        assert est.shape == (32, 1)

    def test_lmmse_fit_learns_covariance(self):
        rng = np.random.default_rng(14)
        cfg = ChannelModelConfig(num_subcarriers=16)
        ds = normalize_dataset(Dataset(draw_batch(cfg, 400, rng)))
        model = LmmseEstimator().fit(ds)
        assert model.covariance_.dim == 16
        mask = comb_mask(16, 1, 4, rng, randomize_offset=True)
        obs = observe(ds.grid(0), mask, 15.0, rng)
        assert nmse(model.predict(obs), ds.grid(0)) < 0.5

    def test_lmmse_predict_before_fit_rejected(self):
        rng = np.random.default_rng(15)
        mask = comb_mask(8, 1, 2)
        obs = observe(ResourceGrid(np.ones((8, 1)), np.zeros((8, 1))), mask, 10.0, rng)
        with pytest.raises(ConfigurationError, match="before fit"):
            LmmseEstimator().predict(obs)

    def test_get_params_and_clone(self):
        cov = CovarianceModel.from_matrix(np.eye(4, dtype=complex))
        model = LmmseEstimator(covariance=cov)
        assert model.get_params()["covariance"] is cov
        cloned = clone(model)  # deep-copies non-estimator params
        np.testing.assert_array_equal(cloned.covariance.matrix, cov.matrix)
        assert not hasattr(cloned, "covariance_")

    def test_predict_batch_default(self):
        rng = np.random.default_rng(16)
        cfg = ChannelModelConfig(num_subcarriers=16)
        ds = normalize_dataset(Dataset(draw_batch(cfg, 3, rng)))
        mask = comb_mask(16, 1, 4)
        batch = [observe(ds.grid(i), mask, 20.0, rng) for i in range(3)]
        outs = LinearInterpolationEstimator().predict_batch(batch)
        assert len(outs) == 3

    def test_fit_input_validation(self):
        with pytest.raises(DimensionError):
            LmmseEstimator().fit(np.zeros((2, 3, 4, 5)))

    def test_base_estimator_interface(self):
        assert isinstance(LinearInterpolationEstimator(), ChannelEstimatorBase)
