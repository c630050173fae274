"""Classical baseline channel estimators and the fit/predict estimator API.

The math lives in free functions (linear_interp, lmmse_interp, nmse,
empirical_covariance); thin sklearn-style wrappers expose them with the
usual fit/predict/get_params conventions so they compose with pipelines,
cloning, and parameter search. LMMSE solves the complex normal equations
with LAPACK's pivoted solver via numpy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .chansim import Dataset
from .errors import ConfigurationError, DimensionError, MetricError, NumericsError
from .grid import ResourceGrid, check_same_shape
from .pilots import PilotObservation

LMMSE_DIAG_REG = 1e-9  # relative ridge on the pilot covariance diagonal


def nmse(estimate: ResourceGrid, truth: ResourceGrid) -> float:
    """Normalized MSE ||est - truth||^2 / ||truth||^2 (complex Frobenius)."""
    check_same_shape(estimate, truth, "estimate and truth")
    denom = np.sum(truth.re ** 2 + truth.im ** 2)
    if denom == 0.0:
        raise MetricError("NMSE is undefined for a zero-power reference grid")
    num = np.sum((estimate.re - truth.re) ** 2 + (estimate.im - truth.im) ** 2)
    return float(num / denom)


@dataclass
class CovarianceModel:
    """K x K Hermitian frequency covariance, stored as two real planes."""

    re: np.ndarray
    im: np.ndarray
    source: str = "custom"   # empirical-from-train-set | analytic-from-pdp | custom

    def __post_init__(self):
        self.re = np.asarray(self.re, dtype=np.float64)
        self.im = np.asarray(self.im, dtype=np.float64)
        r = self.matrix
        if r.ndim != 2 or r.shape[0] != r.shape[1]:
            raise DimensionError(f"covariance must be square, got {r.shape}")
        if not np.allclose(r, r.conj().T, atol=1e-10):
            raise ConfigurationError("covariance is not Hermitian within 1e-10")
        eigs = np.linalg.eigvalsh(r)
        if eigs.min() < -1e-8:
            raise ConfigurationError(
                f"covariance is not PSD: min eigenvalue {eigs.min():.3e}")

    @classmethod
    def from_matrix(cls, r: np.ndarray, source: str = "custom") -> "CovarianceModel":
        r = np.asarray(r, dtype=complex)
        return cls(r.real, r.imag, source=source)

    @property
    def matrix(self) -> np.ndarray:
        return self.re + 1j * self.im

    @property
    def dim(self) -> int:
        return self.re.shape[0]


def empirical_covariance(train: Dataset) -> CovarianceModel:
    """R = mean of h h^H over all samples and symbol columns, symmetrized."""
    if len(train) < 2:
        raise ConfigurationError(f"need >= 2 samples, got {len(train)}")
    h = train.samples.transpose(0, 2, 1).reshape(-1, train.grid_shape[0])
    r = h.T @ h.conj() / h.shape[0]
    r = 0.5 * (r + r.conj().T)
    return CovarianceModel.from_matrix(r, source="empirical-from-train-set")


def _columns_with_pilots(mask_values: np.ndarray) -> np.ndarray:
    return np.nonzero((mask_values > 0).any(axis=0))[0]


def _nearest_fill_columns(est: np.ndarray, filled_cols: np.ndarray) -> None:
    """Copy each empty column from its nearest estimated column (ties: earlier)."""
    m = est.shape[1]
    for col in range(m):
        if col not in filled_cols:
            nearest = filled_cols[np.argmin(np.abs(filled_cols - col))]
            est[:, col] = est[:, nearest]


def linear_interp(obs: PilotObservation) -> ResourceGrid:
    """Complex linear interpolation along subcarriers between pilot LS values.

    Edges hold the nearest pilot value. Columns without pilots copy the
    nearest pilot-bearing column. With fewer than 2 pilots in a column the
    estimate falls back to nearest-fill and flags it in the result metadata.
    """
    mask = obs.mask.values
    ls = obs.ls_estimate.to_complex()
    k, m = mask.shape
    est = np.zeros((k, m), dtype=complex)
    meta = {}
    cols = _columns_with_pilots(mask)
    if cols.size == 0:
        raise ConfigurationError("observation has no pilots")
    xs = np.arange(k)
    for col in cols:
        pos = np.nonzero(mask[:, col] > 0)[0]
        if pos.size < 2:
            est[:, col] = ls[pos[0], col]
            meta["fallback"] = "nearest-fill"
        else:
            est[:, col] = np.interp(xs, pos, ls[pos, col].real) \
                + 1j * np.interp(xs, pos, ls[pos, col].imag)
    _nearest_fill_columns(est, cols)
    return ResourceGrid.from_complex(est, meta=meta)


def lmmse_interp(obs: PilotObservation, cov: CovarianceModel) -> ResourceGrid:
    """LMMSE interpolation per symbol column.

    H_hat = R[:, P] (R[P, P] + sigma^2 I)^-1 H_ls[P], with a small relative
    ridge on the diagonal to survive near-singular dense pilot covariances.
    The time axis is handled independently; empty columns copy the nearest
    estimated column.
    """
    mask = obs.mask.values
    k, m = mask.shape
    if cov.dim != k:
        raise DimensionError(f"covariance dim {cov.dim} does not match K={k}")
    ls = obs.ls_estimate.to_complex()
    r = cov.matrix
    est = np.zeros((k, m), dtype=complex)
    cols = _columns_with_pilots(mask)
    if cols.size == 0:
        raise ConfigurationError("observation has no pilots")
    for col in cols:
        pos = np.nonzero(mask[:, col] > 0)[0]
        r_pp = r[np.ix_(pos, pos)].copy()
        ridge = LMMSE_DIAG_REG * np.trace(r_pp).real / pos.size
        system = r_pp + (obs.noise_var + ridge) * np.eye(pos.size)
        cond = np.linalg.cond(system)
        if not np.isfinite(cond) or cond > 1e14:
            raise NumericsError(
                f"LMMSE pilot system is numerically singular (cond ~ {cond:.2e})")
        weights = np.linalg.solve(system, ls[pos, col])
        est[:, col] = r[:, pos] @ weights
    _nearest_fill_columns(est, cols)
    return ResourceGrid.from_complex(est)


def check_training_grids(X) -> np.ndarray:
    """Validate/convert fit() input into an (n, K, M) complex array."""
    if isinstance(X, Dataset):
        return X.samples
    arr = np.asarray(X)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise DimensionError(
            f"training grids must be (n, K, M) or (n, K), got shape {arr.shape}")
    return arr.astype(complex)


def check_observation(obs) -> PilotObservation:
    if not isinstance(obs, PilotObservation):
        raise DimensionError(
            f"predict() expects a PilotObservation, got {type(obs).__name__}")
    return obs


class ChannelEstimatorBase(BaseEstimator):
    """fit on clean training grids, predict full grids from pilot observations."""

    def fit(self, X, y=None):
        return self

    def predict(self, obs: PilotObservation) -> ResourceGrid:
        raise NotImplementedError

    def predict_batch(self, observations) -> list[ResourceGrid]:
        return [self.predict(o) for o in observations]


class LinearInterpolationEstimator(ChannelEstimatorBase):
    """Stateless linear interpolation between pilot LS values."""

    def predict(self, obs: PilotObservation) -> ResourceGrid:
        return linear_interp(check_observation(obs))


class LmmseEstimator(ChannelEstimatorBase):
    """LMMSE interpolation; fit() learns the empirical frequency covariance.

    Parameters
    ----------
    covariance : optional CovarianceModel to use instead of fitting one.
    """

    def __init__(self, covariance: CovarianceModel | None = None):
        self.covariance = covariance

    def fit(self, X, y=None):
        if self.covariance is not None:
            self.covariance_ = self.covariance
        else:
            grids = check_training_grids(X)
            self.covariance_ = empirical_covariance(Dataset(grids))
        return self

    def predict(self, obs: PilotObservation) -> ResourceGrid:
        if not hasattr(self, "covariance_"):
            raise ConfigurationError("LmmseEstimator.predict called before fit")
        return lmmse_interp(check_observation(obs), self.covariance_)
