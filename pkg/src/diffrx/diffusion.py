"""DDPM mathematical core: schedule, forward corruption, reverse step.

Timesteps are 1-based: t in {1..T}, with the convention alpha_bar(0) = 1,
which makes the posterior variance at t=1 exactly zero. Grids enter as
arrays with two leading real channels; every op is pure given explicit
noise, so samplers own all randomness.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, UsageError

TERMINAL_ALPHA_BAR = 0.01  # "near pure noise" threshold for a training schedule


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed beta_t, alpha_t, alpha_bar_t and posterior variances.

    Arrays have length T+1; index 0 is the alpha_bar(0)=1 sentinel and the
    beta/alpha entries at index 0 are never read.
    """

    num_steps: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    posterior_var: np.ndarray
    timestep_map: np.ndarray = field(default=None)  # original t per index, if respaced

    def __post_init__(self):
        t = self.num_steps
        if t < 1:
            raise ConfigurationError(f"schedule needs at least 1 step, got T={t}")
        for name in ("beta", "alpha", "alpha_bar", "posterior_var"):
            if len(getattr(self, name)) != t + 1:
                raise ConfigurationError(f"{name} must have length T+1={t + 1}")
        inner = self.beta[1:]
        if np.any(inner <= 0.0) or np.any(inner >= 1.0):
            raise ConfigurationError("beta values must lie strictly in (0, 1)")
        if np.any(np.diff(self.alpha_bar) >= 0.0):
            raise ConfigurationError("alpha_bar must be strictly decreasing")

    @property
    def terminal_alpha_bar(self) -> float:
        return float(self.alpha_bar[self.num_steps])

    def is_near_noise_terminal(self) -> bool:
        """Whether the forward process ends close enough to pure noise."""
        return self.terminal_alpha_bar < TERMINAL_ALPHA_BAR

    def original_time(self, t: int) -> int:
        """Map a (possibly respaced) index to the trained timestep."""
        if self.timestep_map is None:
            return t
        return int(self.timestep_map[t])

    def _check_t(self, t: int, low: int = 1) -> int:
        t = int(t)
        if not low <= t <= self.num_steps:
            raise UsageError(f"timestep {t} outside [{low}, {self.num_steps}]")
        return t


@dataclass(frozen=True)
class ScheduleSpec:
    """Serializable schedule parameters, echoed into checkpoints/configs."""

    num_steps: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 0.02

    def build(self) -> "NoiseSchedule":
        return linear_schedule(self.num_steps, self.beta_min, self.beta_max)

    def to_dict(self) -> dict:
        return {"num_steps": self.num_steps, "beta_min": self.beta_min,
                "beta_max": self.beta_max}

    @classmethod
    def from_dict(cls, data: dict) -> "ScheduleSpec":
        return cls(**data)


def linear_schedule(num_steps: int, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    """Linear beta ramp from beta_min to beta_max over num_steps steps."""
    if num_steps < 2:
        raise ConfigurationError(f"linear schedule needs T >= 2, got {num_steps}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ConfigurationError(
            f"require 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
        )
    beta = np.concatenate([[np.nan], np.linspace(beta_min, beta_max, num_steps)])
    return _from_beta(beta, num_steps)


def _from_beta(beta: np.ndarray, num_steps: int, timestep_map=None) -> NoiseSchedule:
    alpha = 1.0 - beta
    alpha_bar = np.empty(num_steps + 1)
    alpha_bar[0] = 1.0
    alpha_bar[1:] = np.cumprod(alpha[1:])
    posterior_var = np.empty(num_steps + 1)
    posterior_var[0] = 0.0
    posterior_var[1:] = beta[1:] * (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:])
    return NoiseSchedule(num_steps, beta, alpha, alpha_bar, posterior_var,
                         timestep_map=timestep_map)


def q_sample(x0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Forward marginal: x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) eps."""
    t = sched._check_t(t, low=0)
    ab = sched.alpha_bar[t]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def q_sample_batch(x0: np.ndarray, t: np.ndarray, eps: np.ndarray,
                   sched: NoiseSchedule) -> np.ndarray:
    """q_sample with a per-sample timestep vector over a leading batch axis."""
    t = np.asarray(t, dtype=int)
    if np.any(t < 0) or np.any(t > sched.num_steps):
        raise UsageError(f"timesteps outside [0, {sched.num_steps}]")
    ab = sched.alpha_bar[t].reshape((-1,) + (1,) * (x0.ndim - 1))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def reverse_step(x_t: np.ndarray, eps_hat: np.ndarray, t: int, sched: NoiseSchedule,
                 z: np.ndarray | None = None) -> np.ndarray:
    """One ancestral reverse step t -> t-1 with posterior variance.

    z is the standard-normal innovation for t > 1 (None means deterministic);
    passing z at t=1 is a contract error because sigma_1 = 0.
    """
    t = sched._check_t(t)
    if t == 1 and z is not None:
        raise UsageError("no noise may be injected at the final reverse step (t=1)")
    mean = (x_t - sched.beta[t] / np.sqrt(1.0 - sched.alpha_bar[t]) * eps_hat) \
        / np.sqrt(sched.alpha[t])
    if z is None or t == 1:
        return mean
    return mean + np.sqrt(sched.posterior_var[t]) * z


def forward_renoise(x_prev: np.ndarray, sched: NoiseSchedule, t: int,
                    eps: np.ndarray) -> np.ndarray:
    """Single forward step t-1 -> t: x_t = sqrt(1-beta_t) x_{t-1} + sqrt(beta_t) eps."""
    t = sched._check_t(t, low=2)
    return np.sqrt(1.0 - sched.beta[t]) * x_prev + np.sqrt(sched.beta[t]) * eps


def strided_times(num_steps: int, steps: int) -> np.ndarray:
    """Uniformly strided subset of {1..T}, always containing 1 and T (ascending).

    May return fewer than `steps` entries when rounding collides.
    """
    if steps < 0 or steps > num_steps:
        raise ConfigurationError(f"steps must lie in [0, T={num_steps}], got {steps}")
    if steps == 0:
        return np.array([], dtype=int)
    if steps == 1:
        return np.array([num_steps], dtype=int)
    return np.unique(np.round(np.linspace(1, num_steps, steps)).astype(int))


def respaced_schedule(sched: NoiseSchedule, steps: int) -> NoiseSchedule:
    """Schedule over a strided timestep subset for reduced-step inference.

    Effective betas follow from alpha_bar ratios along the subset, so the
    sub-chain marginals coincide with the training chain at the kept times.
    timestep_map records the original timestep per sub-index for embeddings.
    """
    if sched.timestep_map is not None:
        raise UsageError("schedule is already respaced")
    times = strided_times(sched.num_steps, steps)
    if len(times) == 0:
        raise ConfigurationError("cannot respace to zero steps")
    ab_sub = sched.alpha_bar[times]
    ab_prev = np.concatenate([[1.0], ab_sub[:-1]])
    beta = np.concatenate([[np.nan], 1.0 - ab_sub / ab_prev])
    timestep_map = np.concatenate([[0], times])
    return _from_beta(beta, len(times), timestep_map=timestep_map)
