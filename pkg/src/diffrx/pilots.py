"""Pilot schemes and least-squares pilot-position channel estimates.

A pilot mask marks observed resource elements; comb masks place one pilot
per interval of s subcarriers with a single random offset shared by all
intervals, so positions vary per draw but stay uniformly spaced. Pilot
symbols are the fixed unit-modulus QPSK corner (1+j)/sqrt(2): the receiver
knows them exactly, only their positions matter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .chansim import awgn
from .errors import ConfigurationError, DimensionError, NumericsError
from .grid import ResourceGrid, check_same_shape

PILOT_SYMBOL = (1.0 + 1.0j) / math.sqrt(2.0)


@dataclass
class PilotMask:
    """Per-RE observation indicator: {0,1} in binary mode, [0,1] in soft mode."""

    values: np.ndarray          # (K, M) float64
    scheme: str = "custom"      # comb | block | lattice | custom
    soft: bool = False
    density: float = field(init=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DimensionError(f"mask must be 2-D, got shape {self.values.shape}")
        if np.any(self.values < 0.0) or np.any(self.values > 1.0):
            raise ConfigurationError("mask entries must lie in [0, 1]")
        if not self.soft and not np.all(np.isin(self.values, (0.0, 1.0))):
            raise ConfigurationError("binary mask entries must be exactly 0 or 1")
        self.density = float(np.count_nonzero(self.values)) / self.values.size

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def pilot_indices(self) -> tuple[np.ndarray, np.ndarray]:
        return np.nonzero(self.values)

    def num_pilots(self) -> int:
        return int(np.count_nonzero(self.values))


def comb_mask(num_subcarriers: int, num_symbols: int, spacing: int,
              rng: np.random.Generator | None = None,
              randomize_offset: bool = False) -> PilotMask:
    """One pilot per interval of `spacing` subcarriers, on every symbol.

    With randomize_offset a single offset in [0, spacing) is drawn per mask
    and applied to all intervals; density is 1/spacing when spacing | K.
    """
    if not 1 <= spacing <= num_subcarriers:
        raise ConfigurationError(
            f"comb spacing must satisfy 1 <= s <= K, got s={spacing}, K={num_subcarriers}"
        )
    offset = 0
    if randomize_offset:
        if rng is None:
            raise ConfigurationError("randomize_offset requires an rng")
        offset = int(rng.integers(0, spacing))
    values = np.zeros((num_subcarriers, num_symbols))
    values[offset::spacing, :] = 1.0
    return PilotMask(values, scheme="comb")


def block_mask(num_subcarriers: int, num_symbols: int, symbol_indices) -> PilotMask:
    """All subcarriers at the selected OFDM symbol indices."""
    if num_symbols < 2:
        raise ConfigurationError("block masks need a time axis (M > 1)")
    indices = sorted(set(int(i) for i in symbol_indices))
    if not indices:
        raise ConfigurationError("block mask needs at least one symbol index")
    if indices[0] < 0 or indices[-1] >= num_symbols:
        raise ConfigurationError(f"symbol indices {indices} outside [0, {num_symbols})")
    values = np.zeros((num_subcarriers, num_symbols))
    values[:, indices] = 1.0
    return PilotMask(values, scheme="block")


def lattice_mask(num_subcarriers: int, num_symbols: int, freq_stride: int,
                 time_stride: int) -> PilotMask:
    """Rectangular sub-lattice with the given frequency/time strides."""
    if not 1 <= freq_stride <= num_subcarriers:
        raise ConfigurationError(
            f"freq stride {freq_stride} outside [1, K={num_subcarriers}]")
    if not 1 <= time_stride <= num_symbols:
        raise ConfigurationError(
            f"time stride {time_stride} outside [1, M={num_symbols}]")
    values = np.zeros((num_subcarriers, num_symbols))
    values[::freq_stride, ::time_stride] = 1.0
    return PilotMask(values, scheme="lattice")


@dataclass
class PilotObservation:
    """LS estimates at pilot positions (zeros elsewhere) plus their noise level."""

    ls_estimate: ResourceGrid
    mask: PilotMask
    noise_var: float = 0.0      # per-element complex noise variance at pilots

    def __post_init__(self):
        if self.ls_estimate.shape != self.mask.shape:
            raise DimensionError(
                f"LS grid {self.ls_estimate.shape} vs mask {self.mask.shape}")
        if self.noise_var < 0:
            raise ConfigurationError(f"noise_var must be >= 0, got {self.noise_var}")
        off = self.mask.values == 0.0
        if np.any(self.ls_estimate.re[off] != 0.0) or np.any(self.ls_estimate.im[off] != 0.0):
            raise ConfigurationError("LS estimate must be exactly 0 off-pilot")


def ls_estimate(received: ResourceGrid, pilot_symbols: ResourceGrid, mask: PilotMask,
                noise_var: float) -> PilotObservation:
    """Per-pilot LS estimate H_hat = Y / X; zero off-pilot.

    Pilot symbols must be unit modulus at mask positions, so the recorded
    noise variance stays sigma^2 / |X|^2 = sigma^2.
    """
    check_same_shape(received, pilot_symbols, "received and pilot grids")
    if received.shape != mask.shape:
        raise DimensionError(f"grid {received.shape} vs mask {mask.shape}")
    pilots = mask.values > 0.0
    x = pilot_symbols.to_complex()[pilots]
    if np.any(x == 0.0):
        raise NumericsError("pilot symbol is zero at a pilot position; cannot divide")
    estimate = np.zeros(received.shape, dtype=complex)
    estimate[pilots] = received.to_complex()[pilots] / x
    return PilotObservation(ResourceGrid.from_complex(estimate), mask, noise_var)


def pilot_symbol_grid(mask: PilotMask) -> ResourceGrid:
    """The known pilot grid: PILOT_SYMBOL at pilot positions, zeros elsewhere."""
    pilots = mask.values > 0.0
    grid = np.where(pilots, PILOT_SYMBOL, 0.0 + 0.0j)
    return ResourceGrid.from_complex(grid)


def observe(channel: ResourceGrid, mask: PilotMask, snr_db: float,
            rng: np.random.Generator) -> PilotObservation:
    """Simulate the pilot path: transmit pilots through the channel, add noise
    at the pilot positions, and return the LS observation.

    SNR is referenced to unit signal power, matching normalized datasets:
    noise_var = 10^(-snr/10) per complex element.
    """
    noise_var = 0.0 if math.isinf(snr_db) and snr_db > 0 else 10.0 ** (-snr_db / 10.0)
    x = pilot_symbol_grid(mask)
    product = ResourceGrid.from_complex(channel.to_complex() * x.to_complex())
    noisy = awgn(product, snr_db, rng, ref_power=1.0)
    # off-pilot REs carry no pilot energy; zero them before the LS division
    received = ResourceGrid.from_complex(noisy.to_complex() * (mask.values > 0.0))
    return ls_estimate(received, x, mask, noise_var)


@dataclass(frozen=True)
class PilotSpec:
    """Serializable pilot-scheme description; draw() produces a concrete mask."""

    scheme: str = "comb"            # comb | block | lattice
    spacing: int = 16               # comb: subcarriers per pilot interval
    randomize_offset: bool = True
    block_symbols: tuple[int, ...] = (0,)
    freq_stride: int = 4
    time_stride: int = 2
    soft: bool = False              # condition on confidence-weighted masks

    def draw(self, num_subcarriers: int, num_symbols: int,
             rng: np.random.Generator) -> PilotMask:
        if self.scheme == "comb":
            return comb_mask(num_subcarriers, num_symbols, self.spacing, rng,
                             randomize_offset=self.randomize_offset)
        if self.scheme == "block":
            return block_mask(num_subcarriers, num_symbols, self.block_symbols)
        if self.scheme == "lattice":
            return lattice_mask(num_subcarriers, num_symbols, self.freq_stride,
                                self.time_stride)
        raise ConfigurationError(f"unknown pilot scheme '{self.scheme}'")

    @property
    def density_tag(self) -> str:
        if self.scheme == "comb":
            return f"comb{self.spacing}"
        if self.scheme == "block":
            return "block" + "-".join(str(s) for s in self.block_symbols)
        return f"lattice{self.freq_stride}x{self.time_stride}"

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme, "spacing": self.spacing,
            "randomize_offset": self.randomize_offset,
            "block_symbols": list(self.block_symbols),
            "freq_stride": self.freq_stride, "time_stride": self.time_stride,
            "soft": self.soft,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PilotSpec":
        data = dict(data)
        if "block_symbols" in data:
            data["block_symbols"] = tuple(data["block_symbols"])
        return cls(**data)


def observe_spec(channel: ResourceGrid, spec: PilotSpec, snr_db: float,
                 rng: np.random.Generator) -> PilotObservation:
    """Draw a mask from the spec and observe the channel through it.

    In soft mode the observation's mask carries the confidence weights
    derived from the pilot noise level.
    """
    k, m = channel.shape
    mask = spec.draw(k, m, rng)
    obs = observe(channel, mask, snr_db, rng)
    if spec.soft:
        soft = soft_mask_from_confidence(mask, obs.noise_var)
        obs = PilotObservation(obs.ls_estimate, soft, obs.noise_var)
    return obs


def soft_mask_from_confidence(mask: PilotMask, noise_var: float,
                              normalized_signal_power: float = 1.0) -> PilotMask:
    """Soft confidence weights: 1 / (1 + sigma^2 / P) at pilots, 0 elsewhere.

    This is the linear-MMSE shrink weight for a unit-power channel; the
    binary mask is recovered in the noiseless limit.
    """
    if noise_var < 0:
        raise ConfigurationError(f"noise_var must be >= 0, got {noise_var}")
    weight = 1.0 / (1.0 + noise_var / normalized_signal_power)
    return PilotMask(np.where(mask.values > 0.0, weight, 0.0),
                     scheme=mask.scheme, soft=True)
