"""Equalize-demodulate receiver loop and the candidate scorer.

Closes the verification loop: estimated channels equalize the data resource
elements, hard decisions produce bits, and BER is tallied against the
transmitted payload. The constellation score rates a channel candidate by
how close the equalized data symbols land to the constellation, which needs
no ground truth and therefore doubles as the best-of-N selector.

Noise is referenced to unit signal power throughout (normalized channels,
unit-power constellations): sigma^2 = 10^(-snr/10) per complex element.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .chansim import ChannelModelConfig, draw_batch
from .errors import ConfigurationError, DimensionError, MetricError, NumericsError
from .grid import ResourceGrid, check_same_shape
from .pilots import PilotSpec, ls_estimate, pilot_symbol_grid
from .estimators import ChannelEstimatorBase, nmse


@dataclass(frozen=True)
class ConstellationSpec:
    """Gray-labeled unit-average-power constellation; index = label value."""

    name: str
    points: np.ndarray
    bits_per_symbol: int

    def __post_init__(self):
        object.__setattr__(self, "points", np.asarray(self.points, dtype=complex))
        if len(self.points) != 2 ** self.bits_per_symbol:
            raise ConfigurationError(
                f"{self.name}: {len(self.points)} points for "
                f"{self.bits_per_symbol} bits/symbol")
        mean_power = float(np.mean(np.abs(self.points) ** 2))
        if abs(mean_power - 1.0) > 1e-12:
            raise ConfigurationError(
                f"{self.name}: mean point power {mean_power} != 1")


_GRAY2 = {0b00: -3.0, 0b01: -1.0, 0b11: 1.0, 0b10: 3.0}


def qpsk() -> ConstellationSpec:
    """Gray QPSK: bit 0 selects the I sign, bit 1 the Q sign."""
    points = np.empty(4, dtype=complex)
    for label in range(4):
        i_bit, q_bit = (label >> 1) & 1, label & 1
        points[label] = ((1 - 2 * i_bit) + 1j * (1 - 2 * q_bit)) / math.sqrt(2.0)
    return ConstellationSpec("QPSK", points, 2)


def qam16() -> ConstellationSpec:
    """16QAM with per-axis Gray labeling over levels {-3,-1,1,3}/sqrt(10)."""
    points = np.empty(16, dtype=complex)
    for label in range(16):
        i_bits, q_bits = (label >> 2) & 0b11, label & 0b11
        points[label] = (_GRAY2[i_bits] + 1j * _GRAY2[q_bits]) / math.sqrt(10.0)
    return ConstellationSpec("16QAM", points, 4)


def constellation(name: str) -> ConstellationSpec:
    table = {"qpsk": qpsk, "16qam": qam16}
    key = name.lower()
    if key not in table:
        raise ConfigurationError(f"unknown modulation '{name}' (qpsk|16qam)")
    return table[key]()


def _data_positions(data_mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pos = np.nonzero(data_mask > 0)
    if pos[0].size == 0:
        raise MetricError("data mask selects no resource elements")
    return pos


def modulate(bits, spec: ConstellationSpec, data_mask: np.ndarray) -> ResourceGrid:
    """Map bits onto the data REs (row-major order); zeros elsewhere."""
    bits = np.asarray(bits, dtype=int)
    pos = _data_positions(data_mask)
    expected = pos[0].size * spec.bits_per_symbol
    if bits.size != expected:
        raise DimensionError(
            f"got {bits.size} bits, data grid needs exactly {expected}")
    labels = bits.reshape(-1, spec.bits_per_symbol) \
        @ (1 << np.arange(spec.bits_per_symbol - 1, -1, -1))
    grid = np.zeros(data_mask.shape, dtype=complex)
    grid[pos] = spec.points[labels]
    return ResourceGrid.from_complex(grid)


def demodulate_hard(equalized: ResourceGrid, spec: ConstellationSpec,
                    data_mask: np.ndarray) -> np.ndarray:
    """Minimum-distance decisions on the data REs, returned as a bit vector."""
    pos = _data_positions(data_mask)
    symbols = equalized.to_complex()[pos]
    labels = np.argmin(np.abs(symbols[:, None] - spec.points[None, :]) ** 2, axis=1)
    shifts = np.arange(spec.bits_per_symbol - 1, -1, -1)
    return ((labels[:, None] >> shifts[None, :]) & 1).reshape(-1)


def equalize_mmse(received: ResourceGrid, channel_est: ResourceGrid,
                  noise_var: float) -> ResourceGrid:
    """Per-element MMSE equalizer conj(H)Y / (|H|^2 + sigma^2); ZF at sigma^2=0."""
    check_same_shape(received, channel_est, "received and channel grids")
    h = channel_est.to_complex()
    denom = np.abs(h) ** 2 + noise_var
    if np.any(denom == 0.0):
        raise NumericsError(
            "zero channel estimate with zero noise variance cannot be equalized")
    return ResourceGrid.from_complex(np.conj(h) * received.to_complex() / denom)


def constellation_score(channel_est: ResourceGrid, received: ResourceGrid,
                        noise_var: float, spec: ConstellationSpec,
                        data_mask: np.ndarray) -> float:
    """Mean squared distance of equalized data REs to the nearest point.

    Lower means the candidate channel explains the data better; independent
    of the transmitted payload as long as decisions stay in the right region.
    """
    pos = _data_positions(data_mask)
    eq = equalize_mmse(received, channel_est, noise_var)
    symbols = eq.to_complex()[pos]
    dist2 = np.min(np.abs(symbols[:, None] - spec.points[None, :]) ** 2, axis=1)
    return float(dist2.mean())


@dataclass
class SnrStats:
    snr_db: float
    n_bits: int
    n_errors: int
    nmse_mean: float

    @property
    def ber(self) -> float:
        return self.n_errors / self.n_bits


@dataclass
class LinkResult:
    per_snr: list[SnrStats] = field(default_factory=list)

    @property
    def n_bits(self) -> int:
        return sum(s.n_bits for s in self.per_snr)

    @property
    def n_errors(self) -> int:
        return sum(s.n_errors for s in self.per_snr)

    @property
    def ber(self) -> float:
        return self.n_errors / self.n_bits

    @property
    def nmse(self) -> float:
        return float(np.mean([s.nmse_mean for s in self.per_snr]))


@dataclass(frozen=True)
class LinkSimConfig:
    """Frame-simulation parameters for the end-to-end BER loop."""

    channel: ChannelModelConfig = field(default_factory=ChannelModelConfig)
    pilot: PilotSpec = field(default_factory=PilotSpec)
    modulation: str = "qpsk"
    snr_db: tuple[float, ...] = (0.0, 10.0, 20.0)
    n_frames: int = 100
    seed: int = 0
    normalization: float = 1.0   # train-set scalar when feeding DM estimators

    def __post_init__(self):
        if self.n_frames < 1:
            raise ConfigurationError(f"n_frames must be >= 1, got {self.n_frames}")


def end_to_end_ber(cfg: LinkSimConfig, estimator) -> LinkResult:
    """Simulate frames per SNR: estimate from pilots only, equalize, demodulate.

    estimator is a fitted ChannelEstimatorBase or the string "perfect" for
    genie CSI. Channel grids are scaled by 1/cfg.normalization so trained
    models see their training distribution.
    """
    if not (estimator == "perfect" or isinstance(estimator, ChannelEstimatorBase)):
        raise ConfigurationError(
            "estimator must be 'perfect' or a ChannelEstimatorBase instance")
    spec = constellation(cfg.modulation)
    result = LinkResult()
    for snr_index, snr_db in enumerate(cfg.snr_db):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, snr_index]))
        sigma2 = 10.0 ** (-snr_db / 10.0)
        grids = draw_batch(cfg.channel, cfg.n_frames, rng) / cfg.normalization
        k, m = cfg.channel.num_subcarriers, cfg.channel.num_symbols
        frames = []
        for f in range(cfg.n_frames):
            h = ResourceGrid.from_complex(grids[f])
            mask = cfg.pilot.draw(k, m, rng)
            data_mask = 1.0 - mask.values
            n_data = int(np.count_nonzero(data_mask))
            bits = rng.integers(0, 2, n_data * spec.bits_per_symbol)
            x = ResourceGrid.from_complex(
                pilot_symbol_grid(mask).to_complex()
                + modulate(bits, spec, data_mask).to_complex())
            noise = (rng.standard_normal((k, m)) + 1j * rng.standard_normal((k, m))) \
                * math.sqrt(sigma2 / 2.0)
            y = ResourceGrid.from_complex(h.to_complex() * x.to_complex() + noise)
            pilot_y = ResourceGrid.from_complex(
                y.to_complex() * (mask.values > 0))
            obs = ls_estimate(pilot_y, pilot_symbol_grid(mask), mask, sigma2)
            frames.append((h, mask, data_mask, bits, y, obs))

        if estimator == "perfect":
            estimates = [frame[0] for frame in frames]
        elif hasattr(estimator, "predict_batch_with_scorers"):
            scorers = [make_constellation_scorer(y, sigma2, spec, data_mask)
                       for (_, _, data_mask, _, y, _) in frames]
            estimates = estimator.predict_batch_with_scorers(
                [frame[5] for frame in frames], scorers)
        else:
            estimates = estimator.predict_batch([frame[5] for frame in frames])

        n_bits = n_errors = 0
        nmse_values = []
        for (h, mask, data_mask, bits, y, _), h_hat in zip(frames, estimates):
            eq = equalize_mmse(y, h_hat, sigma2)
            decided = demodulate_hard(eq, spec, data_mask)
            n_errors += int(np.count_nonzero(decided != bits))
            n_bits += bits.size
            nmse_values.append(nmse(h_hat, h))
        result.per_snr.append(SnrStats(snr_db, n_bits, n_errors,
                                       float(np.mean(nmse_values))))
    return result


def qfunc(x: float) -> float:
    """Gaussian tail probability Q(x)."""
    return 0.5 * math.erfc(x / math.sqrt(2.0))


def make_constellation_scorer(received: ResourceGrid, noise_var: float,
                              spec: ConstellationSpec, data_mask: np.ndarray):
    """Scorer closure for sample_best_of_n over a fixed received frame."""
    def score(channel_est: ResourceGrid) -> float:
        return constellation_score(channel_est, received, noise_var, spec, data_mask)
    return score
