"""Synthetic OFDM channel frequency responses and link-level noise.

The channel is a tapped delay line: L paths with exponential(delay_spread)
delays, per-path powers following the exponential power-delay profile at the
drawn delay (normalized to unit total power), and uniform Doppler shifts.
The CFR over subcarrier k and symbol m is

    H[k, m] = sum_l g_l * exp(-j 2 pi f_k tau_l) * exp(+j 2 pi nu_l t_m)

which stands in for the ray-traced datasets this kind of model is usually
trained on, with qualitative (not absolute) fidelity.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DataFormatError, DimensionError
from .grid import ResourceGrid, check_same_shape

DATASET_MAGIC = b"DIFFRXDS"


@dataclass(frozen=True)
class ChannelModelConfig:
    """Tapped-delay-line parameters plus grid geometry."""

    num_paths: int = 8
    delay_spread: float = 100e-9          # RMS of the exponential PDP, seconds
    max_doppler: float = 0.0              # Hz
    subcarrier_spacing: float = 30e3      # Hz
    num_subcarriers: int = 128
    num_symbols: int = 1
    symbol_duration: float | None = None  # defaults to 1/subcarrier_spacing
    seed: int = 0

    def __post_init__(self):
        if self.num_paths < 1:
            raise ConfigurationError(f"num_paths must be >= 1, got {self.num_paths}")
        if self.delay_spread <= 0:
            raise ConfigurationError(f"delay_spread must be > 0, got {self.delay_spread}")
        if self.max_doppler < 0:
            raise ConfigurationError(f"max_doppler must be >= 0, got {self.max_doppler}")
        if self.subcarrier_spacing <= 0:
            raise ConfigurationError("subcarrier_spacing must be > 0")
        if self.num_subcarriers < 2:
            raise ConfigurationError(f"need K >= 2 subcarriers, got {self.num_subcarriers}")
        if self.num_symbols < 1:
            raise ConfigurationError(f"need M >= 1 symbols, got {self.num_symbols}")

    @property
    def symbol_duration_s(self) -> float:
        return self.symbol_duration if self.symbol_duration is not None \
            else 1.0 / self.subcarrier_spacing


def cfr_from_taps(gains, delays, dopplers, cfg: ChannelModelConfig) -> np.ndarray:
    """CFR grids (..., K, M) from explicit complex gains/delays/Doppler shifts.

    Leading axes of the tap arrays are batch axes; the last axis indexes paths.
    """
    gains = np.atleast_2d(np.asarray(gains, dtype=complex))
    delays = np.atleast_2d(np.asarray(delays, dtype=float))
    dopplers = np.atleast_2d(np.asarray(dopplers, dtype=float))
    freqs = np.arange(cfg.num_subcarriers) * cfg.subcarrier_spacing
    times = np.arange(cfg.num_symbols) * cfg.symbol_duration_s
    phase_f = np.exp(-2j * np.pi * freqs[None, :, None] * delays[:, None, :])
    phase_t = np.exp(2j * np.pi * times[None, :, None] * dopplers[:, None, :])
    return np.einsum("nl,nkl,nml->nkm", gains, phase_f, phase_t)


def draw_batch(cfg: ChannelModelConfig, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw n CFR grids as a (n, K, M) complex array with E|H|^2 = 1.

    Tap draw order per batch: delays, Dopplers, then real/imag gains, so a
    fixed seed reproduces the exact dataset bytes.
    """
    if n < 1:
        raise ConfigurationError(f"batch size must be >= 1, got {n}")
    L = cfg.num_paths
    tau = rng.exponential(cfg.delay_spread, (n, L))
    nu = rng.uniform(-cfg.max_doppler, cfg.max_doppler, (n, L))
    pdp = np.exp(-tau / cfg.delay_spread)
    pdp /= pdp.sum(axis=1, keepdims=True)
    gains = np.sqrt(pdp / 2.0) * (rng.standard_normal((n, L))
                                  + 1j * rng.standard_normal((n, L)))
    return cfr_from_taps(gains, tau, nu, cfg)


def draw_channel(cfg: ChannelModelConfig, rng: np.random.Generator) -> ResourceGrid:
    """Draw one CFR grid."""
    return ResourceGrid.from_complex(draw_batch(cfg, 1, rng)[0])


def awgn(grid: ResourceGrid, snr_db: float, rng: np.random.Generator,
         ref_power: float | None = None) -> ResourceGrid:
    """Add complex Gaussian noise at the given SNR.

    Noise variance is ref_power / 10^(snr/10) per complex element, split
    equally between the planes; ref_power defaults to the grid's mean power.
    snr_db = +inf is the noiseless flag and returns a copy.
    """
    if math.isinf(snr_db) and snr_db > 0:
        return grid.copy()
    power = grid.power() if ref_power is None else float(ref_power)
    sigma2 = power / (10.0 ** (snr_db / 10.0))
    scale = math.sqrt(sigma2 / 2.0)
    return ResourceGrid(grid.re + scale * rng.standard_normal(grid.shape),
                        grid.im + scale * rng.standard_normal(grid.shape))


def transmit(channel: ResourceGrid, symbols: ResourceGrid, snr_db: float,
             rng: np.random.Generator) -> ResourceGrid:
    """Per-subcarrier flat model Y = H o X + N."""
    check_same_shape(channel, symbols, "channel and symbol grids")
    product = ResourceGrid.from_complex(channel.to_complex() * symbols.to_complex())
    return awgn(product, snr_db, rng)


@dataclass
class Dataset:
    """A stack of CFR samples plus the normalization scalar that made them."""

    samples: np.ndarray                     # (n, K, M) complex128
    normalization: float = 1.0
    config: ChannelModelConfig | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.complex128)
        if self.samples.ndim != 3:
            raise DimensionError(f"dataset samples must be (n, K, M), got {self.samples.shape}")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.samples.shape[1:]

    def grid(self, index: int) -> ResourceGrid:
        return ResourceGrid.from_complex(self.samples[index])

    def mean_power(self) -> float:
        return float(np.mean(np.abs(self.samples) ** 2))


def build_dataset(cfg: ChannelModelConfig, n_train: int, n_val: int, n_test: int,
                  rng: np.random.Generator, shard_size: int = 256,
                  max_workers: int = 1) -> tuple[Dataset, Dataset, Dataset]:
    """Draw raw (unnormalized) train/val/test splits from one stream.

    Samples are produced in fixed-size shards seeded as cfg.seed-independent
    (base_seed + shard_index) so the result does not depend on worker count.
    """
    for name, n in (("n_train", n_train), ("n_val", n_val), ("n_test", n_test)):
        if n < 1:
            raise ConfigurationError(f"{name} must be >= 1, got {n}")
    total = n_train + n_val + n_test
    base_seed = int(rng.integers(0, 2 ** 63 - 1))
    n_shards = (total + shard_size - 1) // shard_size

    def make_shard(index: int) -> np.ndarray:
        count = min(shard_size, total - index * shard_size)
        shard_rng = np.random.default_rng(base_seed + index)
        return draw_batch(cfg, count, shard_rng)

    if max_workers > 1 and n_shards > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            shards = list(pool.map(make_shard, range(n_shards)))
    else:
        shards = [make_shard(i) for i in range(n_shards)]
    samples = np.concatenate(shards, axis=0)
    train = Dataset(samples[:n_train], config=cfg)
    val = Dataset(samples[n_train:n_train + n_val], config=cfg)
    test = Dataset(samples[n_train + n_val:], config=cfg)
    return train, val, test


def normalize_dataset(ds: Dataset, scale: float | None = None) -> Dataset:
    """Divide all samples by scale (default: sqrt of the set's mean power)."""
    if scale is None:
        scale = math.sqrt(ds.mean_power())
    if scale <= 0:
        raise ConfigurationError(f"normalization scale must be > 0, got {scale}")
    return Dataset(ds.samples / scale, normalization=float(scale), config=ds.config)


def normalize_splits(train: Dataset, val: Dataset, test: Dataset
                     ) -> tuple[Dataset, Dataset, Dataset]:
    """Normalize all splits with the train split's scalar."""
    scale = math.sqrt(train.mean_power())
    return (normalize_dataset(train, scale), normalize_dataset(val, scale),
            normalize_dataset(test, scale))


def save_dataset(path, ds: Dataset) -> None:
    """Binary layout: magic, u32 count/K/M, f32 normalization, then per-sample
    element-interleaved re/im float32 (complex64), row-major."""
    n, k, m = ds.samples.shape
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<IIIf", n, k, m, ds.normalization))
        fh.write(ds.samples.astype("<c8").tobytes())


def load_dataset(path) -> Dataset:
    path = Path(path)
    raw = path.read_bytes()
    header = len(DATASET_MAGIC) + 16
    if len(raw) < header or raw[: len(DATASET_MAGIC)] != DATASET_MAGIC:
        raise DataFormatError(f"{path}: missing dataset magic {DATASET_MAGIC!r}")
    n, k, m, norm = struct.unpack("<IIIf", raw[len(DATASET_MAGIC):header])
    expected = n * k * m * 8
    payload = raw[header:]
    if len(payload) != expected:
        raise DataFormatError(
            f"{path}: payload has {len(payload)} bytes, expected {expected}"
        )
    samples = np.frombuffer(payload, dtype="<c8").reshape(n, k, m).astype(np.complex128)
    return Dataset(samples, normalization=float(norm))
