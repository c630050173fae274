"""Conditional convolutional noise predictor with sinusoidal time embedding.

Encoder-decoder over the resource grid: per level two conv+groupnorm+silu
blocks with the projected time embedding added between them, 2x average-pool
down, nearest-neighbour 2x up with skip concatenation, and a zero-initialized
final conv so the untrained network predicts zero noise. Conditioning enters
by channel concatenation: [x_t.re, x_t.im, ls.re, ls.im, 1 - mask].

For M=1 grids pooling and upsampling act along the subcarrier axis only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .errors import ConfigurationError, DimensionError
from .grid import ResourceGrid
from .pilots import PilotObservation

GROUPNORM_GROUPS = 8

COND_CHANNELS = 5   # x_t re/im + LS re/im + inverse mask
OUT_CHANNELS = 2    # predicted noise re/im


@dataclass(frozen=True)
class DenoiserConfig:
    base_channels: int = 32
    depth: int = 2
    kernel: int = 3
    time_embed_dim: int = 64
    in_channels: int = COND_CHANNELS
    out_channels: int = OUT_CHANNELS

    def __post_init__(self):
        if self.base_channels < GROUPNORM_GROUPS or self.base_channels % GROUPNORM_GROUPS:
            raise ConfigurationError(
                f"base_channels must be a positive multiple of {GROUPNORM_GROUPS}, "
                f"got {self.base_channels}")
        if self.depth < 1:
            raise ConfigurationError(f"depth must be >= 1, got {self.depth}")
        if self.kernel % 2 == 0 or self.kernel < 1:
            raise ConfigurationError(f"kernel must be odd, got {self.kernel}")
        if self.time_embed_dim % 2:
            raise ConfigurationError(
                f"time_embed_dim must be even, got {self.time_embed_dim}")
        if self.in_channels != COND_CHANNELS or self.out_channels != OUT_CHANNELS:
            raise ConfigurationError(
                f"conditioning is fixed at {COND_CHANNELS} in / {OUT_CHANNELS} out channels")

    def level_channels(self) -> list[int]:
        """Channel widths for encoder levels 0..depth-1 plus the bottleneck."""
        return [self.base_channels * 2 ** level for level in range(self.depth + 1)]

    def to_dict(self) -> dict:
        return {
            "base_channels": self.base_channels, "depth": self.depth,
            "kernel": self.kernel, "time_embed_dim": self.time_embed_dim,
            "in_channels": self.in_channels, "out_channels": self.out_channels,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DenoiserConfig":
        return cls(**data)


def time_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding [sin(t w_i)..., cos(t w_i)...], w_i = 10000^(-2i/dim).

    Accepts a scalar or a vector of timesteps; returns (..., dim).
    """
    if dim % 2:
        raise ConfigurationError(f"embedding dim must be even, got {dim}")
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0):
        raise ConfigurationError("timesteps must be >= 0")
    half = dim // 2
    freqs = 10000.0 ** (-2.0 * np.arange(half) / dim)
    angles = t[..., None] * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)


def build_condition(obs: PilotObservation, x_t: ResourceGrid) -> np.ndarray:
    """Stack the denoiser input channels: [x_t.re, x_t.im, ls.re, ls.im, 1-m]."""
    if obs.ls_estimate.shape != x_t.shape:
        raise DimensionError(
            f"observation {obs.ls_estimate.shape} vs x_t {x_t.shape}")
    return np.stack([x_t.re, x_t.im, obs.ls_estimate.re, obs.ls_estimate.im,
                     1.0 - obs.mask.values])


def build_condition_batch(observations, x_t: np.ndarray) -> np.ndarray:
    """Batched condition tensor from per-sample observations and x_t [B,2,K,M]."""
    if x_t.ndim != 4 or x_t.shape[1] != 2:
        raise DimensionError(f"x_t must be [B,2,K,M], got {x_t.shape}")
    cond = np.empty((x_t.shape[0], COND_CHANNELS) + x_t.shape[2:])
    for i, obs in enumerate(observations):
        if obs.ls_estimate.shape != x_t.shape[2:]:
            raise DimensionError(
                f"observation {i} shape {obs.ls_estimate.shape} vs grid {x_t.shape[2:]}")
        cond[i, 0] = x_t[i, 0]
        cond[i, 1] = x_t[i, 1]
        cond[i, 2] = obs.ls_estimate.re
        cond[i, 3] = obs.ls_estimate.im
        cond[i, 4] = 1.0 - obs.mask.values
    return cond


@dataclass
class DenoiserParams:
    """Named trainable tensors plus the (fixed) sinusoidal time table."""

    config: DenoiserConfig
    tensors: dict[str, nc.Tensor]
    time_table: np.ndarray = field(repr=False, default=None)

    def num_params(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def ensure_time_table(self, max_t: int) -> None:
        dim = self.config.time_embed_dim
        if self.time_table is None or self.time_table.shape[0] <= max_t:
            self.time_table = time_embedding(np.arange(max_t + 1), dim)

    def copy(self) -> "DenoiserParams":
        tensors = {name: nc.Tensor(t.data.copy(), requires_grad=True)
                   for name, t in self.tensors.items()}
        return DenoiserParams(self.config, tensors, self.time_table)


def _conv_init(rng, c_out, c_in, k) -> np.ndarray:
    bound = 1.0 / np.sqrt(c_in * k * k)
    return rng.uniform(-bound, bound, (c_out, c_in, k, k))


def _linear_init(rng, d_in, d_out) -> np.ndarray:
    bound = 1.0 / np.sqrt(d_in)
    return rng.uniform(-bound, bound, (d_in, d_out))


def init_denoiser(config: DenoiserConfig, rng: np.random.Generator) -> DenoiserParams:
    """Fan-in uniform conv/linear weights, zero biases, zero final layer."""
    k = config.kernel
    dim = config.time_embed_dim
    widths = config.level_channels()
    tensors: dict[str, nc.Tensor] = {}

    def add(name, arr):
        tensors[name] = nc.Tensor(arr, requires_grad=True)

    def block(prefix, c_in, c_out):
        add(f"{prefix}.conv1.w", _conv_init(rng, c_out, c_in, k))
        add(f"{prefix}.conv1.b", np.zeros(c_out))
        add(f"{prefix}.gn1.g", np.ones(c_out))
        add(f"{prefix}.gn1.b", np.zeros(c_out))
        add(f"{prefix}.temb.w", _linear_init(rng, dim, c_out))
        add(f"{prefix}.temb.b", np.zeros(c_out))
        add(f"{prefix}.conv2.w", _conv_init(rng, c_out, c_out, k))
        add(f"{prefix}.conv2.b", np.zeros(c_out))
        add(f"{prefix}.gn2.g", np.ones(c_out))
        add(f"{prefix}.gn2.b", np.zeros(c_out))

    c_prev = config.in_channels
    for level in range(config.depth):
        block(f"enc{level}", c_prev, widths[level])
        c_prev = widths[level]
    block("mid", c_prev, widths[config.depth])
    c_prev = widths[config.depth]
    for level in reversed(range(config.depth)):
        block(f"dec{level}", c_prev + widths[level], widths[level])
        c_prev = widths[level]
    add("out.w", np.zeros((config.out_channels, c_prev, k, k)))
    add("out.b", np.zeros(config.out_channels))
    return DenoiserParams(config, tensors)


def _check_spatial(config: DenoiserConfig, k_dim: int, m_dim: int) -> tuple[int, int]:
    factor = 2 ** config.depth
    if k_dim % factor:
        raise ConfigurationError(
            f"K={k_dim} not divisible by 2^depth={factor}; pad the grid first")
    if m_dim != 1 and m_dim % factor:
        raise ConfigurationError(
            f"M={m_dim} not divisible by 2^depth={factor}; pad the grid first")
    return (2, 1) if m_dim == 1 else (2, 2)


def denoiser_forward(params: DenoiserParams, cond: np.ndarray, t) -> nc.Tensor:
    """Predicted noise [B,2,K,M] from condition [B,5,K,M] at timestep(s) t.

    t is an int or a per-sample vector; gradients flow when called inside an
    active Graph (the condition itself is constant input).
    """
    config = params.config
    if cond.ndim != 4 or cond.shape[1] != config.in_channels:
        raise DimensionError(
            f"condition must be [B,{config.in_channels},K,M], got {cond.shape}")
    batch = cond.shape[0]
    factors = _check_spatial(config, cond.shape[2], cond.shape[3])

    t_vec = np.broadcast_to(np.asarray(t, dtype=int), (batch,))
    params.ensure_time_table(int(t_vec.max()))
    temb = nc.Tensor(params.time_table[t_vec])
    p = params.tensors

    def block(prefix, h):
        h = nc.conv2d(h, p[f"{prefix}.conv1.w"], p[f"{prefix}.conv1.b"])
        h = nc.silu(nc.groupnorm(h, GROUPNORM_GROUPS, p[f"{prefix}.gn1.g"],
                                 p[f"{prefix}.gn1.b"]))
        proj = nc.linear(temb, p[f"{prefix}.temb.w"], p[f"{prefix}.temb.b"])
        h = nc.add(h, nc.reshape(proj, (batch, -1, 1, 1)))
        out = nc.conv2d(h, p[f"{prefix}.conv2.w"], p[f"{prefix}.conv2.b"])
        out = nc.silu(nc.groupnorm(out, GROUPNORM_GROUPS, p[f"{prefix}.gn2.g"],
                                   p[f"{prefix}.gn2.b"]))
        # channel-matched residual keeps near-identity behavior reachable
        return nc.add(h, out)

    h = nc.as_tensor(cond)
    skips = []
    for level in range(config.depth):
        h = block(f"enc{level}", h)
        skips.append(h)
        h = nc.avg_pool2d(h, factors)
    h = block("mid", h)
    for level in reversed(range(config.depth)):
        h = nc.upsample_nearest(h, factors)
        h = nc.concat_channels(skips[level], h)
        h = block(f"dec{level}", h)
    return nc.conv2d(h, p["out.w"], p["out.b"])
