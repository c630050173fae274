"""Resource grids: complex values over (subcarrier x OFDM-symbol).

A grid is stored as two real planes so that downstream network code, which
only understands real tensors, can consume it without conversion tricks.
Complex views are provided for the signal-processing paths.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError


@dataclass
class ResourceGrid:
    """K x M complex plane split into real/imaginary parts.

    Attributes
    ----------
    re, im : (K, M) float64 arrays, finite entries only.
    meta : free-form annotations (e.g. fallback warnings from estimators).
    """

    re: np.ndarray
    im: np.ndarray
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        self.re = np.asarray(self.re, dtype=np.float64)
        self.im = np.asarray(self.im, dtype=np.float64)
        if self.re.ndim != 2 or self.im.ndim != 2:
            raise DimensionError(
                f"grid planes must be 2-D, got re{self.re.shape} im{self.im.shape}"
            )
        if self.re.shape != self.im.shape:
            raise DimensionError(
                f"re/im plane shapes differ: {self.re.shape} vs {self.im.shape}"
            )
        if not (np.isfinite(self.re).all() and np.isfinite(self.im).all()):
            raise ValueError("grid contains non-finite entries")

    @classmethod
    def from_complex(cls, values, meta=None) -> "ResourceGrid":
        values = np.asarray(values)
        if values.ndim != 2:
            raise DimensionError(f"expected 2-D complex array, got shape {values.shape}")
        return cls(values.real.astype(np.float64), values.imag.astype(np.float64),
                   meta=dict(meta) if meta else {})

    @classmethod
    def zeros(cls, num_subcarriers: int, num_symbols: int) -> "ResourceGrid":
        return cls(np.zeros((num_subcarriers, num_symbols)),
                   np.zeros((num_subcarriers, num_symbols)))

    def to_complex(self) -> np.ndarray:
        return self.re + 1j * self.im

    @property
    def shape(self) -> tuple[int, int]:
        return self.re.shape

    def power(self) -> float:
        """Mean per-element power E|H|^2 over the grid."""
        return float(np.mean(self.re ** 2 + self.im ** 2))

    def copy(self) -> "ResourceGrid":
        return ResourceGrid(self.re.copy(), self.im.copy(), meta=dict(self.meta))


def check_same_shape(a: ResourceGrid, b: ResourceGrid, what: str = "grids") -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{what} have mismatched shapes: {a.shape} vs {b.shape}")
