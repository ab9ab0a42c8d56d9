"""Grids, CDF rearrangement and left inversion."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .data import ObservationSet


@dataclass(frozen=True)
class GridFunction:
    grid: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=float).ravel()
        v = np.asarray(self.values, dtype=float).ravel()
        if g.shape != v.shape:
            raise ValueError("grid and values must have equal length")
        if g.size > 1 and np.any(np.diff(g) <= 0):
            raise ValueError("grid must be strictly increasing")
        object.__setattr__(self, "grid", g)
        object.__setattr__(self, "values", v)


def make_grids(sample: ObservationSet, n_theta: int = 50, n_y: int = 5000, a: float = 0.2,
               window: Optional[float] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Equally spaced quantile-index and outcome grids.

    With ``window`` given, the outcome range is taken over |X| <= window when
    that leaves at least two distinct outcomes.
    """
    if not 0 < a < 0.5:
        raise ValueError("trimming constant a must lie in (0, 1/2)")
    if n_theta < 2 or n_y < 2:
        raise ValueError("grids need at least two points")
    if sample.n == 0:
        raise ValueError("empty sample")
    theta = np.linspace(a, 1.0 - a, n_theta)
    y = sample.y
    if window is not None:
        inside = y[np.abs(sample.x) <= window]
        if np.unique(inside).size >= 2:
            y = inside
    lo, hi = float(y.min()), float(y.max())
    if hi <= lo:
        hi = lo + 1.0
    return theta, np.linspace(lo, hi, n_y)


def rearrange_monotone(f: GridFunction) -> GridFunction:
    return GridFunction(f.grid, np.sort(f.values, kind="stable"))


def left_inverse(f: GridFunction, theta: float) -> Tuple[float, bool]:
    """inf{y on the grid : f(y) >= theta}; saturates at the top grid point."""
    j = int(np.searchsorted(f.values, theta, side="left"))
    if j >= f.values.size:
        return float(f.grid[-1]), True
    return float(f.grid[j]), False


def invert_on_grid(grid: np.ndarray, values: np.ndarray, thetas: np.ndarray):
    """Clip to [0, 1], rearrange, and left-invert at every theta.

    Returns (quantiles, grid indices, saturated flags).
    """
    v = np.sort(np.clip(values, 0.0, 1.0), kind="stable")
    j = np.searchsorted(v, thetas, side="left")
    sat = j >= v.size
    j = np.minimum(j, v.size - 1)
    return grid[j], j, sat
