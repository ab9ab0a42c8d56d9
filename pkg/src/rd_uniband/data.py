"""The observation container shared by every estimator."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DegenerateSample, MissingColumn


@dataclass(frozen=True)
class ObservationSet:
    """A sample {(Y_i, D_i, X_i, G_i)} with the cutoff normalised to zero.

    ``d`` and ``g`` are optional; fuzzy and grouped designs check for them.
    """

    x: np.ndarray
    y: np.ndarray
    d: Optional[np.ndarray] = None
    g: Optional[np.ndarray] = None

    def __post_init__(self):
        x = np.ascontiguousarray(self.x, dtype=float).ravel()
        y = np.ascontiguousarray(self.y, dtype=float).ravel()
        if x.shape != y.shape:
            raise ValueError("x and y must have the same length")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        for name in ("d", "g"):
            col = getattr(self, name)
            if col is not None:
                col = np.ascontiguousarray(col, dtype=float).ravel()
                if col.shape != x.shape:
                    raise ValueError(f"{name} must have the same length as x")
                object.__setattr__(self, name, col)
        for name in ("x", "y", "d", "g"):
            col = getattr(self, name)
            if col is not None and not np.all(np.isfinite(col)):
                raise ValueError(f"column {name} contains non-finite values")

    @property
    def n(self) -> int:
        return int(self.x.size)

    def require(self, *columns: str) -> None:
        for c in columns:
            if getattr(self, c) is None:
                raise MissingColumn(c)

    def groups(self) -> np.ndarray:
        self.require("g")
        return np.unique(self.g)

    def x_range(self) -> float:
        r = float(self.x.max() - self.x.min()) if self.n else 0.0
        if r <= 0:
            raise DegenerateSample("running variable has no spread")
        return r
