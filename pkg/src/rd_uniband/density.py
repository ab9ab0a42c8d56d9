"""First-stage kernel density estimators.

All conditional densities are ratios of a bivariate KDE to a marginal KDE of
the running variable, restricted to one side of the cutoff when asked.  The
one-sided marginal KDE estimates f_X(0)/2 rather than f_X(0); the factor
cancels in every ratio, so none of these functions rescale it.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import ObservationSet
from .errors import DegenerateCell, DegenerateDensity, DegenerateSample, WeakFirstStage
from .kernels import KernelSpec, eval_kernel
from .localpoly import side_mask

_DEFAULT = KernelSpec()


@dataclass(frozen=True)
class DensityConfig:
    b_n: float
    a_n: float
    c_n: float
    kernel: KernelSpec = _DEFAULT

    def __post_init__(self):
        if min(self.b_n, self.a_n, self.c_n) <= 0:
            raise ValueError("density bandwidths must be positive")


def silverman_bandwidth(x, rate_exponent: float) -> float:
    """1.06 * sd(x) * n^rate_exponent."""
    x = np.asarray(x, dtype=float)
    if x.size < 2:
        raise DegenerateSample("Silverman's rule needs at least two observations")
    sd = float(np.std(x, ddof=1))
    if sd <= 0:
        raise DegenerateSample("zero sample variance")
    return 1.06 * sd * x.size ** rate_exponent


def default_config(sample: ObservationSet, kernel: KernelSpec = _DEFAULT,
                   b_n: Optional[float] = None, a_n: Optional[float] = None,
                   c_n: Optional[float] = None) -> DensityConfig:
    """Silverman defaults: n^{-1/5} for b_n and c_n, n^{-1/6} for a_n."""
    b = b_n if b_n is not None else silverman_bandwidth(sample.x, -0.2)
    c = c_n if c_n is not None else silverman_bandwidth(sample.x, -0.2)
    a = a_n if a_n is not None else silverman_bandwidth(sample.x, -1.0 / 6.0)
    return DensityConfig(b_n=b, a_n=a, c_n=c, kernel=kernel)


def kde_at_zero(x, b_n: float, kernel: KernelSpec = _DEFAULT) -> float:
    x = np.asarray(x, dtype=float)
    if b_n <= 0 or x.size == 0:
        raise ValueError("need b_n > 0 and a nonempty sample")
    val = float(np.sum(eval_kernel(kernel, x / b_n))) / (x.size * b_n)
    if val <= 0:
        raise DegenerateDensity("no observations near the cutoff")
    return val


def _ratio(num, den, what):
    if den <= 0:
        raise DegenerateCell(f"empty conditioning cell for {what}")
    return num / den


def cond_density_outcome_given_treated(sample: ObservationSet, y, d: int, side: str,
                                       a_n: float, kernel: KernelSpec = _DEFAULT):
    """f(y | X = 0 side, D = d) as a bivariate over marginal KDE ratio.

    ``y`` may be a scalar or an array of evaluation points.
    """
    sample.require("d")
    cell = side_mask(sample.x, side) & (sample.d == d)
    return _cond_ratio(sample, cell, y, a_n, kernel, f"D={d}, {side}")


def _cond_ratio(sample, cell, y, a_n, kernel, what):
    kx = eval_kernel(kernel, sample.x[cell] / a_n)
    den = float(kx.sum()) / (sample.n * a_n)
    ys = np.atleast_1d(np.asarray(y, dtype=float))
    yy = sample.y[cell]
    num = (eval_kernel(kernel, (yy[None, :] - ys[:, None]) / a_n) @ kx) / (sample.n * a_n ** 2)
    out = _ratio(num, den, what)
    return float(out[0]) if np.ndim(y) == 0 else out


def treatment_probability(sample: ObservationSet, d: int, side: str, c_n: float,
                          kernel: KernelSpec = _DEFAULT) -> float:
    """One-sided Nadaraya-Watson estimate of P(D = d | X = 0 side)."""
    sample.require("d")
    s = side_mask(sample.x, side)
    k = eval_kernel(kernel, sample.x[s] / c_n)
    den = float(k.sum())
    if den <= 0:
        raise DegenerateCell(f"no observations within c_n on the {side} side")
    return float(k @ (sample.d[s] == d)) / den


def complier_density(sample: ObservationSet, y, d: int, jump_d: float, a_n: float, c_n: float,
                     kernel: KernelSpec = _DEFAULT, eps: float = 1e-6):
    """Density of the potential outcome Y^d among compliers at the cutoff.

    ``jump_d`` is mu2(0+, d) - mu2(0-, d), the estimated jump in P(D = d | X).
    Dividing by it for both treatment arms keeps the density positive (the
    untreated-arm jump is negative, as is its numerator).  A side whose
    estimated P(D = d) is exactly zero contributes nothing.
    """
    if abs(jump_d) <= eps:
        raise WeakFirstStage(f"|jump| = {abs(jump_d):.3g} for d={d}")
    total = 0.0
    for side, sign in (("plus", 1.0), ("minus", -1.0)):
        prob = treatment_probability(sample, d, side, c_n, kernel)
        if prob == 0.0:
            continue
        f = cond_density_outcome_given_treated(sample, y, d, side, a_n, kernel)
        total = total + sign * f * prob
    return total / jump_d


def cond_density_at_cutoff(sample: ObservationSet, y, side: str, a_n: float,
                           kernel: KernelSpec = _DEFAULT):
    """f(y | X = 0+), f(y | X = 0-) or the pooled f(y | X = 0)."""
    if side == "pooled":
        cell = np.ones(sample.n, dtype=bool)
    else:
        cell = side_mask(sample.x, side)
    return _cond_ratio(sample, cell, y, a_n, kernel, side)
