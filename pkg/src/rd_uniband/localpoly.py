"""One-sided local polynomial weighted least squares.

The fit at each side solves

    min_a  sum_i delta_i K(X_i/h) (g_i - r_p(X_i/h)'a)^2

through a QR factorisation of the sqrt-weighted design.  Rather than solving
once per response, we form the linear "hat" operator A = R^{-1} Q' W^{1/2}
once; every response on the grid is then A @ g.  Indicator responses
1{Y <= y} never get materialised: A @ 1{Y <= y} is a running sum of A's
columns in Y order, read off with ``searchsorted``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from math import factorial
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .data import ObservationSet
from .errors import InsufficientLocalData, OutOfWindow
from .kernels import KernelSpec, basis, eval_kernel

_RANK_TOL = 1e-10


# ---------------------------------------------------------------------------
# Responses g_k(., theta_k)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ResponseFn:
    """Response family g_k over a finite index grid.

    ``kind`` is one of
      outcome          Y
      treatment        D
      cdf              1{Y <= y} for y in ``points``
      joint_cdf        1{Y <= y} 1{D = d}; columns ordered by ``levels`` then ``points``
      treat_indicator  1{D = d} for d in ``levels``
      group_outcome    Y 1{G = g} for g in ``levels``
      group_treatment  D 1{G = g} for g in ``levels``
    """

    kind: str
    points: Optional[np.ndarray] = field(default=None, compare=False)
    levels: Optional[Sequence[float]] = None

    _KINDS = ("outcome", "treatment", "cdf", "joint_cdf", "treat_indicator",
              "group_outcome", "group_treatment")

    def __post_init__(self):
        if self.kind not in self._KINDS:
            raise ValueError(f"unknown response kind {self.kind!r}")
        if self.kind in ("cdf", "joint_cdf"):
            if self.points is None:
                raise ValueError("cdf responses need outcome grid points")
            object.__setattr__(self, "points", np.asarray(self.points, dtype=float).ravel())
        if self.kind in ("joint_cdf", "treat_indicator", "group_outcome", "group_treatment"):
            if self.levels is None:
                raise ValueError(f"{self.kind} responses need levels")
            object.__setattr__(self, "levels", tuple(float(v) for v in self.levels))

    @property
    def size(self) -> int:
        if self.kind in ("outcome", "treatment"):
            return 1
        if self.kind == "cdf":
            return self.points.size
        if self.kind == "joint_cdf":
            return len(self.levels) * self.points.size
        return len(self.levels)

    def _needs(self):
        if self.kind in ("treatment", "joint_cdf", "treat_indicator", "group_treatment"):
            yield "d"
        if self.kind in ("group_outcome", "group_treatment"):
            yield "g"

    def check(self, sample: ObservationSet) -> None:
        sample.require(*self._needs())

    def values(self, sample: ObservationSet, idx=None, cols=None) -> np.ndarray:
        """Matrix of g(observation, theta) for observations ``idx`` and columns ``cols``."""
        self.check(sample)
        sel = slice(None) if idx is None else idx
        y = sample.y[sel]
        cols = np.arange(self.size) if cols is None else np.asarray(cols, dtype=int)
        if self.kind == "outcome":
            base = y[:, None]
            return base[:, np.zeros(cols.size, dtype=int)]
        if self.kind == "treatment":
            base = sample.d[sel][:, None]
            return base[:, np.zeros(cols.size, dtype=int)]
        if self.kind == "cdf":
            return (y[:, None] <= self.points[cols][None, :]).astype(float)
        if self.kind == "joint_cdf":
            m = self.points.size
            lev = np.asarray(self.levels)[cols // m]
            pts = self.points[cols % m]
            d = sample.d[sel]
            return ((y[:, None] <= pts[None, :]) & (d[:, None] == lev[None, :])).astype(float)
        lev = np.asarray(self.levels)[cols]
        if self.kind == "treat_indicator":
            return (sample.d[sel][:, None] == lev[None, :]).astype(float)
        mask = (sample.g[sel][:, None] == lev[None, :]).astype(float)
        src = y if self.kind == "group_outcome" else sample.d[sel]
        return src[:, None] * mask

    def __call__(self, sample: ObservationSet, i: int, col: int = 0) -> float:
        return float(self.values(sample, np.array([i]), np.array([col]))[0, 0])

    def project(self, A: np.ndarray, sample: ObservationSet, idx: np.ndarray) -> np.ndarray:
        """A @ G where G = values(sample, idx); shape (A.shape[0], size)."""
        self.check(sample)
        if self.kind == "cdf":
            return _cdf_project(A, sample.y[idx], self.points)
        if self.kind == "joint_cdf":
            d = sample.d[idx]
            y = sample.y[idx]
            blocks = [_cdf_project(A * (d == lev)[None, :], y, self.points) for lev in self.levels]
            return np.concatenate(blocks, axis=1)
        return A @ self.values(sample, idx)


def _cdf_project(A, y, points):
    """Columns sum_{i: y_i <= t} A[:, i] for every t in ``points``."""
    order = np.argsort(y, kind="stable")
    ys = y[order]
    csum = np.zeros((A.shape[0], ys.size + 1))
    np.cumsum(A[:, order], axis=1, out=csum[:, 1:])
    counts = np.searchsorted(ys, points, side="right")
    return csum[:, counts]


# ---------------------------------------------------------------------------
# Fits
# ---------------------------------------------------------------------------

@dataclass
class LocalFit:
    """Coefficients in the scaled basis r_p(x/h): coeffs[v] = mu^(v) h^v / v!.

    ``coeffs`` has shape (p+1,) for a single response or (p+1, m) for a grid;
    ``h`` is a scalar or one bandwidth per column.
    """

    side: str
    p: int
    h: object
    coeffs: np.ndarray
    n_eff: int

    def derivative(self, v: int):
        if not 0 <= v <= self.p:
            raise ValueError(f"derivative order {v} outside 0..{self.p}")
        return self.coeffs[v] * factorial(v) / np.asarray(self.h, dtype=float) ** v

    def predict(self, x, t: Optional[int] = None):
        """Order-t Taylor reconstruction sum_{v<=t} mu^(v) x^v / v! (no window check)."""
        t = self.p if t is None else t
        u = np.asarray(x, dtype=float)
        h = np.asarray(self.h, dtype=float)
        if self.coeffs.ndim == 1:
            u = u / h
            out = np.zeros_like(u)
            for v in range(t, -1, -1):
                out = out * u + self.coeffs[v]
            return out
        # grid of responses: rows are points, columns are responses
        u = u[:, None] / h
        out = np.zeros((u.shape[0], self.coeffs.shape[1]))
        for v in range(t, -1, -1):
            out = out * u + self.coeffs[v][None, :]
        return out


@dataclass
class WindowOperator:
    """Window indices, kernel weights and the hat operator for one side."""

    side: str
    p: int
    h: float
    idx: np.ndarray
    u: np.ndarray
    w: np.ndarray
    A: np.ndarray

    @property
    def n_eff(self) -> int:
        return int(self.idx.size)


def side_mask(x: np.ndarray, side: str) -> np.ndarray:
    if side == "plus":
        return x >= 0
    if side == "minus":
        return x <= 0
    raise ValueError(f"side must be 'plus' or 'minus', got {side!r}")


def window_operator(x: np.ndarray, h: float, p: int, kernel: KernelSpec, side: str) -> WindowOperator:
    """QR of the sqrt-weighted design and the resulting hat operator."""
    if not h > 0:
        raise ValueError("bandwidth must be positive")
    w_all = np.zeros_like(x)
    inside = side_mask(x, side) & (np.abs(x) <= h)
    w_all[inside] = eval_kernel(kernel, x[inside] / h)
    idx = np.flatnonzero(w_all > 0)
    if idx.size < p + 1:
        raise InsufficientLocalData(
            f"{side} side has {idx.size} weighted observations within h={h:.6g}; need {p + 1}")
    u = x[idx] / h
    w = w_all[idx]
    sw = np.sqrt(w)
    Z = basis(u, p) * sw[:, None]
    Q, R = np.linalg.qr(Z, mode="reduced")
    diag = np.abs(np.diag(R))
    if diag.min() <= _RANK_TOL * max(diag.max(), 1.0):
        raise InsufficientLocalData(
            f"{side} side design is rank deficient at h={h:.6g} (p={p})")
    A = solve_triangular(R, Q.T * sw[None, :], lower=False)
    return WindowOperator(side=side, p=p, h=float(h), idx=idx, u=u, w=w, A=A)


def fit_one_sided(sample: ObservationSet, response, h: float, p: int,
                  kernel: KernelSpec = KernelSpec(), side: str = "plus",
                  operator: Optional[WindowOperator] = None) -> LocalFit:
    """Local polynomial fit of order p at the cutoff from one side.

    ``response`` is a :class:`ResponseFn` or an array of response values
    (length n, or n x m for several responses at once).
    """
    op = operator if operator is not None else window_operator(sample.x, h, p, kernel, side)
    if isinstance(response, ResponseFn):
        coeffs = response.project(op.A, sample, op.idx)
        if response.size == 1:
            coeffs = coeffs[:, 0]
    else:
        vals = np.asarray(response, dtype=float)
        if vals.shape[0] != sample.n:
            raise ValueError("response values must have one row per observation")
        coeffs = op.A @ vals[op.idx]
    return LocalFit(side=side, p=p, h=float(h), coeffs=coeffs, n_eff=op.n_eff)


def fit_columns(sample: ObservationSet, response: ResponseFn, h, p: int,
                kernel: KernelSpec, side: str) -> LocalFit:
    """Fit every column of ``response``; ``h`` may hold one bandwidth per column."""
    h_arr = np.broadcast_to(np.asarray(h, dtype=float), (response.size,))
    uniq = np.unique(h_arr)
    if uniq.size == 1:
        fit = fit_one_sided(sample, response, float(uniq[0]), p, kernel, side)
        if fit.coeffs.ndim == 1:
            fit.coeffs = fit.coeffs[:, None]
        fit.h = h_arr.copy()
        return fit
    coeffs = np.empty((p + 1, response.size))
    n_eff = 0
    for hv in uniq:
        cols = np.flatnonzero(h_arr == hv)
        op = window_operator(sample.x, float(hv), p, kernel, side)
        coeffs[:, cols] = op.A @ response.values(sample, op.idx, cols)
        n_eff = max(n_eff, op.n_eff)
    return LocalFit(side=side, p=p, h=h_arr.copy(), coeffs=coeffs, n_eff=n_eff)


def tilde_mu(fit_plus: LocalFit, fit_minus: LocalFit, x, t: Optional[int] = None):
    """Order-t reconstruction of mu around the cutoff, using the plus fit for
    x >= 0 and the minus fit for x < 0."""
    xs = np.asarray(x, dtype=float)
    t_plus = fit_plus.p if t is None else t
    if not 0 <= t_plus <= min(fit_plus.p, fit_minus.p):
        raise ValueError("reconstruction order t must satisfy 0 <= t <= p")
    h_lim = min(np.min(fit_plus.h), np.min(fit_minus.h))
    if np.any(np.abs(xs) > h_lim):
        raise OutOfWindow(f"|x| exceeds bandwidth {h_lim:.6g}")
    scalar = xs.ndim == 0
    xs = np.atleast_1d(xs)
    plus = xs >= 0
    if fit_plus.coeffs.ndim == 1:
        out = np.empty(xs.shape)
    else:
        out = np.empty((xs.size, fit_plus.coeffs.shape[1]))
    if plus.any():
        out[plus] = fit_plus.predict(xs[plus], t_plus)
    if (~plus).any():
        out[~plus] = fit_minus.predict(xs[~plus], t_plus)
    if scalar:
        return out[0] if out.ndim == 1 else out[0]
    return out
