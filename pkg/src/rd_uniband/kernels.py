"""Compact-support kernels and their one-sided moment matrices.

Every kernel here is a polynomial on [0, 1] (and symmetric), so all the
half-line moments reduce to sums of rational numbers.  The closed forms are
assembled with :class:`fractions.Fraction` and converted to float once, which
keeps the matrices bit-reproducible.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from math import factorial
from typing import Dict

import numpy as np

# Coefficients of K(u) = sum_j c_j u^j on 0 <= u <= 1.
_POLY = {
    "uniform": (Fraction(1, 2),),
    "triangular": (Fraction(1), Fraction(-1)),
    "epanechnikov": (Fraction(3, 4), Fraction(0), Fraction(-3, 4)),
    "biweight": (Fraction(15, 16), Fraction(0), Fraction(-30, 16), Fraction(0), Fraction(15, 16)),
    "triweight": (
        Fraction(35, 32), Fraction(0), Fraction(-105, 32), Fraction(0),
        Fraction(105, 32), Fraction(0), Fraction(-35, 32),
    ),
}

FAMILIES = tuple(_POLY)
SIDES = ("plus", "minus")


@dataclass(frozen=True)
class KernelSpec:
    family: str = "epanechnikov"

    def __post_init__(self):
        fam = str(self.family).lower()
        if fam in ("normal", "gaussian"):
            raise ValueError("the normal kernel has unbounded support and is not allowed")
        if fam not in _POLY:
            raise ValueError(f"unknown kernel family {self.family!r}; choose from {FAMILIES}")
        object.__setattr__(self, "family", fam)

    @property
    def coefficients(self):
        return _POLY[self.family]

    def __call__(self, u):
        return eval_kernel(self, u)


def eval_kernel(k: KernelSpec, u):
    """Kernel weight at ``u``; vectorised, zero outside [-1, 1]."""
    a = np.abs(np.asarray(u, dtype=float))
    out = np.zeros_like(a)
    inside = a <= 1.0
    t = a[inside]
    coef = [float(c) for c in k.coefficients]
    # Horner in |u|
    acc = np.full_like(t, coef[-1])
    for c in reversed(coef[:-1]):
        acc = acc * t + c
    out[inside] = acc
    if np.ndim(u) == 0:
        return float(out)
    return out


def _check_side(side):
    if side not in SIDES:
        raise ValueError(f"side must be 'plus' or 'minus', got {side!r}")


def _half_moment(family: str, m: int) -> Fraction:
    """int_0^1 u^m K(u) du."""
    return sum((c / (m + j + 1) for j, c in enumerate(_POLY[family])), Fraction(0))


def half_line_moment(k: KernelSpec, m: int, side: str = "plus") -> float:
    """int over R_plus (or R_minus) of u^m K(u) du."""
    _check_side(side)
    val = _half_moment(k.family, m)
    if side == "minus" and m % 2 == 1:
        val = -val
    return float(val)


@dataclass(frozen=True)
class MomentMatrices:
    p: int
    side: str
    family: str
    gamma: np.ndarray
    gamma_inv: np.ndarray
    lambdas: Dict[int, np.ndarray] = field(repr=False)
    psi: np.ndarray = field(repr=False)

    def lam(self, q: int) -> np.ndarray:
        if q in self.lambdas:
            return self.lambdas[q]
        return _lambda(self.family, self.p, q, self.side)


def _gamma(family, p, side):
    g = np.empty((p + 1, p + 1))
    for j in range(p + 1):
        for m in range(p + 1):
            val = _half_moment(family, j + m)
            if side == "minus" and (j + m) % 2 == 1:
                val = -val
            g[j, m] = float(val)
    return g


def _lambda(family, p, q, side):
    out = np.empty(p + 1)
    for j in range(p + 1):
        val = _half_moment(family, q + j)
        if side == "minus" and (q + j) % 2 == 1:
            val = -val
        out[j] = float(val)
    return out


@lru_cache(maxsize=None)
def _moments_cached(family: str, p: int, side: str) -> MomentMatrices:
    k = KernelSpec(family)
    gamma = _gamma(family, p, side)
    try:
        np.linalg.cholesky(gamma)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"Gamma for {family}, p={p} is not positive definite") from exc
    gamma_inv = np.linalg.inv(gamma)
    lambdas = {q: _lambda(family, p, q, side) for q in range(0, p + 4)}
    psi = psi_matrix(k, p, side, 1.0, 1.0)
    for arr in (gamma, gamma_inv, psi, *lambdas.values()):
        arr.setflags(write=False)
    return MomentMatrices(p=p, side=side, family=family, gamma=gamma, gamma_inv=gamma_inv,
                          lambdas=lambdas, psi=psi)


def moment_matrices(k: KernelSpec, p: int, side: str) -> MomentMatrices:
    """Gamma, its inverse, Lambda_{p,q} for q <= p+3, and Psi at unit ratios."""
    _check_side(side)
    if not 0 <= p <= 4:
        raise ValueError("polynomial order must satisfy 0 <= p <= 4")
    return _moments_cached(k.family, int(p), side)


def psi_matrix(k: KernelSpec, p: int, side: str, c_ratio_k: float, c_ratio_l: float) -> np.ndarray:
    """Entry (j, m) is int over the half-line of
    (u/c_k)^j (u/c_l)^m K(u/c_k) K(u/c_l) du.
    """
    _check_side(side)
    ck, cl = float(c_ratio_k), float(c_ratio_l)
    if ck <= 0 or cl <= 0:
        raise ValueError("bandwidth ratios must be positive")
    coef = [float(c) for c in k.coefficients]
    cmin = min(ck, cl)
    out = np.zeros((p + 1, p + 1))
    for j in range(p + 1):
        for m in range(p + 1):
            total = 0.0
            for a, ca in enumerate(coef):
                if ca == 0.0:
                    continue
                for b, cb in enumerate(coef):
                    if cb == 0.0:
                        continue
                    e = a + b + j + m + 1
                    total += ca * cb * cmin ** e / (e * ck ** (a + j) * cl ** (b + m))
            if side == "minus" and (j + m) % 2 == 1:
                total = -total
            out[j, m] = total
    return out


def basis(u, p: int) -> np.ndarray:
    """r_p(u) = (1, u, ..., u^p) stacked as columns."""
    u = np.asarray(u, dtype=float)
    return np.vander(np.atleast_1d(u), p + 1, increasing=True)


def bias_vector(k: KernelSpec, p: int, side: str, q: int) -> np.ndarray:
    """(Gamma_p)^{-1} Lambda_{p,q} / q!, the leading bias direction."""
    mm = moment_matrices(k, p, side)
    return mm.gamma_inv @ mm.lam(q) / factorial(q)


def variance_matrix(k: KernelSpec, p: int, side: str) -> np.ndarray:
    """Gamma^{-1} Psi Gamma^{-1} at unit bandwidth ratios."""
    mm = moment_matrices(k, p, side)
    return mm.gamma_inv @ mm.psi @ mm.gamma_inv
