"""Three-step plug-in bandwidth selection.

Step 1 computes a preliminary bandwidth from kernel constants alone, Step 2
runs pilot fits at that bandwidth, and Step 3 plugs the pilots into the
MSE-optimal formula and applies the rule-of-thumb shrink
n^{-s/((2s+3)(s+3))} aimed at coverage.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from math import factorial
from typing import Dict, Optional, Tuple

import numpy as np

from . import density as dens
from .data import ObservationSet
from .designs import Bandwidths, DesignSpec, design_responses
from .errors import VanishingBias
from .kernels import KernelSpec, basis, moment_matrices
from .localpoly import ResponseFn, window_operator

BIAS_TOL = 1e-10


def _bias_coef(kernel, s, v, side):
    mm = moment_matrices(kernel, s, side)
    return float((mm.gamma_inv @ mm.lam(s + 1))[v]) / factorial(s + 1)


def _var_coef(kernel, s, v, side):
    mm = moment_matrices(kernel, s, side)
    return float((mm.gamma_inv @ mm.psi @ mm.gamma_inv)[v, v])


def _rate_constant(s, v):
    return (2 * v + 1) / (2 * s + 2 - 2 * v)


def preliminary_constants(kernel: KernelSpec, s: int, v: int, f_x0: float) -> Tuple[float, float]:
    """(C, C') with every pilot set to one.

    The two one-sided bias terms are added in absolute value: with equal
    pilots on both sides their signed difference is identically zero whenever
    s - v is odd, which would leave Step 1 undefined for the standard designs.
    """
    c = abs(_bias_coef(kernel, s, v, "plus")) + abs(_bias_coef(kernel, s, v, "minus"))
    cp = (_var_coef(kernel, s, v, "plus") + _var_coef(kernel, s, v, "minus")) / f_x0
    return c, cp


def step1_preliminary(sample: ObservationSet, s: int, v: int, kernel: KernelSpec = KernelSpec()):
    """Returns (h0_1, h0_2, f_x0); the two coincide because the pilots are all one."""
    n = sample.n
    if n < 2 * (s + 2):
        raise ValueError(f"need at least {2 * (s + 2)} observations")
    c_n = dens.silverman_bandwidth(sample.x, -0.2)
    f_x0 = dens.kde_at_zero(sample.x, c_n, kernel)
    c, cp = preliminary_constants(kernel, s, v, f_x0)
    h0 = (_rate_constant(s, v) * cp / c ** 2) ** 0.2 * n ** -0.2
    return h0, h0, f_x0


@dataclass
class Pilots:
    """Side-specific pilot estimates; arrays run over response columns."""

    sigma2_plus: np.ndarray
    sigma2_minus: np.ndarray
    mu_plus: np.ndarray
    mu_minus: np.ndarray

    def to_dict(self):
        return {k: np.asarray(v).tolist() for k, v in self.__dict__.items()}


def _response_matrix(sample, response, idx):
    if isinstance(response, ResponseFn):
        return response.values(sample, idx)
    vals = np.asarray(response, dtype=float)
    if vals.ndim == 1:
        vals = vals[:, None]
    return vals[idx]


def step2_pilot(sample: ObservationSet, response, h0: float, s: int,
                kernel: KernelSpec = KernelSpec()) -> Pilots:
    """Order-s fits give the kernel-weighted residual variance; order-(s+1)
    fits give the (s+1)-th derivative used by the bias constant."""
    out = {}
    for side in ("plus", "minus"):
        op = window_operator(sample.x, h0, s, kernel, side)
        g = _response_matrix(sample, response, op.idx)
        coef = op.A @ g
        resid = g - basis(op.u, s) @ coef
        sigma2 = (op.w @ resid ** 2) / op.w.sum()
        op1 = window_operator(sample.x, h0, s + 1, kernel, side)
        g1 = _response_matrix(sample, response, op1.idx)
        mu = (op1.A @ g1)[s + 1] * factorial(s + 1) / h0 ** (s + 1)
        out[side] = (sigma2, mu)
    return Pilots(out["plus"][0], out["minus"][0], out["plus"][1], out["minus"][1])


def step3_mse_and_rot(pilots: Pilots, f_x0: float, s: int, v: int, n: int,
                      kernel: KernelSpec = KernelSpec(), x_range: Optional[float] = None,
                      fallback: Optional[float] = None):
    """Returns (h_mse, h_rot, C_hat, C'_hat) as arrays over response columns.

    A vanishing bias constant caps h_mse at ``x_range``; a vanishing
    variance constant falls back to ``fallback`` (the preliminary bandwidth).
    Without those arguments the degenerate cases raise VanishingBias.
    """
    bp, bm = _bias_coef(kernel, s, v, "plus"), _bias_coef(kernel, s, v, "minus")
    vp, vm = _var_coef(kernel, s, v, "plus"), _var_coef(kernel, s, v, "minus")
    C = bp * np.asarray(pilots.mu_plus, dtype=float) - bm * np.asarray(pilots.mu_minus, dtype=float)
    Cp = (np.asarray(pilots.sigma2_plus) * vp + np.asarray(pilots.sigma2_minus) * vm) / f_x0
    C, Cp = np.atleast_1d(C), np.atleast_1d(Cp)
    e = 1.0 / (2 * s + 3)
    with np.errstate(divide="ignore", invalid="ignore"):
        h_mse = (_rate_constant(s, v) * Cp / C ** 2) ** e * n ** -e
    vanish = np.abs(C) < BIAS_TOL
    novar = (Cp <= 0) & ~vanish
    if vanish.any():
        if x_range is None:
            raise VanishingBias("estimated bias constant is zero")
        h_mse[vanish] = x_range
    if novar.any():
        if fallback is None:
            raise VanishingBias("estimated variance constant is zero")
        h_mse[novar] = fallback
    if x_range is not None:
        h_mse = np.minimum(h_mse, x_range)
    h_rot = h_mse * rot_factor(n, s)
    return h_mse, h_rot, C, Cp


def rot_factor(n: int, s: int) -> float:
    return n ** (-s / ((2 * s + 3) * (s + 3)))


@dataclass
class BandwidthPlan:
    s: int
    v: int
    rule: str
    h0_1: float
    h0_2: Optional[float]
    h_mse_1: np.ndarray
    h_mse_2: Optional[np.ndarray]
    h_rot_1: np.ndarray
    h_rot_2: Optional[np.ndarray]
    f_x0: float
    diagnostics: Dict[str, object] = field(default_factory=dict)

    def chosen(self) -> Tuple[np.ndarray, Optional[np.ndarray]]:
        if self.rule == "mse":
            return self.h_mse_1, self.h_mse_2
        return self.h_rot_1, self.h_rot_2

    def bandwidths(self) -> Bandwidths:
        h1, h2 = self.chosen()
        h_n = float(np.median(h1))
        return Bandwidths(h1=h1, h2=h2, h_n=h_n)

    def to_dict(self) -> dict:
        def conv(x):
            if x is None:
                return None
            a = np.asarray(x, dtype=float)
            return float(a) if a.ndim == 0 else (float(a[0]) if a.size == 1 else a.tolist())

        bw = self.bandwidths()
        out = {
            "s": self.s, "v": self.v, "rule": self.rule,
            "h0_1": conv(self.h0_1), "h0_2": conv(self.h0_2),
            "h_mse_1": conv(self.h_mse_1), "h_mse_2": conv(self.h_mse_2),
            "h_rot_1": conv(self.h_rot_1), "h_rot_2": conv(self.h_rot_2),
            "h_n": bw.h_n, "f_x0": self.f_x0,
            "c_ratio_1": conv(bw.h1 / bw.h_n),
            "c_ratio_2": conv(bw.h2 / bw.h_n) if bw.h2 is not None else None,
        }
        out["diagnostics"] = {k: conv(v) if isinstance(v, (np.ndarray, float, int)) else v
                              for k, v in self.diagnostics.items()}
        return out


def _representative(spec: DesignSpec, sample: ObservationSet):
    """Pilot responses for the shared-bandwidth policy: the median outcome for
    distributional designs, every group (or treatment arm) otherwise; the
    smallest resulting bandwidth is used."""
    fam = spec.family
    med = np.array([float(np.median(sample.y))])
    if fam in ("SCRD", "SQRD", "SQRK"):
        return ResponseFn("cdf", points=med), None
    if fam == "FQRK":
        return ResponseFn("cdf", points=med), ResponseFn("treatment")
    if fam == "FQRD":
        return (ResponseFn("joint_cdf", points=med, levels=(1, 0)),
                ResponseFn("treat_indicator", levels=(1,)))
    return design_responses(spec, sample)


def select_bandwidths(sample: ObservationSet, spec: DesignSpec) -> BandwidthPlan:
    """Run the three steps for every component the design needs."""
    policy = spec.bandwidth_policy
    s, v = spec.s, spec.v
    sample.require(*spec.required_columns())
    if policy.rule == "fixed":
        h = float(policy.fixed)
        h2 = h if spec.fuzzy else None
        f_x0 = dens.kde_at_zero(sample.x, dens.silverman_bandwidth(sample.x, -0.2), spec.kernel)
        return BandwidthPlan(s, v, "fixed", h, h2, np.array([h]), None if h2 is None else np.array([h2]),
                             np.array([h]), None if h2 is None else np.array([h2]), f_x0)
    if policy.per_theta:
        spec.resolve_grids(sample, None)
        r1, r2 = design_responses(spec, sample)
    else:
        r1, r2 = _representative(spec, sample)
    n = sample.n
    h0, h0b, f_x0 = step1_preliminary(sample, s, v, spec.kernel)
    x_range = sample.x_range()
    diag: Dict[str, object] = {"x_range": x_range}
    results = {}
    for k, resp in ((1, r1), (2, r2)):
        if resp is None:
            continue
        pil = step2_pilot(sample, resp, h0, s, spec.kernel)
        h_mse, h_rot, C, Cp = step3_mse_and_rot(pil, f_x0, s, v, n, spec.kernel, x_range, h0)
        if not policy.per_theta:
            j = int(np.argmin(h_mse))
            h_mse, h_rot = h_mse[j:j + 1], h_rot[j:j + 1]
            C, Cp = C[j:j + 1], Cp[j:j + 1]
            pil = Pilots(*(np.atleast_1d(a)[j:j + 1] for a in
                           (pil.sigma2_plus, pil.sigma2_minus, pil.mu_plus, pil.mu_minus)))
        diag.update({f"sigma2_plus_{k}": pil.sigma2_plus, f"sigma2_minus_{k}": pil.sigma2_minus,
                     f"mu_s1_plus_{k}": pil.mu_plus, f"mu_s1_minus_{k}": pil.mu_minus,
                     f"C_{k}": C, f"Cprime_{k}": Cp,
                     f"vanishing_bias_{k}": int(np.sum(np.abs(C) < BIAS_TOL))})
        results[k] = (h_mse, h_rot)
    h_mse_2, h_rot_2 = results.get(2, (None, None))
    return BandwidthPlan(s, v, policy.rule, h0, h0b if r2 is not None else None,
                         results[1][0], h_mse_2, results[1][1], h_rot_2, f_x0, diag)
