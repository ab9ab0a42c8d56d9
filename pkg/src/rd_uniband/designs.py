"""The ten local Wald designs: component fits, plug-in estimates, and the
delta-method coefficients that turn component processes into a process for
the estimand.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from . import density as dens
from .cdfquant import invert_on_grid, make_grids
from .data import ObservationSet
from .errors import ConfigError, DegenerateDensity, MissingSlopeJump, WeakFirstStage
from .kernels import KernelSpec
from .localpoly import LocalFit, ResponseFn, fit_columns

FAMILIES = ("SMRD", "FMRD", "SMRK", "FMRK", "SCRD", "SQRD", "FQRD", "SQRK", "FQRK", "GFMRD")
KINK = {"SMRK", "FMRK", "SQRK", "FQRK"}
FUZZY = {"FMRD", "FMRK", "FQRD", "FQRK", "GFMRD"}
QUANTILE = {"SQRD", "FQRD", "SQRK", "FQRK"}
MEAN = {"SMRD", "FMRD", "SMRK", "FMRK"}
SIDES = ("plus", "minus")


@dataclass(frozen=True)
class BandwidthPolicy:
    rule: str = "rot"  # rot | mse | fixed
    fixed: Optional[float] = None
    per_theta: bool = False

    def __post_init__(self):
        if self.rule not in ("rot", "mse", "fixed"):
            raise ConfigError(f"unknown bandwidth rule {self.rule!r}")
        if self.rule == "fixed" and not (self.fixed and self.fixed > 0):
            raise ConfigError("fixed bandwidth rule needs a positive value")

    @classmethod
    def parse(cls, text: str, per_theta: bool = False) -> "BandwidthPolicy":
        text = str(text).strip().lower()
        if text.startswith("fixed"):
            _, _, val = text.partition(":")
            try:
                return cls("fixed", float(val), per_theta)
            except ValueError as exc:
                raise ConfigError("use fixed:<value> for a fixed bandwidth") from exc
        return cls(text, None, per_theta)


@dataclass
class DesignSpec:
    family: str
    p: Optional[int] = None
    kernel: KernelSpec = field(default_factory=KernelSpec)
    theta_grid: Optional[np.ndarray] = None
    y_grid: Optional[np.ndarray] = None
    n_theta: int = 50
    n_y: int = 5000
    a: float = 0.2
    epsilon_y: Optional[float] = None
    bandwidth_policy: BandwidthPolicy = field(default_factory=BandwidthPolicy)
    known_slope_jump: Optional[float] = None
    eps_denominator: float = 1e-6
    density_floor: float = 1e-4
    b_n: Optional[float] = None
    a_n: Optional[float] = None
    c_n: Optional[float] = None

    def __post_init__(self):
        fam = str(self.family).upper()
        if fam not in FAMILIES:
            raise ConfigError(f"unknown design {self.family!r}; choose from {FAMILIES}")
        self.family = fam
        if isinstance(self.kernel, str):
            self.kernel = KernelSpec(self.kernel)
        if self.p is None:
            self.p = self.v + 2
        if not self.v <= self.p <= 4:
            raise ConfigError(f"need v <= p <= 4 (v={self.v}, p={self.p})")
        if self.p < 1:
            raise ConfigError("bias correction needs p >= 1")
        if fam in ("SMRK", "SQRK"):
            if self.known_slope_jump is None or self.known_slope_jump == 0:
                raise MissingSlopeJump(f"{fam} needs a nonzero known slope jump")
        if self.theta_grid is not None:
            self.theta_grid = np.asarray(self.theta_grid, dtype=float)
        if self.y_grid is not None:
            self.y_grid = np.asarray(self.y_grid, dtype=float)

    @property
    def v(self) -> int:
        return 1 if self.family in KINK else 0

    @property
    def s(self) -> int:
        return self.p - 1

    @property
    def fuzzy(self) -> bool:
        return self.family in FUZZY

    @property
    def uses_y_grid(self) -> bool:
        return self.family in QUANTILE or self.family == "SCRD"

    def required_columns(self):
        cols = []
        if self.family in FUZZY:
            cols.append("d")
        if self.family == "GFMRD":
            cols.append("g")
        return cols

    def resolve_grids(self, sample: ObservationSet, window: Optional[float] = None):
        """Fill in missing theta/y grids from the sample."""
        if not self.uses_y_grid:
            return
        if self.theta_grid is None or self.y_grid is None:
            theta, y = make_grids(sample, self.n_theta, self.n_y, self.a, window)
            if self.theta_grid is None:
                self.theta_grid = theta
            if self.y_grid is None:
                self.y_grid = y


@dataclass
class Bandwidths:
    """Per-column bandwidths for the numerator (k=1) and denominator (k=2)
    components, and the baseline h_n that scales bands and statistics."""

    h1: np.ndarray
    h2: Optional[np.ndarray] = None
    h_n: Optional[float] = None

    def __post_init__(self):
        self.h1 = np.atleast_1d(np.asarray(self.h1, dtype=float))
        if self.h2 is not None:
            self.h2 = np.atleast_1d(np.asarray(self.h2, dtype=float))
        if self.h_n is None:
            self.h_n = float(np.median(self.h1))
        for arr in (self.h1, self.h2):
            if arr is not None and np.any(arr <= 0):
                raise ValueError("bandwidths must be positive")

    def for_component(self, k: int, size: int) -> np.ndarray:
        h = self.h1 if k == 1 else (self.h2 if self.h2 is not None else self.h1)
        if h.size == 1:
            return np.full(size, float(h[0]))
        if h.size != size:
            raise ValueError(f"component {k} needs {size} bandwidths, got {h.size}")
        return h

    @property
    def max_h(self) -> float:
        vals = [self.h1.max()]
        if self.h2 is not None:
            vals.append(self.h2.max())
        return float(max(vals))


def design_responses(spec: DesignSpec, sample: ObservationSet) -> Tuple[ResponseFn, Optional[ResponseFn]]:
    fam = spec.family
    if fam in ("SMRD", "SMRK"):
        return ResponseFn("outcome"), None
    if fam in ("FMRD", "FMRK"):
        return ResponseFn("outcome"), ResponseFn("treatment")
    if fam == "GFMRD":
        groups = tuple(sample.groups())
        return ResponseFn("group_outcome", levels=groups), ResponseFn("group_treatment", levels=groups)
    if fam in ("SCRD", "SQRD", "SQRK"):
        return ResponseFn("cdf", points=spec.y_grid), None
    if fam == "FQRK":
        return ResponseFn("cdf", points=spec.y_grid), ResponseFn("treatment")
    # FQRD: treated arm first
    return (ResponseFn("joint_cdf", points=spec.y_grid, levels=(1, 0)),
            ResponseFn("treat_indicator", levels=(1, 0)))


@dataclass
class WaldComponents:
    mu1_plus: np.ndarray
    mu1_minus: np.ndarray
    mu2_plus: Optional[np.ndarray]
    mu2_minus: Optional[np.ndarray]
    f_x_at_zero: float
    h1: np.ndarray
    h2: Optional[np.ndarray]
    h_n: float
    fits: Dict[Tuple[int, str], LocalFit]
    responses: Dict[int, ResponseFn]
    density: dens.DensityConfig


@dataclass
class EstimateResult:
    family: str
    index_grid: np.ndarray
    tau: np.ndarray
    components: WaldComponents
    derived: Dict[str, np.ndarray]
    saturation_count: int
    n: int
    v: int

    @property
    def h_n(self) -> float:
        return self.components.h_n


def estimate_components(sample: ObservationSet, spec: DesignSpec, bandwidths: Bandwidths) -> WaldComponents:
    sample.require(*spec.required_columns())
    spec.resolve_grids(sample, bandwidths.max_h)
    r1, r2 = design_responses(spec, sample)
    fits = {}
    responses = {1: r1}
    h1 = bandwidths.for_component(1, r1.size)
    h2 = None
    for side in SIDES:
        fits[(1, side)] = fit_columns(sample, r1, h1, spec.p, spec.kernel, side)
    if r2 is not None:
        responses[2] = r2
        h2 = bandwidths.for_component(2, r2.size)
        for side in SIDES:
            fits[(2, side)] = fit_columns(sample, r2, h2, spec.p, spec.kernel, side)
    dcfg = dens.default_config(sample, spec.kernel, spec.b_n, spec.a_n, spec.c_n)
    f_x0 = dens.kde_at_zero(sample.x, dcfg.b_n, spec.kernel)
    v = spec.v
    mu2p = fits[(2, "plus")].derivative(v) if r2 is not None else None
    mu2m = fits[(2, "minus")].derivative(v) if r2 is not None else None
    return WaldComponents(
        mu1_plus=fits[(1, "plus")].derivative(v), mu1_minus=fits[(1, "minus")].derivative(v),
        mu2_plus=mu2p, mu2_minus=mu2m, f_x_at_zero=f_x0, h1=h1, h2=h2,
        h_n=float(bandwidths.h_n), fits=fits, responses=responses, density=dcfg)


def _check_denominator(jump, eps, what):
    bad = np.abs(jump) <= eps
    if np.any(bad):
        raise WeakFirstStage(f"{what}: denominator jump within {eps:g} of zero")


def _floor(values, floor, what):
    values = np.asarray(values, dtype=float)
    if np.any(~np.isfinite(values)) or np.any(values < floor):
        raise DegenerateDensity(f"{what} fell below the floor {floor:g}")
    return values


def estimate_tau(sample: ObservationSet, spec: DesignSpec, bandwidths: Bandwidths) -> EstimateResult:
    comp = estimate_components(sample, spec, bandwidths)
    fam = spec.family
    derived: Dict[str, np.ndarray] = {}
    sat = 0
    eps = spec.eps_denominator
    kern = spec.kernel
    a_n = comp.density.a_n

    if fam in ("SMRD", "SMRK", "FMRD", "FMRK", "GFMRD"):
        A = comp.mu1_plus - comp.mu1_minus
        if fam == "GFMRD":
            index = np.asarray(comp.responses[1].levels, dtype=float)
        else:
            index = np.array([0.0])
        if fam in ("SMRD", "SMRK"):
            B = np.ones_like(A) if fam == "SMRD" else np.full_like(A, spec.known_slope_jump)
        else:
            B = comp.mu2_plus - comp.mu2_minus
            _check_denominator(B, eps, fam)
        tau = A / B
        derived.update(numerator_jump=A, denominator_jump=B)

    elif fam == "SCRD":
        index = spec.y_grid
        tau = np.clip(comp.mu1_plus, 0, 1) - np.clip(comp.mu1_minus, 0, 1)

    elif fam == "SQRD":
        index = spec.theta_grid
        y = spec.y_grid
        qp, ip, sp = invert_on_grid(y, comp.mu1_plus, index)
        qm, im, sm = invert_on_grid(y, comp.mu1_minus, index)
        tau = qp - qm
        sat = int(sp.sum() + sm.sum())
        fp = dens.cond_density_at_cutoff(sample, qp, "plus", a_n, kern)
        fm = dens.cond_density_at_cutoff(sample, qm, "minus", a_n, kern)
        derived.update(Q_plus=qp, Q_minus=qm, idx_plus=ip, idx_minus=im,
                       f_plus=np.atleast_1d(fp), f_minus=np.atleast_1d(fm),
                       saturated=sp | sm)

    elif fam == "FQRD":
        index = spec.theta_grid
        y = spec.y_grid
        m = y.size
        J = comp.mu2_plus - comp.mu2_minus  # (treated, untreated)
        _check_denominator(J, eps, "FQRD")
        N = comp.mu1_plus - comp.mu1_minus
        out = {}
        for j, d in enumerate((1, 0)):
            Nd = N[j * m:(j + 1) * m]
            q, idx, s = invert_on_grid(y, Nd / J[j], index)
            f = dens.complier_density(sample, q, d, float(J[j]), a_n, comp.density.c_n, kern, eps)
            out[d] = (q, idx, s, np.atleast_1d(f), Nd[idx])
        tau = out[1][0] - out[0][0]
        sat = int(out[1][2].sum() + out[0][2].sum())
        derived.update(Q1=out[1][0], Q0=out[0][0], idx1=out[1][1], idx0=out[0][1],
                       f1=out[1][3], f0=out[0][3], N1=out[1][4], N0=out[0][4],
                       J1=np.array([J[0]]), J0=np.array([J[1]]),
                       saturated=out[1][2] | out[0][2])

    else:  # SQRK, FQRK
        index = spec.theta_grid
        y = spec.y_grid
        f_plus = comp.fits[(1, "plus")]
        f_minus = comp.fits[(1, "minus")]
        pooled_cdf = 0.5 * (f_plus.derivative(0) + f_minus.derivative(0))
        q0, i0, s0 = invert_on_grid(y, pooled_cdf, index)
        f0 = np.atleast_1d(dens.cond_density_at_cutoff(sample, q0, "pooled", a_n, kern))
        phi_p = -comp.mu1_plus[i0] / f0
        phi_m = -comp.mu1_minus[i0] / f0
        if fam == "SQRK":
            B = np.full(index.size, float(spec.known_slope_jump))
        else:
            B = np.full(index.size, float((comp.mu2_plus - comp.mu2_minus)[0]))
            _check_denominator(B, eps, fam)
        tau = (phi_p - phi_m) / B
        sat = int(s0.sum())
        derived.update(Q0=q0, idx0=i0, f0=f0, phi_plus=phi_p, phi_minus=phi_m,
                       slope_jump=B, saturated=s0)

    tau = np.asarray(tau, dtype=float)
    if not np.all(np.isfinite(tau)):
        raise DegenerateDensity(f"{fam}: non-finite estimate")
    if fam in QUANTILE:
        step = float(spec.y_grid[1] - spec.y_grid[0])
        eps_y = spec.epsilon_y if spec.epsilon_y is not None else 2 * step
        qs = [derived[k] for k in ("Q_plus", "Q_minus", "Q1", "Q0") if k in derived]
        lo = min(float(q.min()) for q in qs) - eps_y
        hi = max(float(q.max()) for q in qs) + eps_y
        derived["y1_interval"] = np.array([lo, hi])
    return EstimateResult(family=fam, index_grid=np.asarray(index, dtype=float), tau=tau,
                          components=comp, derived=derived, saturation_count=sat,
                          n=sample.n, v=spec.v)


# ---------------------------------------------------------------------------
# Delta-method coefficients
# ---------------------------------------------------------------------------

@dataclass
class HadamardCoefficients:
    """blocks[(k, side)] = (cols, C) with the process equal to
    sum over blocks of nu_{k,side}[:, cols] @ C.

    The bandwidth-ratio scaling c_k^{-(1/2+v)} is folded into C.
    """

    n_index: int
    blocks: Dict[Tuple[int, str], Tuple[np.ndarray, np.ndarray]]


class _Builder:
    def __init__(self, n_index):
        self.n_index = n_index
        self.entries: Dict[Tuple[int, str], list] = {}

    def add(self, k, side, cols, thetas, vals):
        cols = np.broadcast_to(np.asarray(cols, dtype=int), (len(thetas),))
        vals = np.broadcast_to(np.asarray(vals, dtype=float), (len(thetas),))
        self.entries.setdefault((k, side), []).append((cols, np.asarray(thetas), vals))

    def pm(self, k, cols, thetas, vals):
        """+vals on the plus draw, -vals on the minus draw."""
        self.add(k, "plus", cols, thetas, vals)
        self.add(k, "minus", cols, thetas, -np.asarray(vals, dtype=float))

    def build(self, scale):
        blocks = {}
        for key, parts in self.entries.items():
            cols = np.concatenate([c for c, _, _ in parts])
            th = np.concatenate([t for _, t, _ in parts])
            vals = np.concatenate([v for _, _, v in parts])
            uniq, pos = np.unique(cols, return_inverse=True)
            C = np.zeros((uniq.size, self.n_index))
            np.add.at(C, (pos, th), vals * scale[key[0]][cols])
            blocks[key] = (uniq, C)
        return HadamardCoefficients(self.n_index, blocks)


def hadamard_coefficients(result: EstimateResult, spec: DesignSpec) -> HadamardCoefficients:
    comp = result.components
    fam = result.family
    v = result.v
    d = result.derived
    n_idx = result.index_grid.size
    th = np.arange(n_idx)
    scale = {1: (comp.h1 / comp.h_n) ** (-(0.5 + v))}
    if comp.h2 is not None:
        scale[2] = (comp.h2 / comp.h_n) ** (-(0.5 + v))
    b = _Builder(n_idx)
    floor = spec.density_floor

    if fam in ("SMRD", "SMRK"):
        b.pm(1, th, th, 1.0 / d["denominator_jump"])
    elif fam in ("FMRD", "FMRK", "GFMRD"):
        A, B = d["numerator_jump"], d["denominator_jump"]
        b.pm(1, th, th, 1.0 / B)
        b.pm(2, th, th, -A / B ** 2)
    elif fam == "SCRD":
        b.pm(1, th, th, 1.0)
    elif fam == "SQRD":
        fp = _floor(d["f_plus"], floor, "f(Q|0+)")
        fm = _floor(d["f_minus"], floor, "f(Q|0-)")
        b.add(1, "plus", d["idx_plus"], th, -1.0 / fp)
        b.add(1, "minus", d["idx_minus"], th, 1.0 / fm)
    elif fam == "FQRD":
        m = spec.y_grid.size
        f1 = _floor(d["f1"], floor, "complier density of Y1")
        f0 = _floor(d["f0"], floor, "complier density of Y0")
        J1, J0 = float(d["J1"][0]), float(d["J0"][0])
        # Upsilon'(g) = -g(Q1, 1)/f1 + g(Q0, 0)/f0 with g = (J X1 - N X2)/J^2
        b.pm(1, d["idx1"], th, -1.0 / (f1 * J1))
        b.pm(2, 0, th, d["N1"] / (f1 * J1 ** 2))
        b.pm(1, m + d["idx0"], th, 1.0 / (f0 * J0))
        b.pm(2, 1, th, -d["N0"] / (f0 * J0 ** 2))
    else:  # SQRK, FQRK
        f0 = _floor(d["f0"], floor, "f(Q|0)")
        B = d["slope_jump"]
        b.pm(1, d["idx0"], th, -1.0 / (f0 * B))
        if fam == "FQRK":
            A = d["phi_plus"] - d["phi_minus"]
            b.pm(2, 0, th, -A / B ** 2)
    return b.build(scale)
