"""Simulation designs and the Monte Carlo harness."""
from __future__ import annotations

import csv
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import norm

from .bootstrap import worker_count
from .data import ObservationSet
from .designs import DesignSpec
from .errors import RDError

DGP_FAMILIES = ("fqrd_main", "smrd_simple", "fmrd_simple", "smrk_simple", "fmrk_simple",
                "sqrd_simple", "sqrk_simple", "fqrk_simple", "gfmrd_simple",
                "cct_lee", "cct_ludwig_miller")

# design each DGP is built for
DEFAULT_DESIGN = {
    "fqrd_main": "FQRD", "smrd_simple": "SMRD", "fmrd_simple": "FMRD", "smrk_simple": "SMRK",
    "fmrk_simple": "FMRK", "sqrd_simple": "SQRD", "sqrk_simple": "SQRK", "fqrk_simple": "FQRK",
    "gfmrd_simple": "GFMRD", "cct_lee": "SMRD", "cct_ludwig_miller": "SMRD",
}

LEE_LEFT = (0.48, 1.27, 7.18, 20.21, 21.54, 7.33)
LEE_RIGHT = (0.52, 0.84, -3.00, 7.99, -9.01, 3.56)
LM_LEFT = (3.71, 2.30, 3.28, 1.45, 0.23, 0.03)
LM_RIGHT = (0.26, 18.49, -54.81, 74.30, -45.02, 9.83)
ALPHA = (1.00, 0.10, 0.01)

# (sigma_V, rho_UV) for the fuzzy simple families
_SIGMA_V = {"fmrd_simple": 0.5, "fmrk_simple": 0.1, "fqrk_simple": 0.1, "gfmrd_simple": 0.5}


@dataclass
class DgpSpec:
    family: str
    n: int
    beta1: float = 0.0
    gamma1: float = 0.0
    beta2: float = 0.0
    sigma_x: Optional[float] = None
    sigma_u: Optional[float] = None
    sigma_v: Optional[float] = None
    rho_xu: Optional[float] = None
    rho_xv: Optional[float] = None
    rho_uv: Optional[float] = None
    group_prob: float = 0.5
    seed: int = 0
    replication: int = 0

    def __post_init__(self):
        if self.family not in DGP_FAMILIES:
            raise ValueError(f"unknown DGP {self.family!r}; choose from {DGP_FAMILIES}")
        if self.n < 1:
            raise ValueError("n must be positive")
        main = self.family == "fqrd_main"
        defaults = {
            "sigma_x": 0.1781742 if main else 1.0,
            "sigma_u": 0.1295 if main else 1.0,
            "sigma_v": 0.5 if main else _SIGMA_V.get(self.family, 0.5),
            "rho_xu": 0.25 if main else 0.5,
            "rho_xv": 0.0,
            "rho_uv": 0.25 if main else 0.5,
        }
        for k, v in defaults.items():
            if getattr(self, k) is None:
                setattr(self, k, v)
        if self.family not in ("cct_lee", "cct_ludwig_miller"):
            np.linalg.cholesky(self.covariance())

    def covariance(self) -> np.ndarray:
        """Sigma built from the correlations and standard deviations."""
        sx, su, sv = self.sigma_x, self.sigma_u, self.sigma_v
        return np.array([
            [sx * sx, self.rho_xu * sx * su, self.rho_xv * sx * sv],
            [self.rho_xu * sx * su, su * su, self.rho_uv * su * sv],
            [self.rho_xv * sx * sv, self.rho_uv * su * sv, sv * sv],
        ])

    def rng(self) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=int(self.seed), counter=[0, 0, 1, int(self.replication)]))


def _poly(coefs, x):
    return np.polynomial.polynomial.polyval(x, coefs)


def lee_mu(x, with_intercept=True):
    left, right = np.array(LEE_LEFT), np.array(LEE_RIGHT)
    if not with_intercept:
        left[0] = right[0] = 0.0
    return np.where(x < 0, _poly(left, x), _poly(right, x))


def generate(spec: DgpSpec) -> ObservationSet:
    rng = spec.rng()
    fam, n = spec.family, spec.n
    if fam in ("cct_lee", "cct_ludwig_miller"):
        x = 2.0 * rng.beta(2.0, 4.0, size=n) - 1.0
        u = rng.normal(0.0, 0.1295, size=n)
        if fam == "cct_lee":
            mu = lee_mu(x)
        else:
            mu = np.where(x < 0, _poly(LM_LEFT, x), _poly(LM_RIGHT, x))
        d = (x >= 0).astype(float)
        return ObservationSet(x=x, y=mu + u, d=d)

    L = np.linalg.cholesky(spec.covariance())
    z = rng.standard_normal((n, 3)) @ L.T
    x, u, v = z[:, 0], z[:, 1], z[:, 2]
    right = (x >= 0).astype(float)
    b1, g1 = spec.beta1, spec.gamma1
    if fam == "fqrd_main":
        d = (2 * right - 1 >= v).astype(float)
        y = lee_mu(x, with_intercept=False) + b1 * d + (1 + g1 * d) * u
        return ObservationSet(x=x, y=y, d=d)

    base = ALPHA[0] + ALPHA[1] * x + ALPHA[2] * x ** 2
    if fam in ("smrd_simple", "sqrd_simple"):
        d = right
    elif fam in ("smrk_simple", "sqrk_simple"):
        d = x * (2 * right - 1)
    elif fam in ("fmrk_simple", "fqrk_simple"):
        d = x * (2 * right - 1) + v
    else:  # fmrd_simple, gfmrd_simple
        d = (2 * right - 1 >= v).astype(float)
    if fam == "gfmrd_simple":
        g = rng.binomial(1, spec.group_prob, size=n) + 1.0
        y = base + spec.beta1 * d * (g == 1) + spec.beta2 * d * (g == 2) + u
        return ObservationSet(x=x, y=y, d=d, g=g)
    if fam in ("sqrd_simple", "sqrk_simple", "fqrk_simple"):
        y = base + b1 * d + (1 + g1 * d) * u
    else:
        y = base + b1 * d + u
    return ObservationSet(x=x, y=y, d=d)


def true_effect(spec: DgpSpec, theta_grid=None) -> np.ndarray:
    """The estimand the DGP was built for, on the design's index grid."""
    fam = spec.family
    if fam == "cct_lee":
        return np.array([LEE_RIGHT[0] - LEE_LEFT[0]])
    if fam == "cct_ludwig_miller":
        return np.array([LM_RIGHT[0] - LM_LEFT[0]])
    if fam == "gfmrd_simple":
        return np.array([spec.beta1, spec.beta2])
    if fam in ("fqrd_main", "sqrd_simple", "sqrk_simple", "fqrk_simple"):
        if theta_grid is None:
            raise ValueError("quantile effects need a theta grid")
        sd = spec.sigma_u * math.sqrt(1 - spec.rho_xu ** 2)
        return spec.beta1 + spec.gamma1 * sd * norm.ppf(np.asarray(theta_grid, dtype=float))
    return np.array([spec.beta1])


# ---------------------------------------------------------------------------
# Monte Carlo
# ---------------------------------------------------------------------------

CHECKS = ("nullity", "homogeneity", "coverage")


def _sub_seed(master_seed: int, r: int) -> int:
    state = np.random.SeedSequence([int(master_seed), int(r)]).generate_state(2, np.uint64)
    return int(state[0]) << 64 | int(state[1])


def _one_replication(args):
    dgp, design, B, alpha, master_seed, r = args
    from .pipeline import analyze  # local import keeps worker start-up light

    spec = replace(dgp, seed=int(master_seed), replication=int(r))
    sample = generate(spec)
    try:
        res = analyze(sample, design, B=B, alpha=alpha, seed=_sub_seed(master_seed, r), workers=1)
    except (RDError, np.linalg.LinAlgError) as exc:
        return {"r": r, "failed": True, "error": type(exc).__name__}
    truth = true_effect(spec, res.result.index_grid)
    out = {"r": r, "failed": False, "saturation": res.result.saturation_count,
           "nullity": not res.tests["uniform_nullity"].reject,
           "coverage": res.band.covers(truth),
           "h_n": res.bandwidths.h_n}
    if "homogeneity" in res.tests:
        out["homogeneity"] = not res.tests["homogeneity"].reject
    return out


@dataclass
class McCell:
    check: str
    frequency: float
    mc_se: float
    successes: int
    valid_replications: int

    def within(self, target: float, n_se: float = 3.0) -> bool:
        se = math.sqrt(target * (1 - target) / max(self.valid_replications, 1))
        return abs(self.frequency - target) <= n_se * se


@dataclass
class McReport:
    dgp: dict
    design: str
    R: int
    B: int
    alpha: float
    master_seed: int
    cells: Dict[str, McCell]
    failures: int
    failure_rate: float
    invalid: bool
    saturation_total: int
    mean_bandwidth: float
    runtime_seconds: float
    errors: Dict[str, int] = field(default_factory=dict)

    def to_dict(self, timing: bool = True) -> dict:
        d = asdict(self)
        if not timing:
            d.pop("runtime_seconds")
        return d

    def to_json(self, timing: bool = True) -> str:
        return json.dumps(self.to_dict(timing), indent=2, sort_keys=True)

    def csv_rows(self) -> List[dict]:
        rows = []
        for name, cell in self.cells.items():
            rows.append({
                "dgp": self.dgp["family"], "design": self.design, "n": self.dgp["n"],
                "beta1": self.dgp["beta1"], "gamma1": self.dgp["gamma1"], "beta2": self.dgp["beta2"],
                "check": name, "frequency": cell.frequency, "mc_se": cell.mc_se,
                "R": self.R, "B": self.B, "failures": self.failures, "invalid": self.invalid,
            })
        return rows


def mc_csv(reports: Sequence[McReport]) -> str:
    rows = [row for rep in reports for row in rep.csv_rows()]
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return buf.getvalue()


def default_mc_design(dgp: DgpSpec, **overrides) -> DesignSpec:
    fam = DEFAULT_DESIGN[dgp.family]
    kw = {}
    if fam in ("SMRK", "SQRK"):
        kw["known_slope_jump"] = 2.0
    kw.update(overrides)
    return DesignSpec(fam, **kw)


def run_monte_carlo(dgp: DgpSpec, design: DesignSpec, R: int, B: int, master_seed: int = 0,
                    check: Iterable[str] | str = CHECKS, alpha: float = 0.05,
                    workers: Optional[int] = None, progress=None) -> McReport:
    """R independent datasets, each pushed through bandwidth selection,
    estimation and a B-draw bootstrap.  Failed replications are excluded and
    counted; a cell with more than 5% failures is flagged invalid."""
    if R < 1 or B < 1:
        raise ValueError("R and B must be positive")
    checks = (check,) if isinstance(check, str) else tuple(check)
    for c in checks:
        if c not in CHECKS:
            raise ValueError(f"unknown check {c!r}")
    t0 = time.perf_counter()
    jobs = [(dgp, design, B, alpha, master_seed, r) for r in range(R)]
    nw = worker_count(workers)
    if nw == 1:
        outs = []
        for j in jobs:
            outs.append(_one_replication(j))
            if progress:
                progress(len(outs), R)
    else:
        with ProcessPoolExecutor(max_workers=nw) as ex:
            outs = list(ex.map(_one_replication, jobs, chunksize=max(1, R // (4 * nw))))
    outs.sort(key=lambda o: o["r"])
    ok = [o for o in outs if not o["failed"]]
    errors: Dict[str, int] = {}
    for o in outs:
        if o["failed"]:
            errors[o["error"]] = errors.get(o["error"], 0) + 1
    cells = {}
    for c in checks:
        vals = [bool(o[c]) for o in ok if c in o]
        m = len(vals)
        p = float(np.mean(vals)) if m else float("nan")
        se = math.sqrt(p * (1 - p) / m) if m else float("nan")
        cells[c] = McCell(c, p, se, int(sum(vals)), m)
    failures = R - len(ok)
    return McReport(
        dgp=asdict(dgp), design=design.family, R=R, B=B, alpha=alpha, master_seed=int(master_seed),
        cells=cells, failures=failures, failure_rate=failures / R, invalid=failures / R > 0.05,
        saturation_total=int(sum(o.get("saturation", 0) for o in ok)),
        mean_bandwidth=float(np.mean([o["h_n"] for o in ok])) if ok else float("nan"),
        runtime_seconds=time.perf_counter() - t0, errors=errors)
