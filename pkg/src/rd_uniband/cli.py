"""Command-line front end.

    rd-uniband estimate  --design FQRD --input data.csv --alpha 0.10
    rd-uniband test      --kind homogeneity --design SQRD --input data.csv
    rd-uniband bandwidth --design SMRD --input data.csv
    rd-uniband simulate  --dgp fqrd_main --n 2000 --R 400 --B 500 --check coverage

Every subcommand also accepts ``--config FILE``: a flat ``key = value`` file
whose keys are the long flag names (dashes or underscores) or the namespaced
forms in CONFIG_ALIASES such as ``boot.B`` and ``density.a_n``.  Flags given on
the command line win over the file.  List-valued keys take comma or space
separated values.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .bootstrap import test_dominance, test_homogeneity, test_uniform_nullity
from .data import ObservationSet
from .designs import FAMILIES, BandwidthPolicy, DesignSpec
from .dgp_sim import CHECKS, DGP_FAMILIES, DgpSpec, default_mc_design, mc_csv, run_monte_carlo
from .errors import ConfigError, EmptyFile, MissingColumn, ParseError, RDError
from .kernels import FAMILIES as KERNEL_FAMILIES

SCHEMA_VERSION = "1.0"
COLUMNS = ("x", "y", "d", "g")

# namespaced config keys and the flag each one stands for
CONFIG_ALIASES = {
    "boot.b": "boot-B", "boot.alpha": "alpha", "boot.seed": "seed",
    "grid.n-theta": "n-theta", "grid.n-y": "n-y", "grid.a": "a", "grid.epsilon-y": "epsilon-y",
    "bandwidth.rule": "bandwidth-rule", "bandwidth.per-theta": "per-theta",
    "density.b-n": "b-n", "density.a-n": "a-n", "density.c-n": "c-n",
    "design.eps-denominator": "eps-denominator", "design.density-floor": "density-floor",
}


# ---------------------------------------------------------------------------
# input
# ---------------------------------------------------------------------------

def ingest_csv(path: str) -> ObservationSet:
    """Read a header-first UTF-8 CSV with columns x, y and optionally d, g.

    Other columns are ignored.  Line numbers in errors count the header as
    line 1.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = None
        for row in reader:
            if any(c.strip() for c in row):
                header = [c.strip().lower() for c in row]
                break
        if header is None:
            raise EmptyFile(f"{path}: no header row")
        for col in ("x", "y"):
            if col not in header:
                raise MissingColumn(col)
        pos = {c: header.index(c) for c in COLUMNS if c in header}
        cols: Dict[str, List[float]] = {c: [] for c in pos}
        for row in reader:
            line = reader.line_num
            if not any(c.strip() for c in row):
                continue
            if len(row) < len(header):
                raise ParseError(line, f"expected {len(header)} fields, got {len(row)}")
            for c, j in pos.items():
                cell = row[j].strip()
                try:
                    val = float(cell)
                except ValueError:
                    raise ParseError(line, f"column {c!r} is not numeric: {cell!r}") from None
                if not math.isfinite(val):
                    raise ParseError(line, f"column {c!r} is not finite: {cell!r}")
                cols[c].append(val)
    if not cols["x"]:
        raise EmptyFile(f"{path}: no data rows")
    return ObservationSet(**{c: np.array(v) for c, v in cols.items()})


def read_config(path: str) -> Dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for i, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = line.partition("=")
            if not sep:
                raise ConfigError(f"{path}:{i}: expected key = value")
            out[key.strip().replace("_", "-").lower()] = val.strip()
    return out


# ---------------------------------------------------------------------------
# configuration and output records
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    command: str
    design: Optional[str] = None
    input: Optional[str] = None
    output: Optional[str] = None
    alpha: float = 0.05
    boot_B: int = 2000
    seed: int = 0
    bandwidth_rule: str = "rot"
    per_theta: bool = False
    n_theta: int = 50
    n_y: int = 5000
    a: float = 0.2
    kernel: str = "epanechnikov"
    p: Optional[int] = None
    slope_jump: Optional[float] = None
    epsilon_y: Optional[float] = None
    eps_denominator: float = 1e-6
    density_floor: float = 1e-4
    b_n: Optional[float] = None
    a_n: Optional[float] = None
    c_n: Optional[float] = None
    workers: Optional[int] = None
    kind: str = "nullity"
    band_csv: Optional[str] = None
    figure: Optional[str] = None
    # simulate only
    dgp: Optional[str] = None
    n: Optional[int] = None
    R: int = 100
    B: int = 500
    check: List[str] = field(default_factory=lambda: list(CHECKS))
    beta1: List[float] = field(default_factory=lambda: [0.0])
    gamma1: List[float] = field(default_factory=lambda: [0.0])
    beta2: float = 0.0
    csv: Optional[str] = None

    def validate(self):
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must lie strictly between 0 and 1")
        if self.boot_B < 2 or self.B < 2:
            raise ConfigError("need at least two bootstrap draws")
        if not 0 < self.a < 0.5:
            raise ConfigError("a must lie in (0, 0.5)")
        if self.n_theta < 1 or self.n_y < 2:
            raise ConfigError("grid sizes must be positive")
        if self.command == "simulate":
            if self.dgp not in DGP_FAMILIES:
                raise ConfigError(f"--dgp must be one of {DGP_FAMILIES}")
            if self.n is None or self.n < 1 or self.R < 1:
                raise ConfigError("simulate needs positive --n and --R")
            for c in self.check:
                if c not in CHECKS:
                    raise ConfigError(f"unknown check {c!r}")
        else:
            if self.design is None or self.input is None:
                raise ConfigError(f"{self.command} needs --design and --input")
        return self

    def design_overrides(self) -> dict:
        kw = dict(p=self.p, kernel=self.kernel, n_theta=self.n_theta, n_y=self.n_y, a=self.a,
                  epsilon_y=self.epsilon_y, eps_denominator=self.eps_denominator,
                  density_floor=self.density_floor, b_n=self.b_n, a_n=self.a_n, c_n=self.c_n,
                  bandwidth_policy=BandwidthPolicy.parse(self.bandwidth_rule, self.per_theta))
        if self.slope_jump is not None:
            kw["known_slope_jump"] = self.slope_jump
        return kw

    def design_spec(self) -> DesignSpec:
        return DesignSpec(self.design, **self.design_overrides())


def _clean(obj):
    """JSON-safe copy: arrays to lists, non-finite floats to null."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


@dataclass
class RunOutput:
    command: str
    config: dict
    body: dict
    warnings: List[str] = field(default_factory=list)
    timing: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {"schema_version": SCHEMA_VERSION, "command": self.command, "config": self.config}
        d.update(self.body)
        d["warnings"] = list(self.warnings)
        d["timing"] = self.timing
        return _clean(d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunOutput":
        d = json.loads(text)
        if d.pop("schema_version") != SCHEMA_VERSION:
            raise ConfigError("unsupported schema version")
        cmd, cfg = d.pop("command"), d.pop("config")
        warnings, timing = d.pop("warnings"), d.pop("timing")
        return cls(cmd, cfg, d, warnings, timing)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _estimate_body(an) -> dict:
    res = an.result
    return {
        "family": res.family, "n": res.n, "v": res.v, "h_n": an.bandwidths.h_n,
        "index_grid": res.index_grid, "tau_hat": res.tau,
        "saturation_count": res.saturation_count,
    }


def _band_body(band) -> dict:
    return {"alpha": band.alpha, "B": band.B, "critical_value": band.critical_value,
            "half_width": band.half_width, "lower": band.lower, "upper": band.upper}


def _warnings(an) -> List[str]:
    out = []
    if an.result.saturation_count:
        out.append(f"{an.result.saturation_count} quantile grid points saturated at the y-grid edge")
    for k in (1, 2):
        nv = an.plan.diagnostics.get(f"vanishing_bias_{k}", 0)
        if nv:
            out.append(f"bias constant vanished for {nv} column(s) of component {k}; h_mse capped at the x range")
    return out


def write_band_csv(path: str, index_grid, tau, lower, upper):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["theta", "tau_hat", "lower", "upper"])
        for row in zip(index_grid, tau, lower, upper):
            w.writerow([repr(float(v)) for v in row])


def _analysis(cfg: RunConfig):
    from .pipeline import analyze

    spec = cfg.design_spec()
    sample = ingest_csv(cfg.input)
    sample.require(*spec.required_columns())
    return analyze(sample, spec, B=cfg.boot_B, alpha=cfg.alpha, seed=cfg.seed, workers=cfg.workers)


def cmd_estimate(cfg: RunConfig) -> RunOutput:
    an = _analysis(cfg)
    body = {"bandwidth": an.plan.to_dict(), "estimate": _estimate_body(an), "band": _band_body(an.band),
            "tests": {k: asdict(t) for k, t in an.tests.items()}}
    if cfg.band_csv:
        write_band_csv(cfg.band_csv, an.result.index_grid, an.result.tau, an.band.lower, an.band.upper)
    if cfg.figure:
        from .plotting import band_figure

        xlabel = "y" if an.result.family == "SCRD" else "quantile index"
        band_figure(an.result.index_grid, an.result.tau, an.band.lower, an.band.upper, cfg.figure,
                    title=f"{an.result.family}, {100 * (1 - cfg.alpha):g}% uniform band", xlabel=xlabel)
    return RunOutput("estimate", {}, body, _warnings(an))


TEST_KINDS = {"nullity": test_uniform_nullity, "homogeneity": test_homogeneity, "dominance": test_dominance}


def cmd_test(cfg: RunConfig) -> RunOutput:
    if cfg.kind not in TEST_KINDS:
        raise ConfigError(f"--kind must be one of {sorted(TEST_KINDS)}")
    an = _analysis(cfg)
    res = an.result
    if cfg.kind == "homogeneity" and res.tau.size < 2:
        raise ConfigError("homogeneity needs a grid with at least two points")
    t = TEST_KINDS[cfg.kind](res.tau, an.boot, cfg.alpha, res.n, an.bandwidths.h_n, res.v)
    body = {"bandwidth": an.plan.to_dict(), "estimate": _estimate_body(an), "test": asdict(t)}
    return RunOutput("test", {}, body, _warnings(an))


def cmd_bandwidth(cfg: RunConfig) -> RunOutput:
    from .bandwidth import select_bandwidths

    spec = cfg.design_spec()
    sample = ingest_csv(cfg.input)
    plan = select_bandwidths(sample, spec)
    return RunOutput("bandwidth", {}, {"bandwidth": plan.to_dict()})


def cmd_simulate(cfg: RunConfig) -> RunOutput:
    reports = []
    warnings = []
    for b1 in cfg.beta1:
        for g1 in cfg.gamma1:
            dgp = DgpSpec(cfg.dgp, cfg.n, beta1=b1, gamma1=g1, beta2=cfg.beta2)
            kw = cfg.design_overrides()
            design = DesignSpec(cfg.design, **kw) if cfg.design else default_mc_design(dgp, **kw)
            rep = run_monte_carlo(dgp, design, cfg.R, cfg.B, cfg.seed, cfg.check, cfg.alpha, cfg.workers)
            if rep.failures:
                warnings.append(f"beta1={b1:g} gamma1={g1:g}: {rep.failures} of {rep.R} replications failed"
                                + (" (cell invalid)" if rep.invalid else ""))
            reports.append(rep)
    table = mc_csv(reports)
    csv_path = cfg.csv
    if csv_path is None and cfg.output:
        csv_path = os.path.splitext(cfg.output)[0] + ".csv"
    if csv_path:
        with open(csv_path, "w", encoding="utf-8", newline="") as fh:
            fh.write(table)
    if cfg.figure:
        from .plotting import mc_figure

        nominal = 1 - cfg.alpha if "coverage" in cfg.check or "nullity" in cfg.check else None
        mc_figure([r for rep in reports for r in rep.csv_rows()], cfg.figure, nominal)
    timing = {"seconds_by_cell": [rep.runtime_seconds for rep in reports]}
    body = {"reports": [rep.to_dict(timing=False) for rep in reports]}
    if not csv_path:
        body["table_csv"] = table
    return RunOutput("simulate", {}, body, warnings, timing)


COMMANDS = {"estimate": cmd_estimate, "test": cmd_test, "bandwidth": cmd_bandwidth, "simulate": cmd_simulate}


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _design_flags(p: argparse.ArgumentParser):
    p.add_argument("--design", type=str.upper, choices=FAMILIES, help="design family")
    p.add_argument("--p", type=int, help="local polynomial order (default v+2)")
    p.add_argument("--kernel", choices=KERNEL_FAMILIES)
    p.add_argument("--bandwidth-rule", dest="bandwidth_rule",
                   help="rot, mse or fixed:<h> (default rot)")
    p.add_argument("--per-theta", dest="per_theta", action="store_true",
                   help="select a bandwidth per grid point instead of one shared value")
    p.add_argument("--n-theta", dest="n_theta", type=int)
    p.add_argument("--n-y", dest="n_y", type=int)
    p.add_argument("--a", type=float, help="quantile grid runs over [a, 1-a]")
    p.add_argument("--slope-jump", dest="slope_jump", type=float,
                   help="known slope jump of the treatment rule (SMRK, SQRK)")
    p.add_argument("--epsilon-y", dest="epsilon_y", type=float,
                   help="outcome-grid padding beyond the quantile range (default two grid steps)")
    p.add_argument("--eps-denominator", dest="eps_denominator", type=float)
    p.add_argument("--density-floor", dest="density_floor", type=float)
    p.add_argument("--b-n", dest="b_n", type=float, help="bandwidth for the density of X at 0")
    p.add_argument("--a-n", dest="a_n", type=float, help="bandwidth for conditional densities")
    p.add_argument("--c-n", dest="c_n", type=float, help="bandwidth for treatment probabilities")
    p.add_argument("--alpha", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--output", help="JSON output path (default stdout)")
    p.add_argument("--figure", help="also render a PNG figure to this path")
    p.add_argument("--config", help="flat key = value file; flags override it")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rd-uniband", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {"estimate": "estimate, band and tests", "test": "one uniform test",
             "bandwidth": "bandwidth selection only", "simulate": "Monte Carlo harness"}
    for name in COMMANDS:
        sp = sub.add_parser(name, help=helps[name], argument_default=argparse.SUPPRESS)
        _design_flags(sp)
        if name != "simulate":
            sp.add_argument("--input", help="CSV with columns x, y and optionally d, g")
            sp.add_argument("--boot-B", dest="boot_B", type=int, help="bootstrap draws (default 2000)")
        if name == "estimate":
            sp.add_argument("--band-csv", dest="band_csv", help="write theta,tau_hat,lower,upper here")
        if name == "test":
            sp.add_argument("--kind", choices=sorted(TEST_KINDS))
        if name == "simulate":
            sp.add_argument("--dgp", choices=DGP_FAMILIES)
            sp.add_argument("--n", type=int)
            sp.add_argument("--R", type=int, help="Monte Carlo replications")
            sp.add_argument("--B", type=int, help="bootstrap draws per replication")
            sp.add_argument("--check", nargs="+", choices=CHECKS)
            sp.add_argument("--beta1", nargs="+", type=float)
            sp.add_argument("--gamma1", nargs="+", type=float)
            sp.add_argument("--beta2", type=float)
            sp.add_argument("--csv", help="per-cell CSV path (default: next to --output)")
    return parser


def _config_tokens(parser, command, entries: Dict[str, str]) -> List[str]:
    sp = parser._subparsers._group_actions[0].choices[command]
    known = {}
    for act in sp._actions:
        for opt in act.option_strings:
            known[opt.lstrip("-").lower().replace("_", "-")] = (opt, act)
    tokens = []
    for key, val in entries.items():
        if key == "config":
            continue
        key = CONFIG_ALIASES.get(key, key).lower()
        if key not in known:
            raise ConfigError(f"unknown config key {key!r} for {command}")
        opt, act = known[key]
        if isinstance(act, argparse._StoreTrueAction):
            if val.lower() in ("1", "true", "yes", "on"):
                tokens.append(opt)
            continue
        tokens.append(opt)
        if act.nargs == "+":
            tokens.extend(v for v in val.replace(",", " ").split() if v)
        else:
            tokens.append(val)
    return tokens


def parse_config(argv: Sequence[str]) -> RunConfig:
    parser = build_parser()
    argv = list(argv)
    ns = parser.parse_args(argv)
    cfg_path = getattr(ns, "config", None)
    if cfg_path:
        tokens = _config_tokens(parser, ns.command, read_config(cfg_path))
        # config values first so repeated command-line flags replace them
        ns = parser.parse_args([ns.command] + tokens + argv[argv.index(ns.command) + 1:])
    values = {k: v for k, v in vars(ns).items() if k != "config"}
    return RunConfig(**values).validate()


def run(cfg: RunConfig) -> RunOutput:
    t0 = time.perf_counter()
    out = COMMANDS[cfg.command](cfg)
    out.config = asdict(cfg)
    out.timing["seconds"] = time.perf_counter() - t0
    text = out.to_json()
    if cfg.output:
        with open(cfg.output, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return out


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        run(parse_config(argv))
    except (RDError, ValueError, OSError, np.linalg.LinAlgError) as exc:
        print(f"rd-uniband: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
