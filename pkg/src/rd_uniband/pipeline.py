"""Bandwidths, estimate, bootstrap, band and tests in one call."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .bandwidth import BandwidthPlan, select_bandwidths
from .bootstrap import (BandResult, TestResult, run_bootstrap, test_dominance, test_homogeneity,
                        test_uniform_nullity, uniform_band)
from .data import ObservationSet
from .designs import Bandwidths, DesignSpec, EstimateResult, estimate_tau


@dataclass
class Analysis:
    spec: DesignSpec
    plan: BandwidthPlan
    bandwidths: Bandwidths
    result: EstimateResult
    boot: np.ndarray
    band: BandResult
    tests: Dict[str, TestResult] = field(default_factory=dict)

    @property
    def scale(self) -> float:
        return float(np.sqrt(self.result.n * self.bandwidths.h_n ** (1 + 2 * self.result.v)))


def analyze(sample: ObservationSet, spec: DesignSpec, B: int = 2000, alpha: float = 0.05,
            seed: int = 0, workers: Optional[int] = None, plan: Optional[BandwidthPlan] = None) -> Analysis:
    """Run the full procedure on a private copy of ``spec``."""
    spec = copy.deepcopy(spec)
    if plan is None:
        plan = select_bandwidths(sample, spec)
    bw = plan.bandwidths()
    result = estimate_tau(sample, spec, bw)
    boot = run_bootstrap(sample, spec, bw, B, seed, workers=workers, result=result)
    n, h, v = sample.n, bw.h_n, result.v
    band = uniform_band(result.tau, boot, alpha, n, h, v)
    tests = {"uniform_nullity": test_uniform_nullity(result.tau, boot, alpha, n, h, v)}
    if result.tau.size >= 2:
        tests["homogeneity"] = test_homogeneity(result.tau, boot, alpha, n, h, v)
    if spec.family == "SCRD":
        tests["dominance"] = test_dominance(result.tau, boot, alpha, n, h, v)
    return Analysis(spec, plan, bw, result, boot, band, tests)
