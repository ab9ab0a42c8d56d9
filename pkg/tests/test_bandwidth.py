from fractions import Fraction
from math import factorial

import numpy as np
import pytest
from scipy import integrate

from rd_uniband import bandwidth as bwmod
from rd_uniband.bandwidth import (Pilots, preliminary_constants, rot_factor, select_bandwidths,
                                  step1_preliminary, step2_pilot, step3_mse_and_rot)
from rd_uniband.data import ObservationSet
from rd_uniband.designs import BandwidthPolicy, DesignSpec
from rd_uniband.dgp_sim import DgpSpec, generate
from rd_uniband.errors import DegenerateSample, VanishingBias
from rd_uniband.kernels import KernelSpec, eval_kernel
from rd_uniband.localpoly import ResponseFn

FROZEN = Pilots(np.array([0.3]), np.array([0.5]), np.array([2.0]), np.array([-1.0]))


def quad_moment(fn, side):
    lo, hi = (0, 1) if side == "plus" else (-1, 0)
    return integrate.quad(fn, lo, hi, epsabs=1e-14)[0]


@pytest.mark.parametrize("s,v", [(1, 0), (2, 1), (2, 0), (3, 1)])
def test_preliminary_constants_quadrature(s, v):
    K = lambda u: float(eval_kernel(KernelSpec(), u))
    c_total, cp_total = 0.0, 0.0
    for side in ("plus", "minus"):
        G = np.array([[quad_moment(lambda u: u ** (i + j) * K(u), side) for j in range(s + 1)]
                      for i in range(s + 1)])
        L = np.array([quad_moment(lambda u: u ** (s + 1 + j) * K(u), side) for j in range(s + 1)])
        P = np.array([[quad_moment(lambda u: u ** (i + j) * K(u) ** 2, side) for j in range(s + 1)]
                      for i in range(s + 1)])
        Gi = np.linalg.inv(G)
        c_total += abs((Gi @ L)[v]) / factorial(s + 1)
        cp_total += (Gi @ P @ Gi)[v, v]
    c, cp = preliminary_constants(KernelSpec(), s, v, 0.8)
    assert c == pytest.approx(c_total, rel=1e-10)
    assert cp == pytest.approx(cp_total / 0.8, rel=1e-10)


def test_step1_rate(monkeypatch):
    monkeypatch.setattr(bwmod.dens, "kde_at_zero", lambda *a, **k: 0.6)
    r = np.random.default_rng(0)
    x = r.uniform(-1, 1, 400)
    s1 = ObservationSet(x=x, y=x)
    s4 = ObservationSet(x=np.tile(x, 4), y=np.tile(x, 4))
    h1 = step1_preliminary(s1, 1, 0)[0]
    h4 = step1_preliminary(s4, 1, 0)[0]
    assert h4 / h1 == pytest.approx(4 ** -0.2, abs=1e-12)


def test_step1_degenerate():
    with pytest.raises(DegenerateSample):
        step1_preliminary(ObservationSet(x=np.zeros(20), y=np.zeros(20)), 1, 0)
    with pytest.raises(ValueError):
        step1_preliminary(ObservationSet(x=np.linspace(-1, 1, 3), y=np.zeros(3)), 1, 0)


@pytest.mark.parametrize("s,v", [(1, 0), (2, 1), (3, 0)])
def test_rate_exponents_exact(s, v):
    n = 1000
    a = step3_mse_and_rot(FROZEN, 0.7, s, v, n)
    b = step3_mse_and_rot(FROZEN, 0.7, s, v, 4 * n)
    e = 1 / (2 * s + 3)
    assert b[0][0] / a[0][0] == pytest.approx(4 ** -e, abs=1e-12)
    assert b[1][0] / a[1][0] == pytest.approx(4 ** (-e - s / ((2 * s + 3) * (s + 3))), abs=1e-12)


def test_rot_factor_examples():
    assert rot_factor(2 ** 35, 2) == pytest.approx(0.25, rel=1e-12)
    h = step3_mse_and_rot(FROZEN, 0.7, 1, 0, 3000)
    assert h[1][0] / h[0][0] == pytest.approx(3000 ** (-1 / 20))


def test_mse_rate_s1():
    a = step3_mse_and_rot(FROZEN, 0.7, 1, 0, 100)[0][0]
    b = step3_mse_and_rot(FROZEN, 0.7, 1, 0, 3200)[0][0]
    assert b / a == pytest.approx(32 ** -0.2)


@pytest.mark.parametrize("s", [1, 2, 3])
def test_variance_homogeneity_and_monotonicity(s):
    base = step3_mse_and_rot(FROZEN, 0.7, s, 0, 500)[0][0]
    doubled = Pilots(2 * FROZEN.sigma2_plus, 2 * FROZEN.sigma2_minus, FROZEN.mu_plus, FROZEN.mu_minus)
    assert step3_mse_and_rot(doubled, 0.7, s, 0, 500)[0][0] / base == pytest.approx(2 ** (1 / (2 * s + 3)))
    more = Pilots(FROZEN.sigma2_plus * 1.1, FROZEN.sigma2_minus, FROZEN.mu_plus, FROZEN.mu_minus)
    assert step3_mse_and_rot(more, 0.7, s, 0, 500)[0][0] > base


@pytest.mark.parametrize("p", [1, 2, 3, 4])
def test_robustness_window_exponents(p):
    # h ~ n^-e with e = 1/(2s+3) + s/((2s+3)(s+3)); need 1 - 2e > 0 and 1 - (2p+3)e < 0
    s = p - 1
    e = Fraction(1, 2 * s + 3) + Fraction(s, (2 * s + 3) * (s + 3))
    assert 1 - 2 * e > 0
    assert 1 - (2 * p + 3) * e < 0


def test_vanishing_bias_guard():
    flat = Pilots(np.array([0.3]), np.array([0.3]), np.array([0.0]), np.array([0.0]))
    with pytest.raises(VanishingBias):
        step3_mse_and_rot(flat, 0.7, 1, 0, 500)
    h = step3_mse_and_rot(flat, 0.7, 1, 0, 500, x_range=2.0)
    assert h[0][0] == 2.0


def test_step2_exact_polynomials():
    x = np.linspace(-1, 1, 201)
    lin = ObservationSet(x=x, y=1 + 2 * x)
    pil = step2_pilot(lin, ResponseFn("outcome"), 0.5, 1)
    assert pil.sigma2_plus[0] < 1e-20 and pil.sigma2_minus[0] < 1e-20
    # zero variance constant: the guard falls back to the preliminary bandwidth
    h = step3_mse_and_rot(Pilots(pil.sigma2_plus * 0, pil.sigma2_minus * 0, np.array([1.0]), np.array([3.0])),
                          0.5, 1, 0, 201, x_range=2.0, fallback=0.5)
    assert h[0][0] == 0.5
    cub = ObservationSet(x=x, y=0.5 + x - 1.5 * x ** 2)
    pil = step2_pilot(cub, ResponseFn("outcome"), 0.5, 1)
    np.testing.assert_allclose([pil.mu_plus[0], pil.mu_minus[0]], [-3.0, -3.0], atol=1e-6)


def test_step2_variance_main_dgp():
    s = generate(DgpSpec("fqrd_main", 5000, seed=21))
    h0 = step1_preliminary(s, 1, 0)[0]
    pil = step2_pilot(s, ResponseFn("outcome"), h0, 1)
    truth = 0.1295 ** 2 * (1 - 0.25 ** 2)
    for val in (pil.sigma2_plus[0], pil.sigma2_minus[0]):
        assert abs(val / truth - 1) < 0.2


def test_plan_policies():
    s = generate(DgpSpec("fqrd_main", 1500, seed=2))
    plan = select_bandwidths(s, DesignSpec("FQRD", n_theta=5, n_y=300))
    assert plan.h_mse_1.size == 1 and plan.h_mse_2.size == 1
    np.testing.assert_allclose(plan.h_rot_1, plan.h_mse_1 * rot_factor(1500, 1))
    d = plan.to_dict()
    assert d["c_ratio_1"] == 1.0 and d["h_n"] == plan.bandwidths().h_n
    per = select_bandwidths(s, DesignSpec("FQRD", n_theta=5, n_y=300,
                                          bandwidth_policy=BandwidthPolicy("rot", per_theta=True)))
    assert per.h_mse_1.size == 600
    fixed = select_bandwidths(s, DesignSpec("FQRD", bandwidth_policy=BandwidthPolicy.parse("fixed:0.2")))
    assert fixed.bandwidths().h_n == 0.2 and fixed.h_rot_2[0] == 0.2
    mse = select_bandwidths(s, DesignSpec("FQRD", bandwidth_policy=BandwidthPolicy("mse")))
    assert mse.bandwidths().h_n == mse.h_mse_1[0]
