import math

import numpy as np
import pytest

from rd_uniband.bandwidth import select_bandwidths
from rd_uniband.bootstrap import (assemble_process, draw_multipliers, emp_component,
                                  emp_draws_from_xi, empirical_quantile, influence_matrix,
                                  run_bootstrap, test_dominance, test_homogeneity,
                                  test_uniform_nullity, uniform_band, worker_count)
from rd_uniband.data import ObservationSet
from rd_uniband.designs import Bandwidths, DesignSpec, estimate_tau, hadamard_coefficients
from rd_uniband.dgp_sim import DgpSpec, generate
from rd_uniband.kernels import KernelSpec, moment_matrices
from rd_uniband.localpoly import ResponseFn


def zero_hook(n, lineage):
    return np.zeros(n)


@pytest.fixture(scope="module")
def fqrd_case():
    s = generate(DgpSpec("fqrd_main", 1500, beta1=0.1, gamma1=0.5, seed=9))
    spec = DesignSpec("FQRD", n_theta=7, n_y=400)
    bw = Bandwidths(h1=0.15, h2=0.3, h_n=0.15)
    res = estimate_tau(s, spec, bw)
    return s, spec, bw, res


def test_multipliers_deterministic():
    a = draw_multipliers(50, (3, 7))
    assert np.array_equal(a, draw_multipliers(50, (3, 7)))
    assert not np.array_equal(a, draw_multipliers(50, (3, 8)))
    assert not np.array_equal(a, draw_multipliers(50, (4, 7)))
    big = draw_multipliers(10 ** 6, (0, 0))
    assert abs(big.mean()) <= 0.005
    with pytest.raises(ValueError):
        draw_multipliers(0, (0, 0))


def test_multipliers_prefix_stable():
    # a longer draw extends a shorter one, so n does not reshuffle the stream
    assert np.array_equal(draw_multipliers(10, (1, 2)), draw_multipliers(20, (1, 2))[:10])


def test_worker_cap(monkeypatch):
    monkeypatch.setenv("RD_UNIBAND_THREADS", "2")
    assert worker_count(16) == 2
    assert worker_count() == 2
    monkeypatch.delenv("RD_UNIBAND_THREADS")
    assert worker_count() == 1
    assert worker_count(4) == 4


def emp_setup():
    r = np.random.default_rng(5)
    n = 300
    x = r.uniform(-1, 1, n)
    y = np.cos(2 * x) + r.normal(scale=0.3, size=n)
    s = ObservationSet(x=x, y=y)
    spec = DesignSpec("SMRD")
    res = estimate_tau(s, spec, Bandwidths(h1=0.5))
    return s, spec, res


def test_emp_component_contracts():
    s, spec, res = emp_setup()
    comp = res.components
    args = dict(k=1, side="plus", h=0.5, kernel=spec.kernel, p=spec.p, v=0, response=comp.responses[1])
    xi = draw_multipliers(s.n, (1, 0))
    assert emp_component(s, comp.fits, 0, xi=np.zeros(s.n), f_x0=0.6, **args) == 0.0
    one = emp_component(s, comp.fits, 0, xi=xi, f_x0=0.6, **args)
    two = emp_component(s, comp.fits, 0, xi=xi, f_x0=1.2, **args)
    assert two == pytest.approx(one / 2, rel=1e-12)
    with pytest.raises(ValueError):
        emp_component(s, comp.fits, 0, xi=xi, f_x0=0.0, **args)


def test_emp_exact_polynomial_vanishes():
    x = np.linspace(-1, 1, 101)
    s = ObservationSet(x=x, y=1 - x + 0.5 * x ** 2)
    spec = DesignSpec("SMRD")
    res = estimate_tau(s, spec, Bandwidths(h1=0.6))
    for side in ("plus", "minus"):
        val = emp_component(s, res.components.fits, 0, 1, side, np.ones(s.n), 0.5, 0.6,
                            spec.kernel, spec.p, 0, res.components.responses[1])
        assert abs(val) < 1e-8


def test_emp_direct_formula():
    """The EMP value against a from-scratch sum."""
    s, spec, res = emp_setup()
    fit = res.components.fits[(1, "minus")]
    xi = draw_multipliers(s.n, (2, 0))
    h, f0 = 0.5, 0.55
    u = s.x / h
    g_inv = moment_matrices(KernelSpec(), 2, "minus").gamma_inv
    total = 0.0
    for i in range(s.n):
        if s.x[i] > 0 or abs(u[i]) > 1:
            continue
        mu = sum(float(fit.coeffs[j, 0]) * u[i] ** j for j in range(3))
        r = np.array([1.0, u[i], u[i] ** 2])
        total += xi[i] * float(g_inv[0] @ r) * (s.y[i] - mu) * 0.75 * (1 - u[i] ** 2)
    total /= math.sqrt(s.n * h) * f0
    got = emp_component(s, res.components.fits, 0, 1, "minus", xi, f0, h, spec.kernel, 2, 0,
                        res.components.responses[1])
    assert got == pytest.approx(total, rel=1e-10)


def test_influence_matrix_matches_emp(fqrd_case):
    s, spec, bw, res = fqrd_case
    coefs = hadamard_coefficients(res, spec)
    M = influence_matrix(s, res, coefs, spec)
    for b in range(2):
        xi = draw_multipliers(s.n, (11, b))
        slow = assemble_process(res, coefs, emp_draws_from_xi(s, res, coefs, spec, xi), spec)
        np.testing.assert_allclose(xi @ M, slow, atol=1e-10)


def test_assemble_linear_and_zero(fqrd_case):
    s, spec, bw, res = fqrd_case
    coefs = hadamard_coefficients(res, spec)
    x1 = draw_multipliers(s.n, (1, 1))
    x2 = draw_multipliers(s.n, (1, 2))
    p = lambda xi: assemble_process(res, coefs, emp_draws_from_xi(s, res, coefs, spec, xi), spec)
    np.testing.assert_allclose(p(x1 + x2), p(x1) + p(x2), atol=1e-10)
    assert np.all(p(np.zeros(s.n)) == 0)
    zero = {key: np.zeros(len(cols)) for key, (cols, _) in coefs.blocks.items()}
    assert np.all(assemble_process(res, coefs, zero, spec) == 0)


def test_run_bootstrap_workers_and_hook(fqrd_case):
    s, spec, bw, res = fqrd_case
    ref = run_bootstrap(s, spec, bw, 200, 42, workers=1, result=res)
    assert ref.shape == (200, res.tau.size)
    for w in (4, 16):
        assert np.array_equal(ref, run_bootstrap(s, spec, bw, 200, 42, workers=w, result=res))
    assert not np.array_equal(ref, run_bootstrap(s, spec, bw, 200, 43, workers=1, result=res))
    z = run_bootstrap(s, spec, bw, 1, 42, result=res, multipliers=zero_hook)
    assert z.shape == (1, res.tau.size) and np.all(z == 0)


def test_empirical_quantile_convention():
    d = np.array([5.0, 1.0, 4.0, 2.0, 3.0])
    assert empirical_quantile(d, 0.8) == 4.0   # ceil(4) -> 4th smallest
    assert empirical_quantile(d, 0.81) == 5.0
    assert empirical_quantile(d, 1.0) == 5.0
    assert empirical_quantile(d, 0.0) == 1.0
    assert empirical_quantile(np.arange(1, 21.0), 0.95) == 19.0


def test_band_examples():
    tau = np.array([0.1, 0.2, 0.3])
    band = uniform_band(tau, np.zeros((10, 3)), 0.05, 100, 0.5)
    assert band.half_width == 0 and np.array_equal(band.lower, tau)
    boot = np.random.default_rng(0).normal(size=(50, 3))
    band = uniform_band(tau, boot, 0.0, 100, 0.5)
    assert band.critical_value == np.max(np.abs(boot))
    band = uniform_band(tau, boot, 0.1, 400, 0.25, v=1)
    np.testing.assert_allclose(band.upper - band.lower, 2 * band.half_width)
    assert band.half_width == pytest.approx(band.critical_value / math.sqrt(400 * 0.25 ** 3))
    with pytest.raises(ValueError):
        uniform_band(tau, boot[:1], 0.1, 100, 0.5)
    with pytest.raises(ValueError):
        uniform_band(tau, boot, 1.5, 100, 0.5)


def test_nullity_examples():
    boot = np.random.default_rng(1).normal(size=(40, 4))
    t = test_uniform_nullity(np.zeros(4), boot, 0.05, 100, 0.3)
    assert t.statistic == 0 and not t.reject and t.p_value == 1.0
    t = test_uniform_nullity(np.full(4, 100.0), boot, 0.05, 100, 0.3)
    assert t.p_value == 0 and t.reject
    assert t.reject == (t.statistic > t.critical_value)
    assert t.kind == "uniform_nullity"


def test_homogeneity_examples():
    boot = np.random.default_rng(2).normal(size=(40, 4))
    assert test_homogeneity(np.full(4, 3.0), boot, 0.05, 100, 0.3).statistic == 0
    tau = np.array([0.1, -0.2, 0.4, 0.0])
    a = test_homogeneity(tau, boot, 0.05, 100, 0.3)
    b = test_homogeneity(tau + 9.0, boot, 0.05, 100, 0.3)
    assert a.statistic == pytest.approx(b.statistic) and a.reject == b.reject
    with pytest.raises(ValueError):
        test_homogeneity(np.array([1.0]), boot[:, :1], 0.05, 100, 0.3)


def test_dominance_examples():
    boot = np.random.default_rng(3).normal(size=(40, 3))
    assert test_dominance(np.array([-0.1, 0.0, -2.0]), boot, 0.05, 100, 0.25).statistic == 0
    t = test_dominance(np.array([-0.1, 0.3, 0.1]), boot, 0.05, 100, 0.25)
    assert t.statistic == pytest.approx(math.sqrt(25) * 0.3)


def test_p_value_lattice():
    boot = np.random.default_rng(4).normal(size=(37, 5))
    t = test_uniform_nullity(np.full(5, 0.1), boot, 0.05, 100, 0.5)
    assert (t.p_value * 37) == pytest.approx(round(t.p_value * 37))


def test_bootstrap_sd_matches_asymptotic_lee():
    """Bootstrap sd at the cutoff against sigma^2 e0' G^-1 Psi G^-1 e0 / f_X(0).

    A single n=500 sample carries roughly 10% noise in f_X(0) alone, so the
    bootstrap variance is averaged over 20 independent samples.
    """
    var = 0.0
    for side in ("plus", "minus"):
        mm = moment_matrices(KernelSpec(), 2, side)
        var += (mm.gamma_inv @ mm.psi @ mm.gamma_inv)[0, 0]
    f_x0 = 20 * 0.5 * 0.5 ** 3 / 2  # density of 2 Beta(2,4) - 1 at zero
    sd = 0.1295 * math.sqrt(var / f_x0)
    spec = DesignSpec("SMRD")
    boot_var = []
    for r in range(20):
        s = generate(DgpSpec("cct_lee", 500, seed=100, replication=r))
        bw = select_bandwidths(s, spec).bandwidths()
        boot_var.append(run_bootstrap(s, spec, bw, 2000, r)[:, 0].var())
    assert abs(math.sqrt(np.mean(boot_var)) / sd - 1) < 0.15
