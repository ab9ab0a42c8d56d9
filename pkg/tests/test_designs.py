import numpy as np
import pytest

from rd_uniband.bootstrap import draw_multipliers, emp_draws_from_xi, assemble_process, influence_matrix
from rd_uniband.data import ObservationSet
from rd_uniband.designs import (BandwidthPolicy, Bandwidths, DesignSpec, estimate_components,
                                estimate_tau, hadamard_coefficients)
from rd_uniband.dgp_sim import DgpSpec, generate
from rd_uniband.errors import (ConfigError, DegenerateDensity, MissingColumn, MissingSlopeJump,
                               WeakFirstStage)

BW = Bandwidths(h1=0.5)


def grid_sample(n=201, f=lambda x: x, d=None):
    x = np.linspace(-1, 1, n)
    x = x[x != 0]
    return ObservationSet(x=x, y=f(x), d=None if d is None else d(x))


def coefficient(coefs, k, side, col, theta):
    cols, C = coefs.blocks[(k, side)]
    j = np.flatnonzero(cols == col)
    return float(C[j[0], theta]) if j.size else 0.0


def test_smrd_noiseless_jump():
    s = grid_sample(f=lambda x: 1 + x + (x >= 0))
    res = estimate_tau(s, DesignSpec("SMRD"), BW)
    assert res.tau[0] == pytest.approx(1.0, abs=1e-8)


def test_smrk_noiseless_kink():
    s = grid_sample(f=np.abs)
    res = estimate_tau(s, DesignSpec("SMRK", known_slope_jump=1.0), BW)
    comp = res.components
    assert float(comp.mu1_plus[0] - comp.mu1_minus[0]) == pytest.approx(2.0, abs=1e-8)
    assert res.tau[0] == pytest.approx(2.0, abs=1e-8)
    assert estimate_tau(s, DesignSpec("SMRK", known_slope_jump=4.0), BW).tau[0] == pytest.approx(0.5)


def test_fmrd_ratio_and_coefficients():
    s = grid_sample(f=lambda x: x + 0.25 * (x >= 0), d=lambda x: 0.2 + 0.5 * (x >= 0))
    spec = DesignSpec("FMRD")
    res = estimate_tau(s, spec, Bandwidths(h1=0.5, h2=0.5))
    assert res.tau[0] == pytest.approx(0.5, abs=1e-8)
    c = hadamard_coefficients(res, spec)
    assert coefficient(c, 1, "plus", 0, 0) == pytest.approx(2.0)
    assert coefficient(c, 1, "minus", 0, 0) == pytest.approx(-2.0)
    assert coefficient(c, 2, "plus", 0, 0) == pytest.approx(-1.0)
    # unit draws on numerator and denominator: 2*1 - 1*1
    draws = {(1, "plus"): np.ones((1, 1)), (1, "minus"): np.zeros((1, 1)),
             (2, "plus"): np.ones((1, 1)), (2, "minus"): np.zeros((1, 1))}
    assert assemble_process(res, c, draws, spec)[0, 0] == pytest.approx(1.0)


def test_weak_first_stage():
    s = grid_sample(f=lambda x: x, d=lambda x: np.full_like(x, 0.3))
    with pytest.raises(WeakFirstStage):
        estimate_tau(s, DesignSpec("FMRD"), Bandwidths(h1=0.5, h2=0.5))


def test_spec_validation():
    with pytest.raises(MissingSlopeJump):
        DesignSpec("SMRK")
    with pytest.raises(MissingSlopeJump):
        DesignSpec("SQRK", known_slope_jump=0.0)
    with pytest.raises(ConfigError):
        DesignSpec("RDD")
    with pytest.raises(ConfigError):
        DesignSpec("SMRD", p=5)
    assert DesignSpec("fqrk").p == 3 and DesignSpec("smrd").p == 2
    assert BandwidthPolicy.parse("fixed:0.3").fixed == 0.3
    with pytest.raises(ConfigError):
        BandwidthPolicy.parse("fixed:abc")


def test_missing_treatment_column():
    s = grid_sample()
    with pytest.raises(MissingColumn) as e:
        estimate_tau(s, DesignSpec("FQRD"), BW)
    assert e.value.column == "d"


def test_location_equivariance(rng):
    x = rng.uniform(-1, 1, 800)
    y = np.sin(2 * x) + (x >= 0) + rng.normal(scale=0.3, size=800)
    base = ObservationSet(x=x, y=y)
    shifted = ObservationSet(x=x, y=y + 3.7)
    assert estimate_tau(shifted, DesignSpec("SMRD"), BW).tau[0] == pytest.approx(
        estimate_tau(base, DesignSpec("SMRD"), BW).tau[0], abs=1e-10)
    k = DesignSpec("SMRK", known_slope_jump=1.5)
    assert estimate_tau(shifted, k, BW).tau[0] == pytest.approx(estimate_tau(base, k, BW).tau[0], abs=1e-9)


def test_quantile_equivariance(rng):
    x = rng.uniform(-1, 1, 1500)
    y = x + 0.5 * (x >= 0) + rng.normal(size=1500)
    spec = dict(n_theta=9, n_y=800)
    a = estimate_tau(ObservationSet(x=x, y=y), DesignSpec("SQRD", **spec), BW)
    b = estimate_tau(ObservationSet(x=x, y=y + 2.5), DesignSpec("SQRD", **spec), BW)
    step = (y.max() - y.min()) / 799
    np.testing.assert_allclose(b.derived["Q_plus"], a.derived["Q_plus"] + 2.5, atol=step * 1.01)
    np.testing.assert_allclose(b.tau, a.tau, atol=step * 1.01)


def test_scrd_range(rng):
    x = rng.uniform(-1, 1, 400)
    y = rng.normal(size=400) + (x >= 0)
    res = estimate_tau(ObservationSet(x=x, y=y), DesignSpec("SCRD", n_y=200), Bandwidths(h1=0.3))
    assert np.all(np.abs(res.tau) <= 1)


def test_fqrd_components_bounded():
    s = generate(DgpSpec("fqrd_main", 2000, seed=11))
    spec = DesignSpec("FQRD", n_theta=11, n_y=400)
    comp = estimate_components(s, spec, Bandwidths(h1=0.15, h2=0.15))
    for arr in (comp.mu1_plus, comp.mu1_minus):
        assert arr.min() >= -0.1 and arr.max() <= 1.1


def test_fqrd_location_effect():
    s = generate(DgpSpec("fqrd_main", 2000, beta1=0.2, seed=5))
    res = estimate_tau(s, DesignSpec("FQRD", n_theta=21, n_y=1000), Bandwidths(h1=0.15, h2=0.15))
    assert abs(res.tau.mean() - 0.2) < 0.1


def test_sqrd_coefficients_are_inverse_density(rng):
    x = rng.uniform(-1, 1, 3000)
    s = ObservationSet(x=x, y=rng.normal(size=3000))
    spec = DesignSpec("SQRD", n_theta=5, n_y=300)
    res = estimate_tau(s, spec, BW)
    c = hadamard_coefficients(res, spec)
    for t in range(5):
        ip, im = res.derived["idx_plus"][t], res.derived["idx_minus"][t]
        assert coefficient(c, 1, "plus", ip, t) == pytest.approx(-1 / res.derived["f_plus"][t])
        assert coefficient(c, 1, "minus", im, t) == pytest.approx(1 / res.derived["f_minus"][t])


def test_density_floor():
    s = generate(DgpSpec("sqrd_simple", 1000, seed=2))
    spec = DesignSpec("SQRD", n_theta=5, n_y=200, density_floor=1e6)
    res = estimate_tau(s, spec, BW)
    with pytest.raises(DegenerateDensity):
        hadamard_coefficients(res, spec)


def sharp_pair(seed):
    r = np.random.default_rng(seed)
    n = 1200
    x = r.uniform(-1, 1, n)
    y = x + 0.4 * (x >= 0) + r.normal(size=n) * (1 + 0.5 * (x >= 0))
    s = ObservationSet(x=x, y=y, d=(x >= 0).astype(float))
    theta = np.linspace(0.2, 0.8, 13)
    ygrid = np.linspace(y.min(), y.max(), 600)
    kw = dict(theta_grid=theta, y_grid=ygrid)
    return s, DesignSpec("FQRD", **kw), DesignSpec("SQRD", **kw)


@pytest.mark.parametrize("seed", range(5))
def test_sharp_fqrd_equals_sqrd(seed):
    s, fq, sq = sharp_pair(seed)
    bw = Bandwidths(h1=0.4, h2=0.4)
    a = estimate_tau(s, fq, bw)
    b = estimate_tau(s, sq, Bandwidths(h1=0.4))
    np.testing.assert_allclose(a.tau, b.tau, atol=1e-8)
    np.testing.assert_allclose(a.derived["f1"], b.derived["f_plus"], rtol=1e-10)
    np.testing.assert_allclose(a.derived["f0"], b.derived["f_minus"], rtol=1e-10)
    # bootstrap processes agree draw by draw
    xi = np.vstack([draw_multipliers(s.n, (seed, r)) for r in range(3)])
    pa = xi @ influence_matrix(s, a, hadamard_coefficients(a, fq), fq)
    pb = xi @ influence_matrix(s, b, hadamard_coefficients(b, sq), sq)
    np.testing.assert_allclose(pa, pb, atol=1e-8)


def test_gfmrd_single_group_equals_fmrd():
    s = generate(DgpSpec("fmrd_simple", 1500, seed=4))
    s1 = ObservationSet(x=s.x, y=s.y, d=s.d, g=np.ones(s.n))
    bw = Bandwidths(h1=0.6, h2=0.6)
    g = estimate_tau(s1, DesignSpec("GFMRD"), bw)
    f = estimate_tau(s, DesignSpec("FMRD"), bw)
    assert g.tau[0] == f.tau[0]
    Mg = influence_matrix(s1, g, hadamard_coefficients(g, DesignSpec("GFMRD")), DesignSpec("GFMRD"))
    Mf = influence_matrix(s, f, hadamard_coefficients(f, DesignSpec("FMRD")), DesignSpec("FMRD"))
    assert np.array_equal(Mg, Mf)


def test_gfmrd_groups(rng):
    s = generate(DgpSpec("gfmrd_simple", 3000, seed=8))
    res = estimate_tau(s, DesignSpec("GFMRD"), Bandwidths(h1=0.6, h2=0.6))
    np.testing.assert_array_equal(res.index_grid, np.unique(s.g))


@pytest.mark.parametrize("fam,dgp,kw", [
    ("SQRK", "sqrk_simple", dict(known_slope_jump=2.0)),
    ("FQRK", "fqrk_simple", {}),
    ("FMRK", "fmrk_simple", {}),
])
def test_kink_designs_run(fam, dgp, kw):
    s = generate(DgpSpec(dgp, 3000, seed=1))
    spec = DesignSpec(fam, n_theta=7, n_y=400, **kw)
    res = estimate_tau(s, spec, Bandwidths(h1=1.0, h2=1.0))
    assert np.all(np.isfinite(res.tau))
    assert res.v == 1
    c = hadamard_coefficients(res, spec)
    assert c.n_index == res.tau.size
