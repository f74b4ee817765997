import math

import numpy as np
import pytest
from scipy.optimize import minimize_scalar
from hypothesis import given, settings
from hypothesis import strategies as st

from maclab.core import (ActivityModel, ErrorTriple, SystemConfig, db_to_linear,
                         empirical_errors, gauss_hermite_expectation, gaussian_panel_rule,
                         golden_section_max, golden_section_max_vec, linear_to_db,
                         log_cdf_power, log_std_normal_cdf, make_rng, one_minus_cdf_power,
                         regularized_gamma, std_normal_cdf)

# Frozen high-precision values (mpmath, 40 digits).
PHI_1_6448536 = 0.94999999722034254088
LOG_PHI = {-40.0: -804.60844201375378817, -8.0: -35.013437159914549896,
           -1.0: -1.8410216450092635058, 0.5: -0.36894641528865639307,
           3.0: -0.0013508099647481937988, 9.0: -1.1285884059538406478e-19}
# x=5 lies in the small-tail branch (1 - Phi(5) < 1e-6) whose log error is about eps/2
LOG_CDF_POW = [(5.0, 2 ** 20, -0.3005760017150913737, 0.25960836901397314195, 1e-6),
               (2.0, 63, -1.4498132877246997733, 0.76538591066500706994, 1e-10),
               (4.5, 4096, -0.013916892761433973328, 0.013820500487787610858, 1e-10)]
E_PHI_Z_PLUS_2_POW_63 = 0.3812959980210550097
Q_1000_1050 = 0.058671111377318077098


# ---------------------------------------------------------------- normal cdf


def test_cdf_at_zero_is_half():
    assert std_normal_cdf(0.0) == 0.5


@pytest.mark.parametrize("x", [0.3, 1.7, 4.2])
def test_cdf_reflection(x):
    assert std_normal_cdf(x) == pytest.approx(1 - std_normal_cdf(-x), abs=1e-15)


def test_cdf_95_percent_point():
    v = float(std_normal_cdf(1.6448536))
    assert abs(v - 0.95) < 1e-6
    assert v == pytest.approx(PHI_1_6448536, abs=1e-15)


def test_cdf_symmetry_and_monotonicity_on_grid():
    x = np.linspace(-10, 10, 10_000)
    p = std_normal_cdf(x)
    assert np.all(np.diff(p) >= 0)
    np.testing.assert_allclose(p + std_normal_cdf(-x), 1.0, atol=1e-15)


@pytest.mark.parametrize("x,ref", sorted(LOG_PHI.items()))
def test_log_cdf_against_high_precision(x, ref):
    assert float(log_std_normal_cdf(x)) == pytest.approx(ref, rel=1e-12)


@pytest.mark.parametrize("x,m,lref,oref,rel", LOG_CDF_POW)
def test_log_cdf_power_against_high_precision(x, m, lref, oref, rel):
    assert float(log_cdf_power(x, m)) == pytest.approx(lref, rel=rel)
    assert float(one_minus_cdf_power(x, m)) == pytest.approx(oref, rel=rel)


def test_log_cdf_power_branch_is_continuous():
    # the small-tail branch switches at 1 - Phi(x) = 1e-6 (x about 4.753)
    x = np.linspace(4.70, 4.80, 2001)
    v = log_cdf_power(x, 2 ** 40)
    assert np.all(np.diff(v) > 0)
    rel = np.abs(np.diff(v)) / np.abs(v[1:])
    assert rel.max() < 1e-2


def test_one_minus_cdf_power_tiny_tail_without_cancellation():
    # 1 - Phi(9)^63 = 63 * Q(9) to leading order, about 7.1e-18
    q9 = float(std_normal_cdf(-9.0))
    assert float(one_minus_cdf_power(9.0, 63)) == pytest.approx(63 * q9, rel=1e-12)


def test_db_round_trip():
    x = np.linspace(-20, 40, 61)
    np.testing.assert_allclose(linear_to_db(db_to_linear(x)), x, atol=1e-12)


# ---------------------------------------------------------------- incomplete gamma


@pytest.mark.parametrize("shape", [0.5, 1.0, 50.0, 1000.0])
def test_gamma_upper_at_zero(shape):
    assert regularized_gamma("upper", shape, 0.0) == 1.0


def test_gamma_upper_shape_one_is_exponential_tail():
    w = np.linspace(0, 30, 301)
    np.testing.assert_allclose(regularized_gamma("upper", 1.0, w), np.exp(-w), rtol=1e-13)


@pytest.mark.parametrize("shape", [0.5, 1.0, 50.0, 1000.0])
def test_gamma_complementarity(shape):
    w = np.geomspace(1e-6, 1e4, 400)
    s = regularized_gamma("lower", shape, w) + regularized_gamma("upper", shape, w)
    np.testing.assert_allclose(s, 1.0, atol=1e-14)


def test_gamma_upper_tail_matches_monte_carlo():
    rng = make_rng(20240, 1)
    draws = rng.gamma(1000.0, 1.0, size=1_000_000)
    w = 1050.0
    p = float(np.mean(draws > w))
    se = math.sqrt(p * (1 - p) / draws.size)
    q = float(regularized_gamma("upper", 1000.0, w))
    assert abs(q - p) < 3 * se
    assert q == pytest.approx(Q_1000_1050, rel=1e-12)


def test_gamma_rejects_bad_input():
    with pytest.raises(ValueError):
        regularized_gamma("upper", -1.0, 1.0)
    with pytest.raises(ValueError):
        regularized_gamma("upper", 1.0, np.nan)
    with pytest.raises(ValueError):
        regularized_gamma("middle", 1.0, 1.0)


# ---------------------------------------------------------------- golden section


def test_golden_quadratic():
    x, fx = golden_section_max(lambda x: -(x - 0.3) ** 2, 0.0, 1.0, tol=1e-8)
    assert abs(x - 0.3) < 1e-8
    assert fx == pytest.approx(0.0, abs=1e-15)


def test_golden_constant():
    x, fx = golden_section_max(lambda x: 2.5, -1.0, 4.0)
    assert -1.0 <= x <= 4.0
    assert fx == 2.5


def test_golden_sine():
    # a flat maximum of height 1 is only resolvable to about sqrt(machine eps)
    x, fx = golden_section_max(math.sin, 0.0, 3.0, tol=1e-6)
    assert abs(x - math.pi / 2) < 1e-6
    assert fx == pytest.approx(1.0, abs=1e-15)


def test_golden_monotone_returns_edge():
    x, _ = golden_section_max(lambda x: x, 0.0, 2.0)
    assert x == 2.0


def test_golden_nonfinite_raises():
    with pytest.raises(FloatingPointError):
        golden_section_max(lambda x: math.nan, 0.0, 1.0)


@settings(max_examples=50, deadline=None)
@given(c=st.floats(-5, 5), a=st.floats(0.1, 10), lo=st.floats(-10, -6), hi=st.floats(6, 10))
def test_golden_negation_invariance(c, a, lo, hi):
    f = lambda x: -a * (x - c) ** 2 + math.cos(x) * 0.01  # noqa: E731
    x1, f1 = golden_section_max(f, lo, hi, tol=1e-9)
    # independent minimiser applied to -f
    res = minimize_scalar(lambda x: -f(x), bounds=(lo, hi), method="bounded",
                          options={"xatol": 1e-10})
    assert abs(x1 - res.x) < 1e-6
    assert f1 == pytest.approx(-res.fun, abs=1e-12)


def test_golden_vectorised_matches_scalar():
    cs = np.array([0.1, 0.5, 0.9])
    x, fx = golden_section_max_vec(lambda x: -(x - cs) ** 2, np.zeros(3), np.ones(3), iters=60)
    np.testing.assert_allclose(x, cs, atol=1e-9)


# ---------------------------------------------------------------- quadrature


def test_hermite_second_moment():
    assert float(gauss_hermite_expectation(lambda z: z ** 2)) == pytest.approx(1.0, abs=1e-12)


def test_hermite_first_moment():
    assert abs(float(gauss_hermite_expectation(lambda z: z))) < 1e-12


def test_hermite_phi_power_against_reference_and_monte_carlo():
    val = float(gauss_hermite_expectation(lambda z: std_normal_cdf(z + 2) ** 63))
    assert val == pytest.approx(E_PHI_Z_PLUS_2_POW_63, rel=1e-8)
    rng = make_rng(7, 63)
    s = 0.0
    s2 = 0.0
    n = 10_000_000
    for _ in range(10):
        g = std_normal_cdf(rng.standard_normal(n // 10) + 2) ** 63
        s += g.sum()
        s2 += (g * g).sum()
    m = s / n
    se = math.sqrt((s2 / n - m * m) / n)
    assert abs(val - m) < 3 * se


@pytest.mark.parametrize("nodes", [20, 30, 100])
def test_hermite_degree_exactness(nodes):
    for d in range(2 * nodes):
        exact = 0.0 if d % 2 else float(np.prod(np.arange(d - 1, 0, -2, dtype=float)))
        # odd moments vanish; measure them against E|z|^d
        scale = math.sqrt(2 ** d / math.pi) * math.gamma((d + 1) / 2) if d % 2 else exact
        got = float(gauss_hermite_expectation(lambda z: z ** d, nodes=nodes, adaptive=False))
        assert abs(got - exact) <= 1e-10 * max(scale, 1.0)


def test_panel_rule_moments():
    z, w = gaussian_panel_rule(-12, 12, 0.5)
    assert w.sum() == pytest.approx(1.0, abs=1e-12)
    assert (w * z ** 2).sum() == pytest.approx(1.0, abs=1e-12)
    assert abs((w * z).sum()) < 1e-14


# ---------------------------------------------------------------- types


def test_system_config_units():
    cfg = SystemConfig(k=6, alpha=0.7, ebn0_db=10.0, n=1000, L=280, sigma2=0.5)
    assert cfg.mu == pytest.approx(0.28)
    assert cfg.Eb == pytest.approx(10.0 * 2 * 0.5)
    assert cfg.E == pytest.approx(6 * cfg.Eb)
    assert cfg.M == 64
    assert cfg.mu_a == pytest.approx(0.196)
    assert cfg.P == pytest.approx(cfg.E / 1000)


@pytest.mark.parametrize("kw", [dict(k=0), dict(alpha=1.5), dict(sigma2=0.0),
                                dict(ebn0_db=math.inf), dict(mu=0.3, n=100, L=20)])
def test_system_config_validation(kw):
    base = dict(k=2, alpha=0.5, ebn0_db=3.0)
    base.update(kw)
    with pytest.raises(ValueError):
        SystemConfig(**base)


def test_error_triple_combined_and_range():
    e = ErrorTriple(0.1, 0.2, 0.05)
    assert e.combined == pytest.approx(0.25)
    with pytest.raises(ValueError):
        ErrorTriple(1.1, 0, 0)


def test_empirical_errors_identity():
    X = np.array([[1, -1], [0, 0], [1, 1]])
    assert empirical_errors(X, X) == ErrorTriple(0.0, 0.0, 0.0)


def test_empirical_errors_small_case():
    X = np.array([[1.0], [1.0], [0.0], [0.0]])
    Xh = np.array([[0.0], [1.0], [1.0], [0.0]])
    e = empirical_errors(X, Xh)
    assert (e.p_md, e.p_fa, e.p_aue) == (0.5, 0.5, 0.0)


def test_empirical_errors_no_active_users():
    X = np.zeros((5, 2))
    Xh = np.zeros((5, 2))
    Xh[0, 0] = 1
    e = empirical_errors(X, Xh)
    assert e.p_md == 0 and e.p_aue == 0 and e.p_fa == 1.0


def test_activity_binomial_and_tail_interval():
    act = ActivityModel.binomial(50, 0.5)
    assert act.mean == 25
    kl, ku = act.interval_for_tail(1e-13)
    assert act.tail_mass(kl, ku) <= 1e-13
    # removing either remaining endpoint would exceed the budget
    assert act.tail_mass(kl + 1, ku) > 1e-13
    assert act.tail_mass(kl, ku - 1) > 1e-13


@settings(max_examples=40, deadline=None)
@given(L=st.integers(1, 120), alpha=st.floats(0.01, 0.99), pbar=st.floats(1e-12, 0.5))
def test_activity_tail_interval_respects_budget(L, alpha, pbar):
    act = ActivityModel.binomial(L, alpha)
    kl, ku = act.interval_for_tail(pbar)
    assert 0 <= kl <= ku <= L
    assert act.tail_mass(kl, ku) <= pbar + 1e-15


def test_activity_explicit_validation():
    with pytest.raises(ValueError):
        ActivityModel.explicit([0.5, 0.6])
    a = ActivityModel.explicit([0.25, 0.5, 0.25])
    assert a.mean == pytest.approx(1.0)
    assert a.std == pytest.approx(math.sqrt(0.5))


def test_rng_streams_are_reproducible_and_distinct():
    a = make_rng(5, 1).standard_normal(4)
    b = make_rng(5, 1).standard_normal(4)
    c = make_rng(5, 2).standard_normal(4)
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c)
    big = make_rng(2 ** 64 - 1).integers(0, 10, 3)
    assert big.shape == (3,)
