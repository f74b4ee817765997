import itertools
import math
from math import comb

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import optimize, special

from maclab.core import ActivityModel, make_rng
from maclab.finite import (FiniteBoundConfig, _a_b, compute_bound_triple, compute_E0,
                           compute_error_floors, compute_exponent, compute_nu, compute_nu_exact,
                           compute_p_t_that, compute_tilde_p, compute_xi, enumerate_cells,
                           ml_oracle_decode, oracle_trials, sample_oracle_instance)


def fbc_for(n=200, L=10, k=3, ebn0=10.0, alpha=0.5, kl=None, ku=None, rl=1, ru=1, **kw):
    act = ActivityModel.binomial(L, alpha)
    kl = 0 if kl is None else kl
    ku = L if ku is None else ku
    return FiniteBoundConfig(n, L, k, ebn0, act, kl, ku, rl, ru, **kw)


# ---------------------------------------------------------------- p tilde


def test_tilde_p_vanishing_pprime_leaves_tail_mass():
    fbc = fbc_for(kl=2, ku=8)
    assert compute_tilde_p(fbc, 1e-9 * fbc.P) == pytest.approx(fbc.pbar, rel=1e-12)


def test_tilde_p_full_power_is_half_mean_for_long_blocks():
    fbc = fbc_for(n=20000, kl=0, ku=10)
    assert compute_tilde_p(fbc, fbc.P) == pytest.approx(fbc.activity.mean / 2, rel=0.01)


def test_tail_interval_meets_target():
    act = ActivityModel.binomial(50, 0.5)
    fbc = FiniteBoundConfig.from_tail(2000, 50, 8, 10.0, act, 1e-13, 0, 0)
    assert fbc.pbar <= 1e-13


# ---------------------------------------------------------------- E0 and exponents


def _e0_grid(rho, rho1, t, that, pp, P1, N=10_000):
    u, v = pp * that, pp * t
    w = u + rho * v
    c = rho1 * P1 * rho * w
    disc = math.sqrt(w * w + 4 * c)
    lo = max(-1 / w, (w - disc) / (2 * c))
    hi = (w + disc) / (2 * c)
    lam = np.linspace(lo, hi, N + 2)[1:-1]
    a, b = _a_b(rho, lam, u, v)
    arg = 1 - rho1 * P1 * b
    return np.max(np.where(arg > 0, rho1 * a + np.log(np.maximum(arg, 1e-300)), -np.inf))


def test_E0_trivial_cases():
    assert compute_E0(0.5, 0.5, 0, 0, 0.1, 1.2) == 0.0
    assert compute_E0(0.0, 0.0, 3, 2, 0.1, 1.2) == 0.0


def test_E0_matches_dense_lambda_grid():
    rng = make_rng(31)
    for _ in range(30):
        rho, rho1 = rng.uniform(0.05, 1.0, 2)
        t, that = int(rng.integers(1, 6)), int(rng.integers(0, 6))
        pp = float(rng.uniform(0.01, 0.5))
        P1 = 1 + pp * int(rng.integers(0, 3))
        g = _e0_grid(rho, rho1, t, that, pp, P1)
        e = compute_E0(rho, rho1, t, that, pp, P1)
        assert e >= g - 1e-6
        assert e <= g + 1e-6 * max(1.0, abs(g)) or e - g < 1e-3 / 10_000


def _exponent_oracle(t, that, R1, R2, pp, P1):
    def f(r, r1):
        return -r * r1 * R1 - r1 * R2 + compute_E0(r, r1, t, that, pp, P1)

    best, arg = 0.0, None
    for r in np.linspace(0.02, 1, 25):
        for r1 in np.linspace(0.02, 1, 25):
            v = f(r, r1)
            if v > best:
                best, arg = v, (r, r1)
    if arg is None:
        return 0.0
    clip = lambda x: min(max(x, 1e-9), 1.0)  # noqa: E731
    res = optimize.minimize(lambda x: -f(clip(x[0]), clip(x[1])), arg, method="Nelder-Mead",
                            options=dict(xatol=1e-8, fatol=1e-12))
    return max(best, -res.fun)


def test_exponent_matches_nested_oracle():
    rng = make_rng(32)
    for _ in range(8):
        t, that = int(rng.integers(1, 6)), int(rng.integers(0, 6))
        pp = float(rng.uniform(0.005, 0.3))
        P1 = 1 + pp * int(rng.integers(0, 3))
        R1, R2 = float(rng.uniform(0, 0.3)), float(rng.uniform(0, 0.1))
        o = _exponent_oracle(t, that, R1, R2, pp, P1)
        e = float(compute_exponent(t, that, R1, R2, pp, P1)[0])
        assert e >= 0
        assert abs(e - o) <= 2e-5


def test_p_t_that_bounded_and_nonincreasing_in_n():
    for t, that in [(1, 1), (2, 1), (3, 3), (0, 2)]:
        # per-symbol power held fixed while the block grows
        ps = [compute_p_t_that(t, that, fbc_for(n=n, L=10, k=3, rl=2, ru=2), 5, 5, 0.05)
              for n in (500, 1000, 2000)]
        assert all(0 <= p <= 1 for p in ps)
        assert ps[0] >= ps[1] >= ps[2]


def test_p_t_that_range_checks():
    fbc = fbc_for(rl=0, ru=0)
    with pytest.raises(ValueError):
        compute_p_t_that(7, 0, fbc, 5, 5, 0.1)
    with pytest.raises(ValueError):
        compute_p_t_that(1, 4, fbc, 5, 5, 0.1)


# ---------------------------------------------------------------- xi


def test_xi_single_hypothesis_is_one():
    fbc = fbc_for(kl=4, ku=4)
    assert compute_xi(4, 4, fbc, 0.8 * fbc.P) == 1.0


def test_xi_diagonal_in_unit_interval_and_far_pairs_small():
    fbc = fbc_for(n=400, L=10, ebn0=10.0)
    pp = 0.8 * fbc.P
    assert 0 < compute_xi(5, 5, fbc, pp) < 1
    assert compute_xi(0, 10, fbc, pp) < 1e-6


def test_xi_monotone_in_n():
    # off-diagonal pairs are error events and shrink; the diagonal bounds the
    # probability of a correct count estimate and grows towards one
    for ka, kap, sign in [(3, 5, -1), (6, 4, -1), (5, 6, -1), (5, 5, 1)]:
        vals = np.array([compute_xi(ka, kap, fbc_for(n=n, L=10), 0.1) for n in (200, 400, 800)])
        assert np.all(sign * np.diff(vals) >= 0)


def test_xi_upper_bounds_likelihood_test_errors():
    fbc = fbc_for(n=50, L=8, ebn0=10.0, kl=0, ku=8)
    pp = 0.8 * fbc.P
    rng = make_rng(33)
    N = 100_000
    ks = np.arange(fbc.kl, fbc.ku + 1)
    var = 1 + ks * pp
    for ka in (2, 4, 6):
        r2 = (1 + ka * pp) * rng.chisquare(fbc.n, N)
        ll = -fbc.n / 2 * np.log(var)[None, :] - r2[:, None] / (2 * var[None, :])
        khat = ks[np.argmax(ll, axis=1)]
        for kap in ks:
            f = np.mean(khat == kap)
            se = math.sqrt(max(f * (1 - f), 1 / N) / N)
            assert f <= compute_xi(ka, int(kap), fbc, pp) + 3 * se


# ---------------------------------------------------------------- nu


def test_nu_trivial_values():
    assert compute_nu_exact(0, 0, 7, 4) == 1
    lt, lsum = compute_nu(0, 0, 7, 4)
    assert lt == 0.0 and lsum == 0.0
    assert compute_nu_exact(2, 1, 6, 1) == 0
    assert compute_nu_exact(2, 2, 6, 1) == comb(4, 2)


def test_nu_rejects_invalid_psi():
    with pytest.raises(ValueError):
        compute_nu(2, 3, 5, 4)


def test_nu_vandermonde_exact():
    for R in range(0, 31):
        for tmin in range(0, min(10, R) + 1):
            psibar = min(tmin, R - tmin)
            assert sum(comb(R - tmin, p) * comb(tmin, tmin - p) for p in range(psibar + 1)) \
                == comb(R, tmin)
            for M in range(1, 17):
                total = sum(compute_nu_exact(tmin, p, R, M) for p in range(psibar + 1))
                assert total <= comb(R, tmin) * M ** tmin


def test_nu_matches_brute_force_enumeration():
    # R users, the first tmin carry a fixed true codeword 0; count tmin-user
    # selections with one codeword each where no selected reference user keeps 0
    R, tmin, M = 5, 2, 4
    counts = [0] * (min(tmin, R - tmin) + 1)
    for users in itertools.combinations(range(R), tmin):
        for cw in itertools.product(range(M), repeat=tmin):
            if any(u < tmin and c == 0 for u, c in zip(users, cw)):
                continue
            counts[sum(u >= tmin for u in users)] += 1
    for psi, c in enumerate(counts):
        assert compute_nu_exact(tmin, psi, R, M) == c
        assert math.exp(compute_nu(tmin, psi, R, M)[0]) == pytest.approx(c, rel=1e-12)
    assert math.exp(compute_nu(tmin, 0, R, M)[1]) == pytest.approx(sum(counts), rel=1e-12)


# ---------------------------------------------------------------- cells and bounds


@settings(max_examples=25, deadline=None)
@given(L=st.integers(2, 8), kl=st.integers(0, 3), width=st.integers(0, 5),
       rl=st.integers(0, 3), ru=st.integers(0, 3))
def test_cells_respect_set_ranges(L, kl, width, rl, ru):
    kl = min(kl, L)
    ku = min(kl + width, L)
    fbc = fbc_for(n=100, L=L, kl=kl, ku=ku, rl=rl, ru=ru)
    cells = enumerate_cells(fbc)
    assert cells.skipped == 0
    t, that, R = (cells.keys[cells.key_inv, i] for i in range(3))
    assert np.all(R >= np.minimum(t, that))
    okap = np.minimum(ku, cells.kap + ru)
    ukap = np.maximum(kl, cells.kap - rl)
    assert np.all(that <= okap - np.maximum(ukap - cells.ka, 0))


def test_large_L_rejected():
    with pytest.raises(ValueError):
        enumerate_cells(fbc_for(L=201, kl=100, ku=101))


@settings(max_examples=15, deadline=None)
@given(L=st.integers(2, 10), k=st.integers(1, 6), ebn0=st.floats(-2.0, 25.0),
       alpha=st.floats(0.1, 1.0), rl=st.integers(0, 3), ru=st.integers(0, 3),
       frac=st.floats(0.05, 0.95))
def test_bound_triple_in_unit_cube(L, k, ebn0, alpha, rl, ru, frac):
    fbc = fbc_for(n=50 * L, L=L, k=k, ebn0=ebn0, alpha=alpha, rl=rl, ru=ru, pprime_frac=frac)
    res = compute_bound_triple(fbc)
    for v in (res.eps.p_md, res.eps.p_fa, res.eps.p_aue, *res.floors):
        assert 0 <= v <= 1


@pytest.mark.parametrize("r", [0, 1, 2])
def test_floors_lower_bound_and_attract_the_bounds(r):
    base = fbc_for(n=300, L=10, k=4, alpha=0.5, kl=1, ku=9, rl=r, ru=r, pprime_policy="optimize")
    gaps = []
    for eb in (10.0, 20.0, 40.0):
        res = compute_bound_triple(base.replace(ebn0_db=eb))
        eps = (res.eps.p_md, res.eps.p_fa, res.eps.p_aue)
        assert all(e >= f - 1e-12 for e, f in zip(eps, res.floors))
        gaps.append([e - f for e, f in zip(eps[:2], res.floors[:2])])
    gaps = np.array(gaps)
    assert np.all(np.diff(gaps, axis=0) <= 0)
    np.testing.assert_allclose(gaps[-1] / np.array(res.floors[:2]), 0.0, atol=1e-3)


def test_fixed_pprime_gap_is_truncation_term():
    # with P'/P fixed the codeword-truncation part of p tilde does not vanish
    fbc = fbc_for(n=300, L=10, k=4, alpha=0.5, kl=1, ku=9, rl=2, ru=2, ebn0=60.0)
    res = compute_bound_triple(fbc)
    trunc = fbc.activity.mean * special.gammaincc(fbc.n / 2, fbc.n / (2 * fbc.pprime_frac))
    assert res.eps.p_md - res.floors[0] == pytest.approx(trunc, rel=1e-3)


def test_full_radii_floors_equal_tail_mass():
    fbc = fbc_for(n=300, L=10, kl=1, ku=9, rl=10, ru=10)
    fl = compute_error_floors(fbc, 0.8 * fbc.P)
    assert fl == pytest.approx((fbc.pbar,) * 3, rel=1e-12)
    act = ActivityModel.explicit([0.0] * 10 + [1.0])
    fbc = FiniteBoundConfig(300, 10, 3, 40.0, act, 0, 10, 10, 10)
    res = compute_bound_triple(fbc)
    assert res.floors == (0.0, 0.0, 0.0)
    assert res.eps.p_md == pytest.approx(res.tilde_p, abs=1e-12)


def test_asymmetric_radii_favour_missed_detection():
    fbc = fbc_for(n=300, L=10, k=4, alpha=0.5, kl=1, ku=9, rl=0, ru=2, ebn0=40.0)
    res = compute_bound_triple(fbc)
    assert res.eps.p_md < res.eps.p_fa


# ---------------------------------------------------------------- ML oracle


def test_oracle_exact_when_noise_negligible():
    fbc = fbc_for(n=32, L=5, k=2, ebn0=70.0, rl=5, ru=5)
    rng = make_rng(34)
    # small P'/P keeps every codeword inside the power shell
    pp = 0.3 * fbc.P
    for _ in range(20):
        inst = sample_oracle_instance(fbc, pp, rng)
        np.testing.assert_array_equal(ml_oracle_decode(inst, fbc, pp), inst.msg)


def test_oracle_zero_radii_decodes_estimated_count():
    fbc = fbc_for(n=16, L=5, k=1, ebn0=5.0, rl=0, ru=0)
    rng = make_rng(35)
    pp = 0.8 * fbc.P
    ks = np.arange(fbc.kl, fbc.ku + 1)
    var = 1 + ks * pp
    for _ in range(30):
        inst = sample_oracle_instance(fbc, pp, rng)
        ll = -fbc.n / 2 * np.log(var) - float(inst.y @ inst.y) / (2 * var)
        assert np.sum(ml_oracle_decode(inst, fbc, pp) >= 0) == ks[np.argmax(ll)]


def test_oracle_rejects_large_instances():
    fbc = fbc_for(n=8, L=9, k=1, ebn0=5.0)
    inst = sample_oracle_instance(fbc, 0.1, make_rng(1))
    with pytest.raises(ValueError):
        ml_oracle_decode(inst, fbc, 0.1)


@pytest.mark.parametrize("r", [0, 1])
def test_bounds_dominate_oracle_errors(r):
    fbc = fbc_for(n=64, L=6, k=1, ebn0=20.0, alpha=0.5, kl=0, ku=6, rl=r, ru=r,
                  pprime_policy="fixed", pprime_frac=0.8)
    res = compute_bound_triple(fbc)
    emp = oracle_trials(fbc, res.pprime, 2000, make_rng(36, r))
    mean = emp.mean(axis=0)
    se = emp.std(axis=0, ddof=1) / math.sqrt(len(emp))
    for b, m, s in zip((res.eps.p_md, res.eps.p_fa, res.eps.p_aue), mean, se):
        assert m <= b + 3 * s
