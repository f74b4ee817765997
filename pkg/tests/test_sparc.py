import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maclab.core import SystemConfig, make_rng
from maclab.coupling import inner_density, make_base_matrix
from maclab.sparc import (run_sparc_amp, sample_sparc_instance, scalar_se_run,
                          section_errors, sparc_amp_init, sparc_amp_step, sparc_denoise_jacobian,
                          sparc_denoise_section, sparc_hard_decide, sparc_mse)


def brute_posterior_mean(s, tau, cfg):
    """Posterior mean over the M+1 atoms by direct enumeration."""
    M, E, a = cfg.M, cfg.E, cfg.alpha
    atoms = [np.zeros(M)] + [math.sqrt(E) * np.eye(M)[j] for j in range(M)]
    prior = [1 - a] + [a / M] * M
    logw = [math.log(p) - np.sum((s - x) ** 2) / (2 * tau) if p > 0 else -np.inf
            for p, x in zip(prior, atoms)]
    mx = max(logw)
    w = np.exp(np.array(logw) - mx)
    w /= w.sum()
    return sum(wi * x for wi, x in zip(w, atoms))


def central_jacobian(f, s, h=1e-5):
    J = np.empty((s.size, s.size))
    for j in range(s.size):
        e = np.zeros_like(s)
        e[j] = h
        J[:, j] = (f(s + e) - f(s - e)) / (2 * h)
    return J


# ---------------------------------------------------------------- denoisers


def test_bayes_output_symmetric_at_zero():
    cfg = SystemConfig(k=3, alpha=0.7, ebn0_db=3.0)
    out = sparc_denoise_section("bayes", np.zeros(8), 2.0, cfg)
    assert np.allclose(out, out[0]) and out[0] > 0


def test_bayes_full_activity_strong_signal_returns_codeword():
    # with alpha = 1 the silent atom is excluded; a clean section maps to sqrt(E) e_j
    cfg = SystemConfig(k=2, alpha=1.0, ebn0_db=20.0)
    s = math.sqrt(cfg.E) * np.eye(4)[2]
    out = sparc_denoise_section("bayes", s, 0.01, cfg)
    np.testing.assert_allclose(out, s, atol=1e-12)
    assert sparc_denoise_section("bayes", np.zeros(4), 1.0, cfg).sum() == \
        pytest.approx(math.sqrt(cfg.E))


def test_bayes_matches_enumeration():
    cfg = SystemConfig(k=3, alpha=0.7, ebn0_db=4.0)
    rng = make_rng(1, 8)
    for _ in range(50):
        tau = float(rng.uniform(0.2, 5.0)) * cfg.E / 8
        x = np.zeros(8)
        if rng.random() < 0.7:
            x[rng.integers(8)] = math.sqrt(cfg.E)
        s = x + math.sqrt(tau) * rng.standard_normal(8)
        np.testing.assert_allclose(sparc_denoise_section("bayes", s, tau, cfg),
                                   brute_posterior_mean(s, tau, cfg), rtol=1e-10, atol=1e-12)


def test_marginal_is_entrywise_posterior_mean():
    cfg = SystemConfig(k=2, alpha=0.6, ebn0_db=5.0)
    rng = make_rng(2)
    s = rng.standard_normal(4) * 3
    tau = 1.7
    rE, p = math.sqrt(cfg.E), cfg.alpha / cfg.M
    ref = [rE * p * math.exp(-(v - rE) ** 2 / (2 * tau))
           / (p * math.exp(-(v - rE) ** 2 / (2 * tau)) + (1 - p) * math.exp(-v * v / (2 * tau)))
           for v in s]
    np.testing.assert_allclose(sparc_denoise_section("marginal", s, tau, cfg), ref, rtol=1e-12)


@pytest.mark.parametrize("kind", ["bayes", "marginal"])
def test_jacobian_matches_finite_differences(kind):
    cfg = SystemConfig(k=3, alpha=0.7, ebn0_db=6.0)
    rng = make_rng(3, 0 if kind == "bayes" else 1)
    worst = 0.0
    for _ in range(100):
        tau = cfg.E / float(rng.uniform(0.5, 20.0))
        x = np.zeros(8)
        if rng.random() < 0.7:
            x[rng.integers(8)] = math.sqrt(cfg.E)
        s = x + math.sqrt(tau) * rng.standard_normal(8)
        J = sparc_denoise_jacobian(kind, s, tau, cfg)
        Jfd = central_jacobian(lambda v: sparc_denoise_section(kind, v, tau, cfg), s)
        # central differences carry roundoff of order eps * |eta| / h
        floor = 1e-16 * math.sqrt(cfg.E) / 1e-5 * 8
        worst = max(worst, np.linalg.norm(J - Jfd) / (np.linalg.norm(J) + floor / 1e-5))
    assert worst < 1e-5


def test_hard_decision_full_activity_never_silent():
    cfg = SystemConfig(k=4, alpha=1.0, ebn0_db=0.0)
    s = make_rng(4).standard_normal((1000, 16)) * 5
    assert np.all(sparc_hard_decide(s, 3.0, cfg) >= 0)


def test_hard_decision_threshold_rule():
    cfg = SystemConfig(k=3, alpha=0.4, ebn0_db=2.0)
    tau, rE, M = 2.0, math.sqrt(cfg.E), cfg.M
    rng = make_rng(5)
    s = rng.standard_normal((2000, M)) * 2
    d = sparc_hard_decide(s, tau, cfg)
    lhs = s.max(axis=1) * rE / tau - cfg.E / (2 * tau) + math.log(cfg.alpha / M)
    silent = lhs < math.log(1 - cfg.alpha)
    np.testing.assert_array_equal(d == -1, silent)
    np.testing.assert_array_equal(d[~silent], s.argmax(axis=1)[~silent])


@settings(max_examples=30, deadline=None)
@given(k=st.integers(1, 5), alpha=st.floats(0.05, 1.0), tau=st.floats(0.05, 20.0),
       seed=st.integers(0, 2 ** 32))
def test_decisions_have_at_most_one_nonzero(k, alpha, tau, seed):
    cfg = SystemConfig(k=k, alpha=alpha, ebn0_db=3.0)
    s = make_rng(seed).standard_normal((50, cfg.M)) * 3
    d = sparc_hard_decide(s, tau, cfg)
    assert np.all((d >= -1) & (d < cfg.M))


# ---------------------------------------------------------------- state evolution


def test_uncoupled_recursion_is_the_scalar_map():
    cfg = SystemConfig(k=4, alpha=0.6, ebn0_db=5.0, mu=0.2)
    st_, t, hist = scalar_se_run(cfg, make_base_matrix(1, 1), "marginal", return_history=True)
    psi = cfg.E
    for h in hist:
        assert h.psi[0] == pytest.approx(psi, rel=1e-13)
        tau = cfg.sigma2 + cfg.mu * psi
        assert h.tau[0] == pytest.approx(tau, rel=1e-13)
        psi = float(sparc_mse("marginal", tau, cfg)[0])


@pytest.mark.parametrize("kind", ["marginal", "bayes"])
def test_fixed_point_nmse_at_low_snr_is_about_half(kind):
    cfg = SystemConfig(k=6, alpha=0.7, ebn0_db=2.0, mu=0.28)
    st_, _ = scalar_se_run(cfg, make_base_matrix(1, 1), kind)
    assert float(st_.psi[0] / cfg.E) == pytest.approx(0.5, abs=0.05)


def test_fixed_point_nmse_at_high_snr_reaches_small_values():
    cfg = SystemConfig(k=6, alpha=0.7, ebn0_db=6.73, mu=0.28)
    bayes, _ = scalar_se_run(cfg, make_base_matrix(1, 1), "bayes")
    coupled, _ = scalar_se_run(cfg, make_base_matrix(3, 30), "marginal", t_max=400)
    for v in (bayes.psi.max() / cfg.E, coupled.psi.max() / cfg.E):
        assert 1e-5 < v < 1e-3


@pytest.mark.parametrize("kind", ["marginal", "bayes"])
def test_tau_nonincreasing(kind):
    cfg = SystemConfig(k=3, alpha=0.7, ebn0_db=4.0, mu=0.3)
    _, _, hist = scalar_se_run(cfg, make_base_matrix(3, 9), kind, return_history=True)
    taus = np.array([h.tau for h in hist])
    assert np.all(np.diff(taus, axis=0) <= 1e-12 * taus[:-1])


@pytest.mark.parametrize("kind", ["marginal", "bayes"])
def test_mse_quadrature_matches_monte_carlo(kind):
    cfg = SystemConfig(k=1, alpha=0.6, ebn0_db=3.0)
    tau = 1.3
    rng = make_rng(6, 1)
    N = 400_000
    idx = np.where(rng.random(N) < cfg.alpha, rng.integers(0, 2, N), -1)
    x = np.zeros((N, 2))
    x[idx >= 0, idx[idx >= 0]] = math.sqrt(cfg.E)
    s = x + math.sqrt(tau) * rng.standard_normal((N, 2))
    err = np.sum((x - sparc_denoise_section(kind, s, tau, cfg)) ** 2, axis=1)
    se = err.std(ddof=1) / math.sqrt(N)
    assert abs(float(sparc_mse(kind, tau, cfg)[0]) - err.mean()) < 3 * se


# ---------------------------------------------------------------- AMP


def test_first_residual_is_observation():
    cfg = SystemConfig(k=2, alpha=0.5, ebn0_db=6.0, n=200, L=40)
    spec = make_base_matrix(1, 1)
    inst = sample_sparc_instance(cfg, spec, make_rng(7))
    st_, _, hist = scalar_se_run(cfg, spec, "bayes", return_history=True)
    it = sparc_amp_step(sparc_amp_init(inst), inst, spec, hist[0], cfg, "bayes")
    np.testing.assert_array_equal(it.z, inst.y)


@pytest.mark.parametrize("kind", ["bayes", "marginal"])
def test_noiseless_full_activity_exact_recovery(kind):
    cfg = SystemConfig(k=2, alpha=1.0, ebn0_db=30.0, n=200, L=100)
    spec = make_base_matrix(1, 1)
    inst = sample_sparc_instance(cfg, spec, make_rng(8))
    _, _, hist = scalar_se_run(cfg, spec, kind, return_history=True)
    _, dec = run_sparc_amp(inst, spec, cfg, kind, hist)
    np.testing.assert_array_equal(dec, inst.idx)
    assert section_errors(inst, dec).combined == 0.0


def test_coupled_amp_tracks_state_evolution():
    cfg = SystemConfig(k=2, alpha=0.7, ebn0_db=5.0, n=9600, L=3200)
    spec = make_base_matrix(2, 4)
    inst = sample_sparc_instance(cfg, spec, make_rng(9))
    _, _, hist = scalar_se_run(cfg, spec, "bayes", return_history=True)
    it = sparc_amp_init(inst)
    Lb = cfg.L // spec.C
    emp = []
    for t in range(len(hist)):
        it = sparc_amp_step(it, inst, spec, hist[t], cfg, "bayes")
        emp.append([np.mean((it.s[c * Lb:(c + 1) * Lb] - inst.x[c * Lb:(c + 1) * Lb]) ** 2)
                    for c in range(spec.C)])
    emp = np.array(emp)
    # the recursion starts from psi = E and weights row blocks by its phi, while the
    # all-zero start has error alpha * E; predict the first step under that mismatch
    mu_in = inner_density(spec, cfg.mu)
    phi_true = cfg.sigma2 + mu_in * (spec.W @ np.full(spec.C, cfg.alpha * cfg.E))
    q = hist[0].tau[None, :] / hist[0].phi[:, None]
    pred0 = np.sum(spec.W * q ** 2 * phi_true[:, None], axis=0)
    np.testing.assert_allclose(emp[0], pred0, rtol=0.1)
    assert np.all(pred0 <= hist[0].tau)
    # both reach the same fixed point
    np.testing.assert_allclose(emp[-1], hist[-1].tau, rtol=0.1)
