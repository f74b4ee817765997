"""Potential functions, fixed-point bounds and asymptotic error formulas.

The AMP fixed point of the coupled system is bounded through the largest
minimiser of a potential function; the resulting effective noise level
tau_bar is mapped to (pMD, pFA, pAUE) by closed-form expressions for the
section-wise MAP hard decision.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .core import (ErrorTriple, SystemConfig, gaussian_panel_rule, golden_section_max,
                   log_cdf_power, make_rng, one_minus_cdf_power)

__all__ = ["mutual_info", "mi_entrywise", "mi_sectionwise", "potential", "PotentialEval",
           "evaluate_potential", "largest_minimizer", "asymptotic_error_triple",
           "blockwise_error_triple", "combined_bound",
           "pupe_alpha1", "union_bound_comparator", "tau_bar", "asymptotic_bound",
           "sweep_achievable_region", "RegionPoint"]

log = logging.getLogger(__name__)

KINDS = ("bayes", "marginal")
MAX_BAYES_K = 12


def _a(tau, cfg):
    return np.sqrt(cfg.E / np.asarray(tau, dtype=float))


# ---------------------------------------------------------------- mutual information


def _scaled_mi_entrywise(tau, cfg: SystemConfig):
    """M * I(xbar; s_tau) for the scalar channel with P(xbar = sqrt(E)) = alpha/M."""
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    M, alpha = float(cfg.M), cfg.alpha
    if alpha == 0.0:
        return np.zeros_like(tau)
    a = _a(tau, cfg)
    b = a ** 2 / 2
    q = alpha / M
    lnK = math.log(M / alpha - 1) if M > alpha else -np.inf
    width = min(0.5, 1.0 / max(float(a.max()), 1e-12))
    hi = max(12.0, float(a.max()) + 10.0)
    z, w = gaussian_panel_rule(-hi, hi, width)
    x = a[:, None] * z[None, :] - b[:, None]
    head = alpha * (cfg.k * math.log(2) - math.log(alpha)) - (M - alpha) * math.log1p(-q)
    if M == alpha:  # alpha = 1 and M = 1: no uncertainty at all
        return np.zeros_like(tau)
    c_term = np.logaddexp(0.0, x + lnK) @ w
    d_term = np.logaddexp(0.0, x - lnK) @ w
    return head - alpha * c_term - (M - alpha) * d_term


def mi_entrywise(tau, cfg: SystemConfig):
    return _scaled_mi_entrywise(tau, cfg) / cfg.M


def _one_minus_g(wv, a, z, wz):
    """h(w) = 1 - E exp(-exp(w + a z)) on an array of w."""
    e = np.exp(np.minimum(wv[:, None] + a * z[None, :], 700.0))
    return (-np.expm1(-e)) @ wz


def _mi_sectionwise_laplace(tau: float, cfg: SystemConfig, step: float = 0.1):
    """I(xbar_sec; s_tau) using E ln X = int (e^{-s} - E e^{-sX}) ds / s.

    For the silent and active hypotheses the Laplace transform of X factorises
    over the M coordinates, so only 1-D Gaussian expectations are needed.
    """
    M, alpha = cfg.M, cfg.alpha
    if alpha == 0.0:
        return 0.0
    a = float(_a(tau, cfg))
    b = a * a / 2
    width = min(0.5, 1.0 / max(a, 1e-12))
    hi = max(12.0, a + 10.0)
    z, wz = gaussian_panel_rule(-hi, hi, width)
    lnq = math.log(alpha / M)

    def one_minus_pow(h_minus, m_minus, h_plus=None):
        with np.errstate(divide="ignore"):
            lg = m_minus * np.log1p(-h_minus)
            if h_plus is not None:
                lg = lg + np.log1p(-h_plus)
        return -np.expm1(lg)

    # active hypothesis; h(v + lnq + b) ~ q e^{v + 2b} sets the lower limit
    v_lo = -45.0 - 2 * b
    v_hi = math.log(45.0 / (1 - alpha)) if alpha < 1 else b + math.log(M) + 8 * a + 5
    v = np.arange(v_lo, v_hi + step, step)
    hm = _one_minus_g(v + lnq - b, a, z, wz)
    hp = _one_minus_g(v + lnq + b, a, z, wz)
    one_m_G = one_minus_pow(hm, M - 1, hp)
    if alpha == 1.0:
        ElnXA = np.trapezoid(np.exp(-np.exp(v)) - (1 - one_m_G), v)
        return b - ElnXA
    JA = np.trapezoid(np.exp(-np.exp(v) * (1 - alpha)) * one_m_G, v)
    # silent hypothesis
    lnc = lnq - math.log1p(-alpha)
    vs = np.arange(-45.0, math.log(45.0) + step, step)
    hs = _one_minus_g(vs + lnc - b, a, z, wz)
    JS = np.trapezoid(np.exp(-np.exp(vs)) * one_minus_pow(hs, M), vs)
    return -math.log1p(-alpha) + alpha * b - alpha * JA - (1 - alpha) * JS


def _mi_sectionwise_mc(tau, cfg: SystemConfig, mc_samples: int = 200000, seed: int = 0,
                       return_se: bool = False):
    """Monte Carlo evaluation with common random numbers across tau."""
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    M, alpha = cfg.M, cfg.alpha
    out = np.empty(tau.shape)
    se = np.empty(tau.shape)
    chunk = max(1, 2 ** 21 // M)
    for i, t in enumerate(tau):
        a = math.sqrt(cfg.E / t)
        b = a * a / 2
        rng_i = make_rng(seed, 0x1A)  # same draws for every tau
        acc = []
        done = 0
        while done < mc_samples:
            m = min(chunk, mc_samples - done)
            z = rng_i.standard_normal((m, M))
            lx = a * z - b
            lnq = math.log(alpha / M)
            # active: coordinate 0 carries the signal
            la = lx.copy()
            la[:, 0] = a * z[:, 0] + b
            xa = special.logsumexp(np.concatenate(
                [la + lnq, np.full((m, 1), math.log1p(-alpha) if alpha < 1 else -np.inf)],
                axis=1), axis=1)
            if alpha < 1:
                lnc = lnq - math.log1p(-alpha)
                xs = special.logsumexp(np.concatenate([lx + lnc, np.zeros((m, 1))], axis=1),
                                       axis=1)
            else:
                xs = np.zeros(m)
            acc.append(-alpha * xa - (1 - alpha) * xs)
            done += m
        vals = np.concatenate(acc)
        const = -(1 - alpha) * math.log1p(-alpha) if alpha < 1 else 0.0
        out[i] = const + alpha * b + vals.mean()
        se[i] = vals.std(ddof=1) / math.sqrt(len(vals))
    return (out, se) if return_se else out


def mi_sectionwise(tau, cfg: SystemConfig, method: str = "laplace", mc_samples: int = 200000,
                   seed: int = 0):
    if cfg.M > 2 ** MAX_BAYES_K:
        raise ValueError(f"section-wise mutual information limited to k <= {MAX_BAYES_K}")
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    if method == "laplace":
        return np.array([_mi_sectionwise_laplace(float(t), cfg) for t in tau])
    if method == "mc":
        return _mi_sectionwise_mc(tau, cfg, mc_samples, seed)
    raise ValueError(f"unknown method {method!r}")


def mutual_info(kind: str, tau, cfg: SystemConfig, **kw):
    """Mutual information (nats) of the section-wise or entrywise Gaussian channel."""
    if kind == "bayes":
        return mi_sectionwise(tau, cfg, **kw)
    if kind == "marginal":
        return mi_entrywise(tau, cfg)
    raise ValueError(f"kind must be one of {KINDS}")


# ---------------------------------------------------------------- potentials


def _scaled_potential(kind, psi, mu, sigma2, cfg, **kw):
    """Potential multiplied by M for the marginal kind (unchanged for bayes)."""
    psi = np.atleast_1d(np.asarray(psi, dtype=float))
    tau = sigma2 + mu * psi
    tail = (np.log(tau / sigma2) - mu * psi / tau) / (2 * mu)
    if kind == "marginal":
        return _scaled_mi_entrywise(tau, cfg) + tail
    return mutual_info("bayes", tau, cfg, **kw) + tail


def potential(kind: str, psi, mu: float, sigma2: float, cfg: SystemConfig, **kw):
    """F(psi) = I(tau) + c/(2 mu) [ln(tau/sigma2) - mu psi / tau], tau = sigma2 + mu psi.

    c = 1 for the bayes kind and 1/M for the marginal kind.
    """
    val = _scaled_potential(kind, psi, mu, sigma2, cfg, **kw)
    return val / cfg.M if kind == "marginal" else val


@dataclass
class PotentialEval:
    kind: str
    mu: float
    sigma2: float
    psi_grid: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)
    minimizer: float
    tau_bar: float
    epsilon_slack: float = 0.0
    delta: float = 0.0
    local_minima: list = field(default_factory=list)


def _refine_min(fun, lo, hi, tol):
    x, negf = golden_section_max(lambda p: -float(fun(p)), lo, hi, tol=tol)
    return x, -negf


def evaluate_potential(kind: str, mu: float, cfg: SystemConfig, grid: int = 200,
                       refine_tol: float | None = None, eps: float = 0.0, delta: float = 0.0,
                       tie_tol: float = 1e-9, **kw) -> PotentialEval:
    """Grid evaluation of the potential, its local minima and its largest global minimiser.

    The grid is log-spaced on [E 1e-7, E]; minima are refined by golden-section
    inside the bracketing grid cell.
    """
    if grid < 200:
        raise ValueError("grid must have at least 200 points")
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}")
    E, s2 = cfg.E, cfg.sigma2
    psi = np.geomspace(E * 1e-7, E, grid)
    F = _scaled_potential(kind, psi, mu, s2, cfg, **kw)
    if not np.all(np.isfinite(F)):
        raise FloatingPointError("potential not finite on the grid")
    tol = refine_tol if refine_tol is not None else E * 1e-9
    f1 = lambda p: _scaled_potential(kind, p, mu, s2, cfg, **kw)[0]  # noqa: E731

    def refine(i):
        lo = psi[i - 1] if i > 0 else psi[0]
        hi = psi[i + 1] if i < grid - 1 else psi[-1]
        if hi <= lo:
            return psi[i], F[i]
        x, fx = _refine_min(f1, lo, hi, tol)
        return (x, fx) if fx <= F[i] else (psi[i], F[i])

    locs = []
    for i in range(grid):
        left = F[i - 1] if i > 0 else np.inf
        right = F[i + 1] if i < grid - 1 else np.inf
        if F[i] < left and F[i] <= right:
            locs.append(refine(i))
    fmin = min(f for _, f in locs)
    near = [p for p, f in locs if f <= fmin + tie_tol]
    m = max(near)
    scale = cfg.M if kind == "marginal" else 1.0
    return PotentialEval(kind, mu, s2, psi, F / scale, m, s2 + mu * (m + eps), eps, delta,
                         [(p, f / scale) for p, f in locs])


def largest_minimizer(kind: str, mu: float, sigma2: float, cfg: SystemConfig,
                      grid: int = 200, refine_tol: float | None = None, **kw) -> float:
    cfg = cfg if cfg.sigma2 == sigma2 else cfg.replace(sigma2=sigma2)
    return evaluate_potential(kind, mu, cfg, grid, refine_tol, **kw).minimizer


def tau_bar(kind: str, mu: float, cfg: SystemConfig, theta: float = 1.0, eps: float = 0.0,
            **kw) -> float:
    """sigma2 + mu_in (M(mu_in) + eps) with mu_in = theta * mu."""
    mu_in = theta * mu
    return cfg.sigma2 + mu_in * (largest_minimizer(kind, mu_in, cfg.sigma2, cfg, **kw) + eps)


# ---------------------------------------------------------------- error formulas


def _xi(a, cfg):
    alpha = cfg.alpha
    return (cfg.k * math.log(2) - math.log(alpha) + math.log1p(-alpha)) / a


def _z_rule(lo, hi, a):
    if hi <= lo:
        return np.zeros(0), np.zeros(0)
    return gaussian_panel_rule(lo, hi, min(0.25, 1.0 / max(a, 1e-12)), order=10)


def _error_parts(tau: float, cfg: SystemConfig):
    """(P(miss), P(silent declared active), P(wrong codeword)) at effective noise tau."""
    M = cfg.M
    a = float(_a(tau, cfg))
    xi = _xi(a, cfg)
    c = xi + a / 2
    lo = xi - a / 2
    md = math.exp(float(special.log_ndtr(lo) + log_cdf_power(c, M - 1)))
    den = float(one_minus_cdf_power(c, M))
    # E_z[1 - Phi(max(c, z + a))^{M-1}] split at the kink z = lo
    aue = float(special.ndtr(lo)) * float(one_minus_cdf_power(c, M - 1))
    z, w = _z_rule(max(lo, -15.0), 15.0, a)
    if z.size:
        aue += float(one_minus_cdf_power(z + a, M - 1) @ w)
    return md, den, aue


def _combine_parts(md, den, aue, alpha) -> ErrorTriple:
    md, den, aue = float(np.mean(md)), float(np.mean(den)), float(np.mean(aue))
    fa = 0.0 if den <= 0.0 else 1.0 / (alpha * (1.0 - md) / ((1 - alpha) * den) + 1.0)
    clip = lambda v: min(max(v, 0.0), 1.0)  # noqa: E731
    return ErrorTriple(clip(md), clip(fa), clip(aue))


def asymptotic_error_triple(tau: float, cfg: SystemConfig) -> ErrorTriple:
    """(eps_MD, eps_FA, eps_AUE) of the section MAP decision at effective noise tau."""
    if not 0 < cfg.alpha < 1:
        raise ValueError("asymptotic_error_triple needs alpha in (0,1); use pupe_alpha1 for alpha=1")
    return _combine_parts(*_error_parts(tau, cfg), cfg.alpha)


def blockwise_error_triple(taus, cfg: SystemConfig) -> ErrorTriple:
    """Error triple of a coupled design with equal-size column blocks at noise levels ``taus``.

    Miss and wrong-codeword rates are block averages; the false-alarm rate
    pools declared-active counts over blocks before normalising.
    """
    if not 0 < cfg.alpha < 1:
        raise ValueError("blockwise_error_triple needs alpha in (0,1)")
    parts = np.array([_error_parts(float(t), cfg) for t in np.atleast_1d(taus)])
    return _combine_parts(parts[:, 0], parts[:, 1], parts[:, 2], cfg.alpha)


def pupe_alpha1(tau: float, cfg: SystemConfig) -> float:
    """1 - E_z Phi(z + sqrt(E/tau))^{M-1}."""
    a = float(_a(tau, cfg))
    z, w = _z_rule(-15.0, 15.0, a)
    return float(min(max(one_minus_cdf_power(z + a, cfg.M - 1) @ w, 0.0), 1.0))


def union_bound_comparator(tau: float, cfg: SystemConfig) -> float:
    """Entrywise-MAP union bound: P(miss own entry) + (M-1) P(false entry)."""
    a = float(_a(tau, cfg))
    M, alpha = cfg.M, cfg.alpha
    lnK = math.log(M / alpha - 1) if M > alpha else -np.inf
    miss = special.ndtr(lnK / a - a / 2)
    false = special.ndtr(-lnK / a - a / 2)
    return float(miss + (M - 1) * false)


def asymptotic_bound(kind: str, cfg: SystemConfig, theta: float = 1.0, eps: float = 0.0,
                     delta: float = 0.0, **kw):
    """Error triple (or PUPE when alpha = 1) at tau_bar + delta.

    Returns ``(triple_or_pupe, tau_bar)``.
    """
    tb = tau_bar(kind, cfg.mu, cfg, theta=theta, eps=eps, **kw)
    if cfg.alpha == 1.0:
        return pupe_alpha1(tb + delta, cfg), tb
    return asymptotic_error_triple(tb + delta, cfg), tb


def combined_bound(kind, cfg, **kw) -> float:
    res, _ = asymptotic_bound(kind, cfg, **kw)
    return res if isinstance(res, float) else res.combined


# ---------------------------------------------------------------- region sweep


@dataclass(frozen=True)
class RegionPoint:
    ebn0_db: float
    mu_a_max: float
    kind: str
    alpha: float
    k: int
    target: float
    status: str = "ok"


def sweep_achievable_region(template: SystemConfig, target: float, ebn0_grid, mu_grid,
                            kind: str, rel_tol: float = 1e-4, **kw) -> list[RegionPoint]:
    """Largest mu_a = alpha mu with bound <= target, per Eb/N0.

    The mu grid is scanned for the first violation and the crossing is then
    bisected on log mu. When the smallest grid point already violates the
    target the point is reported as NaN; when no grid point violates it the
    value is +inf.
    """
    mu_grid = np.sort(np.asarray(mu_grid, dtype=float))
    out = []
    for eb in ebn0_grid:
        base = template.replace(ebn0_db=float(eb))

        def ok(mu):
            return combined_bound(kind, base.replace(mu=float(mu)), **kw) <= target

        status = "ok"
        prev = None
        bad = None
        for mu in mu_grid:
            if ok(mu):
                prev = mu
            else:
                bad = mu
                break
        if prev is None:
            val, status = float("nan"), "below_grid"
            log.warning("Eb/N0=%.3f dB: smallest mu already violates the target", eb)
        elif bad is None:
            val, status = float("inf"), "above_grid"
        else:
            lo, hi = math.log(prev), math.log(bad)
            while hi - lo > rel_tol:
                mid = 0.5 * (lo + hi)
                if ok(math.exp(mid)):
                    lo = mid
                else:
                    hi = mid
            val = template.alpha * math.exp(lo)
        out.append(RegionPoint(float(eb), val, kind, template.alpha, template.k, target, status))
    return out
