"""Section-sparse random coding with spatially coupled AMP decoding.

Each of L users owns M = 2^k columns of the design matrix; an active user
transmits one column scaled by sqrt(E). The decoder is vector AMP with either
the section-wise Bayes denoiser or the entrywise marginal denoiser, tracked
by a scalar state evolution with one variance per block.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from .core import (ErrorTriple, SystemConfig, empirical_errors, gaussian_panel_rule,
                   make_rng)
from .coupling import CouplingSpec, block_maps, inner_density, sample_sc_matrix

__all__ = ["SparcInstance", "ScalarSEState", "SparcIterates", "MAX_SECTION_M",
           "sparc_denoise_section", "sparc_denoise_jacobian", "sparc_hard_decide",
           "sparc_mse", "scalar_se_step", "scalar_se_run", "sample_sparc_instance",
           "sparc_amp_init", "sparc_amp_step", "run_sparc_amp", "section_errors"]

MAX_SECTION_M = 4096
KINDS = ("bayes", "marginal")


def _check_kind(kind):
    if kind not in KINDS:
        raise ValueError(f"sparc denoiser kind must be one of {KINDS}, got {kind!r}")


def _log_prior(cfg: SystemConfig):
    M, a = cfg.M, cfg.alpha
    la = np.log(a / M) if a > 0 else -np.inf
    l0 = np.log1p(-a) if a < 1 else -np.inf
    return la, l0


def _section_logits(s, tau, cfg):
    E = cfg.E
    tau = np.asarray(tau, dtype=float)[..., None]
    return s * (np.sqrt(E) / tau) - E / (2 * tau)


def sparc_denoise_section(kind: str, s, tau, cfg: SystemConfig):
    """Posterior-mean denoiser applied to sections ``s`` (..., M).

    ``tau`` broadcasts against the leading dimensions of ``s``.
    """
    _check_kind(kind)
    s = np.asarray(s, dtype=float)
    M = cfg.M
    if s.shape[-1] != M:
        raise ValueError(f"section length {s.shape[-1]} != M={M}")
    la, l0 = _log_prior(cfg)
    u = _section_logits(s, tau, cfg)
    rootE = np.sqrt(cfg.E)
    if kind == "bayes":
        if M > MAX_SECTION_M:
            raise ValueError(f"bayes denoiser limited to M <= {MAX_SECTION_M}")
        u = u + la
        m = np.maximum(u.max(axis=-1, keepdims=True), l0)
        e = np.exp(u - m)
        den = e.sum(axis=-1, keepdims=True) + np.exp(l0 - m)
        return rootE * e / den
    # entrywise: logit of the single-entry posterior
    lam = u + la - np.log1p(-cfg.alpha / M)
    return rootE * special.expit(lam)


def sparc_denoise_jacobian(kind: str, s, tau, cfg: SystemConfig):
    """Jacobian d eta / d s for a single section (M x M)."""
    s = np.asarray(s, dtype=float)
    E = cfg.E
    w = sparc_denoise_section(kind, s, tau, cfg) / np.sqrt(E)
    if kind == "bayes":
        return (E / tau) * (np.diag(w) - np.outer(w, w))
    return np.diag((E / tau) * w * (1 - w))


def sparc_hard_decide(s, tau, cfg: SystemConfig):
    """Section-wise MAP decision over {sqrt(E) e_j} and the all-zero section.

    Returns the index of the decided column or -1 for silence, with the same
    leading shape as ``s``. Ties go to the lowest index, then to nonzero.
    """
    s = np.asarray(s, dtype=float)
    la, l0 = _log_prior(cfg)
    u = _section_logits(s, tau, cfg) + la
    j = np.argmax(u, axis=-1)
    best = np.take_along_axis(u, j[..., None], axis=-1)[..., 0]
    return np.where(best >= l0, j, -1)


def decisions_to_sections(idx, cfg: SystemConfig):
    idx = np.asarray(idx)
    out = np.zeros(idx.shape + (cfg.M,))
    act = idx >= 0
    np.put_along_axis(out, np.where(act, idx, 0)[..., None],
                      np.where(act, np.sqrt(cfg.E), 0.0)[..., None], axis=-1)
    return out


# ---------------------------------------------------------------- state evolution


def _marginal_mse(tau, cfg: SystemConfig):
    """Per-section MSE of the marginal denoiser by composite quadrature."""
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    M, alpha, E = cfg.M, cfg.alpha, cfg.E
    a = np.sqrt(E / tau)
    width = min(0.5, 1.0 / max(a.max(), 1e-12))
    z, w = gaussian_panel_rule(-12.0, 12.0, width)
    lnr = np.log(alpha / M) - np.log1p(-alpha / M) if alpha > 0 else -np.inf
    A = a[:, None]
    lam_act = A * z[None, :] + A ** 2 / 2 + lnr
    lam_sil = A * z[None, :] - A ** 2 / 2 + lnr
    act = (special.expit(-lam_act) ** 2) @ w
    sil = (special.expit(lam_sil) ** 2) @ w
    return E * (alpha * act + (M - alpha) * sil)


def _bayes_mse(tau, cfg: SystemConfig, zs: np.ndarray):
    """Per-section MSE of the Bayes denoiser by Monte Carlo with fixed draws ``zs`` (N, M)."""
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    E, alpha = cfg.E, cfg.alpha
    out = np.empty(tau.shape)
    for i, t in enumerate(tau):
        noise = np.sqrt(t) * zs
        sil = 0.0
        act = 0.0
        if alpha < 1:
            w = sparc_denoise_section("bayes", noise, t, cfg) / np.sqrt(E)
            sil = np.mean(np.sum(w ** 2, axis=-1))
        if alpha > 0:
            sa = noise.copy()
            sa[:, 0] += np.sqrt(E)
            w = sparc_denoise_section("bayes", sa, t, cfg) / np.sqrt(E)
            act = np.mean((1 - w[:, 0]) ** 2 + np.sum(w[:, 1:] ** 2, axis=-1))
        out[i] = E * (alpha * act + (1 - alpha) * sil)
    return out


def _bayes_mse_m2(tau, cfg: SystemConfig):
    """Bayes per-section MSE for M = 2 by a product Gauss-Legendre rule."""
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    E, alpha = cfg.E, cfg.alpha
    out = np.empty(tau.shape)
    for i, t in enumerate(tau):
        width = min(0.5, 1.0 / max(np.sqrt(E / t), 1e-12))
        z, w = gaussian_panel_rule(-10.0, 10.0, width, order=6)
        z1, z2 = np.meshgrid(z, z, indexing="ij")
        ww = np.outer(w, w)
        noise = np.sqrt(t) * np.stack([z1, z2], axis=-1)
        sil = act = 0.0
        if alpha < 1:
            p = sparc_denoise_section("bayes", noise, t, cfg) / np.sqrt(E)
            sil = np.sum(np.sum(p ** 2, axis=-1) * ww)
        if alpha > 0:
            sa = noise.copy()
            sa[..., 0] += np.sqrt(E)
            p = sparc_denoise_section("bayes", sa, t, cfg) / np.sqrt(E)
            act = np.sum(((1 - p[..., 0]) ** 2 + p[..., 1] ** 2) * ww)
        out[i] = E * (alpha * act + (1 - alpha) * sil)
    return out


def sparc_mse(kind: str, tau, cfg: SystemConfig, mc_samples: int = 20000, seed: int = 0):
    """psi(tau) = E || xbar - eta(xbar + sqrt(tau) z) ||^2.

    Deterministic quadrature for the marginal denoiser and for the Bayes
    denoiser when M = 2; Monte Carlo with fixed draws otherwise.
    """
    _check_kind(kind)
    if kind == "marginal":
        return _marginal_mse(tau, cfg)
    if cfg.M == 2:
        return _bayes_mse_m2(tau, cfg)
    zs = make_rng(seed, 0x5E).standard_normal((mc_samples, cfg.M))
    return _bayes_mse(tau, cfg, zs)


@dataclass(frozen=True)
class ScalarSEState:
    t: int
    phi: np.ndarray
    tau: np.ndarray
    psi: np.ndarray


def _phi_tau(psi, spec: CouplingSpec, mu_in: float, sigma2: float):
    phi = sigma2 + mu_in * (spec.W @ psi)
    tau = 1.0 / (spec.W.T @ (1.0 / phi))
    return phi, tau


def scalar_se_step(psi, cfg: SystemConfig, spec: CouplingSpec, kind: str, mse_fn):
    mu_in = inner_density(spec, cfg.mu)
    phi, tau = _phi_tau(psi, spec, mu_in, cfg.sigma2)
    return phi, tau, mse_fn(tau)


def scalar_se_run(cfg: SystemConfig, spec: CouplingSpec, kind: str, tol: float = 1e-8,
                  t_max: int = 200, mc_samples: int = 20000, seed: int = 0,
                  return_history: bool = False):
    """Iterate the scalar state evolution to its stopping rule.

    Stops at the first t where every block's psi changes by less than ``tol``
    (relative). Returns ``(state, t_final)`` where ``state`` carries the
    phi/tau used at ``t_final`` and the psi they produced; with
    ``return_history`` a list of all states is returned as well.
    """
    _check_kind(kind)
    if kind == "bayes" and cfg.M == 2:
        mse_fn = lambda tau: _bayes_mse_m2(tau, cfg)  # noqa: E731
    elif kind == "bayes":
        zs = make_rng(seed, 0x5E).standard_normal((mc_samples, cfg.M))
        mse_fn = lambda tau: _bayes_mse(tau, cfg, zs)  # noqa: E731
    else:
        mse_fn = lambda tau: _marginal_mse(tau, cfg)  # noqa: E731
    psi = np.full(spec.C, cfg.E)
    psi0 = psi.sum()
    hist = []
    state = None
    for t in range(t_max + 1):
        phi, tau, new = scalar_se_step(psi, cfg, spec, kind, mse_fn)
        state = ScalarSEState(t, phi, tau, new)
        hist.append(ScalarSEState(t, phi, tau, psi))
        if not np.all(np.isfinite(new)) or new.sum() > 1e3 * psi0:
            raise FloatingPointError(f"scalar SE diverged at t={t}")
        rel = np.max(np.abs(new - psi) / np.maximum(psi, 1e-300))
        psi = new
        if rel < tol:
            break
    return (state, state.t, hist) if return_history else (state, state.t)


# ---------------------------------------------------------------- AMP


@dataclass
class SparcInstance:
    A: np.ndarray
    x: np.ndarray  # (L, M)
    y: np.ndarray
    sigma2: float
    idx: np.ndarray  # transmitted column per user, -1 if silent

    @property
    def L(self):
        return self.x.shape[0]

    @property
    def Ka(self):
        return int(np.sum(self.idx >= 0))


def sample_sparc_instance(cfg: SystemConfig, spec: CouplingSpec, rng: np.random.Generator,
                          dtype=np.float64) -> SparcInstance:
    n, L, M = cfg.n, cfg.L, cfg.M
    if n is None or L is None:
        raise ValueError("simulation needs n and L")
    if M > MAX_SECTION_M:
        raise ValueError(f"simulation limited to M <= {MAX_SECTION_M}")
    r_a, r_s, r_n = rng.spawn(3)
    A = sample_sc_matrix(spec, n, L * M, r_a, dtype=dtype)
    active = r_s.random(L) < cfg.alpha
    cols = r_s.integers(0, M, size=L)
    idx = np.where(active, cols, -1)
    x = decisions_to_sections(idx, cfg)
    noise = np.sqrt(cfg.sigma2) * r_n.standard_normal(n)
    y = A @ x.ravel() + noise
    return SparcInstance(A, x, y, cfg.sigma2, idx)


@dataclass
class SparcIterates:
    t: int
    x: np.ndarray  # (L, M)
    z: np.ndarray
    s: np.ndarray | None
    phi_prev: np.ndarray | None


def sparc_amp_init(inst: SparcInstance) -> SparcIterates:
    return SparcIterates(0, np.zeros_like(inst.x), np.zeros_like(inst.y), None, None)


def sparc_amp_step(it: SparcIterates, inst: SparcInstance, spec: CouplingSpec,
                   se: ScalarSEState, cfg: SystemConfig, kind: str) -> SparcIterates:
    """One AMP iteration; ``se`` holds phi^t, tau^t and psi^t for this t."""
    n = inst.y.shape[0]
    L, M = inst.x.shape
    bm = block_maps(spec, n, L)
    mu_in = inner_density(spec, cfg.mu)
    xf = it.x.ravel()
    if it.phi_prev is None:
        z = inst.y - inst.A @ xf
    else:
        v = mu_in * (spec.W @ se.psi) / it.phi_prev
        z = inst.y - inst.A @ xf + v[bm.row_block] * it.z
    # (Q o A)^T z with Q_ij = tau_c / phi_r
    zr = z / se.phi[bm.row_block]
    g = (inst.A.T @ zr).reshape(L, M)
    s = it.x + se.tau[bm.col_block][:, None] * g
    tau_sec = se.tau[bm.col_block]
    x_new = sparc_denoise_section(kind, s, tau_sec, cfg)
    return SparcIterates(it.t + 1, x_new, z, s, se.phi.copy())


def run_sparc_amp(inst: SparcInstance, spec: CouplingSpec, cfg: SystemConfig, kind: str,
                  history: list[ScalarSEState], t_final: int | None = None):
    """Run AMP along a precomputed SE history; returns (iterates, hard decisions)."""
    it = sparc_amp_init(inst)
    T = len(history) - 1 if t_final is None else t_final
    for t in range(T + 1):
        it = sparc_amp_step(it, inst, spec, history[t], cfg, kind)
    bm = block_maps(spec, inst.y.shape[0], inst.L)
    dec = sparc_hard_decide(it.s, history[T].tau[bm.col_block], cfg)
    return it, dec


def section_errors(inst: SparcInstance, dec) -> ErrorTriple:
    return empirical_errors(inst.idx[:, None], np.asarray(dec)[:, None], silent=-1)
