"""CDMA-type scheme: BPSK rows, coupled signature matrix, matrix-valued AMP.

User ``l`` sends ``k`` bits as a row ``X_l`` in ``{+-sqrt(Eb)}^k`` (or the
zero row when silent), spread by its signature column of ``A``. The channel
output is ``Y = A X + noise`` with ``A`` of size ``n/k x L``. Decoding runs
AMP with one of three row-wise denoisers:

``bayes``
    exact posterior mean over the ``2^k + 1`` support points (``k <= 12``);
``marginal``
    entrywise posterior mean under the per-entry marginal prior;
``threshold``
    a chi-squared activity test on ``||s||^2 / k`` followed by entrywise
    BPSK estimates when the row is declared active.

The deterministic matrices ``Phi_r``, ``T_c`` driving the iteration come
from :mod:`maclab.matrix_se`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.special import logsumexp

from .core import ActivityModel, ErrorTriple, SystemConfig, empirical_errors
from .coupling import CouplingSpec, block_maps, inner_density, sample_sc_matrix, sc_rmatvec

__all__ = ["DenoiserKind", "CdmaInstance", "CdmaAmpState", "MAX_BAYES_K",
           "sample_cdma_instance", "denoise_rows", "denoise_row", "hard_decide_rows",
           "hard_decide_row", "threshold_active", "alpha_star", "cdma_amp_init",
           "cdma_amp_step", "run_cdma_amp", "cdma_errors"]

MAX_BAYES_K = 12
# diagonal floor for exactly converged coordinates, relative to Eb
DIAG_FLOOR = 1e-12
_CHUNK = 4096


@dataclass(frozen=True)
class DenoiserKind:
    """Denoiser choice; ``alpha_hat`` only matters for ``threshold``.

    ``alpha_hat=None`` means the true activity probability.
    """

    name: str
    alpha_hat: float | None = None

    def __post_init__(self):
        if self.name not in ("bayes", "marginal", "threshold"):
            raise ValueError(f"unknown denoiser {self.name!r}")
        if self.alpha_hat is not None:
            if self.name != "threshold":
                raise ValueError("alpha_hat applies to the threshold denoiser only")
            if not 0.0 < self.alpha_hat <= 1.0:
                raise ValueError("alpha_hat must lie in (0, 1]")

    @classmethod
    def parse(cls, text: str) -> "DenoiserKind":
        """``bayes``, ``marginal``, ``threshold`` or ``threshold:<alpha_hat>``."""
        name, _, rest = text.partition(":")
        return cls(name, float(rest) if rest else None)

    def alpha_for(self, cfg: SystemConfig) -> float:
        return cfg.alpha if self.alpha_hat is None else self.alpha_hat

    def __str__(self):
        if self.alpha_hat is None:
            return self.name
        return f"{self.name}:{self.alpha_hat:g}"


def _as_kind(kind) -> DenoiserKind:
    return kind if isinstance(kind, DenoiserKind) else DenoiserKind.parse(str(kind))


# ---------------------------------------------------------------- instances


@dataclass
class CdmaInstance:
    A: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    noise: np.ndarray
    active_mask: np.ndarray

    @property
    def Ka(self) -> int:
        return int(self.active_mask.sum())

    @property
    def L(self) -> int:
        return self.X.shape[0]


def sample_cdma_instance(cfg: SystemConfig, spec: CouplingSpec, rng: np.random.Generator,
                         dtype=np.float64, activity: ActivityModel | None = None) -> CdmaInstance:
    """Draw signals, a coupled signature matrix and noise.

    Users are active independently with probability ``cfg.alpha`` unless an
    explicit ``activity`` model is given, in which case ``Ka`` is drawn from
    its pmf and the active set is uniform among sets of that size.
    """
    if cfg.n is None or cfg.L is None:
        raise ValueError("CDMA instances need n and L")
    k, L = cfg.k, cfg.L
    if cfg.n % k:
        raise ValueError(f"k={k} must divide n={cfg.n}")
    nt = cfg.n // k
    block_maps(spec, nt, L)
    if activity is None:
        active = rng.random(L) < cfg.alpha
    else:
        if activity.L != L:
            raise ValueError("activity model has the wrong number of users")
        ka = int(rng.choice(L + 1, p=activity.pmf))
        active = np.zeros(L, dtype=bool)
        active[rng.permutation(L)[:ka]] = True
    signs = 2 * rng.integers(0, 2, size=(L, k), dtype=np.int8) - 1
    X = (np.sqrt(cfg.Eb) * signs * active[:, None]).astype(dtype)
    A = sample_sc_matrix(spec, nt, L, rng, dtype=dtype)
    noise = (np.sqrt(cfg.sigma2) * rng.standard_normal((nt, k))).astype(dtype)
    Y = A @ X + noise
    return CdmaInstance(A, X, Y, noise, active)


# ---------------------------------------------------------------- denoisers


def _clamped_diag(T, Eb):
    return np.maximum(np.diag(T), DIAG_FLOOR * Eb)


def alpha_star(Tbar: float, Eb: float, k: int) -> float:
    """Activity level above which the threshold test always declares H1."""
    q = np.sqrt(Tbar / (Tbar + 2 * Eb)) * np.exp(-Eb * k / (8 * Tbar))
    return float(1.0 / (q + 1.0))


def _test_coefficients(T, cfg: SystemConfig, alpha_hat):
    """(Tbar, c, always_h1) of the quadratic activity test Y^2 - Tbar Y + c < 0 => H0."""
    k, Eb = cfg.k, cfg.Eb
    a = cfg.alpha if alpha_hat is None else alpha_hat
    Tb = float(np.mean(_clamped_diag(T, Eb)))
    if a >= alpha_star(Tb, Eb, k):
        return Tb, 0.0, True
    if a <= 0:
        return Tb, np.inf, False
    lg = np.log((1 - a) / a * np.sqrt((Tb + 2 * Eb) / Tb))
    c = (-Tb * Eb ** 2 - Tb * (Tb + 2 * Eb) * (4 * Tb / k) * lg) / (2 * Eb)
    return Tb, c, False


def threshold_active(S, T, cfg: SystemConfig, alpha_hat: float | None = None):
    """Boolean H1 decisions of the chi-squared activity test for rows of ``S``.

    Uses the Gaussian approximations of the statistic ``Y = ||s||^2/k``
    under both hypotheses with the average variance of ``T``. Equality in
    the quadratic test resolves to H1.
    """
    S = np.atleast_2d(S)
    Tb, c, always = _test_coefficients(T, cfg, alpha_hat)
    if always:
        return np.ones(S.shape[0], dtype=bool)
    if not np.isfinite(c):
        return np.zeros(S.shape[0], dtype=bool)
    Y = np.einsum("ij,ij->i", S, S, dtype=float) / cfg.k
    return ~(Y * Y - Tb * Y + c < 0)


def _threshold_surface_term(S, T, cfg: SystemConfig, alpha_hat):
    """Boundary part of the mean Jacobian of the threshold denoiser.

    The output jumps from 0 to the H1 estimate f(s) where Y = ||s||^2/k
    crosses a root y of the test, adding f(s) (2 s / k)^T delta(Y - y),
    signed by the crossing direction. The delta is estimated with a
    Gaussian kernel on the realised statistics (Silverman bandwidth).
    """
    k, Eb = cfg.k, cfg.Eb
    Tb, c, always = _test_coefficients(T, cfg, alpha_hat)
    out = np.zeros((k, k))
    m = S.shape[0]
    if always or not np.isfinite(c) or m < 2:
        return out
    disc = Tb * Tb - 4 * c
    if disc <= 0:
        return out
    Y = np.einsum("ij,ij->i", S, S) / k
    q75, q25 = np.percentile(Y, [75, 25])
    spread = min(float(Y.std()), (q75 - q25) / 1.34)
    if spread <= 0:
        return out
    h = 0.9 * spread * m ** -0.2
    d = _clamped_diag(T, Eb)
    f = np.sqrt(Eb) * np.tanh(np.sqrt(Eb) * S / d)
    # H1 above the larger root, and below the smaller one when it is positive
    for y, sign in (((Tb + np.sqrt(disc)) / 2, 1.0), ((Tb - np.sqrt(disc)) / 2, -1.0)):
        if y <= 0:
            continue
        w = np.exp(-0.5 * ((Y - y) / h) ** 2) / (h * np.sqrt(2 * np.pi))
        out += sign * (f * w[:, None]).T @ (2.0 * S / k) / m
    return out


def _support(k: int, Eb: float) -> np.ndarray:
    bits = (np.arange(2 ** k)[:, None] >> np.arange(k)[None, :]) & 1
    return np.sqrt(Eb) * (2.0 * bits - 1.0)


def _bayes_logits(S, T, cfg):
    """Log posterior weights (unnormalised): nonzero patterns, then the zero atom."""
    k = cfg.k
    if k > MAX_BAYES_K:
        raise ValueError(f"bayes denoiser is limited to k <= {MAX_BAYES_K}")
    try:
        cho = linalg.cho_factor(T)
    except linalg.LinAlgError as exc:
        raise ValueError("T must be positive definite") from exc
    Xs = _support(k, cfg.Eb)
    B = linalg.cho_solve(cho, Xs.T)  # T^{-1} x for every pattern
    quad = 0.5 * np.einsum("pi,ip->p", Xs, B)
    a = cfg.alpha
    la = np.log(a / 2 ** k) if a > 0 else -np.inf
    l0 = np.log1p(-a) if a < 1 else -np.inf
    lg = np.asarray(S, dtype=float) @ B - quad + la
    return lg, l0, Xs, cho


def _check_pd(T):
    T = np.asarray(T, dtype=float)
    if T.ndim != 2 or T.shape[0] != T.shape[1] or not np.allclose(T, T.T, rtol=1e-10, atol=0):
        raise ValueError("T must be a symmetric square matrix")
    if np.any(np.linalg.eigvalsh(T) <= 0):
        raise ValueError("T must be positive definite")
    return T


def denoise_rows(kind, S, T, cfg: SystemConfig, jacobian: str | None = "mean"):
    """Apply a row denoiser to every row of ``S`` with noise covariance ``T``.

    Returns ``(Xhat, J)`` where ``J`` is the average Jacobian over rows
    (``jacobian="mean"``), the per-row Jacobians (``"full"``) or ``None``.
    """
    kind = _as_kind(kind)
    S = np.atleast_2d(np.asarray(S, dtype=float))
    m, k = S.shape
    if k != cfg.k:
        raise ValueError(f"rows have length {k}, expected k={cfg.k}")
    T = _check_pd(T)
    Eb = cfg.Eb
    rE = np.sqrt(Eb)
    if kind.name == "bayes":
        out = np.empty_like(S)
        full = np.empty((m, k, k)) if jacobian == "full" else None
        msum = np.zeros((k, k))
        for lo in range(0, m, _CHUNK):
            sl = slice(lo, min(lo + _CHUNK, m))
            lg, l0, Xs, cho = _bayes_logits(S[sl], T, cfg)
            lse = np.logaddexp(logsumexp(lg, axis=1), l0)
            w = np.exp(lg - lse[:, None])
            mean = w @ Xs
            out[sl] = mean
            if jacobian == "full":
                cov = np.einsum("mp,pi,pj->mij", w, Xs, Xs) - mean[:, :, None] * mean[:, None, :]
                full[sl] = cov @ linalg.cho_solve(cho, np.eye(k))
            elif jacobian == "mean":
                msum += (Xs.T * w.sum(axis=0)) @ Xs - mean.T @ mean
        if jacobian == "mean":
            cho = linalg.cho_factor(T)
            # Cov T^{-1} = (T^{-1} Cov)^T
            return out, linalg.cho_solve(cho, msum / m).T
        return out, full
    d = _clamped_diag(T, Eb)
    if kind.name == "marginal":
        a = cfg.alpha
        la = np.log(a / 2) if a > 0 else -np.inf
        l0 = np.log1p(-a) if a < 1 else -np.inf
        with np.errstate(invalid="ignore"):
            lp = la + (rE * S - Eb / 2) / d
            lm = la + (-rE * S - Eb / 2) / d
        lse = np.logaddexp(np.logaddexp(lp, lm), l0)
        pp, pm = np.exp(lp - lse), np.exp(lm - lse)
        xh = rE * (pp - pm)
        dj = (Eb * (pp + pm) - xh ** 2) / d
    else:
        h1 = threshold_active(S, T, cfg, kind.alpha_hat)
        th = np.tanh(rE * S / d)
        xh = np.where(h1[:, None], rE * th, 0.0)
        dj = np.where(h1[:, None], Eb * (1 - th ** 2) / d, 0.0)
    if jacobian == "mean":
        J = np.diag(dj.mean(axis=0))
        if kind.name == "threshold":
            J = J + _threshold_surface_term(S, T, cfg, kind.alpha_hat)
        return xh, J
    if jacobian == "full":
        J = np.zeros((m, k, k))
        J[:, np.arange(k), np.arange(k)] = dj
        return xh, J
    return xh, None


def denoise_row(kind, s, T, cfg: SystemConfig):
    """Single-row denoiser: ``(xhat, jacobian)``."""
    xh, J = denoise_rows(kind, np.asarray(s, dtype=float)[None, :], T, cfg, jacobian="full")
    return xh[0], J[0]


def hard_decide_rows(kind, S, T, cfg: SystemConfig):
    """Hard decisions in ``{+-sqrt(Eb)}^k`` or the zero row.

    ``bayes`` is the exact MAP over the prior support, ``threshold`` applies
    the activity test then entrywise signs, and ``marginal`` takes the
    entrywise MAP over ``{0, +-sqrt(Eb)}`` (so a row can mix zero and
    nonzero entries; it counts as silent only when all entries are zero).
    Ties go to the nonzero alternative.
    """
    kind = _as_kind(kind)
    S = np.atleast_2d(np.asarray(S, dtype=float))
    T = _check_pd(T)
    Eb = cfg.Eb
    rE = np.sqrt(Eb)
    sgn = np.where(S >= 0, rE, -rE)
    if kind.name == "bayes":
        out = np.empty_like(S)
        for lo in range(0, S.shape[0], _CHUNK):
            sl = slice(lo, min(lo + _CHUNK, S.shape[0]))
            lg, l0, Xs, _ = _bayes_logits(S[sl], T, cfg)
            j = np.argmax(lg, axis=1)
            best = lg[np.arange(lg.shape[0]), j]
            out[sl] = np.where((best >= l0)[:, None], Xs[j], 0.0)
        return out
    if kind.name == "threshold":
        h1 = threshold_active(S, T, cfg, kind.alpha_hat)
        return np.where(h1[:, None], sgn, 0.0)
    d = _clamped_diag(T, Eb)
    a = cfg.alpha
    la = np.log(a / 2) if a > 0 else -np.inf
    l0 = np.log1p(-a) if a < 1 else -np.inf
    # the better sign wins the nonzero side: sqrt(Eb)|s| - Eb/2
    lnz = la + (rE * np.abs(S) - Eb / 2) / d
    return np.where(lnz >= l0, sgn, 0.0)


def hard_decide_row(kind, s, T, cfg: SystemConfig):
    return hard_decide_rows(kind, np.asarray(s, dtype=float)[None, :], T, cfg)[0]


# ---------------------------------------------------------------- AMP


@dataclass
class CdmaAmpState:
    """AMP iterates at iteration ``t`` together with the SE state that built them.

    ``Q``, ``jbar`` and ``Zt`` are kept because the next debiasing term needs
    them; ``St`` is the effective observation ``X^t + V^t``.
    """

    t: int
    Xt: np.ndarray
    Zt: np.ndarray
    St: np.ndarray
    Q: np.ndarray  # (R, C, k, k)
    Ztilde: np.ndarray
    V: np.ndarray
    se: object
    jbar: np.ndarray | None = None  # (C, k, k), mean Jacobian of the step that made Xt


def _q_blocks(se) -> np.ndarray:
    """Q_{r,c} = Phi_r^{-1} T_c for every block pair."""
    Phi, T = np.asarray(se.Phi), np.asarray(se.T)
    Pinv = np.linalg.inv(Phi)
    return np.einsum("rij,cjk->rcik", Pinv, T)


def _apply_v(inst, spec, Z, Q):
    dt = inst.A.dtype
    wts = [[Q[r, c].astype(dt) for c in range(spec.C)] for r in range(spec.R)]
    return sc_rmatvec(spec, inst.A, Z, weights=wts)


def _denoise_blocks(kind, S, se, spec, cfg, L):
    Lb = L // spec.C
    Xn = np.empty((L, cfg.k))
    J = np.empty((spec.C, cfg.k, cfg.k))
    for c in range(spec.C):
        sl = slice(c * Lb, (c + 1) * Lb)
        Xn[sl], J[c] = denoise_rows(kind, S[sl], se.T[c], cfg, jacobian="mean")
    return Xn, J


def cdma_amp_init(inst: CdmaInstance, spec: CouplingSpec, se, cfg: SystemConfig) -> CdmaAmpState:
    """Iteration 0: X^0 = 0, Z^0 = Y, S^0 = V^0."""
    dt = inst.A.dtype
    X0 = np.zeros(inst.X.shape, dtype=dt)
    Z0 = inst.Y.copy()
    Q = _q_blocks(se)
    V = _apply_v(inst, spec, Z0, Q)
    return CdmaAmpState(0, X0, Z0, X0 + V, Q, np.zeros_like(Z0), V, se)


def cdma_amp_step(state: CdmaAmpState, inst: CdmaInstance, spec: CouplingSpec, se_next,
                  cfg: SystemConfig, kind) -> CdmaAmpState:
    """Advance from iteration t to t+1.

    Denoises ``S^t`` with ``T^t`` (held by ``state.se``), forms the debiasing
    term from the realised average Jacobians, then builds ``Z^{t+1}``,
    ``V^{t+1}`` and ``S^{t+1}`` using ``se_next``.
    """
    kind = _as_kind(kind)
    L, k = inst.X.shape
    nt = inst.Y.shape[0]
    if inst.A.shape != (nt, L) or k != cfg.k:
        raise ValueError("instance dimensions do not match the configuration")
    bm = block_maps(spec, nt, L)
    dt = inst.A.dtype
    Xn, J = _denoise_blocks(kind, state.St.astype(float), state.se, spec, cfg, L)
    Xn = Xn.astype(dt)
    kmu = k * inner_density(spec, cfg.mu)
    Zt = np.empty_like(state.Zt)
    for r in range(spec.R):
        Mr = kmu * sum(spec.W[r, c] * state.Q[r, c] @ J[c].T for c in range(spec.C)
                       if spec.W[r, c] != 0)
        Zt[bm.row_range(r)] = state.Zt[bm.row_range(r)] @ np.asarray(Mr, dtype=dt)
    AX = np.zeros_like(inst.Y)
    for r, c in spec.nonzero_blocks:
        AX[bm.row_range(r)] += inst.A[bm.row_range(r), bm.col_range(c)] @ Xn[bm.col_range(c)]
    Z = inst.Y - AX + Zt
    Q = _q_blocks(se_next)
    V = _apply_v(inst, spec, Z, Q)
    return CdmaAmpState(state.t + 1, Xn, Z, Xn + V, Q, Zt, V, se_next, jbar=J)


def run_cdma_amp(inst: CdmaInstance, spec: CouplingSpec, cfg: SystemConfig, kind,
                 history, t_final: int | None = None):
    """Run AMP along a precomputed SE ``history`` (list of states, index = t).

    Returns ``(state, decisions)``; decisions are ``h_T(S^T)`` with ``T^T``.
    """
    kind = _as_kind(kind)
    T = len(history) - 1 if t_final is None else int(t_final)
    if T >= len(history):
        raise ValueError("SE history is shorter than t_final")
    st = cdma_amp_init(inst, spec, history[0], cfg)
    for t in range(T):
        st = cdma_amp_step(st, inst, spec, history[t + 1], cfg, kind)
    Lb = inst.L // spec.C
    dec = np.empty(inst.X.shape)
    S = st.St.astype(float)
    for c in range(spec.C):
        sl = slice(c * Lb, (c + 1) * Lb)
        dec[sl] = hard_decide_rows(kind, S[sl], history[T].T[c], cfg)
    return st, dec


def cdma_errors(inst: CdmaInstance, dec) -> ErrorTriple:
    """Empirical error triple; rows are compared through their sign patterns
    so that float32 signals match float64 decisions."""
    return empirical_errors(np.sign(inst.X).astype(np.int8), np.sign(dec).astype(np.int8))
