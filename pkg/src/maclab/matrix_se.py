"""Matrix-valued state evolution for the CDMA decoder and its error predictions.

For each row block ``r`` and column block ``c`` the recursion tracks

    Phi_r = sigma2 I + k mu_in sum_c W[r, c] Psi_c
    T_c   = ( sum_r W[r, c] Phi_r^{-1} )^{-1}
    Psi_c = E[(eta(Xbar + G_c) - Xbar)(eta(Xbar + G_c) - Xbar)^T],  G_c ~ N(0, T_c)

starting from ``Psi_c = alpha Eb I``. The expectation is estimated by Monte
Carlo with common random numbers (the same base draws at every iteration),
except for ``k = 1`` where a composite quadrature rule is exact to high
accuracy.
"""
from __future__ import annotations

import csv
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from .cdma import DenoiserKind, _as_kind, denoise_rows, hard_decide_rows
from .core import ErrorTriple, SystemConfig, gaussian_panel_rule, make_rng
from .coupling import CouplingSpec, inner_density

__all__ = ["MatrixSEState", "SEDraws", "make_se_draws", "se_init", "matrix_se_step",
           "se_fixed_point", "predict_errors", "PredictedErrors", "write_trajectory_csv"]

_CHUNK = 20000
# traces below this fraction of k*Eb count as converged to zero
_ZERO_TRACE = 1e-14


@dataclass(frozen=True)
class MatrixSEState:
    t: int
    Phi: np.ndarray  # (R, k, k)
    T: np.ndarray  # (C, k, k)
    Psi: np.ndarray  # (C, k, k)
    Xi: np.ndarray  # (C, k, k)

    @property
    def trace_psi(self) -> np.ndarray:
        return np.trace(self.Psi, axis1=1, axis2=2)

    @property
    def trace_t(self) -> np.ndarray:
        return np.trace(self.T, axis1=1, axis2=2)


@dataclass(frozen=True)
class SEDraws:
    """Base randomness shared across iterations: BPSK signs, activity and unit Gaussians."""

    signs: np.ndarray  # (N, k) int8
    active: np.ndarray  # (N,) bool
    z: np.ndarray  # (N, k)

    @property
    def n(self) -> int:
        return self.z.shape[0]


def make_se_draws(cfg: SystemConfig, mc_samples: int, rng: np.random.Generator) -> SEDraws:
    if mc_samples < 1:
        raise ValueError("mc_samples must be positive")
    signs = (2 * rng.integers(0, 2, size=(mc_samples, cfg.k), dtype=np.int8) - 1)
    active = rng.random(mc_samples) < cfg.alpha
    z = rng.standard_normal((mc_samples, cfg.k))
    return SEDraws(signs, active, z)


def _sym_psd(P):
    P = 0.5 * (P + np.swapaxes(P, -1, -2))
    w, V = np.linalg.eigh(P)
    return (V * np.maximum(w, 0.0)[..., None, :]) @ np.swapaxes(V, -1, -2)


def _phi_t(Psi, cfg: SystemConfig, spec: CouplingSpec):
    k = cfg.k
    kmu = k * inner_density(spec, cfg.mu)
    Phi = cfg.sigma2 * np.eye(k)[None] + kmu * np.einsum("rc,cij->rij", spec.W, Psi)
    Phi = 0.5 * (Phi + np.swapaxes(Phi, 1, 2))
    Pinv = np.linalg.inv(Phi)
    S = np.einsum("rc,rij->cij", spec.W, Pinv)
    if np.any(np.linalg.cond(S) > 1e14):
        raise np.linalg.LinAlgError("sum_r W[r,c] Phi_r^{-1} is singular")
    T = np.linalg.inv(S)
    return Phi, 0.5 * (T + np.swapaxes(T, 1, 2))


def se_init(cfg: SystemConfig, spec: CouplingSpec, Xi=None) -> MatrixSEState:
    """State at t = 0 with Psi^0 = Xi (default alpha Eb I in every block)."""
    k = cfg.k
    if Xi is None:
        Xi = np.broadcast_to(cfg.alpha * cfg.Eb * np.eye(k), (spec.C, k, k)).copy()
    Xi = np.asarray(Xi, dtype=float)
    if Xi.shape != (spec.C, k, k):
        raise ValueError("Xi must have shape (C, k, k)")
    Phi, T = _phi_t(Xi, cfg, spec)
    return MatrixSEState(0, Phi, T, Xi.copy(), Xi)


def _psi_mc(kind, T, cfg, draws: SEDraws):
    k = cfg.k
    C = np.linalg.cholesky(T)
    rE = np.sqrt(cfg.Eb)
    acc = np.zeros((k, k))
    for lo in range(0, draws.n, _CHUNK):
        sl = slice(lo, min(lo + _CHUNK, draws.n))
        X = rE * draws.signs[sl] * draws.active[sl, None]
        S = X + draws.z[sl] @ C.T
        Xh, _ = denoise_rows(kind, S, T, cfg, jacobian=None)
        D = Xh - X
        acc += D.T @ D
    return acc / draws.n


def _scalar_rule(t, Eb):
    width = min(0.5, 1.0 / max(np.sqrt(Eb / t), 1e-12))
    return gaussian_panel_rule(-12.0, 12.0, width)


def _psi_quad_k1(kind, T, cfg):
    """Psi for k = 1 by quadrature over the three-point prior."""
    t = float(T[0, 0])
    rE = np.sqrt(cfg.Eb)
    z, w = _scalar_rule(t, cfg.Eb)
    g = np.sqrt(t) * z
    tot = 0.0
    a = cfg.alpha
    if a < 1:
        xh, _ = denoise_rows(kind, g[:, None], T, cfg, jacobian=None)
        tot += (1 - a) * np.sum(xh[:, 0] ** 2 * w)
    if a > 0:
        # symmetric in the sign, so +sqrt(Eb) suffices
        xh, _ = denoise_rows(kind, (rE + g)[:, None], T, cfg, jacobian=None)
        tot += a * np.sum((xh[:, 0] - rE) ** 2 * w)
    return np.array([[tot]])


def matrix_se_step(state: MatrixSEState, cfg: SystemConfig, spec: CouplingSpec, kind,
                   mc_samples: int = 200000, rng: np.random.Generator | None = None,
                   draws: SEDraws | None = None) -> MatrixSEState:
    """One SE iteration: Psi^{t+1} from T^t, then Phi^{t+1}, T^{t+1}.

    Pass ``draws`` to reuse common random numbers; otherwise fresh draws of
    size ``mc_samples`` come from ``rng``. For ``k = 1`` the update uses
    quadrature and ignores both.
    """
    kind = _as_kind(kind)
    if cfg.k == 1:
        Psi = np.stack([_psi_quad_k1(kind, state.T[c], cfg) for c in range(spec.C)])
    else:
        if draws is None:
            if rng is None:
                raise ValueError("need rng or draws for the Monte Carlo update")
            draws = make_se_draws(cfg, mc_samples, rng)
        Psi = np.stack([_psi_mc(kind, state.T[c], cfg, draws) for c in range(spec.C)])
    Psi = _sym_psd(Psi)
    Phi, T = _phi_t(Psi, cfg, spec)
    return MatrixSEState(state.t + 1, Phi, T, Psi, state.Xi)


def se_fixed_point(cfg: SystemConfig, spec: CouplingSpec, kind, tol: float = 1e-8,
                   t_max: int = 200, mc_samples: int = 200000, seed: int = 0,
                   return_history: bool = False):
    """Iterate the SE until every block trace of Psi moves by less than ``tol``.

    Returns ``(state, t_final)`` (and the list of states with
    ``return_history``). The Monte Carlo draws are fixed across iterations.
    Raises ``FloatingPointError`` if a trace grows beyond 1e3 times its
    initial value.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    kind = _as_kind(kind)
    draws = None if cfg.k == 1 else make_se_draws(cfg, mc_samples, make_rng(seed, 0x5E))
    st = se_init(cfg, spec)
    hist = [st]
    tr0 = st.trace_psi.copy()
    floor = _ZERO_TRACE * cfg.k * cfg.Eb
    for _ in range(t_max):
        new = matrix_se_step(st, cfg, spec, kind, draws=draws)
        tr_old, tr_new = st.trace_psi, new.trace_psi
        if not np.all(np.isfinite(tr_new)) or np.any(tr_new > 1e3 * tr0):
            raise FloatingPointError(
                f"matrix SE diverged at t={new.t}: trace(Psi) = {tr_new.max():.3g}, "
                f"initial {tr0.max():.3g}")
        hist.append(new)
        st = new
        rel = np.abs(tr_new - tr_old) / np.maximum(tr_old, floor)
        if np.all(rel < tol) or np.all(tr_new <= floor):
            break
    return (st, st.t, hist) if return_history else (st, st.t)


@dataclass(frozen=True)
class PredictedErrors:
    triple: ErrorTriple
    se: ErrorTriple  # Monte Carlo standard errors of each component
    combined_se: float
    samples: int


def _error_counts(kind, T, cfg, signs, z):
    """Counts for one block: missed, wrong, and nonzero decisions on pure noise."""
    rE = np.sqrt(cfg.Eb)
    Cf = np.linalg.cholesky(T)
    md = aue = fa = 0
    for lo in range(0, z.shape[0], _CHUNK):
        sl = slice(lo, min(lo + _CHUNK, z.shape[0]))
        G = z[sl] @ Cf.T
        X = rE * signs[sl]
        h = hard_decide_rows(kind, X + G, T, cfg)
        zero = ~np.any(h != 0, axis=1)
        md += int(zero.sum())
        aue += int(np.sum(~zero & np.any(h != X, axis=1)))
        h0 = hard_decide_rows(kind, G, T, cfg)
        fa += int(np.sum(np.any(h0 != 0, axis=1)))
    return md, aue, fa


def _combine(cfg, counts, N):
    md = np.array([c[0] for c in counts]) / N
    aue = np.array([c[1] for c in counts]) / N
    q1 = 1.0 - md  # P(h(Xa + G) != 0) per block
    q0 = np.array([c[2] for c in counts]) / N
    a = cfg.alpha
    p_md, p_aue = md.mean(), aue.mean()
    Nt = N * len(counts)
    se_md = np.sqrt(p_md * (1 - p_md) / Nt)
    se_aue = np.sqrt(p_aue * (1 - p_aue) / Nt)
    s1, s0 = q1.sum(), q0.sum()
    if a >= 1 or s0 == 0:
        p_fa, se_fa = 0.0, 0.0
    else:
        r = a * s1 / ((1 - a) * s0)
        p_fa = 1.0 / (r + 1.0)
        m1, m0 = s1 / len(counts), s0 / len(counts)
        # delta method on ln r
        v = (1 - m1) / (Nt * max(m1, 1e-300)) + (1 - m0) / (Nt * m0)
        se_fa = p_fa * (1 - p_fa) * np.sqrt(v)
    tri = ErrorTriple(float(p_md), float(p_fa), float(p_aue))
    se = ErrorTriple(float(min(se_md, 1)), float(min(se_fa, 1)), float(min(se_aue, 1)))
    big = se.p_md if tri.p_md >= tri.p_fa else se.p_fa
    return tri, se, float(np.hypot(big, se.p_aue))


def predict_errors(state: MatrixSEState, cfg: SystemConfig, kind, mc_samples: int = 200000,
                   seed: int = 0, rel_se: float | None = 0.02, max_samples: int = 3_200_000,
                   rng: np.random.Generator | None = None) -> PredictedErrors:
    """Asymptotic (pMD, pFA, pAUE) of the hard decisions at ``state``.

    Block-averaged Monte Carlo over ``Xbar_a + G_c`` and ``G_c``. With
    ``rel_se`` the sample count doubles until the combined error has that
    relative standard error or ``max_samples`` is reached. Draws are common
    across blocks and, for a fixed ``seed``, across calls.
    """
    kind = _as_kind(kind)
    rng = make_rng(seed, 0xE7) if rng is None else rng
    k = cfg.k
    N = int(mc_samples)
    signs = 2 * rng.integers(0, 2, size=(N, k), dtype=np.int8) - 1
    z = rng.standard_normal((N, k))
    counts = [_error_counts(kind, state.T[c], cfg, signs, z) for c in range(state.T.shape[0])]
    total = N
    while True:
        tri, se, cse = _combine(cfg, counts, total)
        done = rel_se is None or total >= max_samples
        if not done and tri.combined > 0 and cse <= rel_se * tri.combined:
            done = True
        if done:
            return PredictedErrors(tri, se, cse, total)
        # double: draw as many fresh samples again
        signs = 2 * rng.integers(0, 2, size=(total, k), dtype=np.int8) - 1
        z = rng.standard_normal((total, k))
        more = [_error_counts(kind, state.T[c], cfg, signs, z) for c in range(state.T.shape[0])]
        counts = [tuple(a + b for a, b in zip(c1, c2)) for c1, c2 in zip(counts, more)]
        total *= 2


def write_trajectory_csv(history, path) -> None:
    """Columns ``t, block, trace_Psi, trace_T``; written atomically."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".se-", suffix=".csv")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "block", "trace_Psi", "trace_T"])
            for st in history:
                for c, (tp, tt) in enumerate(zip(st.trace_psi, st.trace_t)):
                    w.writerow([st.t, c, repr(float(tp)), repr(float(tt))])
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise
