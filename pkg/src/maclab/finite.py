"""Finite-length achievability bounds for random coding with ML decoding.

The bound is a sum over cells (ka, ka', t, t_hat, psi). Cell geometry does
not depend on the reduced power P', so cells are enumerated once per
configuration; error exponents are then evaluated for the distinct
(t, t_hat, R, min(ka, ka'_up), P1 multiplier) keys only, vectorised.
"""
from __future__ import annotations

import functools
import itertools
import logging
import math
from dataclasses import dataclass, field
from math import comb

import numpy as np
from scipy import special

from .core import ActivityModel, ErrorTriple, empirical_errors, golden_section_max, golden_section_max_vec

__all__ = ["FiniteBoundConfig", "BoundResult", "compute_tilde_p", "compute_E0",
           "compute_exponent", "compute_p_t_that", "compute_xi", "compute_nu",
           "compute_nu_exact", "enumerate_cells", "compute_bound_triple",
           "compute_error_floors", "ml_oracle_decode", "sample_oracle_instance",
           "oracle_trials", "MAX_L"]

log = logging.getLogger(__name__)

MAX_L = 200


@dataclass(frozen=True)
class FiniteBoundConfig:
    """Parameters of one finite-length evaluation (noise variance 1).

    ``pprime_policy`` is ``"optimize"`` (golden-section over (0, P)) or
    ``"fixed"``, in which case ``pprime_frac`` sets P' = frac * P.
    """

    n: int
    L: int
    k: int
    ebn0_db: float
    activity: ActivityModel
    kl: int
    ku: int
    rl: int
    ru: int
    pprime_policy: str = "fixed"
    pprime_frac: float = 0.8

    def __post_init__(self):
        if not 0 <= self.kl <= self.ku <= self.L:
            raise ValueError("need 0 <= kl <= ku <= L")
        if self.rl < 0 or self.ru < 0:
            raise ValueError("decoding radii must be nonnegative")
        if self.activity.L != self.L:
            raise ValueError("activity model defined for a different L")
        if self.pprime_policy not in ("fixed", "optimize"):
            raise ValueError("pprime_policy must be 'fixed' or 'optimize'")
        if not 0 < self.pprime_frac < 1:
            raise ValueError("pprime_frac must lie in (0,1)")

    @classmethod
    def from_tail(cls, n, L, k, ebn0_db, activity, pbar, rl, ru, **kw):
        kl, ku = activity.interval_for_tail(pbar)
        return cls(n, L, k, ebn0_db, activity, kl, ku, rl, ru, **kw)

    @property
    def M(self) -> int:
        return 2 ** self.k

    @property
    def P(self) -> float:
        # Eb/N0 = nP/(2k) with N0 = 2
        return 2.0 * self.k * 10 ** (self.ebn0_db / 10) / self.n

    @property
    def pbar(self) -> float:
        return self.activity.tail_mass(self.kl, self.ku)

    def replace(self, **kw) -> "FiniteBoundConfig":
        d = dict(n=self.n, L=self.L, k=self.k, ebn0_db=self.ebn0_db, activity=self.activity,
                 kl=self.kl, ku=self.ku, rl=self.rl, ru=self.ru,
                 pprime_policy=self.pprime_policy, pprime_frac=self.pprime_frac)
        d.update(kw)
        return FiniteBoundConfig(**d)


def _pos(x):
    return np.maximum(x, 0)


def _ln_binom(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return special.gammaln(a + 1) - special.gammaln(b + 1) - special.gammaln(a - b + 1)


def okap_ukap(kap, fbc: FiniteBoundConfig):
    return np.minimum(fbc.ku, kap + fbc.ru), np.maximum(fbc.kl, kap - fbc.rl)


# ---------------------------------------------------------------- scalar pieces


def compute_tilde_p(fbc: FiniteBoundConfig, pprime: float) -> float:
    P = fbc.P
    gam = special.gammaincc(fbc.n / 2, fbc.n * P / (2 * pprime))
    return fbc.pbar + fbc.activity.mean * float(gam)


def compute_nu(tmin: int, psi: int, R: int, M: int):
    """(ln nu(tmin, psi), ln nu(tmin)) in the log domain."""
    psibar = min(tmin, R - tmin)
    if not 0 <= psi <= psibar:
        raise ValueError(f"psi={psi} outside [0, {psibar}]")
    lt = _ln_nu_terms(tmin, R, M)
    return float(lt[psi]), float(special.logsumexp(lt))


def _ln_nu_terms(tmin, R, M):
    psibar = min(tmin, R - tmin)
    ps = np.arange(psibar + 1)
    with np.errstate(divide="ignore"):
        lm1 = math.log(M - 1) if M > 1 else -np.inf
        t_rest = (tmin - ps) * lm1 if M > 1 else np.where(ps == tmin, 0.0, -np.inf)
    return (_ln_binom(R - tmin, ps) + ps * math.log(M) + _ln_binom(tmin, tmin - ps) + t_rest)


def compute_nu_exact(tmin: int, psi: int, R: int, M: int) -> int:
    """nu(tmin, psi) as an exact integer."""
    return comb(R - tmin, psi) * M ** psi * comb(tmin, tmin - psi) * (M - 1) ** (tmin - psi)


def _mean_psi(tmin, R, M):
    """E[psi] under weights nu(tmin, psi)/nu(tmin)."""
    lt = _ln_nu_terms(tmin, R, M)
    w = np.exp(lt - special.logsumexp(lt))
    return float(np.dot(np.arange(len(lt)), w))


def compute_xi(ka: int, kap: int, fbc: FiniteBoundConfig, pprime: float) -> float:
    return float(_xi_table(fbc, pprime)[ka - fbc.kl, kap - fbc.kl])


def _xi_table(fbc: FiniteBoundConfig, pprime: float) -> np.ndarray:
    """xi(ka, ka') for ka, ka' in [kl:ku] (indexed from kl)."""
    ks = np.arange(fbc.kl, fbc.ku + 1, dtype=float)
    if len(ks) == 1:
        return np.ones((1, 1))
    n = fbc.n
    ka = ks[:, None, None]
    kap = ks[None, :, None]
    kappa = ks[None, None, :]
    A = 1 + kap * pprime
    B = 1 + kappa * pprime
    x = (kappa - kap) * pprime / A
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(x == 0, 1.0, np.log1p(x) / np.where(x == 0, 1.0, x))
    zeta = n * B * ratio / (2 * (1 + ka * pprime))
    zeta = np.broadcast_to(zeta, (len(ks),) * 3)
    up = special.gammaincc(n / 2, zeta)
    lo = special.gammainc(n / 2, zeta)
    val = np.where(kappa < kap, up, np.where(kappa > kap, lo, np.inf))
    return np.minimum(val.min(axis=2), 1.0)


# ---------------------------------------------------------------- exponents


def _a_b(rho, lam, u, v):
    w = u + rho * v
    with np.errstate(divide="ignore", invalid="ignore"):
        a = (rho - 1) * np.log1p(u * lam) + np.log1p(w * lam)
        b = rho * w * lam ** 2 / (1 + w * lam)
    return a, b


def compute_E0(rho: float, rho1: float, t: int, that: int, pprime: float, P1: float,
               iters: int = 200, seed_grid: int = 64) -> float:
    """max over lambda of rho1 a(rho, lambda) + ln(1 - rho1 P1 b(rho, lambda)).

    The feasible set is the interval where 1 + w lambda > 0 and
    1 - rho1 P1 b > 0. It is mapped onto the real line by a logistic
    stretch, seeded on a coarse grid and refined by golden-section.
    """
    u, v = pprime * that, pprime * t
    w = u + rho * v
    if w == 0.0 or rho1 == 0.0:
        return 0.0
    c = rho1 * P1 * rho * w
    lo = -1.0 / w
    if c > 0:
        disc = math.sqrt(w * w + 4 * c)
        # roots of c l^2 - w l - 1; the lower root exceeds -1/w
        lo = max(lo, (w - disc) / (2 * c))
        hi = (w + disc) / (2 * c)
    else:
        hi = None

    def lam_of(theta):
        if hi is None:
            return lo + math.exp(theta)
        return lo + (hi - lo) * special.expit(theta)

    def f(theta):
        lam = lam_of(theta)
        a, b = _a_b(rho, lam, u, v)
        arg = 1 - rho1 * P1 * b
        if not (np.isfinite(a) and arg > 0):
            return -1e300
        return float(rho1 * a + math.log(arg))

    grid = np.linspace(-40, 40, seed_grid)
    vals = [f(g) for g in grid]
    i = int(np.argmax(vals))
    glo, ghi = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
    _, best = golden_section_max(f, glo, ghi, tol=1e-12, max_iter=iters)
    return max(best, vals[i])


def _h(rho, theta, u, v, P1, K0):
    """max over rho1 in [0,1] of rho1 (a - K0 rho ... ) + ln(1 - rho1 P1 b).

    Parametrised by theta = ln(1 + w lambda); K0 holds (R1, R2).
    """
    R1, R2 = K0
    w = u + rho * v
    x = np.exp(theta)
    safe_w = np.where(w > 0, w, 1.0)
    # 1 + u lambda = (rho v + u x) / w, exact for x near 0
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        a = (rho - 1) * (np.log(rho * v + u * x) - np.log(safe_w)) + theta
        b = rho * (x - 1) ** 2 / (safe_w * x)
    a = np.where(w > 0, a, 0.0)
    b = np.where(w > 0, b, 0.0)
    K = a - rho * R1 - R2
    pb = P1 * b
    with np.errstate(divide="ignore", invalid="ignore"):
        r1 = np.where(pb > 0, 1.0 / np.where(pb > 0, pb, 1.0) - 1.0 / np.where(K > 0, K, 1.0), 1.0)
    r1 = np.clip(np.where(K > 0, r1, 0.0), 0.0, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        val = r1 * K + np.log1p(-r1 * pb)
    val = np.where(r1 == 0, 0.0, val)
    return np.where(np.isfinite(val), val, -np.inf)


RHO_GRID = np.array([0.01, 0.02, 0.04, 0.07, 0.1, 0.15, 0.2, 0.3, 0.4, 0.55, 0.7, 0.85, 1.0])


def compute_exponent(t, that, R1, R2, pprime, P1, rho_grid=None,
                     log_theta_grid=None, iters: int = 22):
    """E(t, t_hat) = max over rho, rho1 in [0,1] and lambda, vectorised over cells.

    The inner maximisation over rho1 is solved in closed form (the objective
    is concave in rho1). The remaining search is over rho and
    s = ln(theta) with theta = ln(1 + w lambda) > 0: a coarse grid locates
    the ridge where the objective is positive (it is zero elsewhere and the
    ridge can be a fraction of a unit wide), then nested golden-section
    refines within one grid cell of the best point. At rho = 0 the
    objective vanishes identically, so the rho grid starts just above it and
    is denser near 0, where the ridge sits at low SNR.
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    that = np.atleast_1d(np.asarray(that, dtype=float))
    shape = t.shape
    R1 = np.broadcast_to(np.asarray(R1, dtype=float), shape)
    R2 = np.broadcast_to(np.asarray(R2, dtype=float), shape)
    P1 = np.broadcast_to(np.asarray(P1, dtype=float), shape)
    u, v = pprime * that, pprime * t
    K0 = (R1, R2)
    if log_theta_grid is None:
        log_theta_grid = np.arange(np.log(1e-4), np.log(30.0), 0.15)
    sg = np.asarray(log_theta_grid, dtype=float)
    rhos = RHO_GRID if rho_grid is None else np.asarray(rho_grid, dtype=float)
    # bracket neighbours of each grid point
    rlo = np.concatenate([[0.0], rhos[:-1]])
    rhi = np.concatenate([rhos[1:], [1.0]])

    best = np.zeros(shape)
    best_i = np.zeros(shape, dtype=int)
    best_s = np.zeros(shape)
    for i, r in enumerate(rhos):
        for sv in sg:
            val = _h(r, np.exp(sv), u, v, P1, K0)
            upd = val > best
            best = np.where(upd, val, best)
            best_i = np.where(upd, i, best_i)
            best_s = np.where(upd, sv, best_s)
    active = best > 1e-13
    if not np.any(active):
        return best
    ia = np.nonzero(active)[0]
    ua, va, Pa, Ka = u[ia], v[ia], P1[ia], (R1[ia], R2[ia])
    ds = np.max(np.diff(sg)) if sg.size > 1 else 1.0
    s0 = best_s[ia]

    def inner(rho):
        return golden_section_max_vec(lambda sv: _h(rho, np.exp(sv), ua, va, Pa, Ka),
                                      s0 - ds, s0 + ds, iters)[1]

    bi = best_i[ia]
    _, val = golden_section_max_vec(inner, rlo[bi], rhi[bi], iters)
    best[ia] = np.maximum(best[ia], val)
    at_end = np.nonzero(rhi[bi] >= 1.0)[0]
    if at_end.size:
        # golden search never lands exactly on rho = 1
        ua, va, Pa, Ka, s0 = ua[at_end], va[at_end], Pa[at_end], (Ka[0][at_end], Ka[1][at_end]), s0[at_end]
        best[ia[at_end]] = np.maximum(best[ia[at_end]], inner(1.0))
    return best


def compute_p_t_that(t, that, fbc: FiniteBoundConfig, ka, kap, pprime: float) -> float:
    """p(t, t_hat) for a single cell, with range checks."""
    okap, ukap = okap_ukap(kap, fbc)
    okap, ukap = int(okap), int(ukap)
    if not 0 <= t <= min(ka, okap):
        raise ValueError("t outside its range")
    lo = max(t + max(ka - okap, 0) - max(ka - ukap, 0), 0)
    tu = min(okap - max(ukap - ka, 0), t + max(okap - ka, 0) - max(ukap - ka, 0))
    if not lo <= that <= tu:
        raise ValueError("t_hat outside its range")
    tmin = min(t, that)
    R = fbc.L - ka + tmin - max(ukap - ka, 0) - max(that - t, 0)
    R1 = 2 / fbc.n * (tmin * math.log(fbc.M) + float(_ln_binom(R, tmin)))
    R2 = 2 / fbc.n * float(_ln_binom(min(ka, okap), t))
    P1 = (max(ka - okap, 0) + max(ukap - ka, 0)) * pprime + 1
    E = float(compute_exponent(t, that, R1, R2, pprime, P1)[0])
    return min(1.0, math.exp(-fbc.n / 2 * E))


# ---------------------------------------------------------------- cell enumeration


@dataclass
class Cells:
    ka: np.ndarray
    kap: np.ndarray
    key_inv: np.ndarray
    keys: np.ndarray = field(repr=False)  # unique (t, that, R, mk, m)
    w_md: np.ndarray = field(repr=False)
    w_fa: np.ndarray = field(repr=False)
    w_aue: np.ndarray = field(repr=False)
    skipped: int = 0


def _mean_psi_table(L, M):
    tab = np.zeros((L + 1, L + 1))
    for tmin in range(L + 1):
        for R in range(tmin, L + 1):
            tab[tmin, R] = _mean_psi(tmin, R, M)
    return tab


def enumerate_cells(fbc: FiniteBoundConfig) -> Cells:
    """All (ka, ka', t, t_hat) cells with their psi-averaged weights."""
    if fbc.L > MAX_L:
        raise ValueError(f"finite-length bounds limited to L <= {MAX_L}")
    mpsi_tab = _mean_psi_table(fbc.L, fbc.M)
    parts = []
    skipped = 0
    for ka in range(fbc.kl, fbc.ku + 1):
        for kap in range(fbc.kl, fbc.ku + 1):
            okap, ukap = (int(x) for x in okap_ukap(kap, fbc))
            dmd = max(ka - okap, 0)
            dfa = max(ukap - ka, 0)
            t = np.arange(0, min(ka, okap) + 1)
            lo = np.maximum(t + dmd - max(ka - ukap, 0), 0)
            tu = np.minimum(okap - dfa, t + max(okap - ka, 0) - dfa)
            span = np.maximum(tu - lo + 1, 0)
            if span.sum() == 0:
                continue
            tt = np.repeat(t, span)
            th = np.concatenate([np.arange(a, b + 1) for a, b in zip(lo, tu) if b >= a])
            tmin = np.minimum(tt, th)
            R = fbc.L - ka + tmin - dfa - _pos(th - tt)
            bad = R < tmin
            if bad.any():
                skipped += int(bad.sum())
                log.warning("skipping %d cells with R < tmin at ka=%d kap=%d",
                            int(bad.sum()), ka, kap)
                tt, th, tmin, R = tt[~bad], th[~bad], tmin[~bad], R[~bad]
            mpsi = mpsi_tab[tmin, R]
            if ka > 0:
                w_md = (dmd + _pos(tt - th) + mpsi) / ka
                w_aue = (tmin - mpsi) / ka
            else:
                w_md = w_aue = np.zeros(len(tt))
            den = ka - tt - dmd + th + dfa
            w_fa = np.where(den > 0, (dfa + _pos(th - tt) + mpsi) / np.where(den > 0, den, 1), 0.0)
            m = len(tt)
            parts.append((np.full(m, ka), np.full(m, kap),
                          np.stack([tt, th, R, np.full(m, min(ka, okap)), np.full(m, dmd + dfa)],
                                   axis=1), w_md, w_fa, w_aue))
    ka_a = np.concatenate([p[0] for p in parts]).astype(np.int32)
    kap_a = np.concatenate([p[1] for p in parts]).astype(np.int32)
    ikeys = np.concatenate([p[2] for p in parts]).astype(np.int64)
    keys, inv = np.unique(ikeys, axis=0, return_inverse=True)
    return Cells(ka_a, kap_a, inv.ravel().astype(np.int64), keys,
                 np.concatenate([p[3] for p in parts]), np.concatenate([p[4] for p in parts]),
                 np.concatenate([p[5] for p in parts]), skipped)


def _key_exponents(cells: Cells, fbc: FiniteBoundConfig, pprime: float) -> np.ndarray:
    t, that, R, mk, m = (cells.keys[:, i].astype(float) for i in range(5))
    tmin = np.minimum(t, that)
    R1 = 2 / fbc.n * (tmin * math.log(fbc.M) + _ln_binom(R, tmin))
    R2 = 2 / fbc.n * _ln_binom(mk, t)
    P1 = m * pprime + 1
    return compute_exponent(t, that, R1, R2, pprime, P1)


@dataclass
class BoundResult:
    eps: ErrorTriple
    floors: tuple
    pprime: float
    tilde_p: float
    n_cells: int
    n_keys: int


def _evaluate(cells: Cells, fbc: FiniteBoundConfig, pprime: float):
    E = _key_exponents(cells, fbc, pprime)
    p = np.minimum(np.exp(-fbc.n / 2 * E), 1.0)[cells.key_inv]
    xi = _xi_table(fbc, pprime)[cells.ka - fbc.kl, cells.kap - fbc.kl]
    g = fbc.activity.pmf[cells.ka] * np.minimum(p, xi)
    tp = compute_tilde_p(fbc, pprime)
    md = min(1.0, tp + float(np.sum(g * cells.w_md)))
    fa = min(1.0, tp + float(np.sum(g * cells.w_fa)))
    aue = min(1.0, tp + float(np.sum(g * cells.w_aue)))
    return ErrorTriple(md, fa, aue), tp


def compute_error_floors(fbc: FiniteBoundConfig, pprime: float):
    """(bar_MD, bar_FA, bar_AUE): the high-SNR limits of the bounds."""
    xi = _xi_table(fbc, pprime)
    ks = np.arange(fbc.kl, fbc.ku + 1)
    ka = ks[:, None]
    okap, ukap = okap_ukap(ks[None, :], fbc)
    dmd = _pos(ka - okap)
    dfa = _pos(ukap - ka)
    pk = fbc.activity.pmf[ks][:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        wmd = np.where(ka > 0, dmd / np.where(ka > 0, ka, 1), 0.0)
        den = ka - dmd + dfa
        wfa = np.where(den > 0, dfa / np.where(den > 0, den, 1), 0.0)
    pbar = fbc.pbar
    return (min(1.0, pbar + float(np.sum(pk * wmd * xi))),
            min(1.0, pbar + float(np.sum(pk * wfa * xi))), pbar)


def compute_bound_triple(fbc: FiniteBoundConfig, cells: Cells | None = None,
                         pprime_tol: float = 1e-3) -> BoundResult:
    """Bound triple and floors, with P' fixed or optimised for the combined metric."""
    cells = cells if cells is not None else enumerate_cells(fbc)
    P = fbc.P
    if fbc.pprime_policy == "fixed":
        pp = fbc.pprime_frac * P
        eps, tp = _evaluate(cells, fbc, pp)
    else:
        memo = {}

        def score(frac):
            if frac not in memo:
                memo[frac] = _evaluate(cells, fbc, frac * P)
            return -memo[frac][0].combined

        frac, _ = golden_section_max(score, 0.02, 0.999, tol=pprime_tol)
        frac = max(memo, key=lambda f: -memo[f][0].combined)
        pp = frac * P
        eps, tp = memo[frac]
    return BoundResult(eps, compute_error_floors(fbc, pp), pp, tp, len(cells.ka),
                       len(cells.keys))


# ---------------------------------------------------------------- ML oracle


@dataclass
class OracleInstance:
    codebooks: np.ndarray  # (L, M, n)
    msg: np.ndarray  # per user, -1 when silent
    y: np.ndarray


def sample_oracle_instance(fbc: FiniteBoundConfig, pprime: float, rng) -> OracleInstance:
    n, L, M = fbc.n, fbc.L, fbc.M
    cb = rng.standard_normal((L, M, n)) * math.sqrt(pprime)
    energy = np.sum(cb ** 2, axis=-1)
    cb = cb * (energy <= n * fbc.P)[..., None]
    ka = rng.choice(L + 1, p=fbc.activity.pmf)
    users = rng.permutation(L)[:ka]
    msg = np.full(L, -1)
    msg[users] = rng.integers(0, M, size=ka)
    y = rng.standard_normal(n)
    for u in users:
        y += cb[u, msg[u]]
    return OracleInstance(cb, msg, y)


@functools.lru_cache(maxsize=8)
def _assignments(L, M):
    combos = np.array(list(itertools.product(range(-1, M), repeat=L)), dtype=int)
    return combos, np.sum(combos >= 0, axis=1)


def ml_oracle_decode(inst: OracleInstance, fbc: FiniteBoundConfig, pprime: float) -> np.ndarray:
    """Exhaustive ML decoding; returns the decoded message per user (-1 silent)."""
    L, M, n = inst.codebooks.shape
    if L > 8 or M > 4:
        raise ValueError("oracle limited to L <= 8 and M <= 4")
    combos, sizes = _assignments(L, M)
    ks = np.arange(fbc.kl, fbc.ku + 1)
    var = 1 + ks * pprime
    ll = -n / 2 * np.log(var) - float(inst.y @ inst.y) / (2 * var)
    kap = int(ks[np.argmax(ll)])
    lo, hi = max(fbc.kl, kap - fbc.rl), min(fbc.ku, kap + fbc.ru)
    ok = (sizes >= lo) & (sizes <= hi)
    # sum of selected codewords for each assignment
    onehot = np.zeros((len(combos), L * M))
    rows, users = np.nonzero(combos >= 0)
    onehot[rows, users * M + combos[rows, users]] = 1.0
    S = onehot[ok] @ inst.codebooks.reshape(L * M, n)
    d = np.sum((S - inst.y) ** 2, axis=1)
    return combos[ok][int(np.argmin(d))]


def oracle_trials(fbc: FiniteBoundConfig, pprime: float, trials: int, rng):
    """Per-trial (pMD, pFA, pAUE) of the exhaustive decoder; returns (trials, 3)."""
    out = np.empty((trials, 3))
    for i in range(trials):
        inst = sample_oracle_instance(fbc, pprime, rng)
        dec = ml_oracle_decode(inst, fbc, pprime)
        e = empirical_errors(inst.msg[:, None], dec[:, None], silent=-1)
        out[i] = (e.p_md, e.p_fa, e.p_aue)
    return out
