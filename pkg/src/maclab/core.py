"""Shared numerical primitives and parameter/metric types.

Everything here is pure: types are frozen dataclasses and functions take any
randomness through an explicit ``numpy.random.Generator``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
from scipy import special, stats

__all__ = [
    "db_to_linear", "linear_to_db", "SystemConfig", "ErrorTriple", "ActivityModel",
    "std_normal_cdf", "log_std_normal_cdf", "log_cdf_power", "one_minus_cdf_power",
    "regularized_gamma", "golden_section_max", "golden_section_max_vec",
    "gauss_hermite_expectation", "gaussian_panel_rule", "make_rng", "spawn_rng",
    "EXP_APPROX_EPS", "empirical_errors",
]

# below this tail mass (1-eps)^m is replaced by exp(-eps*m)
EXP_APPROX_EPS = 1e-6


def db_to_linear(db):
    return np.power(10.0, np.asarray(db, dtype=float) / 10.0)


def linear_to_db(lin):
    return 10.0 * np.log10(np.asarray(lin, dtype=float))


# ---------------------------------------------------------------- types


@dataclass(frozen=True)
class SystemConfig:
    """Problem parameters of the multiple-access channel.

    The SNR is given as Eb/N0 in dB with ``sigma2 = N0/2``. Either ``mu`` or
    the pair ``(n, L)`` fixes the user density; when both are given they must
    agree. ``pprime`` is the reduced power used by the finite-length scheme
    and is optional elsewhere.
    """

    k: int
    alpha: float
    ebn0_db: float
    mu: float | None = None
    n: int | None = None
    L: int | None = None
    sigma2: float = 1.0
    pprime: float | None = None

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0,1], got {self.alpha}")
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be positive")
        if not math.isfinite(self.ebn0_db):
            raise ValueError("ebn0_db must be finite")
        if self.n is not None and self.L is not None:
            ratio = self.L / self.n
            if self.mu is None:
                object.__setattr__(self, "mu", ratio)
            elif not math.isclose(self.mu, ratio, rel_tol=1e-12):
                raise ValueError(f"mu={self.mu} inconsistent with L/n={ratio}")
        if self.mu is not None and not self.mu > 0:
            raise ValueError("mu must be positive")
        if self.pprime is not None:
            if self.n is None:
                raise ValueError("pprime requires n")
            if not 0 < self.pprime < self.P:
                raise ValueError(f"pprime must lie in (0, P={self.P}), got {self.pprime}")

    @property
    def M(self) -> int:
        return 2 ** self.k

    @property
    def ebn0(self) -> float:
        return float(db_to_linear(self.ebn0_db))

    @property
    def N0(self) -> float:
        return 2.0 * self.sigma2

    @property
    def Eb(self) -> float:
        return self.ebn0 * self.N0

    @property
    def E(self) -> float:
        return self.Eb * self.k

    @property
    def mu_a(self) -> float:
        if self.mu is None:
            raise ValueError("mu is not set")
        return self.alpha * self.mu

    @property
    def P(self) -> float:
        if self.n is None:
            raise ValueError("P requires n")
        return self.E / self.n

    def replace(self, **kw) -> "SystemConfig":
        d = {f: getattr(self, f) for f in
             ("k", "alpha", "ebn0_db", "mu", "n", "L", "sigma2", "pprime")}
        # keep mu consistent if n or L change
        if ("n" in kw or "L" in kw) and "mu" not in kw:
            d["mu"] = None
        d.update(kw)
        return SystemConfig(**d)


@dataclass(frozen=True)
class ErrorTriple:
    p_md: float
    p_fa: float
    p_aue: float

    def __post_init__(self):
        for name in ("p_md", "p_fa", "p_aue"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name}={v} outside [0,1]")

    @property
    def combined(self) -> float:
        return max(self.p_md, self.p_fa) + self.p_aue

    def as_dict(self) -> dict:
        return {"p_md": self.p_md, "p_fa": self.p_fa, "p_aue": self.p_aue,
                "combined": self.combined}


@dataclass(frozen=True)
class ActivityModel:
    """Distribution of the number of active users on ``[0:L]``.

    Build with :meth:`binomial` or :meth:`explicit`.
    """

    L: int
    pmf: np.ndarray = field(repr=False)
    kind: str = "explicit"
    alpha: float | None = None

    def __post_init__(self):
        p = np.asarray(self.pmf, dtype=float)
        if p.shape != (self.L + 1,):
            raise ValueError("pmf must have length L+1")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise ValueError("pmf must be nonnegative and sum to 1")
        p.setflags(write=False)
        object.__setattr__(self, "pmf", p)

    @classmethod
    def binomial(cls, L: int, alpha: float) -> "ActivityModel":
        pmf = stats.binom.pmf(np.arange(L + 1), L, alpha)
        pmf = pmf / pmf.sum()
        return cls(L=L, pmf=pmf, kind="binomial", alpha=alpha)

    @classmethod
    def explicit(cls, pmf: Sequence[float]) -> "ActivityModel":
        pmf = np.asarray(pmf, dtype=float)
        return cls(L=len(pmf) - 1, pmf=pmf, kind="explicit")

    @property
    def mean(self) -> float:
        if self.kind == "binomial":
            return self.alpha * self.L
        return float(np.dot(np.arange(self.L + 1), self.pmf))

    @property
    def std(self) -> float:
        ks = np.arange(self.L + 1)
        m = float(np.dot(ks, self.pmf))
        return float(np.sqrt(np.dot((ks - m) ** 2, self.pmf)))

    def tail_mass(self, kl: int, ku: int) -> float:
        """P(Ka outside [kl:ku])."""
        if kl > ku:
            return 1.0
        lo = self.pmf[:max(kl, 0)].sum()
        hi = self.pmf[ku + 1:].sum()
        return float(lo + hi)

    def interval_for_tail(self, pbar: float) -> tuple[int, int]:
        """Narrowest [kl:ku] with tail mass at most ``pbar``.

        Endpoints are trimmed greedily, always dropping the lighter end.
        """
        kl, ku = 0, self.L
        dropped = 0.0
        p = self.pmf
        while kl < ku:
            lo_first = p[kl] <= p[ku]
            cand = p[kl] if lo_first else p[ku]
            if dropped + cand > pbar:
                # the other end may still fit
                other = p[ku] if lo_first else p[kl]
                if dropped + other > pbar:
                    break
                lo_first = not lo_first
                cand = other
            dropped += cand
            if lo_first:
                kl += 1
            else:
                ku -= 1
        return kl, ku


def empirical_errors(X, Xhat, silent=0) -> ErrorTriple:
    """Per-trial (pMD, pFA, pAUE) from true and decoded rows.

    A row is silent when every entry equals ``silent``. pMD and pAUE are
    normalised by the true active count, pFA by the decoded active count,
    and each is 0 when its normaliser is 0.
    """
    X = np.asarray(X)
    Xhat = np.asarray(Xhat)
    if X.shape != Xhat.shape:
        raise ValueError("shape mismatch between truth and decisions")
    X = X.reshape(X.shape[0], -1)
    Xhat = Xhat.reshape(Xhat.shape[0], -1)
    act = np.any(X != silent, axis=1)
    dec = np.any(Xhat != silent, axis=1)
    ka, kah = int(act.sum()), int(dec.sum())
    md = int(np.sum(act & ~dec))
    fa = int(np.sum(~act & dec))
    aue = int(np.sum(act & dec & np.any(X != Xhat, axis=1)))
    return ErrorTriple(md / ka if ka else 0.0, fa / kah if kah else 0.0,
                       aue / ka if ka else 0.0)


# ---------------------------------------------------------------- special functions


def std_normal_cdf(x):
    """Phi(x); saturates at 0/1 in the extreme tails."""
    return special.ndtr(x)


def log_std_normal_cdf(x):
    """ln Phi(x), accurate in both tails."""
    x = np.asarray(x, dtype=float)
    out = special.log_ndtr(x)
    # log_ndtr loses relative accuracy for large positive x; use log1p of the upper tail
    pos = x > 0
    if np.any(pos):
        out = np.where(pos, np.log1p(-special.ndtr(-np.where(pos, x, 0.0))), out)
    return out


def log_cdf_power(x, m):
    """ln Phi(x)^m in the log domain.

    When the upper tail eps = 1 - Phi(x) is below ``EXP_APPROX_EPS`` the
    approximation (1-eps)^m = exp(-eps*m) is used.
    """
    x = np.asarray(x, dtype=float)
    m = np.asarray(m, dtype=float)
    eps = special.ndtr(-x)
    small = eps < EXP_APPROX_EPS
    with np.errstate(divide="ignore"):
        exact = m * special.log_ndtr(x)
        exact = np.where(x > 0, m * np.log1p(-np.where(small, 0.0, eps)), exact)
    return np.where(small, -m * eps, exact)


def one_minus_cdf_power(x, m):
    """1 - Phi(x)^m without cancellation."""
    return -np.expm1(log_cdf_power(x, m))


def regularized_gamma(kind: str, shape, w):
    """Regularized incomplete gamma: ``"lower"`` gives P(shape, w), ``"upper"`` Q(shape, w)."""
    shape = np.asarray(shape, dtype=float)
    w = np.asarray(w, dtype=float)
    if not (np.all(np.isfinite(shape)) and np.all(np.isfinite(w))):
        raise ValueError("regularized_gamma: non-finite input")
    if np.any(shape <= 0) or np.any(w < 0):
        raise ValueError("regularized_gamma: need shape > 0 and w >= 0")
    if kind == "lower":
        return special.gammainc(shape, w)
    if kind == "upper":
        return special.gammaincc(shape, w)
    raise ValueError(f"unknown kind {kind!r}")


# ---------------------------------------------------------------- optimisation

_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


def golden_section_max(f: Callable[[float], float], lo: float, hi: float,
                       tol: float = 1e-8, max_iter: int = 200):
    """Golden-section search for a maximiser of ``f`` on ``[lo, hi]``.

    Returns ``(argmax, max)``. The endpoints are compared against the final
    interior point so monotone functions return the right edge.
    """
    if not lo < hi:
        raise ValueError("golden_section_max: need lo < hi")

    def ev(x):
        v = f(x)
        if not math.isfinite(v):
            raise FloatingPointError(f"golden_section_max: f({x!r}) = {v!r}")
        return v

    a, b = lo, hi
    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    fc, fd = ev(c), ev(d)
    it = 0
    while b - a > tol and it < max_iter:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - _INVPHI * (b - a)
            fc = ev(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INVPHI * (b - a)
            fd = ev(d)
        it += 1
    x, fx = (c, fc) if fc >= fd else (d, fd)
    for e in (lo, hi):
        fe = ev(e)
        if fe > fx:
            x, fx = e, fe
    return x, fx


def golden_section_max_vec(f, lo, hi, iters: int = 40):
    """Vectorised golden-section maximisation over independent brackets.

    ``f`` maps an array of abscissae (same shape as ``lo``) to values.
    Returns ``(argmax, max)`` arrays. Non-finite values are treated as -inf.
    """
    a = np.array(lo, dtype=float)
    b = np.array(hi, dtype=float)

    def ev(x):
        v = np.asarray(f(x), dtype=float)
        return np.where(np.isfinite(v), v, -np.inf)

    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    fc, fd = ev(c), ev(d)
    for _ in range(iters):
        left = fc >= fd
        # left: keep [a, d]; else keep [c, b]
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        nc = np.where(left, b - _INVPHI * (b - a), d)
        nd = np.where(left, c, a + _INVPHI * (b - a))
        fnew = ev(np.where(left, nc, nd))
        fc, fd = np.where(left, fnew, fd), np.where(left, fc, fnew)
        c, d = nc, nd
    take_c = fc >= fd
    return np.where(take_c, c, d), np.where(take_c, fc, fd)


# ---------------------------------------------------------------- quadrature


@lru_cache(maxsize=32)
def _hermite_rule(nodes: int):
    x, w = np.polynomial.hermite_e.hermegauss(nodes)
    w = w / math.sqrt(2.0 * math.pi)
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def gauss_hermite_expectation(g: Callable, nodes: int = 100, adaptive: bool = True,
                              max_nodes: int = 300, rtol: float = 1e-8, atol: float = 1e-15):
    """E[g(z)] for z ~ N(0,1) by Gauss-Hermite quadrature.

    ``g`` must accept an array of nodes. With ``adaptive`` the order is doubled
    (capped at ``max_nodes``; the rule loses accuracy beyond about 300 nodes)
    until two consecutive orders agree to ``rtol`` relative plus ``atol``.
    """
    if nodes < 20:
        raise ValueError("gauss_hermite_expectation: nodes must be >= 20")
    x, w = _hermite_rule(nodes)
    val = np.tensordot(np.asarray(g(x), dtype=float), w, axes=([-1], [0]))
    if not adaptive:
        return val
    while nodes < max_nodes:
        nodes = min(2 * nodes, max_nodes)
        x, w = _hermite_rule(nodes)
        new = np.tensordot(np.asarray(g(x), dtype=float), w, axes=([-1], [0]))
        if np.all(np.abs(new - val) <= rtol * np.abs(new) + atol):
            return new
        val = new
    return val


@lru_cache(maxsize=8)
def _legendre_rule(order: int):
    return np.polynomial.legendre.leggauss(order)


def gaussian_panel_rule(lo: float = -12.0, hi: float = 12.0, width: float = 0.5,
                        order: int = 8):
    """Composite Gauss-Legendre rule for integrals against the normal density.

    Returns nodes ``z`` and weights ``w`` with ``sum(g(z)*w)`` approximating
    the integral of g(z)*phi(z) over ``[lo, hi]``. Panels no wider than
    ``width`` resolve integrands with features on that scale, which a global
    Hermite rule cannot.
    """
    if not hi > lo:
        raise ValueError("gaussian_panel_rule: need hi > lo")
    npan = max(1, int(math.ceil((hi - lo) / width)))
    edges = np.linspace(lo, hi, npan + 1)
    x, w = _legendre_rule(order)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    z = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    wt = (half[:, None] * w[None, :]).ravel() * stats.norm.pdf(z)
    return z, wt


# ---------------------------------------------------------------- randomness


def make_rng(seed: int, *key: int) -> np.random.Generator:
    """Counter-based Philox stream for ``seed`` and an optional substream key."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def spawn_rng(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    return list(rng.spawn(n))
