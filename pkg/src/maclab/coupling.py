"""Base matrices and spatially coupled Gaussian design matrices."""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

__all__ = ["CouplingSpec", "BlockIndexMaps", "make_base_matrix", "inner_density",
           "sample_sc_matrix", "block_maps", "sc_matvec", "sc_rmatvec"]


@dataclass(frozen=True)
class CouplingSpec:
    """Base matrix W (R x C) with nonnegative entries and unit column sums.

    ``omega``/``lam`` are set for the banded family built by
    :func:`make_base_matrix`; generic matrices leave them as ``None``.
    """

    W: np.ndarray = field(repr=False)
    omega: int | None = None
    lam: int | None = None

    def __post_init__(self):
        W = np.array(self.W, dtype=float)
        if W.ndim != 2 or W.size == 0:
            raise ValueError("W must be a nonempty 2-D array")
        if np.any(W < 0):
            raise ValueError("W entries must be nonnegative")
        if not np.allclose(W.sum(axis=0), 1.0, rtol=0, atol=1e-12):
            raise ValueError("every column of W must sum to 1")
        if W.shape[0] < W.shape[1]:
            raise ValueError("W must have at least as many rows as columns")
        W.setflags(write=False)
        object.__setattr__(self, "W", W)

    @property
    def R(self) -> int:
        return self.W.shape[0]

    @property
    def C(self) -> int:
        return self.W.shape[1]

    @property
    def theta(self) -> float:
        return self.R / self.C

    @property
    def nonzero_blocks(self) -> list[tuple[int, int]]:
        r, c = np.nonzero(self.W)
        return list(zip(r.tolist(), c.tolist()))

    def to_json(self) -> dict:
        if self.omega is not None:
            return {"omega": self.omega, "lambda": self.lam}
        return {"entries": self.W.ravel().tolist(), "R": self.R, "C": self.C}

    @classmethod
    def from_json(cls, d: dict) -> "CouplingSpec":
        if "omega" in d:
            extra = set(d) - {"omega", "lambda"}
            if extra:
                raise ValueError(f"unknown base-matrix keys {sorted(extra)}")
            return make_base_matrix(int(d["omega"]), int(d["lambda"]))
        extra = set(d) - {"entries", "R", "C"}
        if extra:
            raise ValueError(f"unknown base-matrix keys {sorted(extra)}")
        R, C = int(d["R"]), int(d["C"])
        W = np.asarray(d["entries"], dtype=float)
        if W.size != R * C:
            raise ValueError("entries length must equal R*C")
        return cls(W.reshape(R, C))


def make_base_matrix(omega: int, lam: int) -> CouplingSpec:
    """Banded (omega, Lambda) base matrix: W[r, c] = 1/omega for c <= r <= c+omega-1."""
    if omega < 1:
        raise ValueError("omega must be >= 1")
    if lam < max(2 * omega - 1, 1):
        raise ValueError(f"lambda must be >= 2*omega-1 = {2 * omega - 1}")
    R = lam + omega - 1
    W = np.zeros((R, lam))
    for c in range(lam):
        W[c:c + omega, c] = 1.0 / omega
    return CouplingSpec(W, omega=omega, lam=lam)


def column_sums_exact(omega: int, lam: int) -> list[Fraction]:
    """Column sums of the banded base matrix in exact rational arithmetic."""
    R = lam + omega - 1
    sums = []
    for c in range(lam):
        s = sum((Fraction(1, omega) for r in range(R) if c <= r <= c + omega - 1), Fraction(0))
        sums.append(s)
    return sums


def inner_density(spec: CouplingSpec, mu: float) -> float:
    """mu_in = (R/C) mu."""
    if not mu > 0:
        raise ValueError("mu must be positive")
    return spec.theta * mu


@dataclass(frozen=True)
class BlockIndexMaps:
    row_block: np.ndarray
    col_block: np.ndarray
    rows_per_block: int
    cols_per_block: int

    def row_range(self, r: int) -> slice:
        return slice(r * self.rows_per_block, (r + 1) * self.rows_per_block)

    def col_range(self, c: int) -> slice:
        return slice(c * self.cols_per_block, (c + 1) * self.cols_per_block)


def block_maps(spec: CouplingSpec, rows: int, cols: int) -> BlockIndexMaps:
    if rows % spec.R:
        raise ValueError(f"R={spec.R} must divide rows={rows}")
    if cols % spec.C:
        raise ValueError(f"C={spec.C} must divide cols={cols}")
    rb, cb = rows // spec.R, cols // spec.C
    return BlockIndexMaps(np.repeat(np.arange(spec.R), rb), np.repeat(np.arange(spec.C), cb),
                          rb, cb)


def sample_sc_matrix(spec: CouplingSpec, rows: int, cols: int, rng: np.random.Generator,
                     dtype=np.float64) -> np.ndarray:
    """Dense coupled Gaussian matrix with entry variance W[r(i), c(j)] / (rows/R).

    Each row block draws from its own substream so the result does not
    depend on how blocks are scheduled.
    """
    bm = block_maps(spec, rows, cols)
    A = np.zeros((rows, cols), dtype=dtype)
    subs = rng.spawn(spec.R)
    for r in range(spec.R):
        scale = np.sqrt(spec.W[r] / bm.rows_per_block)
        if not np.any(scale):
            continue
        blk = subs[r].standard_normal((bm.rows_per_block, cols), dtype=dtype)
        blk *= np.repeat(scale, bm.cols_per_block).astype(dtype)[None, :]
        A[bm.row_range(r)] = blk
    return A


def sc_matvec(spec: CouplingSpec, A: np.ndarray, X: np.ndarray) -> np.ndarray:
    """A @ X touching only the nonzero blocks of W."""
    if spec.R == 1 and spec.C == 1:
        return A @ X
    bm = block_maps(spec, A.shape[0], A.shape[1])
    out = np.zeros((A.shape[0],) + X.shape[1:], dtype=np.result_type(A, X))
    for r, c in spec.nonzero_blocks:
        out[bm.row_range(r)] += A[bm.row_range(r), bm.col_range(c)] @ X[bm.col_range(c)]
    return out


def sc_rmatvec(spec: CouplingSpec, A: np.ndarray, Z: np.ndarray, weights=None) -> np.ndarray:
    """A^T @ Z on nonzero blocks; ``weights[r, c]`` (scalar or matrix) multiplies block (r, c) on the right."""
    bm = block_maps(spec, A.shape[0], A.shape[1])
    out = np.zeros((A.shape[1],) + Z.shape[1:], dtype=np.result_type(A, Z))
    for r, c in spec.nonzero_blocks:
        part = A[bm.row_range(r), bm.col_range(c)].T @ Z[bm.row_range(r)]
        if weights is not None:
            wrc = weights[r][c]
            part = part @ wrc if np.ndim(wrc) == 2 else part * wrc
        out[bm.col_range(c)] += part
    return out
