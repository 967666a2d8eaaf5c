"""Dense symmetric/SPD linear algebra used outside the differentiated path.

Factorizations and eigensolves are delegated to LAPACK through numpy/scipy.
This module adds the strict positive-definiteness contract (failures carry
the offending pivot index), symmetrized inverses, and the column-row block
partition machinery shared by the update layer and the solvers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

__all__ = [
    "BlockView",
    "NotPositiveDefinite",
    "SymMatrix",
    "as_sym_array",
    "cholesky",
    "eig_diagnostics",
    "embed_block",
    "extract_block",
    "is_spd",
    "rest_indices",
    "spd_inverse",
]

_SYM_RTOL = 1e-12


class NotPositiveDefinite(Exception):
    """Cholesky met a non-positive pivot: the matrix is not numerically PD."""

    def __init__(self, pivot: int):
        super().__init__(f"matrix is not positive definite (failing pivot {pivot})")
        self.pivot = pivot


def as_sym_array(a) -> np.ndarray:
    """Coerce to a square float64 array and require symmetry (1e-12 relative)."""
    m = np.asarray(getattr(a, "data", a), dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    scale = float(np.abs(m).max()) if m.size else 0.0
    if scale > 0.0 and float(np.abs(m - m.T).max()) > _SYM_RTOL * scale:
        raise ValueError("matrix is not symmetric")
    return m


@dataclass(frozen=True)
class SymMatrix:
    """Square float64 matrix validated and stored as exactly symmetric."""

    data: np.ndarray

    def __post_init__(self):
        m = as_sym_array(self.data)
        object.__setattr__(self, "data", 0.5 * (m + m.T))

    @property
    def p(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class BlockView:
    """Column-row partition of a symmetric matrix at pivot ``i``.

    ``theta11`` is the matrix without row/column ``i``, ``theta12`` the
    pivot column without its pivot entry, ``theta22`` the pivot diagonal.
    """

    i: int
    theta11_indices: np.ndarray
    theta11: np.ndarray
    theta12: np.ndarray
    theta22: float


def rest_indices(p: int, i: int) -> np.ndarray:
    """All indices except ``i``, ascending."""
    if not 0 <= i < p:
        raise IndexError(f"pivot {i} out of range for dimension {p}")
    return np.concatenate([np.arange(i), np.arange(i + 1, p)])


def extract_block(a, i: int) -> BlockView:
    m = as_sym_array(a)
    rest = rest_indices(m.shape[0], i)
    return BlockView(
        i=i,
        theta11_indices=rest,
        theta11=m[np.ix_(rest, rest)],
        theta12=m[rest, i],
        theta22=float(m[i, i]),
    )


def embed_block(view: BlockView) -> SymMatrix:
    """Reassemble the source matrix from a block view, bit-exactly."""
    p = view.theta11.shape[0] + 1
    rest = view.theta11_indices
    out = np.empty((p, p), dtype=np.float64)
    out[np.ix_(rest, rest)] = view.theta11
    out[rest, view.i] = view.theta12
    out[view.i, rest] = view.theta12
    out[view.i, view.i] = view.theta22
    return SymMatrix(out)


def cholesky(a) -> np.ndarray:
    """Lower-triangular L with a = L L'; strictly positive pivots required."""
    m = as_sym_array(a)
    try:
        return np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        raise NotPositiveDefinite(_failing_pivot(m)) from None


def _failing_pivot(m: np.ndarray) -> int:
    # slow path, only entered after LAPACK reported failure
    p = m.shape[0]
    L = np.zeros_like(m)
    for j in range(p):
        d = m[j, j] - L[j, :j] @ L[j, :j]
        if not d > 0.0:
            return j
        L[j, j] = np.sqrt(d)
        if j + 1 < p:
            L[j + 1:, j] = (m[j + 1:, j] - L[j + 1:, :j] @ L[j, :j]) / L[j, j]
    return p - 1


def is_spd(a) -> bool:
    try:
        cholesky(a)
    except NotPositiveDefinite:
        return False
    return True


def spd_inverse(a) -> np.ndarray:
    """Inverse of an SPD matrix via Cholesky, symmetrized on output."""
    m = as_sym_array(a)
    L = cholesky(m)
    eye = np.eye(m.shape[0])
    half = solve_triangular(L, eye, lower=True)
    inv = solve_triangular(L.T, half, lower=False)
    return 0.5 * (inv + inv.T)


def eig_diagnostics(a) -> tuple[float, float, float]:
    """(smallest eigenvalue, largest eigenvalue, their ratio).

    Diagnostic only; never on the differentiated path.
    """
    m = as_sym_array(a)
    vals = np.linalg.eigvalsh(m)
    lo, hi = float(vals[0]), float(vals[-1])
    cond = hi / lo if lo != 0.0 else float("inf")
    return lo, hi, cond
