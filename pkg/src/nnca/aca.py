"""Partially pivoted adaptive cross approximation over a block oracle.

The oracle is any callable ``oracle(rows, cols) -> ndarray`` returning the
dense sub-block for the given global index lists. Only single rows and
single columns are requested, so a block of size m x n costs at most
(k + skipped rows) * n + k * m entry evaluations for rank k.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DimensionError

logger = logging.getLogger(__name__)

ZERO_PIVOT_RTOL = 1e-14

BlockOracle = Callable[[np.ndarray, np.ndarray], np.ndarray]

_EMPTY_IDX = np.empty(0, dtype=np.intp)


@dataclass
class PivotLU:
    """A_{tau sigma} = lower @ upper, with the pivots on the diagonal of ``lower``."""

    lower: np.ndarray
    upper: np.ndarray

    @property
    def pivots(self) -> np.ndarray:
        return np.diag(self.lower)


@dataclass
class ACAResult:
    rows: np.ndarray
    cols: np.ndarray
    row_pivots: np.ndarray
    col_pivots: np.ndarray
    row_positions: np.ndarray
    col_positions: np.ndarray
    U_factor: np.ndarray
    V_factor: np.ndarray
    pivot_lu: PivotLU
    converged: bool = True
    skipped_rows: int = 0
    dropped_pivots: int = 0
    norm_estimate: float = 0.0
    history: list[float] = field(default_factory=list)

    @property
    def rank(self) -> int:
        return self.row_pivots.size

    def approximation(self) -> np.ndarray:
        return self.U_factor @ self.V_factor.T

    def basis(self) -> np.ndarray:
        """A[rows, sigma] (A_{tau sigma})^-1 from the stored factors.

        ``U_factor`` agrees with A on the pivot columns, so the basis is
        U_factor @ lower^-1 and no further oracle calls are needed. Rows at
        the pivot positions are the identity.
        """
        k = self.rank
        m = self.rows.size
        if k == 0:
            return np.zeros((m, 0))
        out = solve_triangular(self.pivot_lu.lower, self.U_factor.T, trans="T", lower=True).T
        out[self.row_positions] = np.eye(k)
        return out


def _empty_result(rows: np.ndarray, cols: np.ndarray, converged: bool = True) -> ACAResult:
    return ACAResult(
        rows=rows,
        cols=cols,
        row_pivots=_EMPTY_IDX,
        col_pivots=_EMPTY_IDX,
        row_positions=_EMPTY_IDX,
        col_positions=_EMPTY_IDX,
        U_factor=np.zeros((rows.size, 0)),
        V_factor=np.zeros((cols.size, 0)),
        pivot_lu=PivotLU(np.zeros((0, 0)), np.zeros((0, 0))),
        converged=converged,
    )


class _Factors:
    """Column-major storage for u_k / v_k that grows by doubling."""

    def __init__(self, m: int, n: int, capacity: int):
        self.k = 0
        self.u = np.empty((m, capacity))
        self.v = np.empty((n, capacity))

    def append(self, u: np.ndarray, v: np.ndarray) -> None:
        if self.k == self.u.shape[1]:
            grow = max(1, self.u.shape[1])
            self.u = np.hstack([self.u, np.empty((self.u.shape[0], grow))])
            self.v = np.hstack([self.v, np.empty((self.v.shape[0], grow))])
        self.u[:, self.k] = u
        self.v[:, self.k] = v
        self.k += 1

    @property
    def U(self) -> np.ndarray:
        return self.u[:, : self.k]

    @property
    def V(self) -> np.ndarray:
        return self.v[:, : self.k]


def partial_aca(
    rows,
    cols,
    oracle: BlockOracle,
    epsilon: float,
    max_rank: int | None = None,
) -> ACAResult:
    """Cross approximation A[rows, cols] ~= U_factor @ V_factor.T.

    Stops once ||u_k|| ||v_k|| <= epsilon * ||A^(k)||_F, when the rank reaches
    min(len(rows), len(cols)), or at ``max_rank`` (then ``converged`` is
    False). Pivots are returned in discovery order as global indices.
    """
    if not epsilon > 0:
        raise ValueError(f"ACA tolerance must be positive, got {epsilon}")
    rows = np.asarray(rows, dtype=np.intp).reshape(-1)
    cols = np.asarray(cols, dtype=np.intp).reshape(-1)
    m, n = rows.size, cols.size
    if m == 0 or n == 0:
        return _empty_result(rows, cols)

    full_rank = min(m, n)
    cap = full_rank if max_rank is None else max(0, min(int(max_rank), full_rank))
    if cap == 0:
        return _empty_result(rows, cols, converged=False)

    factors = _Factors(m, n, min(cap, 16))
    row_tried = np.zeros(m, dtype=bool)
    col_used = np.zeros(n, dtype=bool)
    row_pos: list[int] = []
    col_pos: list[int] = []
    pivots: list[float] = []
    history: list[float] = []
    norm_sq = 0.0
    max_pivot = 0.0
    skipped = 0
    converged = False

    i = 0
    while True:
        row_tried[i] = True
        r = oracle(rows[i : i + 1], cols)[0].astype(np.float64, copy=True)
        if factors.k:
            r -= factors.V @ factors.U[i]
        masked = np.abs(r)
        masked[col_used] = -1.0
        j = int(np.argmax(masked))
        pivot = r[j]
        if masked[j] <= ZERO_PIVOT_RTOL * max_pivot or pivot == 0.0:
            # residual row vanishes; try the next untried row
            skipped += 1
            untried = np.flatnonzero(~row_tried)
            if untried.size == 0:
                converged = True
                break
            i = int(untried[0])
            continue

        v = r / pivot
        c = oracle(rows, cols[j : j + 1])[:, 0].astype(np.float64, copy=True)
        if factors.k:
            c -= factors.U @ factors.V[j]

        if factors.k:
            cross = 2.0 * float(np.dot(factors.U.T @ c, factors.V.T @ v))
        else:
            cross = 0.0
        uv_sq = float(np.dot(c, c)) * float(np.dot(v, v))
        norm_sq = max(norm_sq + cross + uv_sq, 0.0)

        factors.append(c, v)
        row_pos.append(i)
        col_pos.append(j)
        pivots.append(float(pivot))
        col_used[j] = True
        max_pivot = max(max_pivot, abs(float(pivot)))
        rel = np.sqrt(uv_sq / norm_sq) if norm_sq > 0 else 0.0
        history.append(float(rel))

        if np.sqrt(uv_sq) <= epsilon * np.sqrt(norm_sq):
            converged = True
            break
        if factors.k == full_rank:
            converged = True
            break
        if factors.k == cap:
            converged = False
            break

        masked_c = np.abs(c)
        masked_c[row_tried] = -1.0
        nxt = int(np.argmax(masked_c))
        if masked_c[nxt] < 0.0:
            converged = True
            break
        i = nxt

    k = factors.k
    row_positions = np.asarray(row_pos, dtype=np.intp)
    col_positions = np.asarray(col_pos, dtype=np.intp)
    U = factors.U.copy()
    V = factors.V.copy()
    result = ACAResult(
        rows=rows,
        cols=cols,
        row_pivots=rows[row_positions],
        col_pivots=cols[col_positions],
        row_positions=row_positions,
        col_positions=col_positions,
        U_factor=U,
        V_factor=V,
        pivot_lu=PivotLU(lower=U[row_positions, :], upper=V[col_positions, :].T.copy()),
        converged=converged,
        skipped_rows=skipped,
        norm_estimate=float(np.sqrt(norm_sq)),
        history=history,
    )
    logger.debug(
        "ACA %dx%d: rank %d, %d skipped rows, converged=%s", m, n, k, skipped, converged
    )
    return _drop_unstable_pivots(result)


def _stable_rank(lower: np.ndarray) -> int:
    piv = np.abs(np.diag(lower))
    if piv.size == 0:
        return 0
    small = np.flatnonzero(piv < ZERO_PIVOT_RTOL * piv.max())
    return int(small[0]) if small.size else piv.size


def truncate(result: ACAResult, k: int) -> ACAResult:
    """Keep the first k crosses of an ACA result."""
    if k >= result.rank:
        return result
    U = result.U_factor[:, :k]
    V = result.V_factor[:, :k]
    return ACAResult(
        rows=result.rows,
        cols=result.cols,
        row_pivots=result.row_pivots[:k],
        col_pivots=result.col_pivots[:k],
        row_positions=result.row_positions[:k],
        col_positions=result.col_positions[:k],
        U_factor=U,
        V_factor=V,
        pivot_lu=PivotLU(result.pivot_lu.lower[:k, :k], result.pivot_lu.upper[:k, :k]),
        converged=result.converged,
        skipped_rows=result.skipped_rows,
        norm_estimate=result.norm_estimate,
        history=result.history[:k],
    )


def _drop_unstable_pivots(result: ACAResult) -> ACAResult:
    k = _stable_rank(result.pivot_lu.lower)
    if k < result.rank:
        logger.warning(
            "Near-singular pivot block: dropping %d of %d trailing pivots",
            result.rank - k, result.rank,
        )
        dropped = result.rank - k
        result = truncate(result, k)
        result.dropped_pivots = dropped
    return result


def apply_pivot_inverse(result: ACAResult, rhs) -> np.ndarray:
    """(A_{tau sigma})^-1 @ rhs by forward and back substitution."""
    rhs = np.asarray(rhs, dtype=np.float64)
    k = result.rank
    vector = rhs.ndim == 1
    mat = rhs.reshape(-1, 1) if vector else rhs
    if mat.shape[0] != k:
        raise DimensionError(f"Right-hand side has {mat.shape[0]} rows, expected {k}")
    out = np.zeros_like(mat)
    keep = _stable_rank(result.pivot_lu.lower)
    if keep < k:
        logger.warning(
            "Near-singular pivot block: solving with %d of %d pivots", keep, k
        )
    if keep:
        lower = result.pivot_lu.lower[:keep, :keep]
        upper = result.pivot_lu.upper[:keep, :keep]
        y = solve_triangular(lower, mat[:keep], lower=True)
        out[:keep] = solve_triangular(upper, y, lower=False, unit_diagonal=True)
    return out.reshape(-1) if vector else out
