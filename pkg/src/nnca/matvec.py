"""Fast H² matrix-vector product, the dense reference product and error metric."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .compressor import FIRST_COMPRESSED_LEVEL, H2Matrix
from .errors import DimensionError
from .geometry import PointCloud
from .kernels import KernelSpec
from .tree import Cell

logger = logging.getLogger(__name__)

DENSE_CHUNK_ROWS = 1024


@dataclass
class MultipoleData:
    """Per-cell outgoing (w_out) and incoming (u_in) coefficients.

    ``w_out`` entries are views into the flat ``outgoing`` vector laid out
    by the matvec plan.
    """

    outgoing: np.ndarray = field(default_factory=lambda: np.zeros(0))
    w_out: dict[Cell, np.ndarray] = field(default_factory=dict)
    u_in: dict[Cell, np.ndarray] = field(default_factory=dict)


@dataclass
class MatvecPlan:
    out_slots: dict[Cell, slice]
    n_out: int
    gathers: dict[Cell, np.ndarray]
    near_cols: dict[Cell, np.ndarray]


def _gather_index(slots: list[slice], bounds: np.ndarray) -> np.ndarray:
    starts = np.array([s.start for s in slots], dtype=np.intp)
    widths = np.diff(bounds)
    return np.repeat(starts - bounds[:-1], widths) + np.arange(bounds[-1], dtype=np.intp)


def matvec_plan(h2: H2Matrix) -> MatvecPlan:
    """Flat slots for the outgoing coefficients and per-row gather indices."""
    if h2.plan is not None:
        return h2.plan
    slots: dict[Cell, slice] = {}
    offset = 0
    for cell, piv in h2.pivots.items():
        slots[cell] = slice(offset, offset + piv.s_out.size)
        offset += piv.s_out.size
    couplings = h2.couplings
    gathers = {
        x: _gather_index([slots[y] for y in ys], couplings.bounds[x])
        for x, ys in couplings.partners.items()
    }
    near_cols = {
        x: np.concatenate([y.s_idx for y in ys]).astype(np.intp, copy=False)
        for x, ys in h2.nearfield.partners.items()
    }
    h2.plan = MatvecPlan(slots, offset, gathers, near_cols)
    return h2.plan


def _as_vector(w, n: int, what: str) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim == 2 and w.shape[1] == 1:
        w = w[:, 0]
    if w.ndim != 1 or w.shape[0] != n:
        raise DimensionError(f"{what} has length {w.shape[0] if w.ndim else 0}, expected {n}")
    return w


def upward_pass(h2: H2Matrix, w: np.ndarray) -> MultipoleData:
    plan = matvec_plan(h2)
    data = MultipoleData(outgoing=np.zeros(plan.n_out))
    tree = h2.tree
    for level in range(tree.depth, FIRST_COMPRESSED_LEVEL - 1, -1):
        for cell in tree.cells_by_level[level]:
            ops = h2.transfers.get(cell)
            if ops is None:
                continue
            coeffs = data.outgoing[plan.out_slots[cell]]
            if cell.is_leaf:
                coeffs[:] = ops.V.T @ w[cell.s_idx]
            else:
                for child, t in zip(ops.children, ops.T):
                    coeffs += t.T @ data.w_out[child]
            data.w_out[cell] = coeffs
    return data


def _transverse_cell(h2: H2Matrix, x: Cell, data: MultipoleData) -> np.ndarray:
    gather = matvec_plan(h2).gathers[x]
    return h2.couplings.packed[x] @ data.outgoing[gather]


def transverse_pass(h2: H2Matrix, data: MultipoleData, threads: int | None = None) -> None:
    cells = list(h2.couplings.partners)
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda c: _transverse_cell(h2, c, data), cells))
    else:
        results = [_transverse_cell(h2, c, data) for c in cells]
    data.u_in.update(zip(cells, results))


def downward_pass(h2: H2Matrix, data: MultipoleData, u: np.ndarray) -> None:
    tree = h2.tree
    for level in range(FIRST_COMPRESSED_LEVEL, tree.depth + 1):
        for cell in tree.cells_by_level[level]:
            local = data.u_in.get(cell)
            if local is None:
                continue
            ops = h2.transfers[cell]
            if cell.is_leaf:
                u[cell.t_idx] += ops.U @ local
                continue
            for child, c in zip(ops.children, ops.C):
                if child in data.u_in:
                    data.u_in[child] = data.u_in[child] + c @ local
                else:
                    data.u_in[child] = c @ local


def nearfield_pass(h2: H2Matrix, w: np.ndarray, u: np.ndarray) -> None:
    near_cols = matvec_plan(h2).near_cols
    for x, packed in h2.nearfield.packed.items():
        u[x.t_idx] += packed @ w[near_cols[x]]


def h2_matvec(h2: H2Matrix, w, threads: int | None = None) -> np.ndarray:
    """u = A w through upward, transverse, downward and near-field passes."""
    w = _as_vector(w, h2.cloud.n_sources, "Input vector")
    u = np.zeros(h2.cloud.n_targets)
    if h2.pivots:
        data = upward_pass(h2, w)
        transverse_pass(h2, data, threads=threads)
        downward_pass(h2, data, u)
    nearfield_pass(h2, w, u)
    return u


def dense_matvec(kernel: KernelSpec, cloud: PointCloud, w) -> np.ndarray:
    """Reference product A w, built in row chunks of the full kernel matrix."""
    w = _as_vector(w, cloud.n_sources, "Input vector")
    u = np.empty(cloud.n_targets)
    for start in range(0, cloud.n_targets, DENSE_CHUNK_ROWS):
        stop = min(start + DENSE_CHUNK_ROWS, cloud.n_targets)
        u[start:stop] = kernel.matrix(cloud.targets[start:stop], cloud.sources) @ w
    return u


def dense_rows(kernel: KernelSpec, cloud: PointCloud, rows, w) -> np.ndarray:
    """(A w)[rows] computed directly."""
    rows = np.asarray(rows, dtype=np.intp)
    w = _as_vector(w, cloud.n_sources, "Input vector")
    return kernel.matrix(cloud.targets[rows], cloud.sources) @ w


def relative_error(u, u_ref) -> float:
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    u_ref = np.asarray(u_ref, dtype=np.float64).reshape(-1)
    if u.shape != u_ref.shape:
        raise DimensionError(f"Length mismatch: {u.size} vs {u_ref.size}")
    ref = float(np.linalg.norm(u_ref))
    if ref == 0.0:
        raise DimensionError("Reference vector is zero")
    return float(np.linalg.norm(u - u_ref)) / ref
