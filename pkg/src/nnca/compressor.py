"""Nested cross approximation: pivots, transfer operators and H² assembly.

A single bottom-up pass over levels kappa..2 chooses, for every cell,
incoming pivots (t_in, s_in) and outgoing pivots (t_out, s_out) by partial
ACA over search spaces drawn from the cell's interaction list. The nested
transfer operators fall out of each ACA as A[cand, sigma] A_{tau sigma}^-1,
so building them costs no kernel evaluations.
"""

from __future__ import annotations

import logging
import time
from collections.abc import Iterator, Mapping
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, NamedTuple

import numpy as np
from scipy.sparse.linalg import LinearOperator

from .aca import ACAResult, BlockOracle, partial_aca
from .errors import KernelError
from .geometry import PointCloud
from .kernels import ENTRY_COUNTER, KernelOracle, KernelSpec, block
from .tree import Cell, HierTree

logger = logging.getLogger(__name__)

FIRST_COMPRESSED_LEVEL = 2
NORM_SAMPLE_ROWS = 3

_EMPTY = np.empty(0, dtype=np.intp)


def _concat(parts: list[np.ndarray]) -> np.ndarray:
    parts = [p for p in parts if p.size]
    if not parts:
        return _EMPTY
    return np.concatenate(parts).astype(np.intp, copy=False)


@dataclass
class PivotSet:
    t_in: np.ndarray = field(default_factory=lambda: _EMPTY)
    s_in: np.ndarray = field(default_factory=lambda: _EMPTY)
    t_out: np.ndarray = field(default_factory=lambda: _EMPTY)
    s_out: np.ndarray = field(default_factory=lambda: _EMPTY)

    @property
    def rank(self) -> int:
        return max(self.t_in.size, self.s_out.size)

    @property
    def nbytes(self) -> int:
        return self.t_in.nbytes + self.s_in.nbytes + self.t_out.nbytes + self.s_out.nbytes


@dataclass
class TransferOps:
    """Leaf bases U, V or the per-child transfer blocks of a non-leaf cell.

    ``C[c]`` has shape (|t_in(child)|, |t_in(B)|) and ``T[c]`` holds the
    outgoing transfer transposed, shape (|s_out(child)|, |s_out(B)|), both in
    the order of ``children``.
    """

    U: np.ndarray | None = None
    V: np.ndarray | None = None
    children: list[Cell] = field(default_factory=list)
    C: list[np.ndarray] = field(default_factory=list)
    T: list[np.ndarray] = field(default_factory=list)

    @property
    def nbytes(self) -> int:
        total = sum(b.nbytes for b in self.C)
        if self.T is not self.C:
            total += sum(b.nbytes for b in self.T)
        if self.U is not None:
            total += self.U.nbytes
        if self.V is not None and self.V is not self.U:
            total += self.V.nbytes
        return total


class CandidateSets(NamedTuple):
    t_in: np.ndarray
    s_in: np.ndarray
    t_out: np.ndarray
    s_out: np.ndarray
    # lengths of the consecutive runs of s_in / t_out owned by each
    # interaction-list member
    s_in_sizes: tuple[int, ...] = ()
    t_out_sizes: tuple[int, ...] = ()


@dataclass
class CellDiagnostic:
    level: int
    multi_index: tuple[int, ...]
    side: str
    message: str


@dataclass
class H2Stats:
    n_targets: int = 0
    n_sources: int = 0
    max_rank: int = 0
    memory_bytes: int = 0
    assembly_seconds: float = 0.0
    entry_evaluations: int = 0
    pivot_evaluations: int = 0
    transfer_evaluations: int = 0
    coupling_evaluations: int = 0
    nearfield_evaluations: int = 0
    n_coupling_blocks: int = 0
    n_nearfield_blocks: int = 0
    cells_visited: int = 0
    rank_per_level: dict[int, int] = field(default_factory=dict)
    diagnostics: list[CellDiagnostic] = field(default_factory=list)


class BlockRows(Mapping):
    """Blocks keyed by (row cell, column cell), packed one matrix per row cell.

    ``packed[x]`` holds the blocks of ``partners[x]`` side by side and
    ``bounds[x]`` their column offsets; a single block is a column slice.
    """

    def __init__(self) -> None:
        self.partners: dict[Cell, list[Cell]] = {}
        self.packed: dict[Cell, np.ndarray] = {}
        self.bounds: dict[Cell, np.ndarray] = {}
        self._count = 0

    def add_row(self, x: Cell, partners: list[Cell], packed: np.ndarray, widths) -> None:
        if not partners:
            return
        self.partners[x] = list(partners)
        self.packed[x] = packed
        self.bounds[x] = np.cumsum((0, *widths))
        self._count += len(partners)

    def __getitem__(self, key: tuple[Cell, Cell]) -> np.ndarray:
        x, y = key
        for i, cell in enumerate(self.partners.get(x, ())):
            if cell is y:
                lo, hi = self.bounds[x][i : i + 2]
                return self.packed[x][:, lo:hi]
        raise KeyError(key)

    def __iter__(self) -> Iterator[tuple[Cell, Cell]]:
        for x, ys in self.partners.items():
            for y in ys:
                yield x, y

    def __len__(self) -> int:
        return self._count

    @property
    def nbytes(self) -> int:
        return sum(p.nbytes for p in self.packed.values())


STATS_CSV_HEADER = ("N", "mem", "T_a", "max_rank", "entry_evals")


@dataclass
class H2Matrix:
    tree: HierTree
    kernel: KernelSpec
    cloud: PointCloud
    eps_nca: float
    symmetric: bool
    pivots: dict[Cell, PivotSet]
    transfers: dict[Cell, TransferOps]
    couplings: BlockRows
    nearfield: BlockRows
    stats: H2Stats
    # index layout for the matvec passes, built on first use
    plan: Any = field(default=None, repr=False)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.cloud.n_targets, self.cloud.n_sources)

    def matvec(self, w, threads: int | None = None) -> np.ndarray:
        from .matvec import h2_matvec

        return h2_matvec(self, w, threads=threads)

    def as_linear_operator(self) -> LinearOperator:
        return LinearOperator(self.shape, matvec=self.matvec, dtype=np.float64)

    def stats_csv_row(self) -> tuple:
        s = self.stats
        return (
            s.n_targets,
            s.memory_bytes,
            f"{s.assembly_seconds:.6f}",
            s.max_rank,
            s.entry_evaluations,
        )


@dataclass
class PivotSelection:
    pivots: dict[Cell, PivotSet]
    transfers: dict[Cell, TransferOps]
    symmetric: bool
    cells_visited: int = 0
    pivot_evaluations: int = 0
    transfer_evaluations: int = 0
    diagnostics: list[CellDiagnostic] = field(default_factory=list)


def candidate_sets(cell: Cell, pivots: dict[Cell, PivotSet]) -> CandidateSets:
    """Search spaces for the incoming and outgoing ACA of ``cell``.

    Leaves draw on point indices, non-leaf cells on the pivots already chosen
    for their children and for the children of their interaction list.
    Empty cells contribute nothing.
    """
    far = [y for y in cell.interaction_list if not y.is_empty]
    if cell.is_leaf:
        return CandidateSets(
            t_in=cell.t_idx,
            s_in=_concat([y.s_idx for y in far]),
            t_out=_concat([y.t_idx for y in far]),
            s_out=cell.s_idx,
            s_in_sizes=tuple(y.s_idx.size for y in far),
            t_out_sizes=tuple(y.t_idx.size for y in far),
        )
    kids = [c for c in cell.children if c in pivots]
    far_kids = [[c for c in y.children if c in pivots] for y in far]
    return CandidateSets(
        t_in=_concat([pivots[c].t_in for c in kids]),
        s_in=_concat([pivots[c].s_out for group in far_kids for c in group]),
        t_out=_concat([pivots[c].t_in for group in far_kids for c in group]),
        s_out=_concat([pivots[c].s_out for c in kids]),
        s_in_sizes=tuple(sum(pivots[c].s_out.size for c in g) for g in far_kids),
        t_out_sizes=tuple(sum(pivots[c].t_in.size for c in g) for g in far_kids),
    )


@dataclass
class _Side:
    """Outcome of one pivot search: pivots plus the interpolation basis."""

    self_pivots: np.ndarray
    far_pivots: np.ndarray
    basis: np.ndarray
    note: str | None = None
    aca: ACAResult | None = None


class _MemberScaledOracle:
    """Block oracle with every far column multiplied by its member's weight.

    Scaling columns leaves A[:, sigma] A_{tau sigma}^-1 unchanged, so only
    the pivot order and the point where the ACA stops depend on it.
    """

    def __init__(self, oracle: BlockOracle, cols: np.ndarray, weights: np.ndarray):
        self._oracle = oracle
        order = np.argsort(cols, kind="stable")
        self._sorted = cols[order]
        self._weights = weights[order]

    def __call__(self, rows, cols) -> np.ndarray:
        cols = np.asarray(cols, dtype=np.intp).reshape(-1)
        weights = self._weights[np.searchsorted(self._sorted, cols)]
        return self._oracle(rows, cols) * weights


def member_weights(
    self_cand: np.ndarray,
    far_cand: np.ndarray,
    sizes: tuple[int, ...],
    oracle: BlockOracle,
) -> np.ndarray | None:
    """Column weights bringing each interaction-list member's block to unit norm.

    Block norms are estimated from a few evenly spaced self rows. Returns
    None when there is nothing to balance.
    """
    sizes = tuple(s for s in sizes if s)
    if len(sizes) < 2 or sum(sizes) != far_cand.size:
        return None
    n_rows = min(NORM_SAMPLE_ROWS, self_cand.size)
    picks = np.unique(np.linspace(0, self_cand.size - 1, n_rows).round().astype(np.intp))
    sample = np.asarray(oracle(self_cand[picks], far_cand), dtype=np.float64)
    starts = np.cumsum((0, *sizes[:-1]))
    norms = np.sqrt(np.add.reduceat(np.sum(sample * sample, axis=0), starts))
    seen = norms > 0
    if not seen.any():
        return None
    norms[~seen] = norms[seen].min()
    return np.repeat(1.0 / norms, sizes)


def _select_side(
    self_cand: np.ndarray,
    far_cand: np.ndarray,
    oracle: BlockOracle,
    eps: float,
    sizes: tuple[int, ...] = (),
) -> _Side:
    if self_cand.size == 0:
        return _Side(_EMPTY, _EMPTY, np.zeros((0, 0)))
    if far_cand.size == 0:
        # nothing to compress against; keep every candidate as a representative
        return _Side(self_cand, _EMPTY, np.eye(self_cand.size), note="pass-through")
    weights = member_weights(self_cand, far_cand, sizes, oracle)
    if weights is not None:
        oracle = _MemberScaledOracle(oracle, far_cand, weights)
    result = partial_aca(self_cand, far_cand, oracle, eps)
    note = None
    if result.dropped_pivots:
        note = f"dropped {result.dropped_pivots} near-singular pivots"
    elif not result.converged:
        note = "ACA stopped before reaching tolerance"
    return _Side(result.row_pivots, result.col_pivots, np.zeros((0, 0)), note=note, aca=result)


def _search_cell(
    cell: Cell,
    pivots: dict[Cell, PivotSet],
    kernel: KernelSpec,
    cloud: PointCloud,
    eps: float,
    symmetric: bool,
) -> tuple[Cell, CandidateSets, _Side, _Side | None]:
    cand = candidate_sets(cell, pivots)
    oracle = KernelOracle(kernel, cloud)
    incoming = _select_side(cand.t_in, cand.s_in, oracle, eps, cand.s_in_sizes)
    outgoing = None
    if not symmetric:
        # self sources act as ACA rows so the row pivots are s_out
        outgoing = _select_side(
            cand.s_out, cand.t_out, oracle.transpose(), eps, cand.t_out_sizes
        )
    return cell, cand, incoming, outgoing


def _split_rows(basis: np.ndarray, sizes: list[int]) -> list[np.ndarray]:
    out = []
    start = 0
    for size in sizes:
        out.append(basis[start : start + size])
        start += size
    return out


def _transfer_for(
    cell: Cell,
    pivots: dict[Cell, PivotSet],
    inc: np.ndarray,
    out: np.ndarray,
    symmetric: bool,
) -> TransferOps:
    if cell.is_leaf:
        return TransferOps(U=inc, V=inc if symmetric else out)
    kids = [c for c in cell.children if c in pivots]
    C = _split_rows(inc, [pivots[c].t_in.size for c in kids])
    T = C if symmetric else _split_rows(out, [pivots[c].s_out.size for c in kids])
    return TransferOps(children=kids, C=C, T=T)


def _basis(side: _Side) -> np.ndarray:
    if side.aca is not None:
        return side.aca.basis()
    return side.basis


def _resolve_symmetric(kernel: KernelSpec, cloud: PointCloud, symmetric: bool | None) -> bool:
    eligible = kernel.is_symmetric and cloud.shared
    if symmetric is None:
        return eligible
    if symmetric and not eligible:
        raise KernelError(
            f"Symmetric compression requires a symmetric kernel on a shared point set "
            f"(kernel '{kernel.name}' symmetric={kernel.is_symmetric}, shared={cloud.shared})"
        )
    return bool(symmetric)


def select_pivots(
    tree: HierTree,
    kernel: KernelSpec,
    cloud: PointCloud,
    eps_nca: float,
    symmetric: bool | None = None,
    threads: int | None = None,
) -> PivotSelection:
    """Single bottom-up pass choosing pivots and transfer operators per cell."""
    if not eps_nca > 0:
        raise ValueError(f"Invalid eps_nca value: {eps_nca} (must be a positive number)")
    sym = _resolve_symmetric(kernel, cloud, symmetric)
    selection = PivotSelection(pivots={}, transfers={}, symmetric=sym)
    pool = ThreadPoolExecutor(max_workers=threads) if threads and threads > 1 else None
    try:
        for level in range(tree.depth, FIRST_COMPRESSED_LEVEL - 1, -1):
            level_cells = tree.cells_by_level[level]
            selection.cells_visited += len(level_cells)
            work = [c for c in level_cells if not c.is_empty]

            before = ENTRY_COUNTER.value
            args = (selection.pivots, kernel, cloud, eps_nca, sym)
            if pool is not None:
                found = list(pool.map(lambda c: _search_cell(c, *args), work))
            else:
                found = [_search_cell(c, *args) for c in work]
            selection.pivot_evaluations += ENTRY_COUNTER.value - before

            before = ENTRY_COUNTER.value
            level_rank = 0
            new_pivots: dict[Cell, PivotSet] = {}
            new_transfers: dict[Cell, TransferOps] = {}
            for cell, _cand, incoming, outgoing in found:
                inc_basis = _basis(incoming)
                if sym:
                    piv = PivotSet(
                        t_in=incoming.self_pivots,
                        s_in=incoming.far_pivots,
                        t_out=incoming.far_pivots,
                        s_out=incoming.self_pivots,
                    )
                    out_basis = inc_basis
                else:
                    piv = PivotSet(
                        t_in=incoming.self_pivots,
                        s_in=incoming.far_pivots,
                        t_out=outgoing.far_pivots,
                        s_out=outgoing.self_pivots,
                    )
                    out_basis = _basis(outgoing)
                new_pivots[cell] = piv
                new_transfers[cell] = _transfer_for(
                    cell, selection.pivots, inc_basis, out_basis, sym
                )
                level_rank = max(level_rank, piv.rank)
                for side_name, side in (("incoming", incoming), ("outgoing", outgoing)):
                    if side is not None and side.note:
                        selection.diagnostics.append(
                            CellDiagnostic(cell.level, cell.multi_index, side_name, side.note)
                        )
            selection.transfer_evaluations += ENTRY_COUNTER.value - before
            selection.pivots.update(new_pivots)
            selection.transfers.update(new_transfers)
            logger.debug(
                "Level %d: %d nonempty of %d cells, max rank %d",
                level, len(work), len(level_cells), level_rank,
            )
    finally:
        if pool is not None:
            pool.shutdown()
    return selection


def assemble(
    tree: HierTree,
    kernel: KernelSpec,
    cloud: PointCloud,
    eps_nca: float,
    symmetric: bool | None = None,
    threads: int | None = None,
) -> H2Matrix:
    """Pivots, transfer operators, coupling blocks and near-field blocks."""
    start = time.perf_counter()
    total_before = ENTRY_COUNTER.value
    selection = select_pivots(tree, kernel, cloud, eps_nca, symmetric=symmetric, threads=threads)
    pivots = selection.pivots

    before = ENTRY_COUNTER.value
    couplings = BlockRows()
    for level in range(FIRST_COMPRESSED_LEVEL, tree.depth + 1):
        for x in tree.cells_by_level[level]:
            px = pivots.get(x)
            if px is None or px.t_in.size == 0:
                continue
            far = [y for y in x.interaction_list if y in pivots and pivots[y].s_out.size]
            if far:
                cols = [pivots[y].s_out for y in far]
                packed = block(kernel, cloud, px.t_in, _concat(cols))
                couplings.add_row(x, far, packed, [c.size for c in cols])
    coupling_evals = ENTRY_COUNTER.value - before

    before = ENTRY_COUNTER.value
    nearfield = BlockRows()
    for x in tree.leaves:
        if x.t_idx.size == 0:
            continue
        near = [y for y in x.neighbors if y.s_idx.size]
        if near:
            packed = block(kernel, cloud, x.t_idx, _concat([y.s_idx for y in near]))
            nearfield.add_row(x, near, packed, [y.s_idx.size for y in near])
    nearfield_evals = ENTRY_COUNTER.value - before

    rank_per_level: dict[int, int] = {}
    for cell, piv in pivots.items():
        sizes = (piv.t_in.size, piv.s_in.size, piv.t_out.size, piv.s_out.size)
        rank_per_level[cell.level] = max(rank_per_level.get(cell.level, 0), *sizes)

    memory = sum(p.nbytes for p in pivots.values())
    memory += sum(t.nbytes for t in selection.transfers.values())
    memory += couplings.nbytes + nearfield.nbytes

    stats = H2Stats(
        n_targets=cloud.n_targets,
        n_sources=cloud.n_sources,
        max_rank=max(rank_per_level.values(), default=0),
        memory_bytes=int(memory),
        assembly_seconds=time.perf_counter() - start,
        entry_evaluations=ENTRY_COUNTER.value - total_before,
        pivot_evaluations=selection.pivot_evaluations,
        transfer_evaluations=selection.transfer_evaluations,
        coupling_evaluations=coupling_evals,
        nearfield_evaluations=nearfield_evals,
        n_coupling_blocks=len(couplings),
        n_nearfield_blocks=len(nearfield),
        cells_visited=selection.cells_visited,
        rank_per_level=dict(sorted(rank_per_level.items())),
        diagnostics=selection.diagnostics,
    )
    for diag in stats.diagnostics:
        logger.debug(
            "Cell %s level %d (%s): %s", diag.multi_index, diag.level, diag.side, diag.message
        )
    logger.info(
        "Assembled H2 matrix: N=%d, max rank %d, %d coupling and %d near-field blocks in %.3fs",
        stats.n_targets, stats.max_rank, stats.n_coupling_blocks,
        stats.n_nearfield_blocks, stats.assembly_seconds,
    )
    return H2Matrix(
        tree=tree,
        kernel=kernel,
        cloud=cloud,
        eps_nca=float(eps_nca),
        symmetric=selection.symmetric,
        pivots=pivots,
        transfers=selection.transfers,
        couplings=couplings,
        nearfield=nearfield,
        stats=stats,
    )


def expand_row_basis(h2: H2Matrix, cell: Cell) -> tuple[np.ndarray, np.ndarray]:
    """Target indices below ``cell`` and the expanded incoming basis on them."""
    ops = h2.transfers[cell]
    if cell.is_leaf:
        return cell.t_idx, ops.U
    idx, blocks = [], []
    for child, c in zip(ops.children, ops.C):
        child_idx, child_u = expand_row_basis(h2, child)
        idx.append(child_idx)
        blocks.append(child_u @ c)
    width = h2.pivots[cell].t_in.size
    if not blocks:
        return _EMPTY, np.zeros((0, width))
    return _concat(idx), np.vstack(blocks)


def expand_col_basis(h2: H2Matrix, cell: Cell) -> tuple[np.ndarray, np.ndarray]:
    """Source indices below ``cell`` and the expanded outgoing basis on them."""
    ops = h2.transfers[cell]
    if cell.is_leaf:
        return cell.s_idx, ops.V
    idx, blocks = [], []
    for child, t in zip(ops.children, ops.T):
        child_idx, child_v = expand_col_basis(h2, child)
        idx.append(child_idx)
        blocks.append(child_v @ t)
    width = h2.pivots[cell].s_out.size
    if not blocks:
        return _EMPTY, np.zeros((0, width))
    return _concat(idx), np.vstack(blocks)
