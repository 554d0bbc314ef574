"""Uniform 2^d tree over the bounding hypercube of a point cloud.

Every level k is a full grid of 2^(kd) cells (empty cells included) so a
cell's neighbors and interaction list are found by multi-index arithmetic.
All leaves sit at the deepest level.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import GeometryError
from .geometry import PointCloud

logger = logging.getLogger(__name__)

BOX_MARGIN = 1e-12
MIN_RELATIVE_WIDTH = 1e-13
MAX_GRID_CELLS = 2**20
_ADMISSIBLE_RTOL = 1e-12

_EMPTY = np.empty(0, dtype=np.intp)


@dataclass(eq=False)
class Cell:
    level: int
    multi_index: tuple[int, ...]
    center: np.ndarray
    half_width: float
    t_idx: np.ndarray = field(default_factory=lambda: _EMPTY)
    s_idx: np.ndarray = field(default_factory=lambda: _EMPTY)
    parent: Cell | None = None
    children: list[Cell] = field(default_factory=list)
    neighbors: list[Cell] = field(default_factory=list)
    interaction_list: list[Cell] = field(default_factory=list)
    flat_id: int = 0

    @property
    def is_leaf(self) -> bool:
        return not self.children

    @property
    def is_empty(self) -> bool:
        return self.t_idx.size == 0 and self.s_idx.size == 0

    def __repr__(self) -> str:
        return (
            f"Cell(level={self.level}, multi_index={self.multi_index}, "
            f"targets={self.t_idx.size}, sources={self.s_idx.size})"
        )


@dataclass
class HierTree:
    root: Cell
    depth: int
    eta: float
    nu: int
    dim: int
    cells_by_level: list[list[Cell]]
    lower_corner: np.ndarray
    width: float
    overfull_leaves: list[Cell] = field(default_factory=list)

    @property
    def leaves(self) -> list[Cell]:
        return self.cells_by_level[self.depth]

    def cell_at(self, level: int, multi_index) -> Cell:
        n = 1 << level
        flat = int(np.ravel_multi_index(tuple(multi_index), (n,) * self.dim))
        return self.cells_by_level[level][flat]

    def cells(self):
        """All cells, root first, in level order."""
        for level_cells in self.cells_by_level:
            yield from level_cells

    @property
    def n_cells(self) -> int:
        return sum(len(level_cells) for level_cells in self.cells_by_level)


@dataclass
class TreeStats:
    depth: int
    dim: int
    nu: int
    eta: float
    cells_per_level: list[int]
    nonempty_per_level: list[int]
    occupancy_histogram: dict[int, int]
    overfull_leaves: int
    neighbor_range: tuple[int, int]
    interaction_range: tuple[int, int]


def _gap_admissible(gap_sq: float, dim: int, eta: float) -> bool:
    # cells of width w: diam = w*sqrt(d), dist = w*sqrt(gap_sq)
    return math.sqrt(dim) <= eta * math.sqrt(gap_sq) * (1.0 + _ADMISSIBLE_RTOL)


def admissible(x: Cell, y: Cell, eta: float) -> bool:
    """max{diam(X), diam(Y)} <= eta * dist(X, Y) for axis-aligned cubes."""
    dim = len(x.multi_index)
    if x.level == y.level and x.half_width == y.half_width:
        delta = np.abs(np.subtract(x.multi_index, y.multi_index))
        gaps = np.maximum(delta - 1, 0)
        return _gap_admissible(float(np.dot(gaps, gaps)), dim, eta)
    diam = 2.0 * max(x.half_width, y.half_width) * math.sqrt(dim)
    sep = np.maximum(np.abs(x.center - y.center) - x.half_width - y.half_width, 0.0)
    return diam <= eta * float(np.linalg.norm(sep)) * (1.0 + _ADMISSIBLE_RTOL)


def _neighbor_offsets(dim: int, eta: float) -> np.ndarray:
    """All same-level multi-index offsets that fail admissibility."""
    # any gap with |gap|^2 >= d / eta^2 is admissible, which bounds the search
    reach = int(math.ceil(math.sqrt(dim) / eta)) + 2
    offsets = []
    for delta in itertools.product(range(-reach, reach + 1), repeat=dim):
        gaps = [max(abs(v) - 1, 0) for v in delta]
        if not _gap_admissible(float(sum(g * g for g in gaps)), dim, eta):
            offsets.append(delta)
    return np.asarray(offsets, dtype=np.int64).reshape(-1, dim)


def _bucket(points: np.ndarray, lower: np.ndarray, cell_width: float, n: int) -> np.ndarray:
    """Multi-indices of points; boundary points go to the lower cell."""
    t = (points - lower) / cell_width
    idx = np.ceil(t).astype(np.int64) - 1
    return np.clip(idx, 0, n - 1)


def _max_occupancy(multi: np.ndarray, n: int) -> int:
    if multi.shape[0] == 0:
        return 0
    flat = np.ravel_multi_index(tuple(multi.T), (n,) * multi.shape[1])
    return int(np.bincount(flat).max())


def _split_by_cell(multi: np.ndarray, n: int, n_cells: int) -> list[np.ndarray]:
    if multi.shape[0] == 0:
        return [_EMPTY] * n_cells
    flat = np.ravel_multi_index(tuple(multi.T), (n,) * multi.shape[1])
    order = np.argsort(flat, kind="stable")
    counts = np.bincount(flat, minlength=n_cells)
    return np.split(order.astype(np.intp), np.cumsum(counts)[:-1])


def _bounding_box(cloud: PointCloud) -> tuple[np.ndarray, float]:
    pts = cloud.targets if cloud.shared else np.vstack([cloud.targets, cloud.sources])
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    mid = 0.5 * (lo + hi)
    half = float(np.max(hi - lo)) / 2.0
    if half == 0.0:
        half = 0.5
    half *= 1.0 + BOX_MARGIN
    return mid - half, 2.0 * half


def build_tree(cloud: PointCloud, nu: int, eta: float, compute: bool = True) -> HierTree:
    """Bucket the cloud into the shallowest uniform tree whose leaves hold <= nu points."""
    if cloud.n_targets == 0 or cloud.n_sources == 0:
        raise GeometryError("empty point set")
    if nu is None or int(nu) < 1:
        raise GeometryError("invalid leaf capacity")
    if not eta > 0:
        raise GeometryError(f"invalid admissibility parameter: {eta}")
    nu = int(nu)
    dim = cloud.dim
    lower, width = _bounding_box(cloud)

    depth = 0
    overfull = False
    while True:
        n = 1 << depth
        cell_width = width / n
        t_multi = _bucket(cloud.targets, lower, cell_width, n)
        s_multi = t_multi if cloud.shared else _bucket(cloud.sources, lower, cell_width, n)
        if _max_occupancy(t_multi, n) <= nu and _max_occupancy(s_multi, n) <= nu:
            break
        next_cells = (2 * n) ** dim
        if next_cells > MAX_GRID_CELLS or (cell_width / 2.0) / width < MIN_RELATIVE_WIDTH:
            overfull = True
            break
        depth += 1

    cells_by_level: list[list[Cell]] = []
    for level in range(depth + 1):
        n = 1 << level
        shift = depth - level
        lt = t_multi >> shift
        ls = s_multi >> shift
        n_cells = n**dim
        t_split = _split_by_cell(lt, n, n_cells)
        s_split = t_split if cloud.shared else _split_by_cell(ls, n, n_cells)
        cell_width = width / n
        multis = np.stack(np.unravel_index(np.arange(n_cells), (n,) * dim), axis=1)
        level_cells = []
        for flat_id in range(n_cells):
            multi = tuple(int(v) for v in multis[flat_id])
            center = lower + (multis[flat_id] + 0.5) * cell_width
            cell = Cell(
                level=level,
                multi_index=multi,
                center=center,
                half_width=cell_width / 2.0,
                t_idx=t_split[flat_id],
                s_idx=s_split[flat_id],
                flat_id=flat_id,
            )
            if level > 0:
                parent_multi = tuple(v >> 1 for v in multi)
                parent = cells_by_level[level - 1][
                    int(np.ravel_multi_index(parent_multi, (n >> 1,) * dim))
                ]
                cell.parent = parent
                parent.children.append(cell)
            level_cells.append(cell)
        cells_by_level.append(level_cells)

    tree = HierTree(
        root=cells_by_level[0][0],
        depth=depth,
        eta=float(eta),
        nu=nu,
        dim=dim,
        cells_by_level=cells_by_level,
        lower_corner=lower,
        width=width,
    )
    if overfull:
        tree.overfull_leaves = [
            c for c in tree.leaves if c.t_idx.size > nu or c.s_idx.size > nu
        ]
        logger.warning(
            "Subdivision stopped at level %d with %d leaves over capacity %d",
            depth, len(tree.overfull_leaves), nu,
        )
    logger.debug("Built %dD tree: depth %d, %d cells", dim, depth, tree.n_cells)
    if compute:
        compute_lists(tree)
    return tree


def compute_lists(tree: HierTree) -> HierTree:
    """Fill N(B) and IL(B) for every cell at level >= 1."""
    dim = tree.dim
    offsets = _neighbor_offsets(dim, tree.eta)
    offset_keys = {tuple(o) for o in offsets.tolist()}
    child_offsets = np.asarray(list(itertools.product((0, 1), repeat=dim)), dtype=np.int64)
    # IL offsets depend only on the cell's position inside its parent
    parity_stencils: dict[tuple[int, ...], np.ndarray] = {}
    for parity in child_offsets.tolist():
        cand = (2 * offsets[:, None, :] + child_offsets[None, :, :]).reshape(-1, dim) - parity
        cand = np.unique(cand, axis=0)
        keep = [tuple(c) not in offset_keys for c in cand.tolist()]
        parity_stencils[tuple(parity)] = cand[np.asarray(keep, dtype=bool)]

    tree.root.neighbors = [tree.root]
    tree.root.interaction_list = []
    for level in range(1, tree.depth + 1):
        n = 1 << level
        shape = (n,) * dim
        level_cells = tree.cells_by_level[level]
        for cell in level_cells:
            base = np.asarray(cell.multi_index, dtype=np.int64)
            cell.neighbors = _cells_at(level_cells, base + offsets, n, shape)
            parity = tuple(int(v) for v in base & 1)
            cell.interaction_list = _cells_at(level_cells, base + parity_stencils[parity], n, shape)
    return tree


def _cells_at(level_cells: list[Cell], multis: np.ndarray, n: int, shape) -> list[Cell]:
    inside = np.all((multis >= 0) & (multis < n), axis=1)
    if not inside.any():
        return []
    flat = np.sort(np.ravel_multi_index(tuple(multis[inside].T), shape))
    return [level_cells[i] for i in flat]


def tree_statistics(tree: HierTree) -> TreeStats:
    histogram: dict[int, int] = {}
    for leaf in tree.leaves:
        occupancy = max(leaf.t_idx.size, leaf.s_idx.size)
        histogram[occupancy] = histogram.get(occupancy, 0) + 1
    listed = [c for c in tree.cells() if c.level >= 1]
    nbr = [len(c.neighbors) for c in listed] or [len(tree.root.neighbors)]
    il = [len(c.interaction_list) for c in listed] or [0]
    return TreeStats(
        depth=tree.depth,
        dim=tree.dim,
        nu=tree.nu,
        eta=tree.eta,
        cells_per_level=[len(lc) for lc in tree.cells_by_level],
        nonempty_per_level=[sum(not c.is_empty for c in lc) for lc in tree.cells_by_level],
        occupancy_histogram=dict(sorted(histogram.items())),
        overfull_leaves=len(tree.overfull_leaves),
        neighbor_range=(min(nbr), max(nbr)),
        interaction_range=(min(il), max(il)),
    )
