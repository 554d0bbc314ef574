from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import GeometryError

DISTRIBUTIONS = ("uniform", "chebyshev")


@dataclass(frozen=True)
class PointCloud:
    """Targets P (rows, index set I) and sources Q (columns, index set J)."""

    dim: int
    targets: np.ndarray
    sources: np.ndarray
    shared: bool = False

    @classmethod
    def from_points(cls, points, sources=None) -> PointCloud:
        """Build a cloud; with ``sources=None`` P and Q are the same set."""
        targets = np.ascontiguousarray(np.atleast_2d(np.asarray(points, dtype=np.float64)))
        if targets.size == 0:
            raise GeometryError("empty point set")
        if sources is None:
            return cls(dim=targets.shape[1], targets=targets, sources=targets, shared=True)
        src = np.ascontiguousarray(np.atleast_2d(np.asarray(sources, dtype=np.float64)))
        if src.size == 0:
            raise GeometryError("empty point set")
        if src.shape[1] != targets.shape[1]:
            raise GeometryError(
                f"Dimension mismatch: targets are {targets.shape[1]}D, sources are {src.shape[1]}D"
            )
        return cls(dim=targets.shape[1], targets=targets, sources=src, shared=False)

    @property
    def n_targets(self) -> int:
        return self.targets.shape[0]

    @property
    def n_sources(self) -> int:
        return self.sources.shape[0]


def uniform_points(n: int, dim: int, seed: int = 0) -> np.ndarray:
    """i.i.d. uniform samples on [-1, 1]^dim."""
    rng = np.random.default_rng(seed)
    return rng.uniform(-1.0, 1.0, size=(n, dim))


def chebyshev_points(n: int, dim: int, seed: int = 0) -> np.ndarray:
    """Tensor-product Chebyshev nodes on [-1, 1]^dim.

    When n is not a perfect dim-th power the smallest covering grid is built
    and n of its nodes are drawn without replacement (seeded, sorted).
    """
    per_axis = max(1, math.ceil(round(n ** (1.0 / dim), 12)))
    while per_axis**dim < n:
        per_axis += 1
    k = np.arange(per_axis)
    nodes = np.cos((2 * k + 1) * np.pi / (2 * per_axis))
    mesh = np.meshgrid(*([nodes] * dim), indexing="ij")
    grid = np.stack([m.ravel() for m in mesh], axis=1)
    if grid.shape[0] == n:
        return grid
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(grid.shape[0], size=n, replace=False))
    return grid[keep]


def grid_points(n_per_axis: int, dim: int) -> np.ndarray:
    """Cell-centred uniform grid on [-1, 1]^dim with n_per_axis nodes per axis."""
    if n_per_axis < 1:
        raise GeometryError(f"Invalid grid size: {n_per_axis}")
    h = 2.0 / n_per_axis
    axis = -1.0 + (np.arange(n_per_axis) + 0.5) * h
    mesh = np.meshgrid(*([axis] * dim), indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def make_points(distribution: str, n: int, dim: int, seed: int = 0) -> np.ndarray:
    if distribution == "uniform":
        return uniform_points(n, dim, seed)
    if distribution == "chebyshev":
        return chebyshev_points(n, dim, seed)
    available = ", ".join(DISTRIBUTIONS)
    raise GeometryError(f"Unknown distribution '{distribution}'. Available: {available}")


def _numeric(line: str) -> bool:
    try:
        np.asarray(line.split(","), dtype=np.float64)
    except ValueError:
        return False
    return True


def load_points_csv(
    path: str | Path, dim: int | None = None
) -> tuple[np.ndarray, np.ndarray | None]:
    """Read one point per row; an extra trailing column is returned as labels.

    A first row that does not parse as numbers is treated as a header.
    """
    path = Path(path)
    if not path.exists():
        raise GeometryError(f"Point file not found: {path}")
    text = path.read_text(encoding="utf-8")
    lines = [
        (lineno, line)
        for lineno, line in enumerate(text.splitlines(), start=1)
        if line.strip(" \t,")
    ]
    if lines and lines[0][0] == 1 and not _numeric(lines[0][1]):
        lines = lines[1:]
    if not lines:
        raise GeometryError("empty point set")
    if len({line.count(",") for _, line in lines}) > 1:
        raise GeometryError(f"Inconsistent column count in {path}")
    try:
        data = np.loadtxt([line for _, line in lines], delimiter=",", dtype=np.float64, ndmin=2)
    except ValueError:
        lineno = next((n for n, line in lines if not _numeric(line)), lines[0][0])
        raise GeometryError(f"Malformed point row {lineno} in {path}") from None
    width = data.shape[1]
    if dim is None:
        return data, None
    if width == dim:
        return data, None
    if width == dim + 1:
        return data[:, :dim], data[:, dim]
    raise GeometryError(f"Expected {dim} or {dim + 1} columns in {path}, found {width}")
