from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from nnca.errors import GeometryError
from nnca.geometry import (
    PointCloud,
    chebyshev_points,
    grid_points,
    load_points_csv,
    make_points,
    uniform_points,
)

FIXTURES_DIR = Path(__file__).parent / "fixtures"


def test_uniform_points_are_seeded_and_bounded():
    a = uniform_points(100, 3, seed=7)
    np.testing.assert_array_equal(a, uniform_points(100, 3, seed=7))
    assert a.shape == (100, 3)
    assert np.all(np.abs(a) <= 1.0)


def test_chebyshev_points_full_grid():
    pts = chebyshev_points(16, 2)
    assert pts.shape == (16, 2)
    nodes = np.cos((2 * np.arange(4) + 1) * np.pi / 8)
    np.testing.assert_allclose(np.unique(pts[:, 0]), np.sort(nodes))


def test_chebyshev_points_subsample():
    pts = chebyshev_points(10, 2, seed=1)
    assert pts.shape == (10, 2)
    assert len({tuple(p) for p in pts.tolist()}) == 10


def test_grid_points_are_cell_centred():
    pts = grid_points(4, 3)
    assert pts.shape == (64, 3)
    np.testing.assert_allclose(np.unique(pts[:, 2]), [-0.75, -0.25, 0.25, 0.75])


def test_make_points_unknown_distribution():
    with pytest.raises(GeometryError, match="Unknown distribution 'halton'"):
        make_points("halton", 10, 2)


def test_point_cloud_shared_and_split():
    shared = PointCloud.from_points(np.zeros((3, 2)))
    assert shared.shared
    assert shared.n_targets == shared.n_sources == 3
    split = PointCloud.from_points(np.zeros((3, 2)), sources=np.ones((5, 2)))
    assert not split.shared
    assert split.n_sources == 5


def test_point_cloud_dimension_mismatch():
    with pytest.raises(GeometryError, match="Dimension mismatch"):
        PointCloud.from_points(np.zeros((3, 2)), sources=np.zeros((3, 3)))


# --- load_points_csv ---


def test_load_points_skips_header():
    points, labels = load_points_csv(FIXTURES_DIR / "points.csv")
    assert points.shape == (6, 2)
    assert labels is None
    np.testing.assert_allclose(points[0], [-0.9, -0.9])


def test_load_points_splits_label_column():
    points, labels = load_points_csv(FIXTURES_DIR / "labelled.csv", dim=2)
    assert points.shape == (20, 2)
    assert set(labels.tolist()) == {1.0, -1.0}


def test_load_points_wrong_width(tmp_path):
    path = tmp_path / "wide.csv"
    path.write_text("1,2,3,4\n5,6,7,8\n")
    with pytest.raises(GeometryError, match="Expected 2 or 3 columns"):
        load_points_csv(path, dim=2)


def test_load_points_malformed_row(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("1,2\n3,oops\n")
    with pytest.raises(GeometryError, match="Malformed point row 2"):
        load_points_csv(path)


def test_load_points_malformed_row_counts_blank_lines(tmp_path):
    path = tmp_path / "gappy.csv"
    path.write_text("x,y\n1,2\n\n3,4\n5,\n")
    with pytest.raises(GeometryError, match="Malformed point row 5"):
        load_points_csv(path)


def test_load_points_inconsistent_columns(tmp_path):
    path = tmp_path / "ragged.csv"
    path.write_text("1,2\n3,4,5\n")
    with pytest.raises(GeometryError, match="Inconsistent column count"):
        load_points_csv(path)


def test_load_points_single_row_stays_two_dimensional(tmp_path):
    path = tmp_path / "one.csv"
    path.write_text("0.5,-0.25,1\n")
    points, labels = load_points_csv(path, dim=2)
    assert points.shape == (1, 2)
    np.testing.assert_array_equal(labels, [1.0])


def test_load_points_empty_file(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("x,y\n")
    with pytest.raises(GeometryError, match="empty point set"):
        load_points_csv(path)


def test_load_points_missing_file():
    with pytest.raises(GeometryError, match="Point file not found"):
        load_points_csv("/nonexistent/points.csv")
