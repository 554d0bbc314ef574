from __future__ import annotations

import math

import numpy as np
import pytest

from nnca.compressor import assemble
from nnca.geometry import PointCloud, uniform_points
from nnca.kernels import builtin_kernel
from nnca.tree import build_tree

ETA = math.sqrt(2.0)


@pytest.fixture
def cloud_2d():
    return PointCloud.from_points(uniform_points(400, 2, seed=0))


@pytest.fixture
def log_kernel():
    return builtin_kernel("reg-log-2d", 2)


@pytest.fixture
def tree_2d(cloud_2d):
    return build_tree(cloud_2d, nu=16, eta=ETA)


@pytest.fixture
def h2_2d(tree_2d, log_kernel, cloud_2d):
    return assemble(tree_2d, log_kernel, cloud_2d, 1e-10)


@pytest.fixture
def split_cloud_2d():
    """Distinct target and source sets on the same square."""
    return PointCloud.from_points(
        uniform_points(300, 2, seed=1), sources=uniform_points(250, 2, seed=2)
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
