from __future__ import annotations

import pytest

from nnca.compressor import CellDiagnostic, H2Stats
from nnca.formatter import (
    Colors,
    format_done,
    format_h2_summary,
    format_header,
    format_kernel_list,
    format_tree_report,
    get_colors,
)
from nnca.kernels import list_kernels
from nnca.tree import tree_statistics


def test_colors_none_is_empty():
    c = Colors.none()
    assert c.RED == c.GREEN == c.NC == ""


def test_get_colors():
    assert get_colors(True).RED == ""
    assert get_colors(False).RED == "\033[0;31m"


def test_format_header_lists_details():
    output = format_header("nnca matvec-bench", {"dim": 2, "eps_nca": 1e-9}, no_color=True)
    assert "nnca matvec-bench" in output
    assert "dim: 2" in output
    assert "eps_nca: 1e-09" in output
    assert "\033[" not in output


def test_format_header_with_color():
    assert "\033[" in format_header("t", {}, no_color=False)


def test_format_tree_report(tree_2d):
    output = format_tree_report(tree_statistics(tree_2d), no_color=True)
    assert f"2D, depth {tree_2d.depth}" in output
    assert "nu=16" in output
    assert "level  0:        1 cells" in output
    assert "Neighbors: " in output
    assert "exceed the capacity" not in output


def test_format_h2_summary(h2_2d):
    output = format_h2_summary(h2_2d.stats, no_color=True)
    assert f"Max rank: {h2_2d.stats.max_rank}" in output
    assert "transfers 0" in output


def test_format_h2_summary_reports_diagnostics():
    stats = H2Stats(diagnostics=[CellDiagnostic(2, (0, 1), "incoming", "pass-through")])
    assert "1 cell diagnostics" in format_h2_summary(stats, no_color=True)


def test_format_kernel_list():
    output = format_kernel_list(list_kernels())
    lines = output.splitlines()
    assert lines[0] == "Available kernels:"
    assert any(line.strip().startswith("matern") and "exp(-r)" in line for line in lines)


@pytest.mark.parametrize("no_color", [True, False])
def test_format_done(no_color):
    output = format_done("matvec-bench complete", no_color=no_color)
    assert "matvec-bench complete" in output
    assert ("\033[" in output) is not no_color
