from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Mapping

from .compressor import H2Stats
from .tree import TreeStats


@dataclass
class Colors:
    RED: str = "\033[0;31m"
    GREEN: str = "\033[0;32m"
    YELLOW: str = "\033[1;33m"
    BLUE: str = "\033[0;34m"
    BOLD: str = "\033[1m"
    NC: str = "\033[0m"

    @classmethod
    def none(cls) -> Colors:
        """Return a Colors instance with all codes set to empty strings."""
        return cls(**{f.name: "" for f in fields(cls)})


_NO_COLOR = Colors.none()


def get_colors(no_color: bool) -> Colors:
    if no_color:
        return _NO_COLOR
    return Colors()


def _separator(c: Colors) -> str:
    return f"{c.BLUE}{'━' * 66}{c.NC}"


def format_header(title: str, details: Mapping[str, object], no_color: bool = False) -> str:
    c = get_colors(no_color)
    sep = _separator(c)
    lines = [sep, f"{c.BLUE}{title}{c.NC}", sep]
    for key, value in details.items():
        lines.append(f"{c.GREEN}{key}:{c.NC} {value}")
    return "\n".join(lines)


def format_tree_report(stats: TreeStats, no_color: bool = False) -> str:
    c = get_colors(no_color)
    lines = [
        f"{c.BOLD}Tree{c.NC}: {stats.dim}D, depth {stats.depth}, "
        f"nu={stats.nu}, eta={stats.eta:.6g}",
        f"\n{c.YELLOW}Cells per level:{c.NC}",
    ]
    for level, (total, nonempty) in enumerate(
        zip(stats.cells_per_level, stats.nonempty_per_level)
    ):
        lines.append(f"   level {level:2d}: {total:8d} cells, {nonempty:8d} nonempty")
    lines.append(f"\n{c.YELLOW}Leaf occupancy:{c.NC}")
    for occupancy, count in stats.occupancy_histogram.items():
        lines.append(f"   {occupancy:6d} points: {count} leaves")
    lines.append(
        f"\n{c.GREEN}Neighbors:{c.NC} {stats.neighbor_range[0]}-{stats.neighbor_range[1]}"
        f"   {c.GREEN}Interaction list:{c.NC} "
        f"{stats.interaction_range[0]}-{stats.interaction_range[1]}"
    )
    if stats.overfull_leaves:
        lines.append(
            f"{c.RED}{stats.overfull_leaves} leaves exceed the capacity of {stats.nu} points{c.NC}"
        )
    return "\n".join(lines)


def format_h2_summary(stats: H2Stats, no_color: bool = False) -> str:
    c = get_colors(no_color)
    lines = [
        f"{c.GREEN}Max rank:{c.NC} {stats.max_rank}"
        f"   {c.GREEN}Memory:{c.NC} {stats.memory_bytes:,} bytes"
        f"   {c.GREEN}Assembly:{c.NC} {stats.assembly_seconds:.3f}s",
        f"{c.GREEN}Entry evaluations:{c.NC} {stats.entry_evaluations:,} "
        f"(pivots {stats.pivot_evaluations:,}, transfers {stats.transfer_evaluations:,}, "
        f"coupling {stats.coupling_evaluations:,}, near field {stats.nearfield_evaluations:,})",
    ]
    if stats.diagnostics:
        lines.append(f"{c.YELLOW}{len(stats.diagnostics)} cell diagnostics{c.NC}")
    return "\n".join(lines)


def format_kernel_list(kernels: Mapping[str, str]) -> str:
    lines = ["Available kernels:\n"]
    for name, formula in sorted(kernels.items()):
        lines.append(f"  {name:15s}  {formula}")
    return "\n".join(lines)


def format_done(message: str, no_color: bool = False) -> str:
    c = get_colors(no_color)
    return f"{c.GREEN}✅ {message}{c.NC}"
