"""Axis-aligned pixel regions, IOU, bounding union and proposal lattices.

Regions are half-open: ``Region(x, y, w, h)`` covers columns ``[x, x + w)``
and rows ``[y, y + h)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, List, Sequence, Tuple


class DegenerateRegion(ValueError):
    """Raised when shrinking a region would leave a zero-sized side."""


@dataclass(frozen=True, order=True)
class Region:
    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w < 1 or self.h < 1:
            raise ValueError(f"region must have positive size, got {self}")

    @property
    def x2(self) -> int:
        return self.x + self.w

    @property
    def y2(self) -> int:
        return self.y + self.h

    @property
    def area(self) -> int:
        return self.w * self.h

    def contains(self, other: "Region") -> bool:
        return (
            self.x <= other.x
            and self.y <= other.y
            and other.x2 <= self.x2
            and other.y2 <= self.y2
        )

    def as_tuple(self) -> Tuple[int, int, int, int]:
        return (self.x, self.y, self.w, self.h)

    @classmethod
    def from_corners(cls, x1: int, y1: int, x2: int, y2: int) -> "Region":
        return cls(x1, y1, x2 - x1, y2 - y1)

    @classmethod
    def frame(cls, width: int, height: int) -> "Region":
        return cls(0, 0, width, height)


def clamp(region: Region, width: int, height: int) -> Region | None:
    """Clip ``region`` to a ``width`` x ``height`` frame; None if nothing is left."""
    x1, y1 = max(region.x, 0), max(region.y, 0)
    x2, y2 = min(region.x2, width), min(region.y2, height)
    if x2 <= x1 or y2 <= y1:
        return None
    return Region(x1, y1, x2 - x1, y2 - y1)


def intersection_area(a: Region, b: Region) -> int:
    iw = min(a.x2, b.x2) - max(a.x, b.x)
    ih = min(a.y2, b.y2) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0
    return iw * ih


def iou(a: Region, b: Region) -> float:
    inter = intersection_area(a, b)
    if inter == 0:
        return 0.0
    return inter / (a.area + b.area - inter)


def bounding_union(regions: Iterable[Region]) -> Region:
    """Smallest region containing every input region."""
    regions = list(regions)
    if not regions:
        raise ValueError("no regions to union")
    return Region.from_corners(
        min(r.x for r in regions),
        min(r.y for r in regions),
        max(r.x2 for r in regions),
        max(r.y2 for r in regions),
    )


def round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def child_size(parent: Region, alpha: float) -> Tuple[int, int]:
    """Side lengths of proposals ``alpha`` times the parent, per axis."""
    w, h = round_half_up(alpha * parent.w), round_half_up(alpha * parent.h)
    if w < 1 or h < 1:
        raise DegenerateRegion("region degenerate")
    return min(w, parent.w), min(h, parent.h)


def lattice_offsets(parent: Region, size: Tuple[int, int], stride: int) -> Tuple[range, range]:
    cw, ch = size
    xs = range(parent.x, parent.x2 - cw + 1, stride)
    ys = range(parent.y, parent.y2 - ch + 1, stride)
    return xs, ys


def propose_grid(parent: Region, alpha: float, stride: int = 1) -> List[Region]:
    """All ``alpha``-scaled children of ``parent`` on a stride lattice, row-major."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    cw, ch = child_size(parent, alpha)
    xs, ys = lattice_offsets(parent, (cw, ch), stride)
    return [Region(x, y, cw, ch) for y in ys for x in xs]


def grid_size(parent: Region, alpha: float, stride: int = 1) -> int:
    cw, ch = child_size(parent, alpha)
    xs, ys = lattice_offsets(parent, (cw, ch), stride)
    return len(xs) * len(ys)


def row_major_key(r: Region) -> Tuple[int, int, int, int]:
    return (r.y, r.x, r.h, r.w)


def sort_row_major(regions: Sequence[Region]) -> List[Region]:
    return sorted(regions, key=row_major_key)
