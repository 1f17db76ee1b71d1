"""Square-ring partitions of a feature grid.

Ring ``k`` of a layout with ``n_sps`` rings is the axis-aligned square of
half-extent ``k*H/(2*n_sps)`` rows by ``k*W/(2*n_sps)`` columns around the
segmentation center, minus the square of ring ``k-1``.  The outermost
square is the whole grid, so the rings always tile it.  A dense segment
``(i, j)`` is the union of rings ``i..j``.

Cell intervals are half-open ``[lo, hi)``.  Fractional boundaries round to
the nearest integer with ties pushed away from the center.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property

import numpy as np

from .errors import IndexOutOfRange, InvalidCount, InvalidLayout, OffsetExceedsThreshold


def dps_segment_count(n_sps: int) -> int:
    if not isinstance(n_sps, (int, np.integer)) or n_sps < 1:
        raise InvalidCount(f"ring count must be a positive integer, got {n_sps!r}")
    return n_sps * (n_sps + 1) // 2


def shift_threshold(height: int, n_sps: int) -> Fraction:
    return Fraction(height, 2 * n_sps)


def shifted_center(h: int, w: int, delta_h: int, n_sps: int = 1) -> tuple[float, float]:
    """Diagonally shifted segmentation center ``(h/2 + dH, w/2 - w*dH/h)``.

    ``n_sps`` sets the admissible offset ``|dH| <= h / (2 n_sps)``.
    """
    row, col = _shifted_center(h, w, delta_h, n_sps)
    return float(row), float(col)


def _shifted_center(h, w, delta_h, n_sps) -> tuple[Fraction, Fraction]:
    if abs(Fraction(delta_h)) > shift_threshold(h, n_sps):
        raise OffsetExceedsThreshold(
            f"|delta_h|={abs(delta_h)} exceeds {h}/(2*{n_sps}) = {float(shift_threshold(h, n_sps))}"
        )
    dh = Fraction(delta_h)
    return Fraction(h, 2) + dh, Fraction(w, 2) - Fraction(w) * dh / h


@dataclass(frozen=True, order=True)
class Segment:
    """Contiguous run of rings ``i..j`` (1-based, inclusive)."""

    i: int
    j: int

    @property
    def span(self) -> int:
        return self.j - self.i

    def __str__(self) -> str:
        return f"({self.i},{self.j})"


@dataclass(frozen=True)
class ShiftConfig:
    delta_h: int
    height: int
    width: int
    n_sps: int

    def __post_init__(self):
        if abs(Fraction(self.delta_h)) > shift_threshold(self.height, self.n_sps):
            raise OffsetExceedsThreshold(f"delta_h={self.delta_h} beyond threshold")

    @property
    def delta_w(self) -> Fraction:
        return -Fraction(self.width) * Fraction(self.delta_h) / self.height

    def center(self) -> tuple[Fraction, Fraction]:
        return _shifted_center(self.height, self.width, self.delta_h, self.n_sps)


@dataclass(frozen=True, eq=False)
class RegionMask:
    cells: np.ndarray

    def __post_init__(self):
        cells = np.asarray(self.cells, dtype=bool)
        cells.setflags(write=False)
        object.__setattr__(self, "cells", cells)

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    @cached_property
    def cell_count(self) -> int:
        return int(self.cells.sum())

    def __or__(self, other: "RegionMask") -> "RegionMask":
        return RegionMask(self.cells | other.cells)

    def __eq__(self, other) -> bool:
        return isinstance(other, RegionMask) and np.array_equal(self.cells, other.cells)

    def __hash__(self):
        return hash(self.cells.tobytes())


def _to_fraction(x) -> Fraction:
    return x if isinstance(x, Fraction) else Fraction(x)


def _round_low(x: Fraction) -> int:
    # nearest integer, ties toward -inf
    return math.ceil(x - Fraction(1, 2))


def _round_high(x: Fraction) -> int:
    # nearest integer, ties toward +inf
    return math.floor(x + Fraction(1, 2))


@dataclass(frozen=True)
class RingLayout:
    n_sps: int
    height: int
    width: int
    center: tuple = field(default=None)

    def __post_init__(self):
        if not isinstance(self.n_sps, (int, np.integer)) or self.n_sps < 1:
            raise InvalidCount(f"n_sps must be >= 1, got {self.n_sps!r}")
        if self.height <= 0 or self.width <= 0 or self.height % 2 or self.width % 2:
            raise InvalidLayout(f"grid {self.height}x{self.width} must have positive even extents")
        if self.n_sps > min(self.height, self.width) // 2:
            raise InvalidLayout(f"n_sps={self.n_sps} too large for a {self.height}x{self.width} grid")
        if self.center is None:
            c = (Fraction(self.height, 2), Fraction(self.width, 2))
        else:
            c = (_to_fraction(self.center[0]), _to_fraction(self.center[1]))
        if not (0 <= c[0] <= self.height and 0 <= c[1] <= self.width):
            raise InvalidLayout(f"center {tuple(map(float, c))} outside the grid")
        object.__setattr__(self, "center", c)

    @classmethod
    def shifted(cls, n_sps: int, height: int, width: int, delta_h: int) -> "RingLayout":
        return cls(n_sps, height, width, _shifted_center(height, width, delta_h, n_sps))

    def square_bounds(self, k: int) -> tuple[int, int, int, int]:
        """Row/col half-open bounds ``(r0, r1, c0, c1)`` of the k-th square."""
        if k == self.n_sps:
            return 0, self.height, 0, self.width
        if not 1 <= k < self.n_sps:
            raise IndexOutOfRange(f"square {k} outside 1..{self.n_sps}")
        eh = Fraction(k * self.height, 2 * self.n_sps)
        ew = Fraction(k * self.width, 2 * self.n_sps)
        cr, cc = self.center
        r0 = min(max(_round_low(cr - eh), 0), self.height)
        r1 = min(max(_round_high(cr + eh), 0), self.height)
        c0 = min(max(_round_low(cc - ew), 0), self.width)
        c1 = min(max(_round_high(cc + ew), 0), self.width)
        return r0, r1, c0, c1

    def square(self, k: int) -> np.ndarray:
        cells = np.zeros((self.height, self.width), dtype=bool)
        if k == 0:
            return cells
        r0, r1, c0, c1 = self.square_bounds(k)
        cells[r0:r1, c0:c1] = True
        return cells

    def outer_size(self, seg: Segment) -> int:
        """Nominal side length of a segment's outer square (before clipping)."""
        return seg.j * self.height // self.n_sps

    def segments(self, strategy: str = "dps") -> list[Segment]:
        if strategy == "sps":
            return [Segment(k, k) for k in range(1, self.n_sps + 1)]
        if strategy == "dps":
            return dps_segments(self.n_sps)
        raise ValueError(f"unknown partition strategy {strategy!r}")


def dps_segments(n_sps: int) -> list[Segment]:
    """All contiguous segments ordered by (span, inner ring)."""
    dps_segment_count(n_sps)
    segs = [Segment(i, j) for i in range(1, n_sps + 1) for j in range(i, n_sps + 1)]
    return sorted(segs, key=lambda s: (s.span, s.i))


def ring_mask(layout: RingLayout, k: int) -> RegionMask:
    if not 1 <= k <= layout.n_sps:
        raise IndexOutOfRange(f"ring {k} outside 1..{layout.n_sps}")
    return RegionMask(layout.square(k) & ~layout.square(k - 1))


def segment_mask(layout: RingLayout, seg: Segment) -> RegionMask:
    if not 1 <= seg.i <= seg.j <= layout.n_sps:
        raise IndexOutOfRange(f"segment {seg} invalid for n_sps={layout.n_sps}")
    return RegionMask(layout.square(seg.j) & ~layout.square(seg.i - 1))


def dps_partition(layout: RingLayout, strategy: str = "dps") -> list[tuple[Segment, RegionMask]]:
    return [(s, segment_mask(layout, s)) for s in layout.segments(strategy)]


def mask_stack(layout: RingLayout, strategy: str = "dps") -> np.ndarray:
    """Masks of every segment stacked as a bool array [K, H, W]."""
    return np.stack([m.cells for _, m in dps_partition(layout, strategy)])
