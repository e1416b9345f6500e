"""Uniform 1-D grids, nonnegative nodal fields, and support detection.

Fields hold node values of a function u >= 0 together with the positivity
threshold used everywhere a "support" is mentioned: a node belongs to the
support when its value exceeds the threshold.  The measure of a support
interval spanning k consecutive nodes is (k - 1) * h, except that an isolated
single node counts as h.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

from parobs.errors import RejectedInputError

_FIELD_CSV_VERSION = "parobs-field-v1"


def _fmt(x: float) -> str:
    """Shortest decimal string that round-trips the double exactly."""
    return repr(float(x))


@dataclass(frozen=True)
class Grid:
    """Uniform grid of n_cells cells (n_cells + 1 nodes) on [x_min, x_max]."""

    x_min: float
    x_max: float
    n_cells: int

    def __post_init__(self):
        if not (np.isfinite(self.x_min) and np.isfinite(self.x_max)):
            raise RejectedInputError("grid endpoints must be finite")
        if not self.x_max > self.x_min:
            raise RejectedInputError(
                f"need x_max > x_min, got [{self.x_min}, {self.x_max}]"
            )
        if int(self.n_cells) != self.n_cells or self.n_cells < 1:
            raise RejectedInputError(f"n_cells must be a positive integer, got {self.n_cells}")

    @property
    def h(self) -> float:
        return (self.x_max - self.x_min) / self.n_cells

    @property
    def n_nodes(self) -> int:
        return self.n_cells + 1

    @cached_property
    def nodes(self) -> np.ndarray:
        x = np.linspace(self.x_min, self.x_max, self.n_nodes)
        x.flags.writeable = False
        return x

    @cached_property
    def face_midpoints(self) -> np.ndarray:
        x = self.nodes
        m = 0.5 * (x[:-1] + x[1:])
        m.flags.writeable = False
        return m

    @cached_property
    def quadrature_weights(self) -> np.ndarray:
        """Trapezoid weights: h everywhere, h/2 at the two endpoints."""
        w = np.full(self.n_nodes, self.h)
        w[0] *= 0.5
        w[-1] *= 0.5
        w.flags.writeable = False
        return w

    def refined(self, factor: int = 2) -> "Grid":
        return Grid(self.x_min, self.x_max, self.n_cells * factor)


def interval_measure(i0: int, i1: int, h: float) -> float:
    """Measure of a support interval over nodes i0..i1 inclusive."""
    if i1 < i0:
        raise RejectedInputError(f"bad interval ({i0}, {i1})")
    return h if i1 == i0 else (i1 - i0) * h


@dataclass(frozen=True)
class SupportSet:
    """Disjoint maximal runs of supra-threshold nodes, as inclusive index pairs."""

    intervals: tuple[tuple[int, int], ...]
    measure: float

    @classmethod
    def from_mask(cls, mask: np.ndarray, h: float) -> "SupportSet":
        idx = np.flatnonzero(mask)
        if idx.size == 0:
            return cls((), 0.0)
        breaks = np.flatnonzero(np.diff(idx) > 1)
        starts = np.concatenate(([idx[0]], idx[breaks + 1]))
        ends = np.concatenate((idx[breaks], [idx[-1]]))
        intervals = tuple((int(s), int(e)) for s, e in zip(starts, ends))
        measure = float(sum(interval_measure(s, e, h) for s, e in intervals))
        return cls(intervals, measure)

    @property
    def is_empty(self) -> bool:
        return not self.intervals

    @property
    def n_intervals(self) -> int:
        return len(self.intervals)

    @property
    def first_node(self) -> int | None:
        return None if self.is_empty else self.intervals[0][0]

    @property
    def last_node(self) -> int | None:
        return None if self.is_empty else self.intervals[-1][1]

    def mask(self, n_nodes: int) -> np.ndarray:
        m = np.zeros(n_nodes, dtype=bool)
        for s, e in self.intervals:
            m[s : e + 1] = True
        return m


@dataclass
class Field1D:
    """Nonnegative nodal values of u on a grid, plus the positivity threshold.

    The default threshold is 1e-12 * max(1, max(values)) and is frozen at
    construction; evolved fields inherit the threshold of the initial data
    rather than recomputing it per step.
    """

    grid: Grid
    values: np.ndarray
    positivity_threshold: float | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.grid.n_nodes,):
            raise RejectedInputError(
                f"values shape {v.shape} does not match grid with {self.grid.n_nodes} nodes"
            )
        if not np.all(np.isfinite(v)):
            raise RejectedInputError("field values must be finite")
        if v.size and float(v.min()) < 0.0:
            raise RejectedInputError(f"field values must be >= 0, min is {v.min()}")
        self.values = v
        if self.positivity_threshold is None:
            self.positivity_threshold = 1e-12 * max(1.0, float(v.max()))
        elif not (np.isfinite(self.positivity_threshold) and self.positivity_threshold > 0):
            raise RejectedInputError("positivity_threshold must be positive and finite")

    def with_values(self, values: np.ndarray) -> "Field1D":
        """Same grid and threshold, new values."""
        return Field1D(self.grid, values, self.positivity_threshold)

    def support(self) -> SupportSet:
        return detect_support(self)

    def integral(self) -> float:
        return integrate(self)

    def to_csv(self, path) -> None:
        lines = [f"# {_FIELD_CSV_VERSION}",
                 f"# positivity_threshold={_fmt(self.positivity_threshold)}",
                 "x,u"]
        x = self.grid.nodes
        lines.extend(f"{_fmt(xi)},{_fmt(ui)}" for xi, ui in zip(x, self.values))
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path) -> "Field1D":
        threshold = None
        xs: list[float] = []
        us: list[float] = []
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                if line.startswith("#"):
                    if "positivity_threshold=" in line:
                        threshold = float(line.split("=", 1)[1])
                    continue
                if line == "x,u":
                    continue
                a, b = line.split(",")
                xs.append(float(a))
                us.append(float(b))
        if len(xs) < 2:
            raise RejectedInputError(f"field file {path} holds fewer than two nodes")
        grid = Grid(xs[0], xs[-1], len(xs) - 1)
        if not np.array_equal(grid.nodes, np.array(xs)):
            raise RejectedInputError(f"nodes in {path} are not uniformly spaced")
        return cls(grid, np.array(us), threshold)

    def to_json(self) -> str:
        """JSON array of [x, u] pairs (shortest round-trip decimals)."""
        x = self.grid.nodes
        pairs = ",".join(f"[{_fmt(xi)},{_fmt(ui)}]" for xi, ui in zip(x, self.values))
        return f"[{pairs}]"

    @classmethod
    def from_json(cls, text: str, positivity_threshold: float | None = None) -> "Field1D":
        pairs = json.loads(text)
        if len(pairs) < 2:
            raise RejectedInputError("JSON field holds fewer than two nodes")
        xs = [float(p[0]) for p in pairs]
        us = [float(p[1]) for p in pairs]
        grid = Grid(xs[0], xs[-1], len(xs) - 1)
        if not np.array_equal(grid.nodes, np.array(xs)):
            raise RejectedInputError("JSON field nodes are not uniformly spaced")
        return cls(grid, np.array(us), positivity_threshold)


def integrate(f: Field1D, weight: Callable[[np.ndarray], np.ndarray] | None = None) -> float:
    """Trapezoid quadrature of u (or u * weight) over the grid."""
    v = f.values
    if weight is not None:
        w = np.asarray(weight(f.grid.nodes), dtype=float)
        if not np.all(np.isfinite(w)):
            raise RejectedInputError("weight produced non-finite values")
        v = v * w
    return float(f.grid.quadrature_weights @ v)


def detect_support(f: Field1D) -> SupportSet:
    return SupportSet.from_mask(f.values > f.positivity_threshold, f.grid.h)


def infimum_of_support(f: Field1D) -> float | None:
    """Leftmost node coordinate strictly above the positivity threshold."""
    s = detect_support(f)
    if s.is_empty:
        return None
    return float(f.grid.nodes[s.first_node])


def support_quadrature(g: np.ndarray, support: SupportSet, h: float) -> tuple[float, float]:
    """(integral of g over the support, support measure).

    Trapezoid rule inside each interval; a single-node interval contributes
    g_i * h, matching the measure convention h for such intervals.
    """
    total = 0.0
    for s, e in support.intervals:
        if s == e:
            total += float(g[s]) * h
        else:
            seg = g[s : e + 1]
            total += h * (float(seg.sum()) - 0.5 * float(seg[0]) - 0.5 * float(seg[-1]))
    return total, support.measure
