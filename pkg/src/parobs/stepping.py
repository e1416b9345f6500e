"""Implicit time stepping for the obstacle-constrained parabolic family.

One backward-Euler step of du/dt - (a(x) u')' = -F(x, t) with the constraint
u >= 0 is the tridiagonal linear complementarity problem

    u >= 0,   M u - q >= 0,   u . (M u - q) = 0,

with M = I - dt*L and q = u_prev - dt*F.  L is the conservative flux-form
stencil built on face-midpoint coefficients, with half-cell first and last
rows, so that the trapezoid-weighted row sums of L vanish exactly and the
unconstrained scheme conserves mass to rounding.

Steps are solved on windows that provably contain the active set: outside the
union of {u_prev > 0} and {F < 0}, dilated by a safety margin, the solution
is identically zero and its complementarity residual is certified in closed
form.  Frontier nodes adjacent to each window are checked after the solve and
the window is enlarged and re-solved if the certificate fails, so windowing
never changes the computed solution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from parobs.errors import RejectedInputError, SolverFailureError
from parobs.grid import Field1D, Grid, SupportSet
from parobs.lcp import pdas_solve, pgs_solve
from parobs.trace import RunTrace

_BOUNDARY_KINDS = ("natural-degenerate", "neumann-zero", "dirichlet-zero")

# Window construction defaults.  The dilation pad is generous relative to the
# per-step support motion of a degenerate front (well under one cell for the
# step sizes used here); violations are caught and retried regardless.
_WINDOW_PAD = 6
_WINDOW_MERGE_GAP = 64
_WINDOW_MAX_COUNT = 64
_WINDOW_MAX_ESCALATIONS = 4

# Engine selection: projected Gauss-Seidel degrades as dt*a/h^2 grows, the
# active-set solver does not.
_AUTO_STIFFNESS_CUTOFF = 50.0
_AUTO_SIZE_CUTOFF = 4096


@dataclass(frozen=True)
class OperatorSpec:
    """Diffusion operator (a(x) u')' with a boundary condition.

    a may be a callable of x or a nonnegative constant.  Boundary kinds:

    - "natural-degenerate": a vanishes at both endpoints; no boundary data is
      imposed and none is needed.  Endpoint face coefficients must be ~0.
    - "neumann-zero": zero-flux ends (same half-cell stencil, a may be
      positive at the ends).
    - "dirichlet-zero": homogeneous Dirichlet rows at both ends.
    """

    a: Callable[[np.ndarray], np.ndarray] | float
    boundary: str = "neumann-zero"

    def __post_init__(self):
        if self.boundary not in _BOUNDARY_KINDS:
            raise RejectedInputError(
                f"unknown boundary kind {self.boundary!r}; expected one of {_BOUNDARY_KINDS}")
        if not callable(self.a):
            a0 = float(self.a)
            if not math.isfinite(a0) or a0 < 0.0:
                raise RejectedInputError("constant diffusion coefficient must be finite and >= 0")

    def face_coefficients(self, grid: Grid) -> np.ndarray:
        xm = grid.face_midpoints
        if callable(self.a):
            af = np.asarray(self.a(xm), dtype=float)
            if af.shape != xm.shape:
                raise RejectedInputError("diffusion callable must map nodes to like-shaped values")
        else:
            af = np.full(xm.shape, float(self.a))
        if not np.all(np.isfinite(af)):
            raise RejectedInputError("diffusion coefficient produced non-finite face values")
        if np.any(af < -1e-15 * max(1.0, float(np.max(np.abs(af))))):
            raise RejectedInputError("diffusion coefficient must be nonnegative")
        af = np.maximum(af, 0.0)
        if np.any(af[1:-1] <= 0.0):
            raise RejectedInputError("diffusion coefficient must be positive on interior faces")
        if self.boundary == "natural-degenerate":
            # The coefficient must vanish (at least linearly) at both endpoints;
            # the outermost faces sit h/2 inside, so a simple zero gives O(h).
            edge_lim = 8.0 * float(np.max(af)) * grid.h / (grid.x_max - grid.x_min)
            if af[0] > edge_lim or af[-1] > edge_lim:
                raise RejectedInputError(
                    "natural-degenerate boundary requires the coefficient to vanish at "
                    f"the endpoints; endpoint faces are {af[0]!r}, {af[-1]!r}")
        return af


def sphere_operator() -> OperatorSpec:
    """a(x) = 1 - x^2 on (-1, 1): the polar-cap Laplace-Beltrami coefficient."""
    return OperatorSpec(a=lambda x: 1.0 - x * x, boundary="natural-degenerate")


def line_operator(boundary: str = "neumann-zero") -> OperatorSpec:
    """Unit diffusion on an interval."""
    return OperatorSpec(a=1.0, boundary=boundary)


@dataclass(frozen=True)
class SinkField:
    """Right-hand side -F(x, t) H(u) specification.

    kinds:
    - "constant": F = strength everywhere.
    - "rescaled": F = lam**3 (self-similar normalization of a point source).
    - "nonlocal": F = 1 - g(x)/lam with lam supplied per step by the driver.
    """

    kind: str
    strength: float = 0.0
    lam: float = float("nan")
    g: Callable[[np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        if self.kind not in ("constant", "rescaled", "nonlocal"):
            raise RejectedInputError(f"unknown sink kind {self.kind!r}")
        if self.kind == "rescaled" and not (math.isfinite(self.lam) and self.lam > 0):
            raise RejectedInputError("rescaled sink needs a positive lam")
        if self.kind == "nonlocal" and self.g is None:
            raise RejectedInputError("nonlocal sink needs a rate profile g")

    @property
    def needs_multiplier(self) -> bool:
        return self.kind == "nonlocal"

    def multiplier(self) -> float | None:
        if self.kind == "rescaled":
            return self.lam
        return None

    def values(self, x: np.ndarray, lam: float | None = None) -> np.ndarray:
        if self.kind == "constant":
            return np.full(x.shape, float(self.strength))
        if self.kind == "rescaled":
            return np.full(x.shape, float(self.lam) ** 3)
        if lam is None or not (lam > 0):
            raise RejectedInputError("nonlocal sink evaluation needs a positive lam")
        return 1.0 - np.asarray(self.g(x), dtype=float) / lam


def constant_sink(strength: float) -> SinkField:
    return SinkField(kind="constant", strength=float(strength))


def rescaled_sink(lam: float) -> SinkField:
    return SinkField(kind="rescaled", lam=float(lam))


def nonlocal_sink(g: Callable[[np.ndarray], np.ndarray]) -> SinkField:
    return SinkField(kind="nonlocal", g=g)


def assemble_operator(grid: Grid, op: OperatorSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row coefficients (c_west, c_center, c_east) of L, trapezoid-conservative.

    Interior rows: (L u)_i = (af_i (u_{i+1}-u_i) - af_{i-1}(u_i-u_{i-1})) / h^2.
    End rows use half cells: (L u)_0 = 2 af_0 (u_1 - u_0) / h^2 and mirrored on
    the right, so sum_i w_i (L u)_i telescopes to zero for any u.
    """
    af = op.face_coefficients(grid)
    h2 = grid.h * grid.h
    n = grid.n_nodes
    cw = np.zeros(n)
    ce = np.zeros(n)
    cw[1:] = af / h2
    ce[:-1] = af / h2
    ce[0] *= 2.0
    cw[-1] *= 2.0
    cc = -(cw + ce)
    if op.boundary == "dirichlet-zero":
        cw[0] = ce[0] = cc[0] = 0.0
        cw[-1] = ce[-1] = cc[-1] = 0.0
    return cw, cc, ce


def assemble_step_matrix(grid: Grid, op: OperatorSpec, dt: float
                         ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Tridiagonal M = I - dt*L as (lo, di, up) with lo[0] = up[-1] = 0."""
    if not (math.isfinite(dt) and dt > 0.0):
        raise RejectedInputError("dt must be finite and positive")
    cw, cc, ce = assemble_operator(grid, op)
    lo = -dt * cw
    di = 1.0 - dt * cc
    up = -dt * ce
    return lo, di, up


def apply_operator(grid: Grid, op: OperatorSpec, u: np.ndarray) -> np.ndarray:
    cw, cc, ce = assemble_operator(grid, op)
    out = cc * u
    out[1:] += cw[1:] * u[:-1]
    out[:-1] += ce[:-1] * u[1:]
    return out


@dataclass
class StepResult:
    field: Field1D
    active_set: SupportSet
    complementarity_residual: float
    tolerance_abs: float
    engine: str
    iterations: int
    windows: tuple[tuple[int, int], ...]


def _mask_to_intervals(mask: np.ndarray) -> list[tuple[int, int]]:
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        return []
    cuts = np.flatnonzero(np.diff(idx) > 1)
    starts = np.concatenate(([0], cuts + 1))
    ends = np.concatenate((cuts, [idx.size - 1]))
    return [(int(idx[s]), int(idx[e])) for s, e in zip(starts, ends)]


def _dilate_and_merge(intervals: list[tuple[int, int]], pad: int, gap: int,
                      n: int) -> list[tuple[int, int]]:
    if not intervals:
        return []
    padded = [(max(0, i0 - pad), min(n - 1, i1 + pad)) for i0, i1 in intervals]
    merged = [padded[0]]
    for i0, i1 in padded[1:]:
        m0, m1 = merged[-1]
        if i0 - m1 - 1 <= gap:
            merged[-1] = (m0, max(m1, i1))
        else:
            merged.append((i0, i1))
    return merged


def _solve_window(lo, di, up, q, u0, tol_abs, engine, omega, max_sweeps):
    n = q.size
    if engine == "auto":
        stiffness = float(np.max(di)) - 1.0
        engine = "pdas" if (n > _AUTO_SIZE_CUTOFF or stiffness > _AUTO_STIFFNESS_CUTOFF) else "pgs"
    if engine == "pgs":
        u, res, iters = pgs_solve(lo, di, up, q, u0, tol_abs, max_sweeps=max_sweeps, omega=omega)
    elif engine == "pdas":
        u, res, iters = pdas_solve(lo, di, up, q, u0, tol_abs)
    else:
        raise RejectedInputError(f"unknown engine {engine!r}; expected auto, pgs or pdas")
    return u, res, iters, engine


def step_projected(u_prev: Field1D, op: OperatorSpec, sink: SinkField, dt: float, *,
                   lam: float | None = None, tol: float = 1e-10, engine: str = "auto",
                   omega: float = 1.0, max_sweeps: int = 10_000,
                   matrix: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None,
                   windowed: bool = True) -> StepResult:
    """One backward-Euler projected step.

    tol is a scaled tolerance: the accepted complementarity residual is
    tol * max(1, ||q||_inf).  With matrix precomputed via assemble_step_matrix
    the per-step assembly cost is skipped.
    """
    grid = u_prev.grid
    if matrix is None:
        matrix = assemble_step_matrix(grid, op, dt)
    lo, di, up = matrix
    f_all = sink.values(grid.nodes, lam=lam)
    values, res, tol_abs, iters, engine_used, windows = _step_arrays(
        u_prev.values, lo, di, up, f_all, dt, tol,
        engine=engine, omega=omega, max_sweeps=max_sweeps, windowed=windowed,
        dirichlet=(op.boundary == "dirichlet-zero"))
    out = u_prev.with_values(values)
    return StepResult(field=out, active_set=out.support(),
                      complementarity_residual=res, tolerance_abs=tol_abs,
                      engine=engine_used, iterations=iters, windows=tuple(windows))


def _step_arrays(u_prev: np.ndarray, lo, di, up, f_all: np.ndarray, dt: float,
                 tol: float, *, engine: str = "auto", omega: float = 1.0,
                 max_sweeps: int = 10_000, windowed: bool = True,
                 dirichlet: bool = False) -> tuple[np.ndarray, float, float, int, str, list]:
    """Array core of step_projected.

    Returns (u_new, residual, tol_abs, iters, engine, windows).
    """
    n = u_prev.size
    # Scaled tolerance: the complementarity residual carries a factor of the
    # matrix diagonal (~ dt a / h^2), so the acceptance threshold does too.
    q_scale = max(1.0, float(np.max(u_prev)) + dt * float(np.max(np.abs(f_all))))
    tol_abs = tol * q_scale * max(1.0, float(np.max(di)))

    if not windowed:
        q = u_prev - dt * f_all
        if dirichlet:
            q[0] = 0.0
            q[-1] = 0.0
        u, res, iters, eng = _solve_window(lo, di, up, q, np.maximum(u_prev, 0.0),
                                           tol_abs, engine, omega, max_sweeps)
        return u, res, tol_abs, iters, eng, [(0, n - 1)]

    candidates = (u_prev > 0.0) | (f_all < 0.0)
    base = _mask_to_intervals(candidates)
    if not base:
        # Everything starts at zero with F >= 0: zero is the exact solution.
        return np.zeros(n), 0.0, tol_abs, 0, "certified", []

    pad, gap = _WINDOW_PAD, _WINDOW_MERGE_GAP
    for attempt in range(_WINDOW_MAX_ESCALATIONS + 1):
        windows = _dilate_and_merge(base, pad, gap, n)
        if len(windows) > _WINDOW_MAX_COUNT:
            # One banded solve over the hull beats thousands of tiny solves.
            windows = [(windows[0][0], windows[-1][1])]
        if windows[0] == (0, n - 1):
            q = u_prev - dt * f_all
            if dirichlet:
                q[0] = 0.0
                q[-1] = 0.0
            u, res, iters, eng = _solve_window(lo, di, up, q, np.maximum(u_prev, 0.0),
                                               tol_abs, engine, omega, max_sweeps)
            return u, res, tol_abs, iters, eng, windows

        u_new = np.zeros(n)
        worst = 0.0
        total_iters = 0
        eng_used = None
        for (i0, i1) in windows:
            sl = slice(i0, i1 + 1)
            q = u_prev[sl] - dt * f_all[sl]
            if dirichlet and i0 == 0:
                q[0] = 0.0
            if dirichlet and i1 == n - 1:
                q[-1] = 0.0
            lo_w = lo[sl].copy()
            up_w = up[sl].copy()
            lo_w[0] = 0.0
            up_w[-1] = 0.0
            u_w, res, iters, eng = _solve_window(lo_w, di[sl], up_w, q,
                                                 np.maximum(u_prev[sl], 0.0),
                                                 tol_abs, engine, omega, max_sweeps)
            u_new[sl] = u_w
            worst = max(worst, res)
            total_iters += iters
            eng_used = eng if eng_used in (None, eng) else "mixed"

        # Frontier certificate: at nodes just outside each window u = 0, so the
        # step defect there is -q_j plus the coupling to the solved neighbor;
        # it must be nonnegative for zero to be optimal.
        frontier = []
        for (i0, i1) in windows:
            if i0 > 0:
                frontier.append(i0 - 1)
            if i1 < n - 1:
                frontier.append(i1 + 1)
        ok = True
        for j in frontier:
            r = -(u_prev[j] - dt * f_all[j])
            if j > 0:
                r += lo[j] * u_new[j - 1]
            if j < n - 1:
                r += up[j] * u_new[j + 1]
            if r < -tol_abs:
                ok = False
                break
        if ok:
            return u_new, worst, tol_abs, total_iters, eng_used or "certified", windows
        # Support outran the pad.  One implicit step can light up nodes out to
        # a few backward-Euler decay lengths sqrt(dt a)/h = sqrt(max(di) - 1),
        # so escalate straight to that scale rather than crawling.
        diff_cells = math.ceil(2.0 * math.sqrt(max(float(np.max(di)) - 1.0, 0.0)))
        pad = max(pad * 8, diff_cells, 64)
        gap *= 2

    raise SolverFailureError(
        "window escalation failed to certify the complementarity residual", residual=float("nan"))


@dataclass
class EvolveResult:
    final: Field1D
    snapshots: list[Field1D]
    snapshot_times: list[float]
    trace: RunTrace
    max_residual: float


def _snap_indices(t0: float, dt: float, n_steps: int, probes: Sequence[float]) -> dict[int, float]:
    out: dict[int, float] = {}
    for p in probes:
        k = (p - t0) / dt
        kr = round(k)
        if kr < 0 or kr > n_steps or abs(k - kr) > 1e-6 * max(1.0, abs(k)):
            raise RejectedInputError(
                f"probe time {p!r} is not reachable with dt={dt!r} from t0={t0!r}")
        out[int(kr)] = p
    return out


def evolve(u0: Field1D, op: OperatorSpec, sink: SinkField, t_end: float, dt: float, *,
           probes: Sequence[float] = (), tol: float = 1e-10, engine: str = "auto",
           omega: float = 1.0, trace: RunTrace | None = None, t0: float = 0.0,
           windowed: bool = True, trace_every: int = 1) -> EvolveResult:
    """Fixed-step evolution with a per-step free-boundary trace.

    Probe times must land on step boundaries (within rounding).  Nonlocal
    sinks need the mass-conserving driver in the sphere module and are
    rejected here.
    """
    if sink.needs_multiplier:
        raise RejectedInputError("nonlocal sinks need the mass-conserving nonlocal driver")
    if not (t_end > t0):
        raise RejectedInputError("t_end must exceed the starting time")
    n_steps = round((t_end - t0) / dt)
    if n_steps < 1 or abs(n_steps * dt - (t_end - t0)) > 1e-9 * max(dt, t_end - t0):
        raise RejectedInputError(f"dt={dt!r} does not divide the horizon {t_end - t0!r}")
    snap_at = _snap_indices(t0, dt, n_steps, probes)

    grid = u0.grid
    matrix = assemble_step_matrix(grid, op, dt)
    lam = sink.multiplier()
    trace = trace if trace is not None else RunTrace()
    snapshots: list[Field1D] = []
    snapshot_times: list[float] = []
    u = u0
    if 0 in snap_at:
        snapshots.append(u0)
        snapshot_times.append(snap_at[0])
    worst = 0.0
    for k in range(1, n_steps + 1):
        res = step_projected(u, op, sink, dt, tol=tol, engine=engine, omega=omega,
                             matrix=matrix, windowed=windowed)
        u = res.field
        worst = max(worst, res.complementarity_residual)
        t = t0 + k * dt
        if k % trace_every == 0 or k == n_steps:
            supp = res.active_set
            p = grid.nodes[supp.first_node] if not supp.is_empty else None
            trace.append(t, p, None, lam, supp.measure, u.integral())
        if k in snap_at:
            snapshots.append(u)
            snapshot_times.append(snap_at[k])
    return EvolveResult(final=u, snapshots=snapshots, snapshot_times=snapshot_times,
                        trace=trace, max_residual=worst)


@dataclass(frozen=True)
class Segment:
    t_end: float
    dt: float
    n_steps: int


def ramp_schedule(targets: Sequence[float], *, dt0: float, growth: float = 4.0,
                  dt_cap: float = math.inf, min_steps: int = 12,
                  fill_per_decade: int = 0, t0: float = 0.0) -> list[Segment]:
    """Fixed-dt segments hitting every target exactly, with geometric dt growth.

    Each consecutive gap gets a constant dt no larger than growth times the
    previous segment's dt (and dt_cap), split into at least min_steps steps.
    With fill_per_decade > 0, extra geometric waypoints are inserted between
    targets so dt can climb gradually across wide gaps.
    """
    pts = sorted(set(float(t) for t in targets))
    if not pts or pts[0] <= t0:
        raise RejectedInputError("targets must be strictly increasing and exceed t0")
    if fill_per_decade:
        filled = set(pts)
        prev = t0 if t0 > 0 else None
        for p in pts:
            if prev is not None and p / prev > 10.0 ** (1.0 / fill_per_decade):
                k = int(math.floor(math.log10(p / prev) * fill_per_decade))
                for j in range(1, k + 1):
                    w = prev * 10.0 ** (j / fill_per_decade)
                    if w < p * (1.0 - 1e-12):
                        filled.add(w)
            prev = p
        pts = sorted(filled)
    segments: list[Segment] = []
    t_prev = t0
    dt_prev = dt0 / growth
    for p in pts:
        gap = p - t_prev
        dt_want = min(dt_cap, dt_prev * growth, gap / min_steps)
        n = max(min_steps, int(math.ceil(gap / max(dt_want, 1e-300))))
        dt = gap / n
        segments.append(Segment(t_end=p, dt=dt, n_steps=n))
        t_prev, dt_prev = p, dt
    return segments


def evolve_schedule(u0: Field1D, op: OperatorSpec, sink: SinkField,
                    segments: Sequence[Segment], *, probes: Sequence[float] = (),
                    tol: float = 1e-10, engine: str = "auto", omega: float = 1.0,
                    windowed: bool = True, t0: float = 0.0,
                    trace_every: int = 1) -> EvolveResult:
    """Run evolve over a list of fixed-dt segments, collecting probes globally."""
    probes = sorted(float(p) for p in probes)
    trace = RunTrace()
    snapshots: list[Field1D] = []
    snapshot_times: list[float] = []
    u = u0
    t_prev = t0
    worst = 0.0
    for seg in segments:
        seg_probes = [p for p in probes if t_prev < p <= seg.t_end or (t_prev == t0 and p == t0)]
        res = evolve(u, op, sink, seg.t_end, seg.dt, probes=seg_probes, tol=tol,
                     engine=engine, omega=omega, trace=trace, t0=t_prev,
                     windowed=windowed, trace_every=trace_every)
        u = res.final
        snapshots.extend(res.snapshots)
        snapshot_times.extend(res.snapshot_times)
        worst = max(worst, res.max_residual)
        t_prev = seg.t_end
    return EvolveResult(final=u, snapshots=snapshots, snapshot_times=snapshot_times,
                        trace=trace, max_residual=worst)


@dataclass(frozen=True)
class ComparisonReport:
    ok: bool
    n_checked: int
    worst_gap: float
    first_violation: tuple[int, int] | None


def comparison_check(lower: Sequence[Field1D], upper: Sequence[Field1D],
                     tol: float = 1e-8) -> ComparisonReport:
    """Nodewise ordering lower <= upper + tol at every snapshot pair.

    Reports the first violating (snapshot index, node index) and the worst
    signed gap max(lower - upper) over all pairs.
    """
    if len(lower) != len(upper):
        raise RejectedInputError("snapshot lists must have equal length")
    worst = -math.inf
    first = None
    n = 0
    for k, (a, b) in enumerate(zip(lower, upper)):
        if a.grid != b.grid:
            raise RejectedInputError("snapshots must share a grid")
        gap = a.values - b.values
        j = int(np.argmax(gap))
        worst = max(worst, float(gap[j]))
        if first is None and gap[j] > tol:
            first = (k, j)
        n += 1
    return ComparisonReport(ok=first is None, n_checked=n,
                            worst_gap=worst if n else 0.0, first_violation=first)
