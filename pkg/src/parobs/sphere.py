"""Nonlocal polar-cap model: multiplier coupling and free-boundary diagnostics.

The model couples the degenerate diffusion du/dt - ((1-x^2) u')' on (-1, 1)
to the sink -(1 - g(x)/lam(t)) H(u), where lam(t) is the average of the
stimulus g over the positivity set of u.  This average makes the total mass
2*pi*int u formally conserved.  Each implicit step resolves the coupling by
an inner iteration; two multiplier policies are provided:

- "support-average": lagged fixed point on lam = avg of g over the support of
  the candidate step, iterated to a tolerance.  This is the literal discrete
  transcription of the continuum definition; the discrete mass then drifts at
  a rate set by the quadrature error of the free boundary cells, measured by
  tests rather than assumed.
- "conserve": lam chosen each step so that the stepped mass matches the mass
  before the step, by a safeguarded Newton iteration inside the bracket
  [g_lower, g_upper].  The trapezoid weights are exactly conservative for the
  flux stencil, so the derivative d(mass)/d(lam) = -dt * sum_active w g /
  lam^2 is available in closed form.

For monotone data (u0 nondecreasing, g strictly increasing) the module also
tracks p(t) = inf of the support, the stimulus level set s(t) with
g(s(t)) = lam(t), and the quantitative nondegeneracy chain relating them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from parobs.errors import (
    DegenerateSupportError,
    InconsistentStateError,
    RejectedInputError,
    SolverFailureError,
)
from parobs.grid import Field1D, Grid, SupportSet, support_quadrature
from parobs.stepping import (
    OperatorSpec,
    Segment,
    SinkField,
    assemble_step_matrix,
    sphere_operator,
    _step_arrays,
)
from parobs.trace import RunTrace

_LAM_MODES = ("conserve", "support-average")


@dataclass(frozen=True)
class Stimulus:
    """Stimulus profile g with certified bounds.

    g maps node coordinates to rates; 0 < g_lower <= g <= g_upper < 1 must
    hold at every node.  monotone_slope (kappa) > 0 asserts that discrete
    forward differences of g are >= kappa * h, enabling the monotone-data
    diagnostics (s(t), nondegeneracy margins).
    """

    g: Callable[[np.ndarray], np.ndarray]
    g_lower: float
    g_upper: float
    monotone_slope: float = 0.0

    def __post_init__(self):
        if not (0.0 < self.g_lower <= self.g_upper < 1.0):
            raise RejectedInputError(
                "stimulus bounds must satisfy 0 < g_lower <= g_upper < 1")
        if self.monotone_slope < 0.0:
            raise RejectedInputError("monotone_slope must be >= 0")

    def values(self, grid: Grid) -> np.ndarray:
        gv = np.asarray(self.g(grid.nodes), dtype=float)
        if gv.shape != grid.nodes.shape or not np.all(np.isfinite(gv)):
            raise RejectedInputError("stimulus produced non-finite or misshaped values")
        tol = 1e-12
        if gv.min() < self.g_lower - tol or gv.max() > self.g_upper + tol:
            raise RejectedInputError(
                f"stimulus leaves [{self.g_lower!r}, {self.g_upper!r}]:"
                f" observed [{gv.min()!r}, {gv.max()!r}]")
        if self.monotone_slope > 0.0:
            dmin = float(np.min(np.diff(gv)))
            if dmin < self.monotone_slope * grid.h * (1.0 - 1e-9):
                raise RejectedInputError(
                    "stimulus forward differences fall below monotone_slope * h")
        return gv

    def max_slope(self, grid: Grid) -> float:
        gv = self.values(grid)
        return float(np.max(np.diff(gv))) / grid.h


def linear_stimulus(offset: float = 0.3, slope: float = 0.2) -> Stimulus:
    """g(x) = offset + slope * x with bounds evaluated at the endpoints."""
    if slope < 0:
        raise RejectedInputError("slope must be >= 0")
    return Stimulus(g=lambda x, o=offset, s=slope: o + s * x,
                    g_lower=offset - slope, g_upper=offset + slope,
                    monotone_slope=slope)


def monotone_default_preset(n_cells: int = 2000) -> tuple[Field1D, Stimulus]:
    """Monotone-data default: g = 0.3 + 0.2 x, u0 = 0.5 max(0, x + 0.2)^2.

    u0 is supported on (-0.2, 1], increasing, with a quadratic (obstacle
    compatible) contact at the free boundary; the initial multiplier is the
    average of g over (-0.2, 1), i.e. 0.38, which clears g on the zero set by
    the margin 0.38 - g(-0.2) = 0.12.
    """
    grid = Grid(-1.0, 1.0, n_cells)
    x = grid.nodes
    u0 = Field1D(grid, 0.5 * np.maximum(0.0, x + 0.2) ** 2)
    return u0, linear_stimulus(0.3, 0.2)


def lambda_of_support(stim: Stimulus, supp: SupportSet, grid: Grid) -> float:
    """Average of g over the support: (int_supp g) / |supp|."""
    if supp.is_empty or supp.measure <= 0.0:
        raise DegenerateSupportError("multiplier undefined on empty support")
    gv = stim.values(grid)
    integral, measure = support_quadrature(gv, supp, grid.h)
    return integral / measure


def s_of_t(stim: Stimulus, lam: float, grid: Grid, tol: float = 1e-12) -> float:
    """The stimulus level set: the unique s with g(s) = lam, for increasing g.

    Bisection on the piecewise-linear interpolant of g through the grid nodes.
    """
    if stim.monotone_slope <= 0.0:
        raise RejectedInputError("level-set inversion needs a strictly increasing stimulus")
    gv = stim.values(grid)
    x = grid.nodes
    if not (gv[0] < lam < gv[-1]):
        raise RejectedInputError(
            f"multiplier {lam!r} outside the stimulus range ({gv[0]!r}, {gv[-1]!r})")
    a, b = float(x[0]), float(x[-1])
    while b - a > tol:
        mid = 0.5 * (a + b)
        if float(np.interp(mid, x, gv)) < lam:
            a = mid
        else:
            b = mid
    return 0.5 * (a + b)


@dataclass
class SphereRun:
    final: Field1D
    snapshots: list[Field1D]
    snapshot_times: list[float]
    trace: RunTrace
    lam_mode: str
    max_residual: float
    side_condition_max: float
    max_lam_iters: int
    lam_min: float
    lam_max: float
    disconnected_at: float | None


def _support_signature(supp: SupportSet) -> tuple:
    return supp.intervals


class _NonlocalStepper:
    """Shared per-step multiplier resolution for nonlocal runs.

    Holds the assembled matrix for a fixed dt together with the stimulus node
    values; step() advances one implicit step under the selected multiplier
    policy and returns the accepted (values, lam, support, residual, iters).
    """

    def __init__(self, grid: Grid, op: OperatorSpec, stim: Stimulus, dt: float, *,
                 tol: float = 1e-10, engine: str = "auto", lam_tol: float = 1e-10,
                 max_lam_iters: int = 50, lam_mode: str = "conserve",
                 mass_rtol: float = 1e-12, threshold: float | None = None):
        if lam_mode not in _LAM_MODES:
            raise RejectedInputError(f"unknown multiplier mode {lam_mode!r}; expected {_LAM_MODES}")
        self.grid = grid
        self.op = op
        self.dt = dt
        self.tol = tol
        self.engine = engine
        self.lam_tol = lam_tol
        self.max_lam_iters = max_lam_iters
        self.lam_mode = lam_mode
        self.mass_rtol = mass_rtol
        self.stim = stim
        self.gv = stim.values(grid)
        self.matrix = assemble_step_matrix(grid, op, dt)
        self.weights = grid.quadrature_weights
        self.dirichlet = op.boundary == "dirichlet-zero"
        self.threshold = threshold

    def _solve_at(self, u_prev: np.ndarray, lam: float):
        lo, di, up = self.matrix
        f_all = 1.0 - self.gv / lam
        return _step_arrays(u_prev, lo, di, up, f_all, self.dt, self.tol,
                            engine=self.engine, dirichlet=self.dirichlet)

    def _support_of(self, values: np.ndarray) -> SupportSet:
        thr = self.threshold
        if thr is None:
            thr = 1e-12 * max(1.0, float(values.max(initial=0.0)))
        return SupportSet.from_mask(values > thr, self.grid.h)

    def step(self, u_prev: np.ndarray, lam_init: float):
        if self.lam_mode == "support-average":
            return self._step_support_average(u_prev, lam_init)
        return self._step_conserve(u_prev, lam_init)

    def _step_support_average(self, u_prev: np.ndarray, lam_init: float):
        lam = lam_init
        seen: list[tuple] = []
        states: dict[tuple, tuple] = {}
        for it in range(1, self.max_lam_iters + 1):
            u, res, tol_abs, *_ = self._solve_at(u_prev, lam)
            supp = self._support_of(u)
            if supp.is_empty:
                return u, lam, supp, res, tol_abs, it
            integral, measure = support_quadrature(self.gv, supp, self.grid.h)
            lam_new = integral / measure
            sig = _support_signature(supp)
            states[sig] = (u, lam_new, supp, res, tol_abs)
            if abs(lam_new - lam) <= self.lam_tol:
                return u, lam_new, supp, res, tol_abs, it
            if len(seen) >= 2 and sig == seen[-2] and sig != seen[-1]:
                # Two-cycle between neighboring supports: accept the larger
                # one (upper-semicontinuous tie-break).
                other = states[seen[-1]]
                if other[2].measure > supp.measure:
                    u, lam_new, supp, res, tol_abs = other
                return u, lam_new, supp, res, tol_abs, it
            seen.append(sig)
            lam = lam_new
        raise SolverFailureError(
            f"multiplier fixed point did not converge in {self.max_lam_iters} iterations"
            f" (last delta {abs(lam_new - lam):.3e})")

    def _step_conserve(self, u_prev: np.ndarray, lam_init: float):
        w = self.weights
        target = float(w @ u_prev)
        lo_b, hi_b = self.stim.g_lower, self.stim.g_upper
        lam = min(max(lam_init, lo_b), hi_b)
        best = None
        for it in range(1, self.max_lam_iters + 1):
            u, res, tol_abs, *_ = self._solve_at(u_prev, lam)
            supp = self._support_of(u)
            mass = float(w @ u)
            err = mass - target
            best = (u, lam, supp, res, tol_abs, it)
            if abs(err) <= self.mass_rtol * max(target, 1e-300):
                return best
            # mass(lam) decreases in lam: shrink the bracket accordingly
            if err > 0.0:
                lo_b = lam
            else:
                hi_b = lam
            if supp.is_empty:
                return best
            active = supp.mask(self.grid.n_nodes)
            dmass = -self.dt * float((w * self.gv)[active].sum()) / (lam * lam)
            if dmass >= 0.0:
                lam_next = 0.5 * (lo_b + hi_b)
            else:
                lam_next = lam - err / dmass
                if not (lo_b < lam_next < hi_b):
                    lam_next = 0.5 * (lo_b + hi_b)
            if abs(lam_next - lam) <= 1e-16 * max(1.0, lam):
                return best
            lam = lam_next
        raise SolverFailureError(
            f"mass-conserving multiplier search did not converge in"
            f" {self.max_lam_iters} iterations (mass error {err:.3e})")


def solve_nonlocal(u0: Field1D, stim: Stimulus, t_end: float, dt: float, *,
                   probes: Sequence[float] = (), lam_mode: str = "conserve",
                   op: OperatorSpec | None = None, tol: float = 1e-10,
                   engine: str = "auto", lam_tol: float = 1e-10,
                   max_lam_iters: int = 50, t0: float = 0.0,
                   trace: RunTrace | None = None,
                   segments: Sequence[Segment] | None = None) -> SphereRun:
    """Evolve the nonlocal problem, resolving the multiplier every step.

    With segments given, t_end/dt are ignored and the run advances through
    the fixed-dt segments instead.  Probe times must land on step boundaries.
    The trace records every accepted step: t, p (infimum of support), s
    (stimulus level set, nan when not invertible), lam, support measure, and
    plain 1D mass (the axisymmetric mass is 2*pi times the column).
    """
    if float(u0.integral()) <= 0.0:
        raise RejectedInputError("initial data must carry positive mass")
    grid = u0.grid
    op = op if op is not None else sphere_operator()
    if segments is None:
        n_steps = round((t_end - t0) / dt)
        if n_steps < 1 or abs(n_steps * dt - (t_end - t0)) > 1e-9 * max(dt, t_end - t0):
            raise RejectedInputError(f"dt={dt!r} does not divide the horizon {t_end - t0!r}")
        segments = [Segment(t_end=t_end, dt=dt, n_steps=n_steps)]

    probes = sorted(float(p) for p in probes)
    gv = stim.values(grid)
    supp0 = u0.support()
    if supp0.is_empty:
        raise RejectedInputError("initial data has empty support")
    integral0, measure0 = support_quadrature(gv, supp0, grid.h)
    lam = integral0 / measure0
    invertible = stim.monotone_slope > 0.0

    def level_set(lam_val: float) -> float | None:
        if not invertible or not (gv[0] < lam_val < gv[-1]):
            return None
        return s_of_t(stim, lam_val, grid)

    trace = trace if trace is not None else RunTrace()
    snapshots: list[Field1D] = []
    snapshot_times: list[float] = []
    u = u0.values.copy()
    t = t0
    trace.append(t, grid.nodes[supp0.first_node], level_set(lam), lam,
                 supp0.measure, float(grid.quadrature_weights @ u))
    if probes and math.isclose(probes[0], t0, rel_tol=0.0, abs_tol=1e-18):
        snapshots.append(u0)
        snapshot_times.append(probes[0])

    side_max = -math.inf
    worst_res = 0.0
    worst_iters = 0
    lam_lo, lam_hi = lam, lam
    disconnected_at: float | None = None
    w = grid.quadrature_weights

    for seg in segments:
        stepper = _NonlocalStepper(grid, op, stim, seg.dt, tol=tol, engine=engine,
                                   lam_tol=lam_tol, max_lam_iters=max_lam_iters,
                                   lam_mode=lam_mode)
        snap_targets = {}
        for p in probes:
            if t < p <= seg.t_end:
                k = round((p - t) / seg.dt)
                if abs(t + k * seg.dt - p) > 1e-6 * max(seg.dt, abs(p)):
                    raise RejectedInputError(
                        f"probe time {p!r} is not reachable with dt={seg.dt!r}")
                snap_targets[int(k)] = p
        t_seg = t
        for k in range(1, seg.n_steps + 1):
            u_new, lam, supp, res, tol_abs, iters = stepper.step(u, lam)
            t = t_seg + k * seg.dt
            u = u_new
            worst_res = max(worst_res, res)
            worst_iters = max(worst_iters, iters)
            mass = float(w @ u)
            if supp.is_empty:
                if mass > 1e-12:
                    raise InconsistentStateError(
                        f"support collapsed while mass {mass!r} remains at t={t!r}")
                trace.append(t, None, None, lam, 0.0, mass)
                continue
            if supp.n_intervals > 1 and disconnected_at is None:
                disconnected_at = t
            zero_mask = ~supp.mask(grid.n_nodes)
            if zero_mask.any():
                side = float((gv[zero_mask] - lam).max())
                side_max = max(side_max, side)
            lam_lo = min(lam_lo, lam)
            lam_hi = max(lam_hi, lam)
            trace.append(t, grid.nodes[supp.first_node], level_set(lam), lam,
                         supp.measure, mass)
            if k in snap_targets:
                fld = Field1D(grid, u.copy())
                snapshots.append(fld)
                snapshot_times.append(snap_targets[k])
        # re-key probes for the next segment relative to its start
        probes = [p for p in probes if p > seg.t_end]

    return SphereRun(final=Field1D(grid, u), snapshots=snapshots,
                     snapshot_times=snapshot_times, trace=trace, lam_mode=lam_mode,
                     max_residual=worst_res, side_condition_max=side_max,
                     max_lam_iters=worst_iters, lam_min=lam_lo, lam_max=lam_hi,
                     disconnected_at=disconnected_at)


@dataclass(frozen=True)
class MonotonicityReport:
    ok: bool
    worst_difference: float
    location: tuple[int, int] | None

    def __bool__(self) -> bool:
        return self.ok


def monotonicity_check(snapshots: Sequence[Field1D], rtol: float = 1e-8) -> MonotonicityReport:
    """Forward differences of every snapshot >= -rtol * sup|u|."""
    if not snapshots:
        raise RejectedInputError("no snapshots to check")
    scale = max(float(f.values.max(initial=0.0)) for f in snapshots)
    tol = rtol * max(scale, 1e-300)
    worst = math.inf
    where = None
    for k, f in enumerate(snapshots):
        d = np.diff(f.values)
        j = int(np.argmin(d))
        if d[j] < worst:
            worst = float(d[j])
            if d[j] < -tol:
                where = where if where is not None else (k, j)
    ok = worst >= -tol
    return MonotonicityReport(ok=ok, worst_difference=worst,
                              location=None if ok else where)


@dataclass(frozen=True)
class NondegeneracyReport:
    hypotheses_met: bool
    theta_margin: float
    fattening_measure: float
    mass_2d: float
    sup_u: float
    c0: float
    delta0: float
    p_bound: float
    p_bound_ok: bool
    p_bound_worst_margin: float
    separation_ok: bool
    separation_worst_margin: float


def nondegeneracy_report(u0: Field1D, stim: Stimulus, run: SphereRun,
                         slack: float | None = None) -> NondegeneracyReport:
    """Quantitative nondegeneracy margins measured on a completed run.

    With m = 2*pi*int u0 (the axisymmetric mass) and sup_u the largest nodal
    value over the stored trace horizon, the chain gives

        p(t) <= 1 - m / (2 pi sup_u),
        s(t) - p(t) >= c0 := kappa m / (4 pi sup_u max g'),

    both checked at every trace row against a grid slack (default 2h).
    delta0 = (1/8) min(c0, m/(2 pi sup_u), kappa m/(4 pi sup_u)).
    A stimulus with monotone_slope = 0 does not meet the hypotheses; the
    margins are then reported as nan.
    """
    grid = u0.grid
    slack = 2.0 * grid.h if slack is None else slack
    gv = stim.values(grid)
    supp0 = u0.support()
    lam0 = lambda_of_support(stim, supp0, grid)
    zero0 = ~supp0.mask(grid.n_nodes)
    theta_margin = float((lam0 - gv[zero0]).min()) if zero0.any() else math.inf
    boundary_nodes = 0
    for (i0, i1) in supp0.intervals:
        boundary_nodes += int(i0 > 0) + int(i1 < grid.n_nodes - 1)
    fattening = boundary_nodes * grid.h

    mass_2d = 2.0 * math.pi * float(u0.integral())
    sup_u = float(u0.values.max(initial=0.0))
    for f in run.snapshots:
        sup_u = max(sup_u, float(f.values.max(initial=0.0)))
    sup_u = max(sup_u, float(run.final.values.max(initial=0.0)))

    kappa = stim.monotone_slope
    met = kappa > 0.0
    if met:
        c0 = kappa * mass_2d / (4.0 * math.pi * sup_u * stim.max_slope(grid))
        delta0 = 0.125 * min(c0, mass_2d / (2.0 * math.pi * sup_u),
                             kappa * mass_2d / (4.0 * math.pi * sup_u))
    else:
        c0 = math.nan
        delta0 = math.nan

    p_bound = 1.0 - mass_2d / (2.0 * math.pi * sup_u)
    ps = run.trace.column("p")
    ss = run.trace.column("s")
    valid = ~np.isnan(ps)
    p_margin = float(np.min(p_bound + slack - ps[valid])) if valid.any() else math.inf
    if met:
        both = valid & ~np.isnan(ss)
        sep = ss[both] - ps[both] - (c0 - slack)
        sep_margin = float(np.min(sep)) if both.any() else math.inf
    else:
        sep_margin = math.nan
    return NondegeneracyReport(
        hypotheses_met=met, theta_margin=theta_margin, fattening_measure=fattening,
        mass_2d=mass_2d, sup_u=sup_u, c0=c0, delta0=delta0,
        p_bound=p_bound, p_bound_ok=bool(p_margin >= 0.0),
        p_bound_worst_margin=p_margin,
        separation_ok=bool(met and sep_margin >= 0.0),
        separation_worst_margin=sep_margin)


@dataclass(frozen=True)
class ContinuityReport:
    """Max free-boundary jump across consecutive probes per refinement level."""

    levels: tuple[int, ...]
    max_jumps: tuple[float, ...]
    monotone: bool
    finest_jump: float


def probe_continuity(trace: RunTrace, ladder: Sequence[int],
                     t_min: float | None = None) -> ContinuityReport:
    """Max |p(t_{i+1}) - p(t_i)| over probe subsets of increasing density.

    ladder entries are probe counts over the window [t_min, t_max] (default:
    the whole trace); each level samples the trace at the rows nearest to that
    many equispaced probe times and measures the largest consecutive jump of
    the p column.  Continuity of p shows as jumps decreasing with density.
    """
    t = trace.column("t")
    p = trace.column("p")
    good = ~np.isnan(p)
    t, p = t[good], p[good]
    if t_min is not None:
        keep = t >= t_min - 1e-15
        t, p = t[keep], p[keep]
    if t.size < max(ladder) + 1:
        raise RejectedInputError("trace too short for the requested probe ladder")
    jumps = []
    for count in ladder:
        idx = np.unique(np.linspace(0, t.size - 1, count + 1).round().astype(int))
        jumps.append(float(np.max(np.abs(np.diff(p[idx])))))
    mono = all(b <= a * (1.0 + 1e-12) for a, b in zip(jumps, jumps[1:]))
    return ContinuityReport(levels=tuple(int(c) for c in ladder),
                            max_jumps=tuple(jumps), monotone=mono,
                            finest_jump=jumps[-1])
