"""Whole-line obstacle runs: point-mass data, support envelopes, composite model.

Three related problems on the (truncated) line:

- the unit point-mass problem du/dt - u'' = -H(u), u(0) = delta_0, entered
  through a heat-kernel bootstrap at a small positive time and truncated to
  [-R, R] with zero-flux ends (the support stays compact, guarded at run
  time);
- its constant-multiplier rescaling du/dt - u'' = -lam^3 H(u) with the same
  point-mass data (the lam-run equals lam * U(lam x, lam^2 t) exactly, which
  the scaling check measures);
- the two-bump nonlocal model on (-5, 5): a fixed smooth left bump on
  (-4, -1) under a three-region stimulus plus an atomic right part in
  (0, eta), coupled through the support-averaged multiplier.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from parobs.errors import (
    DomainTooSmallError,
    RejectedInputError,
)
from parobs.grid import Field1D, Grid, SupportSet, support_quadrature
from parobs.sphere import Stimulus, _NonlocalStepper, lambda_of_support
from parobs.stepping import (
    Segment,
    _step_arrays,
    assemble_step_matrix,
    line_operator,
    ramp_schedule,
)
from parobs.trace import RunTrace

G_MIN = 1.0 / 12.0
G_MAX = 6.0 / 7.0
# exact quadrature of the canonical three-region profile over (-4, -1):
# one unit-length plateau at G_MAX, one unit at G_MIN (two half-unit flats),
# and two symmetric cubic transitions averaging (G_MIN + G_MAX) / 2
LEFT_STIMULUS_INTEGRAL = 1.5 * (G_MIN + G_MAX)          # = 79/56
LAMBDA0_MINUS = LEFT_STIMULUS_INTEGRAL / 3.0            # = 79/168
F_PLUS = 1.0 - G_MIN / LAMBDA0_MINUS                    # = 65/79


def heat_kernel(x, t: float):
    """1D heat kernel (4 pi t)^(-1/2) exp(-x^2 / (4t))."""
    x = np.asarray(x, dtype=float)
    return np.exp(-x * x / (4.0 * t)) / math.sqrt(4.0 * math.pi * t)


@dataclass(frozen=True)
class DiracBootstrap:
    """Kernel sample at a small positive time standing in for the point mass.

    The sampled field must integrate to 1 within mass_tol unless either
    normalize (rescale to exactly 1) or allow_mass_defect (keep the raw
    sample, recording its defect) is set.  Under-resolved grids overweight
    the peak cell, which is why the defect is surfaced rather than silently
    accepted.
    """

    delta_t: float
    truncation_radius: float
    n_cells: int
    normalize: bool = False
    allow_mass_defect: bool = False
    mass_tol: float = 1e-8

    def __post_init__(self):
        if self.delta_t <= 0.0 or self.truncation_radius <= 0.0 or self.n_cells < 8:
            raise RejectedInputError("need delta_t > 0, radius > 0, n_cells >= 8")

    def build(self) -> tuple[Field1D, float]:
        """Return (field at delta_t, mass defect of the raw sample)."""
        grid = Grid(-self.truncation_radius, self.truncation_radius, self.n_cells)
        vals = heat_kernel(grid.nodes, self.delta_t)
        mass = float(grid.quadrature_weights @ vals)
        defect = mass - 1.0
        if self.normalize:
            vals = vals / mass
        elif abs(defect) > self.mass_tol and not self.allow_mass_defect:
            raise RejectedInputError(
                f"bootstrap sample has mass defect {defect!r} beyond {self.mass_tol!r};"
                " refine the grid, or pass normalize/allow_mass_defect explicitly")
        return Field1D(grid, vals), defect


@dataclass
class DiracRun:
    final: Field1D
    snapshots: list[Field1D]
    snapshot_times: list[float]
    trace: RunTrace
    lam: float
    delta_t: float
    domain_radius: float
    mass_defect: float
    extinct_at: float | None

    @property
    def grid(self) -> Grid:
        return self.final.grid

    def radius_rows(self) -> tuple[np.ndarray, np.ndarray]:
        """(t, support radius) over trace rows with nonempty support."""
        t = self.trace.column("t")
        p = self.trace.column("p")
        alive = ~np.isnan(p)
        return t[alive], -p[alive]

    def snapshot_radii(self) -> list[tuple[float, float]]:
        """(left, right) support radii per stored snapshot."""
        out = []
        for f in self.snapshots:
            supp = f.support()
            if supp.is_empty:
                out.append((0.0, 0.0))
            else:
                x = f.grid.nodes
                out.append((-float(x[supp.first_node]), float(x[supp.last_node])))
        return out


def default_truncation_radius(t_end: float, kernel_floor: float = 1e-15) -> float:
    """Smallest radius meeting the kernel-tail precondition, with a floor.

    The support stays within a few units of the origin (the extinction-time
    scale), so 5 + 3 sqrt(t_end) is kept as a geometric floor and the kernel
    tail bound Phi(R, t_end) <= kernel_floor supplies the rest.
    """
    tail = math.sqrt(4.0 * t_end * math.log(
        max(math.e, 1.0 / (kernel_floor * math.sqrt(4.0 * math.pi * t_end)))))
    return max(5.0 + 3.0 * math.sqrt(t_end), tail)


def solve_dirac(lam: float, delta_t: float, t_end: float, dt: float | None = None, *,
                n_cells: int, domain_radius: float | None = None,
                probes: Sequence[float] = (), segments: Sequence[Segment] | None = None,
                tol: float = 1e-10, engine: str = "auto", normalize: bool = False,
                allow_mass_defect: bool = False, dt_cap: float | None = None,
                trace_every: int = 1) -> DiracRun:
    """Evolve the point-mass problem with constant sink lam^3.

    Starts from the kernel bootstrap at delta_t and runs to t_end, either
    with uniform dt, with explicit segments, or (both omitted) with a
    geometric dt ramp capped at dt_cap that lands on every probe.  Raises
    DomainTooSmallError if the support ever comes within 5 cells of the
    truncation boundary.
    """
    if lam <= 0.0:
        raise RejectedInputError("multiplier must be positive")
    if t_end <= delta_t:
        raise RejectedInputError("t_end must exceed the bootstrap time")
    R = domain_radius if domain_radius is not None else default_truncation_radius(t_end)
    if float(heat_kernel(R, t_end)) >= 1e-14:
        raise RejectedInputError(
            f"truncation radius {R!r} leaves kernel tail {float(heat_kernel(R, t_end))!r}"
            " >= 1e-14 at t_end; enlarge the domain")
    boot = DiracBootstrap(delta_t=delta_t, truncation_radius=R, n_cells=n_cells,
                          normalize=normalize, allow_mass_defect=allow_mass_defect)
    u0, defect = boot.build()
    grid = u0.grid
    probes = sorted(float(p) for p in probes)
    if probes and probes[0] < delta_t - 1e-18:
        raise RejectedInputError("probes must be >= the bootstrap time")

    if segments is None:
        if dt is not None:
            n_steps = round((t_end - delta_t) / dt)
            if n_steps < 1 or abs(n_steps * dt - (t_end - delta_t)) > 1e-9 * max(dt, t_end):
                raise RejectedInputError(f"dt={dt!r} does not divide t_end - delta_t")
            segments = [Segment(t_end=t_end, dt=dt, n_steps=n_steps)]
        else:
            cap = dt_cap if dt_cap is not None else max((t_end - delta_t) / 200.0, delta_t)
            segments = ramp_schedule(list(probes) + [t_end], dt0=delta_t / 4.0,
                                     dt_cap=cap, t0=delta_t, fill_per_decade=4)

    op = line_operator("neumann-zero")
    sink = float(lam) ** 3

    trace = RunTrace()
    w = grid.quadrature_weights
    x = grid.nodes
    u = u0.values.copy()
    supp = u0.support()
    trace.append(delta_t, x[supp.first_node] if not supp.is_empty else None, None,
                 lam, supp.measure, float(w @ u))
    snapshots: list[Field1D] = []
    snapshot_times: list[float] = []
    if probes and abs(probes[0] - delta_t) <= 1e-12 * max(delta_t, 1e-300):
        snapshots.append(u0)
        snapshot_times.append(probes[0])
        probes = probes[1:]

    guard = 5 * grid.h
    extinct_at: float | None = None
    t = delta_t
    f_all = np.full(grid.n_nodes, sink)
    for seg in segments:
        lo, di, up = assemble_step_matrix(grid, op, seg.dt)
        snap_targets = {}
        for p in probes:
            if t < p <= seg.t_end + 1e-12 * max(1.0, seg.t_end):
                k = round((p - t) / seg.dt)
                if abs(t + k * seg.dt - p) > 1e-6 * max(seg.dt, abs(p)):
                    raise RejectedInputError(
                        f"probe time {p!r} is not reachable with dt={seg.dt!r}")
                snap_targets[int(k)] = p
        t_seg = t
        for k in range(1, seg.n_steps + 1):
            u, res, tol_abs, iters, eng, wins = _step_arrays(
                u, lo, di, up, f_all, seg.dt, tol, engine=engine)
            t = t_seg + k * seg.dt
            supp = SupportSet.from_mask(u > 1e-12 * max(1.0, float(u.max(initial=0.0))),
                                        grid.h)
            if supp.is_empty:
                if extinct_at is None:
                    extinct_at = t
                if k % trace_every == 0 or k == seg.n_steps or k in snap_targets:
                    trace.append(t, None, None, lam, 0.0, float(w @ u))
            else:
                p_val = float(x[supp.first_node])
                if p_val - grid.x_min <= guard or grid.x_max - float(x[supp.last_node]) <= guard:
                    raise DomainTooSmallError(
                        f"support reached within 5 cells of the boundary at t={t!r};"
                        f" rerun with a radius above {R!r}")
                if k % trace_every == 0 or k == seg.n_steps or k in snap_targets:
                    trace.append(t, p_val, None, lam, supp.measure, float(w @ u))
            if k in snap_targets:
                snapshots.append(Field1D(grid, u.copy()))
                snapshot_times.append(snap_targets[k])
        probes = [p for p in probes if p > seg.t_end + 1e-12 * max(1.0, seg.t_end)]

    return DiracRun(final=Field1D(grid, u), snapshots=snapshots,
                    snapshot_times=snapshot_times, trace=trace, lam=lam,
                    delta_t=delta_t, domain_radius=R, mass_defect=defect,
                    extinct_at=extinct_at)


@dataclass(frozen=True)
class ExtinctionResult:
    t_low: float
    t_high: float

    @property
    def t_star(self) -> float:
        return 0.5 * (self.t_low + self.t_high)

    @property
    def width(self) -> float:
        return self.t_high - self.t_low


def extinction_time(lam: float, *, n_cells: int, delta_t: float = 1e-6,
                    bracket: float = 1e-3, t_max: float = 4.0,
                    domain_radius: float | None = None, tol: float = 1e-10,
                    engine: str = "auto") -> ExtinctionResult:
    """Bracket the extinction time of the lam-run within the requested width.

    Marches with a dt ramp capped at bracket/2 until the support dies; the
    last alive row and the first dead row bracket the extinction time.  The
    per-step cap makes the bracket width at most bracket/2.
    """
    if bracket <= 0.0:
        raise RejectedInputError("bracket width must be positive")
    run = solve_dirac(lam, delta_t, t_max, n_cells=n_cells,
                      domain_radius=domain_radius, dt_cap=bracket / 2.0,
                      tol=tol, engine=engine, normalize=True)
    t = run.trace.column("t")
    measure = run.trace.column("support_measure")
    dead = np.flatnonzero(measure == 0.0)
    if dead.size == 0:
        raise RejectedInputError(
            f"no extinction before t_max={t_max!r}; raise t_max")
    k = int(dead[0])
    if k == 0:
        raise RejectedInputError("support empty at the bootstrap time; bad setup")
    lo, hi = float(t[k - 1]), float(t[k])
    if hi - lo > bracket:
        raise RejectedInputError(
            f"trace rows bracket {hi - lo!r} wider than {bracket!r}; lower dt_cap")
    return ExtinctionResult(t_low=lo, t_high=hi)


@dataclass(frozen=True)
class SupportEnvelope:
    times: np.ndarray
    ell: np.ndarray
    L: np.ndarray
    ref: np.ndarray
    ratios: np.ndarray
    decade_edges: tuple[float, ...]
    decade_max_dev: tuple[float, ...]
    deviation_shrinks: bool
    max_dev_smallest_decade: float

    def rows(self):
        return zip(self.times, self.ell, self.L, self.ref)


def support_envelope(run: DiracRun, t_max: float = 1e-2) -> SupportEnvelope:
    """Measured support radius against the sqrt(6 t ln(1/t)) reference.

    Uses trace rows with nonempty support and t <= t_max (the asymptote is a
    small-time statement; ln(1/t) must be positive).  ell and L bracket the
    measured radius by one cell.  Deviations |radius/ref - 1| are summarized
    per decade of t; deviation_shrinks says they decrease toward small t.
    """
    t, radius = run.radius_rows()
    keep = (t <= t_max) & (t < 1.0) & (t > 0.0)
    t, radius = t[keep], radius[keep]
    if t.size == 0:
        raise RejectedInputError("no alive trace rows at or below t_max")
    h = run.grid.h
    ref = np.sqrt(6.0 * t * np.log(1.0 / t))
    ratios = radius / ref
    dev = np.abs(ratios - 1.0)
    lo_exp = math.floor(math.log10(t.min()) + 1e-12)
    hi_exp = math.ceil(math.log10(t.max()) - 1e-12)
    edges = [10.0 ** e for e in range(lo_exp, hi_exp + 1)]
    devs = []
    spans = []
    for a, b in zip(edges[:-1], edges[1:]):
        mask = (t >= a) & (t < b * (1.0 + 1e-12))
        if mask.any():
            spans.append((a, b))
            devs.append(float(dev[mask].max()))
    shrinks = all(d_small < d_big * (1.0 + 1e-12)
                  for d_small, d_big in zip(devs, devs[1:]))
    return SupportEnvelope(times=t, ell=np.maximum(radius - h, 0.0),
                           L=radius + h, ref=ref, ratios=ratios,
                           decade_edges=tuple(a for a, _ in spans) + (spans[-1][1],),
                           decade_max_dev=tuple(devs),
                           deviation_shrinks=bool(shrinks),
                           max_dev_smallest_decade=devs[0])


def lower_bound_radius(t) -> np.ndarray:
    """Radius of the proven positivity set: sqrt(6 t ln(1/((4 pi)^(1/3) t)))."""
    t = np.asarray(t, dtype=float)
    arg = 6.0 * t * np.log(1.0 / ((4.0 * math.pi) ** (1.0 / 3.0) * t))
    return np.sqrt(np.maximum(arg, 0.0))


def upper_bound_radius(t, t_star: float) -> np.ndarray:
    """Radius of the proven covering set, alpha = 9 max(1, T*)."""
    t = np.asarray(t, dtype=float)
    alpha = 9.0 * max(1.0, t_star)
    arg = 6.0 * t * (-np.log(t)) + 6.0 * t * math.log(alpha)
    return np.sqrt(np.maximum(arg, 0.0)) + np.sqrt(t / alpha)


@dataclass(frozen=True)
class ScalingReport:
    probes: tuple[float, ...]
    deviations: tuple[float, ...]
    max_deviation: float
    radii_gaps: tuple[float, ...]


def scaling_check(run_unit: DiracRun, run_lam: DiracRun,
                  t_probes: Sequence[float]) -> ScalingReport:
    """Compare the lam-run against the rescaled unit run at matched probes.

    The lam-run at time t must equal lam * U(lam x, lam^2 t): values are
    interpolated from the unit run's snapshot at lam^2 t onto the lam-run
    grid; the deviation is relative to the probe's sup.  Radii gaps report
    |radius_lam(t) - radius_unit(lam^2 t) / lam| from the traces.
    """
    lam = run_lam.lam
    if abs(run_unit.lam - 1.0) > 0.0:
        raise RejectedInputError("first argument must be the unit-multiplier run")
    devs = []
    gaps = []
    tu, ru = run_unit.radius_rows()
    tl, rl = run_lam.radius_rows()
    for t in t_probes:
        t = float(t)
        try:
            i_l = run_lam.snapshot_times.index(t)
        except ValueError:
            raise RejectedInputError(f"lam-run has no snapshot at {t!r}")
        t_u = lam * lam * t
        i_u = None
        for j, s in enumerate(run_unit.snapshot_times):
            if abs(s - t_u) <= 1e-9 * max(1.0, t_u):
                i_u = j
                break
        if i_u is None:
            raise RejectedInputError(f"unit run has no snapshot at {t_u!r}")
        x_l = run_lam.grid.nodes
        u_l = run_lam.snapshots[i_l].values
        u_u = run_unit.snapshots[i_u]
        mapped = lam * np.interp(lam * x_l, run_unit.grid.nodes, u_u.values)
        scale = float(u_l.max(initial=0.0))
        if scale <= 0.0:
            raise RejectedInputError(f"lam-run is extinct at probe {t!r}")
        devs.append(float(np.max(np.abs(mapped - u_l))) / scale)
        j_l = int(np.argmin(np.abs(tl - t)))
        j_u = int(np.argmin(np.abs(tu - t_u)))
        gaps.append(abs(float(rl[j_l]) - float(ru[j_u]) / lam))
    return ScalingReport(probes=tuple(float(t) for t in t_probes),
                         deviations=tuple(devs), max_deviation=max(devs),
                         radii_gaps=tuple(gaps))


def _smoothstep(s: np.ndarray) -> np.ndarray:
    s = np.clip(s, 0.0, 1.0)
    return s * s * (3.0 - 2.0 * s)


def composite_stimulus_values(x) -> np.ndarray:
    """Three-region profile: G_MIN outside (-7/2, -3/2), plateau G_MAX on
    [-3, -2], cubic transitions on [-7/2, -3] and [-2, -3/2]."""
    x = np.asarray(x, dtype=float)
    up = _smoothstep((x + 3.5) / 0.5)
    down = _smoothstep((-1.5 - x) / 0.5)
    ramp = np.where(x <= -2.5, up, down)
    return G_MIN + (G_MAX - G_MIN) * ramp


@dataclass(frozen=True)
class CompositeSpec:
    """Two-bump nonlocal model: left C^2 bump on (-4, -1), atomic right part.

    atoms are (position, weight) pairs with positions in (0, eta); each atom
    is realized as a single-cell hat of the given integral ("hat" mode) or as
    a kernel mollification at width sqrt(2 delta_mollify) ("mollified").
    left_amplitude scales the bump A max(0, (x+4)(-1-x))^3 (cubic contact,
    hence C^2 across the free boundary).
    """

    eta: float
    atoms: tuple[tuple[float, float], ...] = ()
    atom_mode: str = "hat"
    left_amplitude: float = 0.04
    delta_mollify: float = 1e-8

    def __post_init__(self):
        if not (0.0 < self.eta < 1.0):
            raise RejectedInputError("eta must lie in (0, 1)")
        if self.atom_mode not in ("hat", "mollified"):
            raise RejectedInputError(f"unknown atom mode {self.atom_mode!r}")
        for pos, weight in self.atoms:
            if not (0.0 < pos < self.eta):
                raise RejectedInputError(
                    f"atom at {pos!r} outside (0, {self.eta!r})")
            if weight <= 0.0:
                raise RejectedInputError("atom weights must be positive")
        if self.left_amplitude <= 0.0:
            raise RejectedInputError("left bump amplitude must be positive")

    def stimulus(self) -> Stimulus:
        return Stimulus(g=composite_stimulus_values, g_lower=G_MIN,
                        g_upper=G_MAX, monotone_slope=0.0)

    def left_bump_values(self, x: np.ndarray) -> np.ndarray:
        q = (x + 4.0) * (-1.0 - x)
        return self.left_amplitude * np.maximum(q, 0.0) ** 3

    def initial_field(self, grid: Grid) -> Field1D:
        vals = self.left_bump_values(grid.nodes)
        for pos, weight in self.atoms:
            if self.atom_mode == "hat":
                i = int(np.argmin(np.abs(grid.nodes - pos)))
                vals[i] += weight / grid.h
            else:
                vals += weight * heat_kernel(grid.nodes - pos, self.delta_mollify)
        return Field1D(grid, vals)

    def validate_profile(self, grid: Grid) -> None:
        gv = composite_stimulus_values(grid.nodes)
        x = grid.nodes
        if gv.min() < G_MIN - 1e-12 or gv.max() > G_MAX + 1e-12:
            raise RejectedInputError("stimulus leaves [1/12, 6/7]")
        flat = (x <= -3.5) | (x >= -1.5)
        if np.max(np.abs(gv[flat] - G_MIN)) > 1e-12:
            raise RejectedInputError("stimulus must equal 1/12 outside (-7/2, -3/2)")
        plateau = (x >= -3.0) & (x <= -2.0)
        if np.max(np.abs(gv[plateau] - G_MAX)) > 1e-12:
            raise RejectedInputError("stimulus must equal 6/7 on [-3, -2]")


@dataclass(frozen=True)
class BoundsSummary:
    lam_lower_margin: float
    lam_upper_margin: float
    plateau_min: float
    sink_floor_margin: float

    @property
    def ok(self) -> bool:
        return (self.lam_lower_margin >= 0.0 and self.lam_upper_margin >= 0.0
                and self.plateau_min > 0.0 and self.sink_floor_margin >= -1e-12)


@dataclass
class CompositeRun:
    final: Field1D
    snapshots: list[Field1D]
    snapshot_times: list[float]
    trace: RunTrace
    trace_left: RunTrace
    trace_right: RunTrace
    spec: CompositeSpec
    bounds: BoundsSummary
    lam_mode: str
    side_condition_max: float

    @property
    def grid(self) -> Grid:
        return self.final.grid


def solve_composite(spec: CompositeSpec, t_end: float, dt: float | None = None, *,
                    n_cells: int, probes: Sequence[float] = (),
                    segments: Sequence[Segment] | None = None,
                    lam_mode: str = "conserve", tol: float = 1e-10,
                    engine: str = "auto", lam_tol: float = 1e-10,
                    trace_every: int = 1) -> CompositeRun:
    """Evolve the composite model, tracing the whole field and both parts.

    The field is split at x = -1/2: rows of trace_left/trace_right carry the
    restriction's support infimum, measure, and mass (s and lam repeat the
    global multiplier).  Quantitative bounds are accumulated over every
    traced row: the multiplier window [11/120, (1/2) integral of g over
    (-4,-1)], positivity on the plateau neighborhood [-7/2, -3/2], and the
    sink floor 1 - g/lam >= 1/11 away from it.
    """
    grid = Grid(-5.0, 5.0, n_cells)
    spec.validate_profile(grid)
    u0 = spec.initial_field(grid)
    stim = spec.stimulus()
    op = line_operator("neumann-zero")
    if segments is None:
        if dt is None:
            raise RejectedInputError("pass dt or explicit segments")
        n_steps = round(t_end / dt)
        if n_steps < 1 or abs(n_steps * dt - t_end) > 1e-9 * max(dt, t_end):
            raise RejectedInputError(f"dt={dt!r} does not divide t_end={t_end!r}")
        segments = [Segment(t_end=t_end, dt=dt, n_steps=n_steps)]

    probes = sorted(float(p) for p in probes)
    x = grid.nodes
    w = grid.quadrature_weights
    split = int(np.argmin(np.abs(x + 0.5)))
    plateau = (x >= -3.5) & (x <= -1.5)
    gv = stim.values(grid)
    off_plateau = ~plateau
    lam_hi_bound = 0.5 * LEFT_STIMULUS_INTEGRAL
    lam_lo_bound = 11.0 / 120.0

    def side_rows(u, lam, t, supp):
        trace.append(t, x[supp.first_node] if not supp.is_empty else None, None,
                     lam, supp.measure, float(w @ u))
        for tr, sl in ((trace_left, slice(0, split)), (trace_right, slice(split, None))):
            part = u[sl]
            thr = 1e-12 * max(1.0, float(u.max(initial=0.0)))
            mask = part > thr
            sp = SupportSet.from_mask(mask, grid.h)
            first = x[sl][sp.first_node] if not sp.is_empty else None
            tr.append(t, first, None, lam, sp.measure, float(w[sl] @ part))

    trace = RunTrace()
    trace_left = RunTrace()
    trace_right = RunTrace()
    supp0 = u0.support()
    lam = lambda_of_support(stim, supp0, grid)
    side_rows(u0.values, lam, 0.0, supp0)

    lam_lo_m = lam - lam_lo_bound
    lam_hi_m = lam_hi_bound - lam
    plateau_min = float(u0.values[plateau].min())
    sink_floor_m = float(np.min(1.0 - gv[off_plateau] / lam)) - 1.0 / 11.0

    snapshots: list[Field1D] = []
    snapshot_times: list[float] = []
    if probes and probes[0] == 0.0:
        snapshots.append(u0)
        snapshot_times.append(0.0)
        probes = probes[1:]

    u = u0.values.copy()
    t = 0.0
    side_max = -math.inf
    for seg in segments:
        stepper = _NonlocalStepper(grid, op, stim, seg.dt, tol=tol, engine=engine,
                                   lam_tol=lam_tol, lam_mode=lam_mode)
        snap_targets = {}
        for p in probes:
            if t < p <= seg.t_end + 1e-12 * max(1.0, seg.t_end):
                k = round((p - t) / seg.dt)
                if abs(t + k * seg.dt - p) > 1e-6 * max(seg.dt, abs(p)):
                    raise RejectedInputError(
                        f"probe time {p!r} is not reachable with dt={seg.dt!r}")
                snap_targets[int(k)] = p
        t_seg = t
        for k in range(1, seg.n_steps + 1):
            u, lam, supp, res, tol_abs, iters = stepper.step(u, lam)
            t = t_seg + k * seg.dt
            if k % trace_every == 0 or k == seg.n_steps or k in snap_targets:
                side_rows(u, lam, t, supp)
            if not supp.is_empty:
                zero_mask = ~supp.mask(grid.n_nodes)
                if zero_mask.any():
                    side_max = max(side_max, float((gv[zero_mask] - lam).max()))
                lam_lo_m = min(lam_lo_m, lam - lam_lo_bound)
                lam_hi_m = min(lam_hi_m, lam_hi_bound - lam)
                plateau_min = min(plateau_min, float(u[plateau].min()))
                sink_floor_m = min(sink_floor_m,
                                   float(np.min(1.0 - gv[off_plateau] / lam)) - 1.0 / 11.0)
            if k in snap_targets:
                snapshots.append(Field1D(grid, u.copy()))
                snapshot_times.append(snap_targets[k])
        probes = [p for p in probes if p > seg.t_end + 1e-12 * max(1.0, seg.t_end)]

    bounds = BoundsSummary(lam_lower_margin=lam_lo_m, lam_upper_margin=lam_hi_m,
                           plateau_min=plateau_min, sink_floor_margin=sink_floor_m)
    return CompositeRun(final=Field1D(grid, u), snapshots=snapshots,
                        snapshot_times=snapshot_times, trace=trace,
                        trace_left=trace_left, trace_right=trace_right,
                        spec=spec, bounds=bounds, lam_mode=lam_mode,
                        side_condition_max=side_max)


def lambda_gap_lower_bound(a_ell0: SupportSet, grid: Grid, g_values: np.ndarray,
                           a_r_minus: float, a_r_plus: float,
                           g_max: float = G_MAX) -> float:
    """Guaranteed multiplier oscillation from right-part measure oscillation.

    Evaluates integral over the fixed left support of (g_max - g), times
    (a_r_plus - a_r_minus), divided by (|A_l| + a_r_plus)(|A_l| + a_r_minus).
    """
    if a_ell0.is_empty:
        raise RejectedInputError("left support must be nonempty")
    if a_r_minus > a_r_plus:
        raise RejectedInputError("need a_r_minus <= a_r_plus")
    integral, measure = support_quadrature(g_max - np.asarray(g_values, dtype=float),
                                           a_ell0, grid.h)
    ell0 = measure
    return integral * (a_r_plus - a_r_minus) / ((ell0 + a_r_plus) * (ell0 + a_r_minus))
