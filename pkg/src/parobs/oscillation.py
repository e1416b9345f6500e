"""Hierarchical atomic initial data and support-oscillation measurement.

A single point-mass block dies at a fixed multiple of its squared length
scale, so superposing blocks at well-separated scales makes the support
measure swing: just after the youngest generation peaks it is large, and
just before that generation matters it is small.  This module calibrates
the single-block constants from measured runs, builds the nested atom
hierarchy behind that argument with every separation gate checked
explicitly, evolves the superposed data, and reports the measured swing
per level against the calibrated thresholds.  A companion driver embeds
the same hierarchy, rescaled, as the atomic right part of the two-bump
nonlocal model on a pair of grids coupled only through the shared
multiplier, and records the induced multiplier oscillation.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from parobs.errors import (
    CalibrationError,
    DomainTooSmallError,
    GateViolationError,
    InconsistentStateError,
    RejectedInputError,
    SolverFailureError,
)
from parobs.grid import Field1D, Grid, SupportSet, support_quadrature
from parobs.line import (
    F_PLUS,
    G_MAX,
    G_MIN,
    LAMBDA0_MINUS,
    CompositeSpec,
    composite_stimulus_values,
    default_truncation_radius,
    extinction_time,
    lambda_gap_lower_bound,
    lower_bound_radius,
    solve_dirac,
)
from parobs.stepping import (
    Segment,
    _step_arrays,
    assemble_step_matrix,
    constant_sink,
    evolve_schedule,
    line_operator,
)
from parobs.trace import RunTrace

HIERARCHY_FORMAT = "parobs-hierarchy-v1"

# Cells per block diameter d*theta_N demanded of the oscillation grid.
_CELLS_PER_BLOCK = 50


# ---------------------------------------------------------------------------
# calibration


@dataclass(frozen=True)
class BuildingBlockCalibration:
    """Measured single-block constants feeding the hierarchy gates.

    d bounds the support radius (3/2 times the largest measured radius over
    the block's life), t_star bounds the extinction time over the multiplier
    window [1-kappa, 1+kappa], c1 is the smallest constant with support
    radius <= c1 sqrt(t ln(1/t)) for t < 1/2, and (t1, d1, t1_tilde) fix the
    probe convention: the support measure is >= d1 at t1 and <= d1/8 at
    t1_tilde (<= d1/4 across the window).
    """

    d: float
    t_star: float
    t1: float
    d1: float
    t1_tilde: float
    c1: float
    kappa: float
    lam_values: tuple[float, ...] = ()
    t_star_by_lam: tuple[float, ...] = ()
    n_cells: int = 0
    delta_t: float = 0.0
    domain_radius: float = 0.0

    def __post_init__(self):
        if not (self.d > 0.0 and self.d1 > 0.0 and self.c1 > 0.0):
            raise RejectedInputError("calibration lengths must be positive")
        if not 0.0 < self.t1_tilde < self.t1 < self.t_star:
            raise RejectedInputError(
                f"need 0 < t1_tilde < t1 < t_star, got"
                f" ({self.t1_tilde!r}, {self.t1!r}, {self.t_star!r})")
        if self.kappa < 0.0:
            raise RejectedInputError("window half-width must be >= 0")

    @property
    def scale_ratio_bound(self) -> float:
        """Largest admissible theta_n/theta_{n-1} from the clearance gate:
        (1/sqrt(T*)) exp(-d^2 / (2 T* c1^2))."""
        return math.exp(-self.d ** 2 / (2.0 * self.t_star * self.c1 ** 2)) \
            / math.sqrt(self.t_star)

    @property
    def extinction_ratio_bound(self) -> float:
        """Largest theta ratio keeping generations staggered:
        sqrt(t1_tilde / t_star), i.e. T* theta_{n+1}^2 < t1_tilde theta_n^2."""
        return math.sqrt(self.t1_tilde / self.t_star)


def _calibration_schedule(delta_t: float, t_end: float,
                          steps_factor: int = 60) -> list[Segment]:
    """Proportional-dt segments from the bootstrap time out to t_end."""
    segments = [Segment(t_end=10.0 * delta_t, dt=0.5 * delta_t, n_steps=18)]
    bounds = [10.0 * delta_t]
    growth = 10.0 ** 0.25
    while bounds[-1] * growth < t_end:
        bounds.append(bounds[-1] * growth)
    bounds.append(t_end)
    for a, b in zip(bounds[:-1], bounds[1:]):
        n = max(1, math.ceil((b - a) / (a / steps_factor)))
        segments.append(Segment(t_end=b, dt=(b - a) / n, n_steps=n))
    return segments


def calibrate_block(kappa: float = 0.05, *, n_cells: int = 6000,
                    delta_t: float = 1e-6, domain_radius: float | None = None,
                    extinction_bracket: float = 1e-3, tol: float = 1e-10,
                    engine: str = "auto") -> BuildingBlockCalibration:
    """Measure the single-block constants over the multiplier window.

    Runs the point-mass problem at lam in {1-kappa, 1, 1+kappa} (just lam=1
    when kappa=0) on one shared proportional-dt schedule so trace rows align
    across the window.  The support-radius envelope ratio against
    sqrt(6 t ln(1/t)) must stay within [0.8, 1.2] on [1e-4, 1e-2] for the
    resolution to be accepted.  t1 maximizes the certified lower-bound
    radius subject to a nonnegative window-wide measure margin; t1_tilde is
    the last time before t1 at which the lam=1 measure is below d1/8, and
    must keep the whole window below d1/4.
    """
    if not 0.0 <= kappa < 1.0 / 3.0:
        raise RejectedInputError(
            f"window half-width must lie in [0, 1/3), got {kappa!r}")
    lams = (1.0,) if kappa == 0.0 else (1.0 - kappa, 1.0, 1.0 + kappa)

    brackets = [extinction_time(lam, n_cells=n_cells, delta_t=delta_t,
                                bracket=extinction_bracket,
                                domain_radius=domain_radius, tol=tol,
                                engine=engine) for lam in lams]
    t_star = max(b.t_high for b in brackets)
    t_end = 1.02 * t_star
    radius = domain_radius if domain_radius is not None \
        else default_truncation_radius(t_end)
    segments = _calibration_schedule(delta_t, t_end)
    runs = [solve_dirac(lam, delta_t, t_end, n_cells=n_cells,
                        domain_radius=radius, segments=segments, tol=tol,
                        engine=engine, normalize=True) for lam in lams]

    t = runs[0].trace.column("t")
    radii = []
    measures = []
    for run in runs:
        if not np.array_equal(run.trace.column("t"), t):
            raise InconsistentStateError("window runs produced misaligned traces")
        p = run.trace.column("p")
        radii.append(np.where(np.isnan(p), 0.0, -p))
        measures.append(run.trace.column("support_measure"))
    radii = np.array(radii)
    measures = np.array(measures)

    d = 1.5 * float(radii.max())

    band = (t >= 10.0 * delta_t) & (t < 0.5) & (radii.max(axis=0) > 0.0)
    if not band.any():
        raise CalibrationError("no alive rows below t = 1/2; bad setup")
    ref = np.sqrt(t[band] * np.log(1.0 / t[band]))
    c1 = float((radii[:, band] / ref).max())

    gate = (t >= 1e-4) & (t <= 1e-2)
    unit = runs[lams.index(1.0)]
    r1 = radii[lams.index(1.0)]
    ratios = r1[gate] / np.sqrt(6.0 * t[gate] * np.log(1.0 / t[gate]))
    if ratios.min() < 0.8 or ratios.max() > 1.2:
        raise CalibrationError(
            f"support envelope ratio spans [{ratios.min():.4f},"
            f" {ratios.max():.4f}] on [1e-4, 1e-2]; outside [0.8, 1.2],"
            f" refine the calibration grid")

    ell = lower_bound_radius(t)
    min_measure = measures.min(axis=0)
    feasible = (ell > 0.0) & (min_measure >= ell) & (t < t_star)
    if not feasible.any():
        raise CalibrationError(
            "no probe time has window-wide support measure above the"
            " certified radius; refine the calibration grid")
    k1 = int(np.flatnonzero(feasible)[np.argmax(ell[feasible])])
    t1 = float(t[k1])
    d1 = float(ell[k1])

    m1 = measures[lams.index(1.0)]
    early = (t < t1) & (m1 > 0.0) & (m1 <= d1 / 8.0)
    if not early.any():
        raise CalibrationError(
            f"no time before t1={t1!r} has measure below d1/8={d1 / 8.0!r};"
            " lower delta_t")
    k_tilde = int(np.flatnonzero(early)[-1])
    t1_tilde = float(t[k_tilde])
    worst = float(measures[:, k_tilde].max())
    if worst > d1 / 4.0:
        raise CalibrationError(
            f"window too wide: support measure {worst!r} at"
            f" t1_tilde={t1_tilde!r} exceeds d1/4={d1 / 4.0!r};"
            " use a smaller kappa")

    return BuildingBlockCalibration(
        d=d, t_star=t_star, t1=t1, d1=d1, t1_tilde=t1_tilde, c1=c1,
        kappa=kappa, lam_values=tuple(lams),
        t_star_by_lam=tuple(b.t_star for b in brackets),
        n_cells=n_cells, delta_t=delta_t, domain_radius=radius)


# ---------------------------------------------------------------------------
# hierarchy construction


@dataclass(frozen=True)
class Atom:
    """One point mass: position and the offset indices that produced it."""

    x: float
    lineage: tuple[int, ...]

    @property
    def level(self) -> int:
        return len(self.lineage)


@dataclass(frozen=True)
class HierarchyLevel:
    level: int
    theta: float
    weight: float
    surviving: tuple[int, ...]
    atoms: tuple[Atom, ...]

    @property
    def count(self) -> int:
        return len(self.atoms)


@dataclass(frozen=True)
class GateRecord:
    """One checked inequality: value against bound, with the formula text."""

    gate: str
    level: int
    value: float
    bound: float
    sense: str
    constraint: str

    @property
    def satisfied(self) -> bool:
        if self.sense == "<":
            return self.value < self.bound
        if self.sense == "<=":
            return self.value <= self.bound
        if self.sense == ">":
            return self.value > self.bound
        return self.value >= self.bound


@dataclass(frozen=True)
class AtomHierarchy:
    """Gated nested atom families with their probe times.

    Level n carries atoms of weight theta_n^3 spaced in multiples of
    4 d theta_n inside each parent cell; probe times are t_n = t1 theta_n^2
    and t_tilde_n = t1_tilde theta_n^2.
    """

    calibration: BuildingBlockCalibration
    levels: tuple[HierarchyLevel, ...]
    epsilons: tuple[float, ...]
    gates: tuple[GateRecord, ...]

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    @property
    def finest_theta(self) -> float:
        return self.levels[-1].theta

    def t_n(self, n: int) -> float:
        return self.calibration.t1 * self.levels[n - 1].theta ** 2

    def t_tilde_n(self, n: int) -> float:
        return self.calibration.t1_tilde * self.levels[n - 1].theta ** 2

    def survivor_count(self, n: int) -> int:
        return self.levels[n - 1].count

    def predicted_measure(self, n: int) -> float:
        """Counting lower bound on the support measure at t_n: d1 theta_n Z_n."""
        return self.calibration.d1 * self.levels[n - 1].theta * self.levels[n - 1].count

    def total_mass(self) -> float:
        return sum(lv.count * lv.weight for lv in self.levels)

    def all_atoms(self) -> tuple[Atom, ...]:
        return tuple(a for lv in self.levels for a in lv.atoms)

    def to_json(self) -> str:
        doc = {
            "format": HIERARCHY_FORMAT,
            "calibration": asdict(self.calibration),
            "epsilons": list(self.epsilons),
            "gates": [asdict(g) for g in self.gates],
            "levels": [{
                "level": lv.level,
                "theta": lv.theta,
                "weight": lv.weight,
                "surviving": list(lv.surviving),
                "atoms": [{"x": a.x, "lineage": list(a.lineage)} for a in lv.atoms],
            } for lv in self.levels],
            "probe_times": [{"level": n, "t_n": self.t_n(n),
                             "t_tilde_n": self.t_tilde_n(n)}
                            for n in range(1, self.n_levels + 1)],
            "total_mass": self.total_mass(),
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "AtomHierarchy":
        doc = json.loads(text)
        if doc.get("format") != HIERARCHY_FORMAT:
            raise RejectedInputError(
                f"unknown hierarchy format {doc.get('format')!r}")
        calib_doc = dict(doc["calibration"])
        for key in ("lam_values", "t_star_by_lam"):
            calib_doc[key] = tuple(calib_doc.get(key, ()))
        calib = BuildingBlockCalibration(**calib_doc)
        levels = tuple(HierarchyLevel(
            level=int(lv["level"]), theta=float(lv["theta"]),
            weight=float(lv["weight"]),
            surviving=tuple(int(j) for j in lv["surviving"]),
            atoms=tuple(Atom(float(a["x"]), tuple(int(j) for j in a["lineage"]))
                        for a in lv["atoms"]),
        ) for lv in doc["levels"])
        gates = tuple(GateRecord(**g) for g in doc["gates"])
        return cls(calibration=calib, levels=levels,
                   epsilons=tuple(float(e) for e in doc["epsilons"]),
                   gates=gates)

    def to_file(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json() + "\n")

    @classmethod
    def from_file(cls, path) -> "AtomHierarchy":
        with open(path) as fh:
            return cls.from_json(fh.read())


def build_level_one(d: float, theta1: float) -> tuple[tuple[int, ...], tuple[float, ...], float]:
    """First-level layout: offsets {1..floor(1/(4 d theta1)) - 1}, positions
    4 d theta1 j, weight theta1^3."""
    if d <= 0.0 or theta1 <= 0.0:
        raise RejectedInputError("d and theta1 must be positive")
    i_max = math.floor(1.0 / (4.0 * d * theta1)) - 1
    offsets = tuple(range(1, i_max + 1))
    return offsets, tuple(4.0 * d * theta1 * j for j in offsets), theta1 ** 3


def _epsilon_tail(calib: BuildingBlockCalibration, ratio: float) -> float:
    """Index-loss fraction of one child generation at the given theta ratio:
    ratio * (2 + (c1/d) sqrt(T* ln(1/(T* ratio^2))))."""
    arg = 1.0 / (calib.t_star * ratio ** 2)
    if arg <= 1.0:
        raise RejectedInputError(f"theta ratio {ratio!r} too large for the"
                                 " clearance logarithm")
    return ratio * (2.0 + (calib.c1 / calib.d)
                    * math.sqrt(calib.t_star * math.log(arg)))


def geometric_thetas(calib: BuildingBlockCalibration, n_levels: int, *,
                     safety: float = 0.9,
                     loss_budget: float = 0.6) -> tuple[float, ...]:
    """Geometric scale sequence honoring every gate with a safety factor.

    The ratio starts at safety times the tightest of the two ratio gates and
    backs off (factor 0.7) until the summed index-loss fractions use at most
    loss_budget of the 1/9 allowance; theta1 then spends safety times what
    remains of that allowance.
    """
    if n_levels < 1:
        raise RejectedInputError("need at least one level")
    if not 0.0 < safety < 1.0 or not 0.0 < loss_budget < 1.0:
        raise RejectedInputError("safety and loss_budget must lie in (0, 1)")
    rho = safety * min(calib.scale_ratio_bound, calib.extinction_ratio_bound)
    tail = 0.0
    if n_levels > 1:
        while (n_levels - 1) * _epsilon_tail(calib, rho) > loss_budget / 9.0:
            rho *= 0.7
            if rho < 1e-12:
                raise CalibrationError(
                    f"no geometric ratio leaves {n_levels} generations within"
                    " the index-loss allowance")
        tail = (n_levels - 1) * _epsilon_tail(calib, rho)
    theta1 = safety * (1.0 / 9.0 - tail) / (8.0 * calib.d)
    return tuple(theta1 * rho ** k for k in range(n_levels))


def _gate_fail(rec: GateRecord) -> GateViolationError:
    return GateViolationError(
        rec.gate,
        f"level {rec.level}: {rec.value:.6g} {rec.sense} {rec.bound:.6g}"
        f" fails ({rec.constraint})",
        values={"level": rec.level, "value": rec.value, "bound": rec.bound})


def build_hierarchy(calib: BuildingBlockCalibration,
                    theta_sequence: Sequence[float],
                    n_levels: int | None = None) -> AtomHierarchy:
    """Construct and validate the nested atom families.

    Every admissibility gate is checked with the measured calibration
    constants and recorded with its formula; the first violated gate raises
    GateViolationError.  Offsets at generation n >= 2 are pruned to clear
    both the parent's residual core and the next parent cell.
    """
    thetas = tuple(float(v) for v in theta_sequence)
    if n_levels is not None and n_levels != len(thetas):
        raise RejectedInputError(
            f"theta_sequence has {len(thetas)} entries, n_levels={n_levels}")
    if not thetas or any(v <= 0.0 for v in thetas):
        raise RejectedInputError("theta sequence must be positive")
    if any(b >= a for a, b in zip(thetas, thetas[1:])):
        raise RejectedInputError("theta sequence must strictly decrease")

    d, c1 = calib.d, calib.c1
    t_star, t_tilde = calib.t_star, calib.t1_tilde
    gates: list[GateRecord] = []

    def check(rec: GateRecord) -> None:
        gates.append(rec)
        if not rec.satisfied:
            raise _gate_fail(rec)

    offsets1, positions1, weight1 = build_level_one(d, thetas[0])
    check(GateRecord(
        gate="first-level-capacity", level=1, value=float(len(offsets1)),
        bound=1.0, sense=">=",
        constraint="floor(1/(4 d theta_1)) - 1 >= 1"))
    levels = [HierarchyLevel(
        level=1, theta=thetas[0], weight=weight1, surviving=offsets1,
        atoms=tuple(Atom(x, (j,)) for j, x in zip(offsets1, positions1)))]

    for n in range(2, len(thetas) + 1):
        th_prev, th = thetas[n - 2], thetas[n - 1]
        ratio = th / th_prev
        check(GateRecord(
            gate="scale-ratio-decay", level=n, value=ratio,
            bound=calib.scale_ratio_bound, sense="<",
            constraint="theta_n/theta_{n-1} < 1/sqrt(T*)"
                       " exp(-d^2/(2 T* C1^2))"))
        check(GateRecord(
            gate="staggered-extinction", level=n, value=ratio,
            bound=calib.extinction_ratio_bound, sense="<",
            constraint="T* theta_n^2 < T1_tilde theta_{n-1}^2"))
        clearance = (c1 / (2.0 * d)) * math.sqrt(
            t_star * math.log(1.0 / (t_star * ratio ** 2)))
        cap = th_prev / th
        i_max = math.floor(cap) - 1
        surviving = tuple(j for j in range(1, i_max + 1)
                          if j > clearance and j < cap - clearance)
        if not surviving:
            raise GateViolationError(
                "child-offset-floor",
                f"level {n}: no offset j satisfies {clearance:.6g} < j <"
                f" {cap - clearance:.6g}"
                " (j_n > (C1/2d) sqrt(T* ln(theta_{n-1}^2/(T* theta_n^2)))"
                " and j_n < theta_{n-1}/theta_n - the same clearance)",
                values={"level": n, "clearance": clearance, "cap": cap})
        check(GateRecord(
            gate="child-offset-floor", level=n, value=float(surviving[0]),
            bound=clearance, sense=">",
            constraint="j_n > (C1/2d) sqrt(T* ln(theta_{n-1}^2/(T* theta_n^2)))"))
        check(GateRecord(
            gate="child-offset-ceiling", level=n, value=float(surviving[-1]),
            bound=cap - clearance, sense="<",
            constraint="j_n < theta_{n-1}/theta_n"
                       " - (C1/2d) sqrt(T* ln(theta_{n-1}^2/(T* theta_n^2)))"))
        spacing = 4.0 * d * th
        atoms = tuple(Atom(parent.x + spacing * j, parent.lineage + (j,))
                      for parent in levels[-1].atoms for j in surviving)
        levels.append(HierarchyLevel(level=n, theta=th, weight=th ** 3,
                                     surviving=surviving, atoms=atoms))

    eps = [8.0 * d * thetas[0]]
    eps.extend(_epsilon_tail(calib, thetas[n - 1] / thetas[n - 2])
               for n in range(2, len(thetas) + 1))
    check(GateRecord(
        gate="offset-loss-budget", level=len(thetas), value=float(sum(eps)),
        bound=1.0 / 9.0, sense="<", constraint="sum_j eps_j < 1/9"))

    for n, lv in enumerate(levels, start=1):
        check(GateRecord(
            gate="survivor-count", level=n, value=float(lv.count),
            bound=2.0 / (9.0 * d * lv.theta), sense=">=",
            constraint="Z_n >= 2/(9 d theta_n)"))

    theta0 = 1.0 / (4.0 * d)
    for n in range(1, len(thetas) + 1):
        th_prev = theta0 if n == 1 else thetas[n - 2]
        th = thetas[n - 1]
        lhs = 2.0 * c1 * theta0 * (n * th / th_prev) * math.sqrt(
            t_tilde * math.log(th_prev ** 2 / (t_tilde * th ** 2)))
        check(GateRecord(
            gate="older-level-residue", level=n, value=lhs,
            bound=calib.d1 / (18.0 * d), sense="<=",
            constraint="2 C1 theta_0 (n theta_n/theta_{n-1})"
                       " sqrt(T1_tilde ln(theta_{n-1}^2/(T1_tilde theta_n^2)))"
                       " <= (1/18) d1/d, theta_0 = 1/(4d)"))

    positions = [a.x for lv in levels for a in lv.atoms]
    lo, hi = min(positions), max(positions)
    if not (0.0 < lo and hi < 1.0):
        raise GateViolationError(
            "unit-interval-containment",
            f"atoms span [{lo:.6g}, {hi:.6g}], must lie inside (0, 1);"
            " shrink theta_1", values={"lo": lo, "hi": hi})
    if len(set(positions)) != len(positions):
        raise InconsistentStateError("atom positions collide")

    return AtomHierarchy(calibration=calib, levels=tuple(levels),
                         epsilons=tuple(eps), gates=tuple(gates))


# ---------------------------------------------------------------------------
# schedules


def probe_schedule(probes: Sequence[float], *, prelude_steps: int = 60,
                   fillers_per_decade: int = 2,
                   steps_factor: int = 40) -> list[Segment]:
    """Fixed-dt segments from t = 0 hitting every probe exactly.

    A prelude covers [0, first probe]; afterwards geometric waypoints are
    inserted between probes and each gap [a, b] is split so dt stays near
    a/steps_factor, keeping the step proportional to elapsed time.
    """
    pts = sorted(set(float(p) for p in probes))
    if not pts or pts[0] <= 0.0:
        raise RejectedInputError("probes must be positive")
    bounds = [pts[0]]
    for a, b in zip(pts, pts[1:]):
        k = max(1, math.ceil(math.log10(b / a) * fillers_per_decade))
        bounds.extend(a * (b / a) ** (i / k) for i in range(1, k + 1))
        bounds[-1] = b
    segments = [Segment(t_end=pts[0], dt=pts[0] / prelude_steps,
                        n_steps=prelude_steps)]
    prev = pts[0]
    for b in bounds[1:]:
        n = max(1, math.ceil((b - prev) / (prev / steps_factor)))
        segments.append(Segment(t_end=b, dt=(b - prev) / n, n_steps=n))
        prev = b
    return segments


# ---------------------------------------------------------------------------
# superposed evolution


@dataclass(frozen=True)
class LevelOscillation:
    level: int
    t_n: float
    measure_tn: float
    t_tilde_n: float
    measure_ttilde_n: float
    threshold_hi: float
    threshold_lo: float
    predicted_measure: float

    @property
    def passed_hi(self) -> bool:
        return self.measure_tn >= self.threshold_hi

    @property
    def passed_lo(self) -> bool:
        return self.measure_ttilde_n <= self.threshold_lo

    @property
    def passed(self) -> bool:
        return self.passed_hi and self.passed_lo


@dataclass
class OscillationReport:
    """Measured support swing per level, with calibrated thresholds."""

    levels: tuple[LevelOscillation, ...]
    d1_over_d: float
    probe_measures: tuple[tuple[float, float], ...]
    separation_checked: bool
    n_cells: int
    h: float
    mass_initial: float
    max_residual: float
    runtime_seconds: float
    trace: RunTrace

    @property
    def all_passed(self) -> bool:
        return all(lv.passed for lv in self.levels)

    def to_csv(self, path) -> None:
        lines = ["n,t_n,measure_tn,t_tilde_n,measure_ttilde_n,"
                 "threshold_hi,threshold_lo"]
        for lv in self.levels:
            lines.append(",".join(repr(v) for v in (
                lv.level, lv.t_n, lv.measure_tn, lv.t_tilde_n,
                lv.measure_ttilde_n, lv.threshold_hi, lv.threshold_lo)))
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def required_cells(hierarchy: AtomHierarchy,
                   domain: tuple[float, float] | None = None) -> tuple[int, tuple[float, float]]:
    """(cell count, domain) resolving the finest blocks at the mandated
    h <= theta_N d / 50."""
    calib = hierarchy.calibration
    h_req = hierarchy.finest_theta * calib.d / _CELLS_PER_BLOCK
    if domain is None:
        xs = [a.x for a in hierarchy.all_atoms()]
        spread = (2.0 / 3.0) * calib.d * hierarchy.levels[0].theta
        pad = 1.05 * spread + 0.01
        domain = (min(xs) - pad, max(xs) + pad)
    return math.ceil((domain[1] - domain[0]) / h_req), domain


def _hat_field(grid: Grid, atoms: Sequence[tuple[float, float]]) -> Field1D:
    """Single-cell hats: value w/h at the node nearest each position."""
    values = np.zeros(grid.n_nodes)
    taken: dict[int, float] = {}
    for x, w in atoms:
        i = int(round((x - grid.x_min) / grid.h))
        if not 0 < i < grid.n_cells:
            raise RejectedInputError(f"atom at {x!r} falls outside the grid")
        if i in taken:
            raise InconsistentStateError(
                f"atoms at {taken[i]!r} and {x!r} share a grid node; the"
                " resolution guard should have prevented this")
        taken[i] = x
        values[i] += w / grid.h
    return Field1D(grid, values)


def _check_separation(field: Field1D, alive_x: np.ndarray, t: float) -> None:
    """Every support interval must hold exactly one alive atom.

    Two alive atoms sharing an interval means blocks merged (the offset
    gates failed physically); an interval with none means a block outlived
    its staggered-extinction slot.
    """
    supp = field.support()
    if supp.is_empty:
        if alive_x.size:
            raise GateViolationError(
                "separation",
                f"support empty at t={t!r} while {alive_x.size} blocks"
                " should be alive", values={"t": t, "alive": alive_x.size})
        return
    x = field.grid.nodes
    half = 0.5 * field.grid.h
    lo = np.array([x[s] - half for s, _ in supp.intervals])
    hi = np.array([x[e] + half for _, e in supp.intervals])
    idx = np.searchsorted(lo, alive_x, side="right") - 1
    inside = (idx >= 0) & (alive_x <= hi[np.clip(idx, 0, None)])
    if not inside.all():
        stray = float(alive_x[~inside][0])
        raise GateViolationError(
            "separation",
            f"alive block at x={stray!r} has no support at t={t!r}",
            values={"t": t, "x": stray})
    counts = np.bincount(idx[inside], minlength=len(supp.intervals))
    if (counts > 1).any():
        k = int(np.argmax(counts > 1))
        raise GateViolationError(
            "separation",
            f"support interval [{lo[k]!r}, {hi[k]!r}] at t={t!r} holds"
            f" {int(counts[k])} blocks; offsets too tight",
            values={"t": t, "count": int(counts[k])})
    if (counts == 0).any():
        k = int(np.argmax(counts == 0))
        raise GateViolationError(
            "separation",
            f"support interval [{lo[k]!r}, {hi[k]!r}] at t={t!r} holds no"
            " alive block; a block outlived its extinction slot",
            values={"t": t})


def _alive_positions(hierarchy: AtomHierarchy, t: float) -> np.ndarray:
    """Positions of blocks not yet past their window-wide extinction bound."""
    t_star = hierarchy.calibration.t_star
    xs = [a.x for lv in hierarchy.levels if t < t_star * lv.theta ** 2
          for a in lv.atoms]
    return np.asarray(sorted(xs))


def run_oscillation(hierarchy: AtomHierarchy, *, lam: float = 1.0,
                    n_cells: int | None = None,
                    domain: tuple[float, float] | None = None,
                    tol: float = 1e-14, engine: str = "auto",
                    prelude_steps: int = 60, fillers_per_decade: int = 2,
                    steps_factor: int = 40, check_separation: bool = True,
                    extra_probes: Sequence[float] = ()) -> OscillationReport:
    """Evolve the superposed hierarchy and measure the support swing.

    The grid must resolve the finest blocks (h <= theta_N d / 50); too few
    cells is refused with the required count.  Atoms become single-cell
    hats, the run uses the constant sink lam^3 on a dt-proportional probe
    schedule, and the report compares the measured support at each t_n and
    t_tilde_n against the thresholds (2/9) d1/d and (1/9) d1/d plus the
    counting prediction d1 theta_n Z_n.  The solver tolerance is scaled far
    below the default because block amplitudes sit at theta_n^2 scale.
    """
    calib = hierarchy.calibration
    needed, domain = required_cells(hierarchy, domain)
    if n_cells is None:
        n_cells = needed
    elif n_cells < needed:
        raise RejectedInputError(
            f"resolution too coarse for the finest blocks: needs n_cells >="
            f" {needed} on [{domain[0]!r}, {domain[1]!r}] so that h <="
            f" theta_N d / {_CELLS_PER_BLOCK}")
    grid = Grid(domain[0], domain[1], n_cells)

    atoms = [(a.x, lv.weight) for lv in hierarchy.levels for a in lv.atoms]
    u0 = _hat_field(grid, atoms)
    mass0 = u0.integral()
    book = hierarchy.total_mass()
    if abs(mass0 - book) > 1e-9 * book:
        raise InconsistentStateError(
            f"initial mass {mass0!r} disagrees with the atom bookkeeping"
            f" {book!r}")

    pairs = [(hierarchy.t_n(n), hierarchy.t_tilde_n(n))
             for n in range(1, hierarchy.n_levels + 1)]
    probes = sorted({t for pair in pairs for t in pair}
                    | {0.5 * hierarchy.t_tilde_n(hierarchy.n_levels)}
                    | set(float(p) for p in extra_probes))
    segments = probe_schedule(probes, prelude_steps=prelude_steps,
                              fillers_per_decade=fillers_per_decade,
                              steps_factor=steps_factor)

    started = time.perf_counter()
    result = evolve_schedule(u0, line_operator("neumann-zero"),
                             constant_sink(float(lam) ** 3), segments,
                             probes=probes, tol=tol, engine=engine)
    runtime = time.perf_counter() - started

    measures: dict[float, float] = {}
    for t, snap in zip(result.snapshot_times, result.snapshots):
        measures[t] = snap.support().measure
        if check_separation:
            _check_separation(snap, _alive_positions(hierarchy, t), t)
    missing = [p for p in probes if p not in measures]
    if missing:
        raise InconsistentStateError(f"probes {missing!r} produced no snapshot")

    ratio = calib.d1 / calib.d
    rows = tuple(LevelOscillation(
        level=n, t_n=t_n, measure_tn=measures[t_n], t_tilde_n=t_t,
        measure_ttilde_n=measures[t_t],
        threshold_hi=(2.0 / 9.0) * ratio, threshold_lo=(1.0 / 9.0) * ratio,
        predicted_measure=hierarchy.predicted_measure(n),
    ) for n, (t_n, t_t) in enumerate(pairs, start=1))

    return OscillationReport(
        levels=rows, d1_over_d=ratio,
        probe_measures=tuple((p, measures[p]) for p in probes),
        separation_checked=check_separation, n_cells=n_cells, h=grid.h,
        mass_initial=mass0, max_residual=result.max_residual,
        runtime_seconds=runtime, trace=result.trace)


@dataclass(frozen=True)
class SuperpositionReport:
    max_gap: float
    t_end: float
    n_cells: int


def superposition_check(positions: Sequence[float], weights: Sequence[float],
                        *, lam: float = 1.0, t_end: float = 1e-5,
                        n_steps: int = 50, n_cells: int = 3000,
                        domain: tuple[float, float] = (-0.5, 1.5),
                        tol: float = 1e-14) -> SuperpositionReport:
    """Combined run against the sum of isolated single-atom runs.

    With supports never meeting, the projected steps decouple and the final
    fields must agree to rounding; a visible gap means blocks interacted.
    """
    if len(positions) != len(weights) or not positions:
        raise RejectedInputError("positions and weights must pair up")
    grid = Grid(domain[0], domain[1], n_cells)
    segments = [Segment(t_end=t_end, dt=t_end / n_steps, n_steps=n_steps)]
    op = line_operator("neumann-zero")
    sink = constant_sink(float(lam) ** 3)

    def final(atoms):
        u0 = _hat_field(grid, atoms)
        return evolve_schedule(u0, op, sink, segments, tol=tol).final.values

    combined = final(list(zip(positions, weights)))
    summed = np.zeros(grid.n_nodes)
    for x, w in zip(positions, weights):
        summed += final([(x, w)])
    return SuperpositionReport(
        max_gap=float(np.abs(combined - summed).max()), t_end=t_end,
        n_cells=n_cells)


# ---------------------------------------------------------------------------
# embedding into the two-bump nonlocal model


@dataclass(frozen=True)
class EmbeddingWindow:
    """Sink range the right part sweeps as its support measure varies."""

    eta: float
    f_hi: float
    f_lo: float
    kappa_needed: float
    lam_min: float
    a_r_max: float


def embedding_window(hierarchy: AtomHierarchy, eta: float) -> EmbeddingWindow:
    """Worst-case sink window for the hierarchy embedded at scale eta.

    The multiplier starts at the right-part-free value and can only drop as
    the right support grows, so the sink f = 1 - g_min/lam ranges over
    [f_lo, f_hi] with f_hi the zero-measure limit.  The calibration window
    kappa must cover 1 - (f_lo/f_hi)^(1/3).
    """
    if not 0.0 < eta < 1.0:
        raise RejectedInputError(f"eta must lie in (0, 1), got {eta!r}")
    calib = hierarchy.calibration
    blocks = sum(lv.count * lv.theta for lv in hierarchy.levels)
    a_r_max = eta * min(1.0, (4.0 / 3.0) * calib.d * blocks)
    lam_min = LAMBDA0_MINUS - (LAMBDA0_MINUS - G_MIN) * a_r_max / (3.0 + a_r_max)
    f_lo = 1.0 - G_MIN / lam_min
    kappa_needed = 1.0 - (f_lo / F_PLUS) ** (1.0 / 3.0)
    return EmbeddingWindow(eta=eta, f_hi=F_PLUS, f_lo=f_lo,
                           kappa_needed=kappa_needed, lam_min=lam_min,
                           a_r_max=a_r_max)


def embedded_probe_times(hierarchy: AtomHierarchy,
                         eta: float) -> tuple[tuple[int, float, float], ...]:
    """(level, t_n, t_tilde_n) after the eta rescaling (times scale as eta^2)."""
    return tuple((n, eta ** 2 * hierarchy.t_n(n),
                  eta ** 2 * hierarchy.t_tilde_n(n))
                 for n in range(1, hierarchy.n_levels + 1))


def embed_into_composite(hierarchy: AtomHierarchy, eta: float, *,
                         left_amplitude: float = 0.04,
                         atom_mode: str = "hat") -> CompositeSpec:
    """Rescale the hierarchy into the atomic right part of the two-bump model.

    Positions scale by eta and weights by f_hi (eta theta_n)^3, so each
    block runs at unit effective sink while the multiplier sits at its
    right-part-free value.  Rejected when the sink window the embedding
    sweeps needs a wider multiplier window than the calibration covers.
    """
    win = embedding_window(hierarchy, eta)
    if win.kappa_needed >= hierarchy.calibration.kappa:
        raise RejectedInputError(
            f"eta={eta!r} sweeps the right-part sink over [{win.f_lo:.6f},"
            f" {win.f_hi:.6f}], needing a multiplier window of"
            f" {win.kappa_needed:.6f} but the calibration covers"
            f" {hierarchy.calibration.kappa!r}; use a smaller eta or"
            " recalibrate with a larger kappa")
    atoms = tuple((eta * a.x, F_PLUS * (eta * lv.theta) ** 3)
                  for lv in hierarchy.levels for a in lv.atoms)
    return CompositeSpec(eta=eta, atoms=atoms, atom_mode=atom_mode,
                         left_amplitude=left_amplitude)


class _CoupledGrids:
    """Conserving multiplier steps for two grids joined only through lam.

    The left and right supports never approach the split, so stepping each
    grid with a zero boundary condition at its inner edge is exact; the
    shared multiplier is resolved per step by safeguarded Newton on total
    mass, started from the lagged support average of the stimulus.
    """

    def __init__(self, grid_l: Grid, g_l: np.ndarray, grid_r: Grid,
                 g_r: np.ndarray, dt: float, *, tol: float,
                 mass_rtol: float, engine: str, max_lam_iters: int = 60):
        op = line_operator("neumann-zero")
        self.grids = (grid_l, grid_r)
        self.gs = (g_l, g_r)
        self.matrices = (assemble_step_matrix(grid_l, op, dt),
                         assemble_step_matrix(grid_r, op, dt))
        self.weights = (grid_l.quadrature_weights, grid_r.quadrature_weights)
        self.dt = dt
        self.tol = tol
        self.mass_rtol = mass_rtol
        self.engine = engine
        self.max_lam_iters = max_lam_iters

    def _solve_at(self, us, lam):
        outs, worst = [], 0.0
        for u_prev, (lo, di, up), g in zip(us, self.matrices, self.gs):
            f_all = 1.0 - g / lam
            u, res, tol_abs, *_ = _step_arrays(u_prev, lo, di, up, f_all,
                                               self.dt, self.tol,
                                               engine=self.engine)
            outs.append(u)
            worst = max(worst, res / max(tol_abs, 1e-300))
        return outs, worst

    def supports(self, us, thresholds):
        return tuple(SupportSet.from_mask(u > thr, grid.h)
                     for u, thr, grid in zip(us, thresholds, self.grids))

    def lagged_lam(self, us, thresholds) -> float:
        total_int, total_meas = 0.0, 0.0
        for u, thr, grid, g in zip(us, thresholds, self.grids, self.gs):
            supp = SupportSet.from_mask(u > thr, grid.h)
            integral, measure = support_quadrature(g, supp, grid.h)
            total_int += integral
            total_meas += measure
        if total_meas <= 0.0:
            raise SolverFailureError("both supports vanished; nothing to couple")
        return total_int / total_meas

    def step(self, us, thresholds):
        w_l, w_r = self.weights
        target = float(w_l @ us[0]) + float(w_r @ us[1])
        lam = min(max(self.lagged_lam(us, thresholds), G_MIN), G_MAX)
        lo_b, hi_b = G_MIN, G_MAX
        best = None
        for it in range(1, self.max_lam_iters + 1):
            outs, rel_res = self._solve_at(us, lam)
            mass = float(w_l @ outs[0]) + float(w_r @ outs[1])
            err = mass - target
            best = (outs, lam, rel_res, it)
            if abs(err) <= self.mass_rtol * max(target, 1e-300):
                return best
            # mass decreases in lam (stronger sink): shrink the bracket
            if err > 0.0:
                lo_b = lam
            else:
                hi_b = lam
            dmass = 0.0
            for u, w, g, grid, thr in zip(outs, self.weights, self.gs,
                                          self.grids, thresholds):
                active = u > thr
                dmass -= self.dt * float((w * g)[active].sum()) / (lam * lam)
            if dmass >= 0.0:
                lam_next = 0.5 * (lo_b + hi_b)
            else:
                lam_next = lam - err / dmass
                if not lo_b < lam_next < hi_b:
                    lam_next = 0.5 * (lo_b + hi_b)
            if abs(lam_next - lam) <= 1e-16 * max(1.0, lam):
                return best
            lam = lam_next
        raise SolverFailureError(
            f"coupled multiplier search did not converge in"
            f" {self.max_lam_iters} iterations (mass error {err:.3e})")


@dataclass(frozen=True)
class EmbeddedLevel:
    """Multiplier readings at one level's probe pair in the embedded run."""

    level: int
    t_n: float
    lam_tn: float
    a_r_plus: float
    t_tilde_n: float
    lam_ttilde_n: float
    a_r_minus: float
    gap: float
    gap_bound: float

    @property
    def sign_ok(self) -> bool:
        return self.gap > 0.0

    @property
    def magnitude_ok(self) -> bool:
        return self.gap >= 0.5 * self.gap_bound


@dataclass
class EmbeddedOscillationReport:
    eta: float
    levels: tuple[EmbeddedLevel, ...]
    window: EmbeddingWindow
    lam_min_seen: float
    lam_max_seen: float
    side_condition_max: float
    mass_drift_max: float
    left_measure_range: tuple[float, float]
    n_cells_left: int
    n_cells_right: int
    runtime_seconds: float
    trace_left: RunTrace
    trace_right: RunTrace


def run_embedded_oscillation(hierarchy: AtomHierarchy, eta: float, *,
                             n_cells_right: int | None = None,
                             n_cells_left: int = 4500, tol: float = 1e-14,
                             mass_rtol: float = 1e-12, engine: str = "auto",
                             prelude_steps: int = 60,
                             fillers_per_decade: int = 2,
                             steps_factor: int = 40,
                             check_separation: bool = True) -> EmbeddedOscillationReport:
    """Evolve the embedded hierarchy and record the multiplier at each probe.

    The left bump and the rescaled atoms live on separate grids (the gap
    between their supports never closes, making the split exact) coupled
    through the mass-conserving multiplier.  Each level contributes the
    reading pair lam(t_n) and lam(t_tilde_n) plus the guaranteed-gap bound
    evaluated from the same run's right-part measures.
    """
    spec = embed_into_composite(hierarchy, eta)
    calib = hierarchy.calibration

    grid_l = Grid(-5.0, -0.5, n_cells_left)
    xs = [x for x, _ in spec.atoms]
    spread = (2.0 / 3.0) * calib.d * eta * hierarchy.levels[0].theta
    pad = 1.05 * spread + 0.01 * eta
    lo_r, hi_r = min(xs) - pad, max(xs) + pad
    h_req = eta * hierarchy.finest_theta * calib.d / _CELLS_PER_BLOCK
    needed = math.ceil((hi_r - lo_r) / h_req)
    if n_cells_right is None:
        n_cells_right = needed
    elif n_cells_right < needed:
        raise RejectedInputError(
            f"right grid too coarse for the embedded blocks: needs"
            f" n_cells_right >= {needed} on [{lo_r!r}, {hi_r!r}]")
    grid_r = Grid(lo_r, hi_r, n_cells_right)

    u_l = spec.left_bump_values(grid_l.nodes)
    u_r = _hat_field(grid_r, spec.atoms).values.copy()
    thresholds = (1e-12 * max(1.0, float(u_l.max())),
                  1e-12 * max(1.0, float(u_r.max())))
    g_l = composite_stimulus_values(grid_l.nodes)
    g_r = np.full(grid_r.n_nodes, G_MIN)

    probe_rows = embedded_probe_times(hierarchy, eta)
    probes = sorted({t for _, t_n, t_t in probe_rows for t in (t_n, t_t)})
    segments = probe_schedule(probes, prelude_steps=prelude_steps,
                              fillers_per_decade=fillers_per_decade,
                              steps_factor=steps_factor)

    w_l, w_r = grid_l.quadrature_weights, grid_r.quadrature_weights
    a_ell0 = SupportSet.from_mask(u_l > thresholds[0], grid_l.h)
    mass0 = float(w_l @ u_l) + float(w_r @ u_r)

    trace_left, trace_right = RunTrace(), RunTrace()
    lam_at: dict[float, float] = {}
    a_r_at: dict[float, float] = {}
    lam_lo, lam_hi = math.inf, -math.inf
    left_lo, left_hi = math.inf, -math.inf
    side_max = -math.inf
    drift_max = 0.0
    guard_l, guard_r = 5 * grid_l.h, 5 * grid_r.h

    started = time.perf_counter()
    t = 0.0
    for seg in segments:
        stepper = _CoupledGrids(grid_l, g_l, grid_r, g_r, seg.dt, tol=tol,
                                mass_rtol=mass_rtol, engine=engine)
        snap_targets = {}
        for p in probes:
            if t < p <= seg.t_end + 1e-12 * max(1.0, seg.t_end):
                k = round((p - t) / seg.dt)
                if abs(t + k * seg.dt - p) > 1e-6 * max(seg.dt, p):
                    raise RejectedInputError(
                        f"probe {p!r} unreachable with dt={seg.dt!r}")
                snap_targets[int(k)] = p
        t_seg = t
        for k in range(1, seg.n_steps + 1):
            (u_l, u_r), lam, _, _ = stepper.step((u_l, u_r), thresholds)
            t = t_seg + k * seg.dt
            supp_l, supp_r = stepper.supports((u_l, u_r), thresholds)
            if supp_l.is_empty:
                raise SolverFailureError(f"left bump vanished at t={t!r}")
            x_l, x_r = grid_l.nodes, grid_r.nodes
            lo_edge = float(x_l[supp_l.first_node])
            hi_edge = float(x_l[supp_l.last_node])
            if lo_edge - grid_l.x_min <= guard_l or grid_l.x_max - hi_edge <= guard_l:
                raise DomainTooSmallError(
                    f"left support reached its grid edge at t={t!r}")
            if not supp_r.is_empty:
                r_lo = float(x_r[supp_r.first_node])
                r_hi = float(x_r[supp_r.last_node])
                if r_lo - grid_r.x_min <= guard_r or grid_r.x_max - r_hi <= guard_r:
                    raise DomainTooSmallError(
                        f"right support reached its grid edge at t={t!r}")
            lam_lo, lam_hi = min(lam_lo, lam), max(lam_hi, lam)
            left_lo = min(left_lo, supp_l.measure)
            left_hi = max(left_hi, supp_l.measure)
            zero_l = ~supp_l.mask(grid_l.n_nodes)
            if zero_l.any():
                side_max = max(side_max, float((g_l[zero_l] - lam).max()))
            side_max = max(side_max, G_MIN - lam)
            mass = float(w_l @ u_l) + float(w_r @ u_r)
            drift_max = max(drift_max, abs(mass / mass0 - 1.0))
            trace_left.append(t, lo_edge, None, lam, supp_l.measure,
                              float(w_l @ u_l))
            first_r = x_r[supp_r.first_node] if not supp_r.is_empty else None
            trace_right.append(t, first_r, None, lam, supp_r.measure,
                               float(w_r @ u_r))
            if k in snap_targets:
                p = snap_targets[k]
                lam_at[p] = lam
                a_r_at[p] = supp_r.measure
                if check_separation:
                    alive = eta * _alive_positions(hierarchy, p / eta ** 2)
                    _check_separation(Field1D(grid_r, u_r, thresholds[1]),
                                      alive, p)
    runtime = time.perf_counter() - started

    rows = []
    for n, t_n, t_t in probe_rows:
        a_plus, a_minus = a_r_at[t_n], a_r_at[t_t]
        bound = lambda_gap_lower_bound(a_ell0, grid_l, g_l,
                                       min(a_minus, a_plus),
                                       max(a_minus, a_plus))
        rows.append(EmbeddedLevel(
            level=n, t_n=t_n, lam_tn=lam_at[t_n], a_r_plus=a_plus,
            t_tilde_n=t_t, lam_ttilde_n=lam_at[t_t], a_r_minus=a_minus,
            gap=lam_at[t_n] - lam_at[t_t], gap_bound=bound))

    return EmbeddedOscillationReport(
        eta=eta, levels=tuple(rows), window=embedding_window(hierarchy, eta),
        lam_min_seen=lam_lo, lam_max_seen=lam_hi,
        side_condition_max=side_max, mass_drift_max=drift_max,
        left_measure_range=(left_lo, left_hi), n_cells_left=n_cells_left,
        n_cells_right=n_cells_right, runtime_seconds=runtime,
        trace_left=trace_left, trace_right=trace_right)
