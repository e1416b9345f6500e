"""Brute-force reference solver and inequality certifier.

The reference solver advances the obstacle dynamics by forward Euler with a
pointwise projection onto u >= 0 after every substep.  It deliberately shares
no discretization code with the implicit solver: faces, fluxes, and boundary
handling are derived here from scratch, so agreement between the two is
evidence rather than tautology.  It is only meant for small grids and short
horizons; the stability bound dt <= h^2 / (2 max a) is enforced, not assumed.

The certifier re-evaluates the model's printable inequalities on completed
run bundles: the polar-cap bounds on p(t) and s(t) - p(t), the multiplier
side condition, mass conservation, the heat-kernel sandwich for the unit
point-mass run, the vanishing-rectangle implication, and the composite-model
multiplier window.  Each check is reported with a stable identifier and its
worst observed margin (>= 0 means the inequality held everywhere).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from parobs.errors import MissingInputError, RejectedInputError
from parobs.grid import Field1D, Grid

_BOUNDARIES = ("natural-degenerate", "neumann-zero", "dirichlet-zero")


@dataclass(frozen=True)
class OracleConfig:
    """Explicit-reference settings: substep ratio and horizon caps."""

    dt_ratio: int = 100

    def __post_init__(self):
        if self.dt_ratio < 100:
            raise RejectedInputError("dt_ratio must be >= 100 (explicit substepping)")


def explicit_reference(u0: Field1D, a, sink: np.ndarray | float | Callable,
                       t_end: float, dt_implicit: float, *,
                       boundary: str = "natural-degenerate",
                       config: OracleConfig | None = None,
                       snapshots_at: Sequence[float] = ()) -> list[Field1D]:
    """Forward Euler with per-substep projection onto u >= 0.

    a is the diffusion coefficient (callable of x or a constant); sink is the
    forcing F in du/dt = (a u')' - F H(u) (array over nodes, constant, or a
    callable of x).  The explicit step is dt_implicit / dt_ratio and must meet
    the stability bound dt <= h^2 / (2 max a); violations refuse rather than
    warn.  Returns the fields at snapshots_at (t_end is appended if absent).
    """
    config = config or OracleConfig()
    grid = u0.grid
    if boundary not in _BOUNDARIES:
        raise RejectedInputError(f"unknown boundary {boundary!r}; expected {_BOUNDARIES}")
    x = grid.nodes
    h = grid.h
    xf = 0.5 * (x[:-1] + x[1:])
    af = np.full(xf.shape, float(a)) if np.isscalar(a) else np.asarray(a(xf), dtype=float)
    if af.shape != xf.shape or np.any(af < 0.0) or not np.all(np.isfinite(af)):
        raise RejectedInputError("coefficient must be finite and >= 0 at faces")
    if callable(sink):
        f = np.asarray(sink(x), dtype=float)
    elif np.isscalar(sink):
        f = np.full(x.shape, float(sink))
    else:
        f = np.asarray(sink, dtype=float)
    if f.shape != x.shape:
        raise RejectedInputError("sink values must match the grid nodes")

    dt = dt_implicit / config.dt_ratio
    a_max = float(af.max(initial=0.0))
    if a_max > 0.0 and dt > h * h / (2.0 * a_max):
        raise RejectedInputError(
            f"explicit substep {dt!r} violates the stability bound"
            f" {h * h / (2.0 * a_max)!r}; refuse rather than integrate unstably")

    times = sorted(set(float(s) for s in snapshots_at) | {float(t_end)})
    if any(s < 0.0 or s > t_end + 1e-15 for s in times):
        raise RejectedInputError("snapshot times must lie in [0, t_end]")

    u = u0.values.copy()
    out: list[Field1D] = []
    t = 0.0
    for target in times:
        n_sub = max(0, round((target - t) / dt))
        if abs(t + n_sub * dt - target) > 1e-9 * max(dt, target):
            raise RejectedInputError(
                f"snapshot time {target!r} is not a multiple of the explicit step {dt!r}")
        for _ in range(n_sub):
            flux = af * (u[1:] - u[:-1]) / h
            div = np.empty_like(u)
            div[1:-1] = (flux[1:] - flux[:-1]) / h
            if boundary == "dirichlet-zero":
                div[0] = 0.0
                div[-1] = 0.0
            else:
                # conservative half cells at the ends; for the degenerate
                # coefficient a(+-1) = 0 this is the natural (no-flux) closure
                div[0] = flux[0] / (0.5 * h)
                div[-1] = -flux[-1] / (0.5 * h)
            # the projection realizes the Heaviside: cells forced below 0
            # clamp (sink inactive there), cells pushed up by f < 0 activate
            u = u + dt * (div - f)
            np.maximum(u, 0.0, out=u)
            if boundary == "dirichlet-zero":
                u[0] = 0.0
                u[-1] = 0.0
        t = t + n_sub * dt
        out.append(Field1D(grid, u.copy()))
    return out


@dataclass(frozen=True)
class CheckResult:
    check: str
    ok: bool
    worst_margin: float
    detail: str

    def as_dict(self) -> dict:
        return {"check": self.check, "ok": self.ok,
                "worst_margin": self.worst_margin, "detail": self.detail}


@dataclass(frozen=True)
class CertificationReport:
    results: tuple[CheckResult, ...]

    @property
    def ok(self) -> bool:
        return all(r.ok for r in self.results)

    def to_json(self) -> str:
        return json.dumps([r.as_dict() for r in self.results], indent=2)


def _need(bundle: Mapping, *keys):
    node = bundle
    path = []
    for key in keys:
        path.append(key)
        if not isinstance(node, Mapping) or key not in node:
            raise MissingInputError("bundle is missing " + "/".join(path))
        node = node[key]
    return node


def _sphere_checks(data: Mapping) -> list[CheckResult]:
    t = np.asarray(_need(data, "t"), dtype=float)
    p = np.asarray(_need(data, "p"), dtype=float)
    s = np.asarray(_need(data, "s"), dtype=float)
    mass = np.asarray(_need(data, "mass"), dtype=float)
    m2 = float(_need(data, "mass_2d"))
    sup_u = float(_need(data, "sup_u"))
    c0 = float(_need(data, "c0"))
    h = float(_need(data, "h"))
    side_max = float(_need(data, "side_condition_max"))
    del t
    out = []
    ok_rows = ~np.isnan(p)
    bound = 1.0 - m2 / (2.0 * math.pi * sup_u) + 2.0 * h
    margin = float(np.min(bound - p[ok_rows])) if ok_rows.any() else math.inf
    out.append(CheckResult("cap-upper-bound", margin >= 0.0, margin,
                           "p <= 1 - m/(2 pi sup u) + 2h at every row"))
    both = ok_rows & ~np.isnan(s)
    margin = float(np.min(s[both] - p[both] - c0 + 2.0 * h)) if both.any() else math.inf
    out.append(CheckResult("cap-separation", margin >= 0.0, margin,
                           "s - p >= c0 - 2h at every row"))
    m0 = mass[0]
    margin = float(1e-6 - np.max(np.abs(mass / m0 - 1.0)))
    out.append(CheckResult("mass-conservation", margin >= 0.0, margin,
                           "|mass/mass0 - 1| <= 1e-6 at every row"))
    margin = 1e-6 - side_max
    out.append(CheckResult("multiplier-side-condition", margin >= 0.0, margin,
                           "max over {u=0} of (g - lam) <= 1e-6 at every accepted step"))
    return out


def _dirac_checks(data: Mapping) -> list[CheckResult]:
    times = np.asarray(_need(data, "times"), dtype=float)
    fields = _need(data, "fields")
    x = np.asarray(_need(data, "x"), dtype=float)
    tol = float(data.get("tolerance", 1e-8))
    up_margin = math.inf
    lo_margin = math.inf
    for t, u in zip(times, fields):
        u = np.asarray(u, dtype=float)
        phi = np.exp(-x * x / (4.0 * t)) / math.sqrt(4.0 * math.pi * t)
        up_margin = min(up_margin, float(np.min(phi + tol - u)))
        lower = phi - t
        mask = lower > 0.0
        if mask.any():
            lo_margin = min(lo_margin, float(np.min(u[mask] + tol - lower[mask])))
    out = [CheckResult("kernel-sandwich-upper", up_margin >= 0.0, up_margin,
                       f"u <= heat kernel + {tol!r} nodewise at every probe"),
           CheckResult("kernel-sandwich-lower", lo_margin >= 0.0, lo_margin,
                       f"u >= heat kernel - t - {tol!r} where that bound is positive")]
    return out


def vanishing_rectangle_check(x: np.ndarray, times: Sequence[float],
                              fields: Sequence[np.ndarray], sink_floor: float,
                              x0: float, rho: float, t0: float,
                              zero_tol: float = 0.0) -> CheckResult:
    """Discrete vanishing-rectangle implication at one candidate rectangle.

    If the sink is >= theta on B(x0, rho) x (t0 - rho^2, t0) and u <=
    (theta/3) rho^2 there, then u(x0, t0) = 0.  Hypotheses are checked on the
    stored snapshots covering the window; the check abstains (ok, margin inf)
    when the hypotheses fail or the window has no snapshot coverage.
    """
    theta = float(sink_floor)
    if theta <= 0.0 or rho <= 0.0:
        raise RejectedInputError("need a positive sink floor and radius")
    times = np.asarray(times, dtype=float)
    in_window = (times >= t0 - rho * rho - 1e-15) & (times <= t0 + 1e-15)
    if not in_window.any() or not np.any(np.abs(times - t0) <= 1e-12 * max(1.0, t0)):
        return CheckResult("vanish-rectangle", True, math.inf,
                           "no snapshot coverage for the requested rectangle")
    ball = np.abs(x - x0) <= rho
    cap = (theta / 3.0) * rho * rho
    u_max = 0.0
    for t, u in zip(times, fields):
        if t0 - rho * rho - 1e-15 <= t <= t0 + 1e-15:
            u_max = max(u_max, float(np.asarray(u)[ball].max(initial=0.0)))
    if u_max > cap:
        return CheckResult("vanish-rectangle", True, math.inf,
                           f"hypothesis u <= (theta/3) rho^2 fails (max {u_max!r} > {cap!r})")
    k = int(np.argmin(np.abs(times - t0)))
    i0 = int(np.argmin(np.abs(x - x0)))
    val = float(np.asarray(fields[k])[i0])
    margin = zero_tol - val
    return CheckResult("vanish-rectangle", margin >= 0.0, margin,
                       f"u({x0!r}, {t0!r}) = {val!r} with hypotheses held (cap {cap!r})")


def _composite_checks(data: Mapping) -> list[CheckResult]:
    lam = np.asarray(_need(data, "lambda"), dtype=float)
    lam_lo = float(_need(data, "lam_lower"))
    lam_hi = float(_need(data, "lam_upper"))
    plateau_min = float(_need(data, "plateau_min"))
    sink_floor_off_plateau = float(_need(data, "sink_floor_off_plateau"))
    out = []
    margin = float(np.min(lam - lam_lo))
    out.append(CheckResult("composite-multiplier-lower", margin >= 0.0, margin,
                           f"lam >= {lam_lo!r} at every row"))
    margin = float(np.min(lam_hi - lam))
    out.append(CheckResult("composite-multiplier-upper", margin >= 0.0, margin,
                           f"lam <= {lam_hi!r} at every row"))
    out.append(CheckResult("composite-plateau-positivity", plateau_min > 0.0, plateau_min,
                           "min of u over the plateau interval at every probe"))
    margin = sink_floor_off_plateau - 1.0 / 11.0
    out.append(CheckResult("composite-sink-floor", margin >= 0.0, margin,
                           "1 - g/lam >= 1/11 off the plateau at every probe"))
    return out


_CHECK_GROUPS = {"sphere": _sphere_checks, "dirac": _dirac_checks,
                 "composite": _composite_checks}


def certify_inequalities(bundle: Mapping, groups: Sequence[str] | None = None) -> CertificationReport:
    """Evaluate every printable inequality the bundle has inputs for.

    groups selects experiment kinds explicitly ("sphere", "dirac",
    "composite"); by default the kinds present in the bundle are certified.
    Requesting a kind whose inputs are absent raises MissingInputError naming
    the first missing field.
    """
    if groups is None:
        groups = [k for k in _CHECK_GROUPS if k in bundle]
        if not groups:
            raise MissingInputError(
                "bundle has none of the expected groups: " + ", ".join(_CHECK_GROUPS))
    results: list[CheckResult] = []
    for kind in groups:
        if kind not in _CHECK_GROUPS:
            raise RejectedInputError(f"unknown certification group {kind!r}")
        results.extend(_CHECK_GROUPS[kind](_need(bundle, kind)))
    return CertificationReport(results=tuple(results))
