"""Projected backward-Euler stepping tests: assembly, windows, schedules."""

import math

import hypothesis as hyp
import hypothesis.strategies as st
import numpy as np
import pytest

from parobs.errors import RejectedInputError
from parobs.grid import Field1D, Grid
from parobs.stepping import (
    ComparisonReport,
    OperatorSpec,
    Segment,
    assemble_step_matrix,
    apply_operator,
    comparison_check,
    constant_sink,
    evolve,
    evolve_schedule,
    line_operator,
    nonlocal_sink,
    ramp_schedule,
    rescaled_sink,
    sphere_operator,
    step_projected,
)


def _bump(grid: Grid, center: float, width: float, height: float = 1.0) -> Field1D:
    x = grid.nodes
    v = np.maximum(0.0, 1.0 - ((x - center) / width) ** 2) * height
    return Field1D(grid, v)


def test_operator_spec_rejects_unknown_boundary():
    with pytest.raises(RejectedInputError):
        OperatorSpec(a=1.0, boundary="free")


def test_operator_spec_rejects_negative_coefficient():
    g = Grid(0.0, 1.0, 10)
    with pytest.raises(RejectedInputError):
        OperatorSpec(a=lambda x: x - 0.5).face_coefficients(g)


def test_natural_degenerate_needs_vanishing_endpoints():
    g = Grid(-1.0, 1.0, 50)
    # a == 1 does not vanish at the ends, so the degenerate kind must refuse
    with pytest.raises(RejectedInputError):
        OperatorSpec(a=1.0, boundary="natural-degenerate").face_coefficients(g)
    sphere_operator().face_coefficients(g)


def test_sink_field_values():
    x = np.linspace(0.0, 1.0, 5)
    np.testing.assert_array_equal(constant_sink(0.7).values(x), np.full(5, 0.7))
    np.testing.assert_array_equal(rescaled_sink(2.0).values(x), np.full(5, 8.0))
    s = nonlocal_sink(lambda x: 0.5 * x)
    np.testing.assert_allclose(s.values(x, lam=0.5), 1.0 - x)
    with pytest.raises(RejectedInputError):
        s.values(x)


def test_step_matrix_shape_and_row_sums():
    g = Grid(0.0, 1.0, 64)
    lo, di, up = assemble_step_matrix(g, line_operator(), dt=1e-3)
    assert lo[0] == 0.0 and up[-1] == 0.0
    # zero-flux operator annihilates constants: M @ 1 == 1
    ones = np.ones(g.n_nodes)
    row = di * ones
    row[1:] += lo[1:]
    row[:-1] += up[:-1]
    np.testing.assert_allclose(row, ones, atol=1e-14)


def test_apply_operator_second_difference():
    g = Grid(0.0, 1.0, 200)
    u = np.sin(math.pi * g.nodes)
    lu = apply_operator(g, line_operator(), u)
    # interior truncation error is O(h^2)
    np.testing.assert_allclose(
        lu[1:-1], -(math.pi**2) * u[1:-1], atol=5e-4 + 1e-2 * math.pi**2 * g.h**2
    )


def test_step_projected_zero_sink_conserves_mass():
    g = Grid(0.0, 1.0, 400)
    u0 = _bump(g, 0.5, 0.2)
    res = step_projected(u0, line_operator(), constant_sink(0.0), 1e-4, tol=1e-13)
    assert res.field.values.min() >= 0.0
    assert res.complementarity_residual <= res.tolerance_abs
    assert res.field.integral() == pytest.approx(u0.integral(), rel=1e-12)


def test_step_projected_strong_sink_creates_contact():
    g = Grid(0.0, 1.0, 300)
    u0 = _bump(g, 0.5, 0.3, height=1e-3)
    res = step_projected(u0, line_operator(), constant_sink(5.0), 1e-3, tol=1e-13)
    assert np.all(res.field.values == 0.0)


def test_windowed_matches_full_solve_exactly():
    g = Grid(-1.0, 1.0, 2000)
    x = g.nodes
    v = np.maximum(0.0, 0.05 - np.abs(x + 0.5)) + np.maximum(0.0, 0.08 - np.abs(x - 0.4))
    u0 = Field1D(g, v)
    sink = constant_sink(0.5)
    r_win = step_projected(u0, line_operator(), sink, 1e-5, tol=1e-13, windowed=True)
    r_full = step_projected(u0, line_operator(), sink, 1e-5, tol=1e-13, windowed=False)
    assert len(r_win.windows) >= 2
    assert len(r_full.windows) == 1
    np.testing.assert_array_equal(r_win.field.values, r_full.field.values)


def test_window_count_collapses_to_hull():
    # more islands than the window cap: one hull window, same answer
    g = Grid(0.0, 1.0, 80000)
    x = g.nodes
    v = np.zeros(g.n_nodes)
    for k in range(200):
        c = (k + 0.5) / 200.0
        v += np.maximum(0.0, 1.0 - np.abs(x - c) / 1e-3)
    u0 = Field1D(g, v)
    res = step_projected(u0, line_operator(), constant_sink(1.0), 1e-8, tol=1e-12)
    assert len(res.windows) == 1
    full = step_projected(u0, line_operator(), constant_sink(1.0), 1e-8,
                          tol=1e-12, windowed=False)
    np.testing.assert_array_equal(res.field.values, full.field.values)


def test_engines_agree():
    g = Grid(0.0, 1.0, 500)
    u0 = _bump(g, 0.4, 0.25)
    kw = dict(dt=2e-4, tol=1e-13)
    r_pgs = step_projected(u0, line_operator(), constant_sink(1.0), kw["dt"],
                           tol=kw["tol"], engine="pgs")
    r_pdas = step_projected(u0, line_operator(), constant_sink(1.0), kw["dt"],
                            tol=kw["tol"], engine="pdas")
    np.testing.assert_allclose(r_pgs.field.values, r_pdas.field.values, atol=1e-10)


def test_evolve_probe_rejection_and_snapshots():
    g = Grid(0.0, 1.0, 100)
    u0 = _bump(g, 0.5, 0.3)
    with pytest.raises(RejectedInputError):
        evolve(u0, line_operator(), constant_sink(0.0), 1e-2, 1e-3, probes=[3.3e-4])
    out = evolve(u0, line_operator(), constant_sink(0.0), 1e-2, 1e-3,
                 probes=[2e-3, 1e-2])
    assert out.snapshot_times == [2e-3, 1e-2]
    assert len(out.trace) == 10


def test_evolve_rejects_nonlocal_sink():
    g = Grid(0.0, 1.0, 50)
    u0 = _bump(g, 0.5, 0.3)
    with pytest.raises(RejectedInputError):
        evolve(u0, line_operator(), nonlocal_sink(lambda x: x), 1e-2, 1e-3)


def test_evolve_sink_shrinks_mass_monotonically():
    g = Grid(0.0, 1.0, 400)
    u0 = _bump(g, 0.5, 0.25)
    out = evolve(u0, line_operator(), constant_sink(1.0), 2e-2, 1e-4)
    mass = out.trace.column("mass")
    assert np.all(np.diff(mass) < 0.0)
    assert out.final.values.min() >= 0.0


def test_ramp_schedule_hits_targets_exactly():
    segs = ramp_schedule([1e-4, 1e-3, 5e-3], dt0=1e-6)
    ends = [s.t_end for s in segs]
    for t in (1e-4, 1e-3, 5e-3):
        assert t in ends
    t = 0.0
    for s in segs:
        assert s.dt * s.n_steps == pytest.approx(s.t_end - t, rel=1e-12)
        t = s.t_end
    assert t == 5e-3


def test_ramp_schedule_growth_capped():
    segs = ramp_schedule([1.0], dt0=1e-4, growth=2.0, dt_cap=1e-3, fill_per_decade=4)
    dts = [s.dt for s in segs]
    assert max(dts) <= 1e-3 * (1 + 1e-12)
    for a, b in zip(dts, dts[1:]):
        assert b <= 2.0 * a * (1 + 1e-12)


def test_ramp_schedule_rejects_bad_targets():
    with pytest.raises(RejectedInputError):
        ramp_schedule([], dt0=1e-6)
    with pytest.raises(RejectedInputError):
        ramp_schedule([0.5], dt0=1e-6, t0=0.5)


def test_evolve_schedule_collects_probes_across_segments():
    g = Grid(0.0, 1.0, 200)
    u0 = _bump(g, 0.5, 0.3)
    segs = [Segment(t_end=1e-3, dt=1e-4, n_steps=10),
            Segment(t_end=3e-3, dt=2e-4, n_steps=10)]
    out = evolve_schedule(u0, line_operator(), constant_sink(0.1), segs,
                          probes=[1e-3, 2.2e-3, 3e-3])
    assert out.snapshot_times == [1e-3, 2.2e-3, 3e-3]
    assert out.trace.column("t")[-1] == pytest.approx(3e-3)


def test_comparison_check_detects_violation():
    g = Grid(0.0, 1.0, 10)
    a = Field1D(g, np.full(11, 0.5))
    b = Field1D(g, np.full(11, 0.6))
    ok = comparison_check([a], [b])
    assert isinstance(ok, ComparisonReport) and ok.ok
    bad = comparison_check([b], [a])
    assert not bad.ok
    assert bad.first_violation == (0, 0)
    assert bad.worst_gap == pytest.approx(0.1)


@hyp.settings(max_examples=20, deadline=None)
@hyp.given(
    strength=st.floats(0.0, 2.0),
    dt=st.floats(1e-5, 1e-3),
)
def test_step_preserves_nonnegativity_and_complementarity(strength, dt):
    g = Grid(0.0, 1.0, 150)
    u0 = _bump(g, 0.5, 0.2, height=0.01)
    res = step_projected(u0, line_operator(), constant_sink(strength), dt, tol=1e-12)
    u = res.field.values
    assert u.min() >= 0.0
    assert res.complementarity_residual <= res.tolerance_abs


def test_ordering_preserved_under_ordered_sinks():
    # comparison principle: weaker sink keeps the solution above
    g = Grid(0.0, 1.0, 300)
    u0 = _bump(g, 0.5, 0.25)
    lo = evolve(u0, line_operator(), constant_sink(1.0), 5e-3, 1e-4,
                probes=[1e-3, 5e-3])
    hi = evolve(u0, line_operator(), constant_sink(0.2), 5e-3, 1e-4,
                probes=[1e-3, 5e-3])
    rep = comparison_check(lo.snapshots, hi.snapshots, tol=1e-10)
    assert rep.ok
