"""Mass-conserving nonlocal driver tests on the polar-cap model."""

import math

import numpy as np
import pytest

from parobs.errors import DegenerateSupportError, RejectedInputError
from parobs.grid import Field1D, Grid, SupportSet
from parobs.sphere import (
    Stimulus,
    lambda_of_support,
    linear_stimulus,
    monotone_default_preset,
    monotonicity_check,
    nondegeneracy_report,
    probe_continuity,
    s_of_t,
    solve_nonlocal,
)


def test_stimulus_bounds_validation():
    with pytest.raises(RejectedInputError):
        Stimulus(g=lambda x: x, g_lower=0.0, g_upper=0.5)
    with pytest.raises(RejectedInputError):
        Stimulus(g=lambda x: x, g_lower=0.5, g_upper=1.0)
    with pytest.raises(RejectedInputError):
        Stimulus(g=lambda x: x, g_lower=0.2, g_upper=0.5, monotone_slope=-1.0)


def test_stimulus_values_checked_against_bounds():
    g = Grid(-1.0, 1.0, 10)
    stim = Stimulus(g=lambda x: 0.5 + 0.4 * x, g_lower=0.2, g_upper=0.8)
    with pytest.raises(RejectedInputError):
        stim.values(g)


def test_linear_stimulus_profile():
    g = Grid(-1.0, 1.0, 4)
    stim = linear_stimulus(0.3, 0.2)
    np.testing.assert_allclose(stim.values(g), 0.3 + 0.2 * g.nodes)
    assert stim.monotone_slope == 0.2
    assert stim.max_slope(g) == pytest.approx(0.2)


def test_preset_initial_state():
    u0, stim = monotone_default_preset(n_cells=100)
    assert u0.grid.x_min == -1.0 and u0.grid.x_max == 1.0
    assert u0.values[0] == 0.0
    assert u0.values[-1] == pytest.approx(0.5 * 1.2**2)
    # initial multiplier: average of g over (-0.2, 1) is 0.38 up to grid offset
    lam0 = lambda_of_support(stim, u0.support(), u0.grid)
    assert lam0 == pytest.approx(0.38, abs=5e-3)


def test_lambda_of_support_exact_average():
    g = Grid(0.0, 1.0, 10)
    stim = Stimulus(g=lambda x: 0.2 + 0.4 * x, g_lower=0.2, g_upper=0.6,
                    monotone_slope=0.4)
    supp = SupportSet(intervals=((0, 10),), measure=1.0)
    # average of a linear function over [0, 1] is its midpoint value
    assert lambda_of_support(stim, supp, g) == pytest.approx(0.4)


def test_lambda_of_support_rejects_empty():
    g = Grid(0.0, 1.0, 10)
    stim = linear_stimulus()
    with pytest.raises(DegenerateSupportError):
        lambda_of_support(stim, SupportSet((), 0.0), g)


def test_s_of_t_inverts_linear_stimulus():
    g = Grid(-1.0, 1.0, 1000)
    stim = linear_stimulus(0.3, 0.2)
    # g(s) = 0.38 at s = 0.4
    assert s_of_t(stim, 0.38, g) == pytest.approx(0.4, abs=1e-9)
    with pytest.raises(RejectedInputError):
        s_of_t(stim, 0.9, g)


def test_solve_nonlocal_rejects_empty_data():
    g = Grid(-1.0, 1.0, 50)
    stim = linear_stimulus()
    with pytest.raises(RejectedInputError):
        solve_nonlocal(Field1D(g, np.zeros(g.n_nodes)), stim, 1e-3, 1e-4)


@pytest.fixture(scope="module")
def small_run():
    u0, stim = monotone_default_preset(n_cells=400)
    run = solve_nonlocal(u0, stim, 5e-3, 1e-5, probes=[1e-3, 5e-3])
    return u0, stim, run


def test_run_conserves_mass(small_run):
    _, _, run = small_run
    mass = run.trace.column("mass")
    assert float(np.max(np.abs(mass / mass[0] - 1.0))) <= 1e-9


def test_run_multiplier_stays_in_stimulus_range(small_run):
    _, stim, run = small_run
    lam = run.trace.column("lambda")
    assert np.all(lam >= stim.g_lower - 1e-12)
    assert np.all(lam <= stim.g_upper + 1e-12)
    assert run.lam_min <= run.lam_max


def test_run_side_condition(small_run):
    _, _, run = small_run
    assert run.side_condition_max <= 1e-6


def test_free_boundary_moves_continuously(small_run):
    _, _, run = small_run
    p = run.trace.column("p")
    h = run.final.grid.h
    # contact set persists and p moves at most one cell per accepted step
    assert np.all(p > -1.0 + 10 * h)
    assert float(np.max(np.abs(np.diff(p)))) <= 2 * h


def test_run_preserves_monotone_shape(small_run):
    _, _, run = small_run
    rep = monotonicity_check(run.snapshots + [run.final])
    assert rep.ok, rep


def test_support_average_mode_close_to_conserve():
    u0, stim = monotone_default_preset(n_cells=400)
    run = solve_nonlocal(u0, stim, 1e-3, 1e-5, lam_mode="support-average")
    mass = run.trace.column("mass")
    # the lagged mode drifts, but only at the dt scale
    assert float(np.max(np.abs(mass / mass[0] - 1.0))) <= 1e-3


def test_nondegeneracy_report_margins(small_run):
    u0, stim, run = small_run
    rep = nondegeneracy_report(u0, stim, run)
    assert rep.hypotheses_met
    assert rep.theta_margin > 0.1
    assert rep.c0 > 0.0
    assert rep.p_bound_ok and rep.separation_ok
    assert rep.p_bound_worst_margin >= 0.0
    assert rep.separation_worst_margin >= 0.0


def test_nondegeneracy_needs_monotone_stimulus(small_run):
    u0, _, run = small_run
    flat = Stimulus(g=lambda x: np.full_like(x, 0.38), g_lower=0.38,
                    g_upper=0.38)
    rep = nondegeneracy_report(u0, flat, run)
    assert not rep.hypotheses_met
    assert math.isnan(rep.c0)


def test_probe_continuity_ladder(small_run):
    _, _, run = small_run
    rep = probe_continuity(run.trace, [8, 16, 32])
    assert rep.levels == (8, 16, 32)
    assert rep.monotone
    assert rep.finest_jump <= rep.max_jumps[0]


def test_probe_continuity_needs_enough_rows():
    u0, stim = monotone_default_preset(n_cells=200)
    run = solve_nonlocal(u0, stim, 5e-5, 1e-5)
    with pytest.raises(RejectedInputError):
        probe_continuity(run.trace, [64])


def test_probes_must_hit_step_boundaries():
    u0, stim = monotone_default_preset(n_cells=200)
    with pytest.raises(RejectedInputError):
        solve_nonlocal(u0, stim, 1e-3, 1e-5, probes=[1.23e-5])
