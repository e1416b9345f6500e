"""Point-mass runs, extinction, scaling, and the composite two-bump model."""

import math

import numpy as np
import pytest

from parobs.errors import RejectedInputError
from parobs.grid import Grid, SupportSet
from parobs.line import (
    F_PLUS,
    G_MAX,
    G_MIN,
    LAMBDA0_MINUS,
    LEFT_STIMULUS_INTEGRAL,
    CompositeSpec,
    composite_stimulus_values,
    default_truncation_radius,
    extinction_time,
    heat_kernel,
    lambda_gap_lower_bound,
    lower_bound_radius,
    scaling_check,
    solve_composite,
    solve_dirac,
    support_envelope,
    upper_bound_radius,
)


def test_heat_kernel_normalization_and_peak():
    x = np.linspace(-10, 10, 200001)
    t = 0.05
    phi = heat_kernel(x, t)
    assert np.trapezoid(phi, x) == pytest.approx(1.0, abs=1e-10)
    assert float(phi.max()) == pytest.approx(1.0 / math.sqrt(4 * math.pi * t))


def test_default_truncation_radius_tail():
    t_end = 0.05
    R = default_truncation_radius(t_end)
    assert float(heat_kernel(R, t_end)) < 1e-15
    # geometric floor keeps the box at extinction scale
    assert R >= 5.0
    assert default_truncation_radius(4.0) > default_truncation_radius(1.0)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(lam=0.0, delta_t=1e-6, t_end=1e-2, n_cells=100),
        dict(lam=1.0, delta_t=1e-2, t_end=1e-3, n_cells=100),
        dict(lam=1.0, delta_t=1e-6, t_end=1e-2, n_cells=100, domain_radius=0.05),
        dict(lam=1.0, delta_t=1e-6, t_end=1e-2, n_cells=100, dt=3e-4),
        dict(lam=1.0, delta_t=1e-5, t_end=1e-2, n_cells=100, probes=[1e-6]),
    ],
)
def test_solve_dirac_input_validation(kwargs):
    with pytest.raises(RejectedInputError):
        solve_dirac(**kwargs)


@pytest.fixture(scope="module")
def dirac_run():
    return solve_dirac(1.0, 1e-6, 1e-2, n_cells=3000, normalize=True,
                       probes=[1e-3, 1e-2])


def test_dirac_bootstrap_mass_and_decay(dirac_run):
    run = dirac_run
    mass = run.trace.column("mass")
    # normalize rescales the sampled kernel; the raw defect stays on record
    assert abs(run.mass_defect) < 0.1
    assert 0.9 <= mass[0] <= 1.0 + 1e-12
    assert np.all(np.diff(mass) < 0.0)
    assert run.final.values.min() >= 0.0


def test_dirac_radius_shrink_grows_then_support_bounded(dirac_run):
    run = dirac_run
    t, radius = run.radius_rows()
    assert t.size == len(run.trace)
    # the support stays well inside the truncation box
    assert float(radius.max()) < run.domain_radius - 5 * run.grid.h


def test_dirac_symmetry(dirac_run):
    # even data, even operator: asymmetry only at the solver tolerance scale
    u = dirac_run.final.values
    np.testing.assert_allclose(u, u[::-1], atol=1e-7)


def test_extinction_bracket_width_and_positivity():
    res = extinction_time(2.0, n_cells=600, bracket=5e-3)
    assert res.width <= 5e-3
    assert 0.02 < res.t_star < 0.3
    assert res.t_low < res.t_star < res.t_high


def test_extinction_scales_inverse_square():
    # U_lam(x, t) = lam U(lam x, lam^2 t): extinction time scales by lam^-2
    t1 = extinction_time(1.0, n_cells=600, bracket=5e-3).t_star
    t2 = extinction_time(2.0, n_cells=600, bracket=5e-3).t_star
    assert 4.0 * t2 == pytest.approx(t1, rel=0.05)


def test_support_envelope_structure(dirac_run):
    env = support_envelope(dirac_run, t_max=1e-2)
    assert np.all(np.diff(env.times) > 0.0)
    assert np.all(env.ell <= env.L + 1e-12)
    assert np.all(env.ref > 0.0)
    assert np.all(np.isfinite(env.ratios))
    assert len(env.decade_edges) == len(env.decade_max_dev) + 1


def test_radius_bound_formulas():
    t = np.array([1e-4, 1e-3])
    lo = np.sqrt(6 * t * np.log(1 / ((4 * math.pi) ** (1 / 3) * t)))
    np.testing.assert_allclose(lower_bound_radius(t), lo, rtol=1e-12)
    alpha = 9.0
    up = np.sqrt(6 * t * np.log(1 / t) + 6 * t * math.log(alpha)) + np.sqrt(t / alpha)
    np.testing.assert_allclose(upper_bound_radius(t, t_star=0.5), up, rtol=1e-12)
    assert np.all(upper_bound_radius(t, 0.5) > lower_bound_radius(t))


def test_scaling_check_power_of_two_is_exact():
    # all parameters scale by powers of two, so the arithmetic commutes
    probes2 = [1e-3, 4e-3]
    run1 = solve_dirac(1.0, 4e-6, 1.6e-2, n_cells=2000, domain_radius=2.5,
                       probes=[4e-3, 1.6e-2])
    run2 = solve_dirac(2.0, 1e-6, 4e-3, n_cells=2000, domain_radius=1.25,
                       probes=probes2)
    rep = scaling_check(run1, run2, probes2)
    assert rep.max_deviation <= 1e-12
    assert max(rep.radii_gaps) <= 1e-12


def test_scaling_check_requires_unit_first():
    run2 = solve_dirac(2.0, 1e-6, 4e-3, n_cells=2000, domain_radius=1.25,
                       probes=[4e-3])
    with pytest.raises(RejectedInputError):
        scaling_check(run2, run2, [4e-3])


def test_stimulus_constants_match_exact_rationals():
    assert G_MIN == pytest.approx(1 / 12, rel=1e-15)
    assert G_MAX == pytest.approx(6 / 7, rel=1e-15)
    assert LEFT_STIMULUS_INTEGRAL == pytest.approx(79 / 56, rel=1e-15)
    assert LAMBDA0_MINUS == pytest.approx(79 / 168, rel=1e-15)
    assert F_PLUS == pytest.approx(65 / 79, rel=1e-15)


def test_composite_stimulus_regions():
    x = np.array([-5.0, -3.5, -3.0, -2.5, -2.0, -1.5, 0.0, 5.0])
    g = composite_stimulus_values(x)
    np.testing.assert_allclose(g[[0, 1, 5, 6, 7]], G_MIN, atol=1e-15)
    np.testing.assert_allclose(g[[2, 3, 4]], G_MAX, atol=1e-15)


def test_composite_stimulus_integral_is_79_56():
    # quadrature over the left bump interval against the closed form
    x = np.linspace(-4.0, -1.0, 30001)
    total = np.trapezoid(composite_stimulus_values(x), x)
    assert total == pytest.approx(79 / 56, abs=1e-7)


def test_composite_spec_validation():
    with pytest.raises(RejectedInputError):
        CompositeSpec(eta=1.2)
    with pytest.raises(RejectedInputError):
        CompositeSpec(eta=0.5, atoms=((0.7, 1e-3),))
    with pytest.raises(RejectedInputError):
        CompositeSpec(eta=0.5, atoms=((0.2, -1e-3),))
    with pytest.raises(RejectedInputError):
        CompositeSpec(eta=0.5, atom_mode="point")
    with pytest.raises(RejectedInputError):
        CompositeSpec(eta=0.5, left_amplitude=0.0)


def test_composite_initial_field_hat_atoms():
    spec = CompositeSpec(eta=0.5, atoms=((0.25, 2e-3),))
    grid = Grid(-5.0, 5.0, 2000)
    u0 = spec.initial_field(grid)
    i = int(np.argmin(np.abs(grid.nodes - 0.25)))
    assert u0.values[i] == pytest.approx(2e-3 / grid.h)
    # the hat integrates to the weight
    assert u0.integral() == pytest.approx(spec.left_bump_values(grid.nodes) @
                                          grid.quadrature_weights + 2e-3,
                                          rel=1e-9)


@pytest.fixture(scope="module")
def composite_run():
    spec = CompositeSpec(eta=0.5, atoms=((0.25, 2e-3),))
    return solve_composite(spec, 4e-4, 1e-5, n_cells=2000,
                           probes=[2e-4, 4e-4])


def test_composite_conserves_mass(composite_run):
    mass = composite_run.trace.column("mass")
    assert float(np.max(np.abs(mass / mass[0] - 1.0))) <= 1e-9


def test_composite_multiplier_window(composite_run):
    lam = composite_run.trace.column("lambda")
    assert np.all(lam >= 11 / 120 - 1e-12)
    assert np.all(lam <= 0.5 * LEFT_STIMULUS_INTEGRAL + 1e-12)
    assert composite_run.bounds.ok


def test_composite_side_traces_split_mass(composite_run):
    run = composite_run
    m = run.trace.column("mass")
    ml = run.trace_left.column("mass")
    mr = run.trace_right.column("mass")
    np.testing.assert_allclose(ml + mr, m, atol=1e-12)
    assert np.all(mr > 0.0)


def test_composite_rejects_missing_dt():
    spec = CompositeSpec(eta=0.5)
    with pytest.raises(RejectedInputError):
        solve_composite(spec, 1e-3, n_cells=500)


def test_lambda_gap_lower_bound_formula():
    grid = Grid(0.0, 1.0, 100)
    supp = SupportSet(intervals=((0, 100),), measure=1.0)
    g = np.full(grid.n_nodes, G_MIN)
    got = lambda_gap_lower_bound(supp, grid, g, 0.1, 0.3)
    want = (G_MAX - G_MIN) * (0.3 - 0.1) / ((1.0 + 0.3) * (1.0 + 0.1))
    assert got == pytest.approx(want, rel=1e-12)
    assert lambda_gap_lower_bound(supp, grid, g, 0.2, 0.2) == 0.0
    with pytest.raises(RejectedInputError):
        lambda_gap_lower_bound(supp, grid, g, 0.3, 0.1)
    with pytest.raises(RejectedInputError):
        lambda_gap_lower_bound(SupportSet((), 0.0), grid, g, 0.1, 0.3)
