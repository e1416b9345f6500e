"""Complementarity solver tests against an active-set enumeration oracle."""

import itertools

import hypothesis as hyp
import hypothesis.strategies as st
import numpy as np
import pytest
from scipy.linalg import solve_banded

from parobs.errors import SolverFailureError
from parobs.lcp import complementarity_residual, pdas_solve, pgs_solve, warm_up_kernels


def _tridiag_dense(lo, di, up):
    n = di.size
    m = np.diag(di)
    m += np.diag(lo[1:], k=-1)
    m += np.diag(up[:-1], k=1)
    return m


def _enumeration_oracle(lo, di, up, q, tol=1e-10):
    """Solve the LCP by trying every active set (small n only).

    u >= 0, M u - q >= 0, u * (M u - q) = 0.  Unique for M-matrices, so the
    first admissible subset is the answer.
    """
    n = di.size
    m = _tridiag_dense(lo, di, up)
    for bits in itertools.product((False, True), repeat=n):
        a = np.array(bits)
        u = np.zeros(n)
        if a.any():
            sub = m[np.ix_(a, a)]
            try:
                u[a] = np.linalg.solve(sub, q[a])
            except np.linalg.LinAlgError:
                continue
        if u.min(initial=0.0) < -tol:
            continue
        r = m @ np.maximum(u, 0.0) - q
        if r[~a].min(initial=0.0) < -tol:
            continue
        return np.maximum(u, 0.0)
    raise AssertionError("enumeration found no admissible active set")


@st.composite
def _lcp_problems(draw, max_n=8):
    # strictly diagonally dominant tridiagonal M-matrix: unique LCP solution
    n = draw(st.integers(min_value=2, max_value=max_n))
    offs_lo = draw(st.lists(st.floats(0.0, 0.45), min_size=n, max_size=n))
    offs_up = draw(st.lists(st.floats(0.0, 0.45), min_size=n, max_size=n))
    qs = draw(st.lists(st.floats(-1.0, 1.0), min_size=n, max_size=n))
    lo = -np.array(offs_lo)
    up = -np.array(offs_up)
    lo[0] = 0.0
    up[-1] = 0.0
    di = np.full(n, 1.0) - lo - up + 0.05
    return lo, di, up, np.array(qs)


@hyp.settings(max_examples=40, deadline=None)
@hyp.given(prob=_lcp_problems())
def test_pgs_matches_enumeration(prob):
    lo, di, up, q = prob
    u, res, _ = pgs_solve(lo, di, up, q, np.zeros(q.size), 1e-12)
    expected = _enumeration_oracle(lo, di, up, q)
    np.testing.assert_allclose(u, expected, atol=1e-8)
    assert res <= 1e-12


@hyp.settings(max_examples=40, deadline=None)
@hyp.given(prob=_lcp_problems())
def test_pdas_matches_pgs(prob):
    lo, di, up, q = prob
    u_pgs, _, _ = pgs_solve(lo, di, up, q, np.zeros(q.size), 1e-13)
    u_pdas, res, _ = pdas_solve(lo, di, up, q, np.zeros(q.size), 1e-13)
    np.testing.assert_allclose(u_pdas, u_pgs, atol=1e-9)
    assert res <= 1e-13


@hyp.settings(max_examples=40, deadline=None)
@hyp.given(prob=_lcp_problems())
def test_solution_satisfies_kkt(prob):
    lo, di, up, q = prob
    u, _, _ = pdas_solve(lo, di, up, q, np.zeros(q.size), 1e-12)
    m = _tridiag_dense(lo, di, up)
    r = m @ u - q
    assert u.min(initial=0.0) >= 0.0
    assert r.min(initial=0.0) >= -1e-10
    assert complementarity_residual(lo, di, up, q, u) <= 1e-12


def test_pdas_seed_variants_agree():
    rng = np.random.default_rng(7)
    n = 60
    lo = -rng.uniform(0.1, 0.4, n)
    up = -rng.uniform(0.1, 0.4, n)
    lo[0] = up[-1] = 0.0
    di = 1.0 - lo - up
    q = rng.uniform(-1.0, 1.0, n)
    u_a, _, _ = pdas_solve(lo, di, up, q, np.zeros(n), 1e-13, seed_free=True)
    u_b, _, _ = pdas_solve(lo, di, up, q, np.zeros(n), 1e-13, seed_free=False)
    np.testing.assert_allclose(u_a, u_b, atol=1e-11)


def test_unconstrained_when_forcing_positive():
    # q >> 0 keeps every node active: LCP solution equals the linear solve
    rng = np.random.default_rng(3)
    n = 40
    lo = -rng.uniform(0.1, 0.4, n)
    up = -rng.uniform(0.1, 0.4, n)
    lo[0] = up[-1] = 0.0
    di = 1.0 - lo - up
    q = rng.uniform(0.5, 1.0, n)
    u, _, _ = pdas_solve(lo, di, up, q, np.zeros(n), 1e-13)
    ab = np.zeros((3, n))
    ab[0, 1:] = up[:-1]
    ab[1, :] = di
    ab[2, :-1] = lo[1:]
    direct = solve_banded((1, 1), ab, q)
    assert direct.min() > 0.0
    np.testing.assert_allclose(u, direct, atol=1e-10)


def test_zero_solution_when_forcing_nonpositive():
    n = 25
    lo = np.full(n, -0.3)
    up = np.full(n, -0.3)
    lo[0] = up[-1] = 0.0
    di = np.full(n, 1.7)
    q = -np.linspace(0.1, 1.0, n)
    u, res, _ = pdas_solve(lo, di, up, q, np.zeros(n), 1e-14)
    np.testing.assert_array_equal(u, np.zeros(n))
    assert res == 0.0


def test_pgs_reports_stall():
    n = 200
    lo = np.full(n, -0.49)
    up = np.full(n, -0.49)
    lo[0] = up[-1] = 0.0
    di = np.full(n, 1.0)
    q = np.ones(n)
    with pytest.raises(SolverFailureError) as err:
        pgs_solve(lo, di, up, q, np.zeros(n), 1e-15, max_sweeps=2)
    assert err.value.residual is not None
    assert err.value.residual > 1e-15


def test_warm_up_kernels_runs():
    warm_up_kernels()
