"""Shared fixtures: a fast synthetic calibration and small hierarchies.

The synthetic calibration is cheap (no PDE runs) and sized so that a one-level
hierarchy evolves in about a second; the two-level variant exists for the
pure-bookkeeping tests that never touch the solver.
"""

import pytest

from parobs.oscillation import (
    AtomHierarchy,
    BuildingBlockCalibration,
    build_hierarchy,
)


@pytest.fixture(scope="session")
def fast_calibration() -> BuildingBlockCalibration:
    return BuildingBlockCalibration(
        d=1.0, t_star=0.5, t1=0.15, d1=0.9, t1_tilde=1e-4, c1=2.5, kappa=0.05
    )


@pytest.fixture(scope="session")
def fast_hierarchy(fast_calibration) -> AtomHierarchy:
    # theta1 = 0.0125: 19 first-level blocks, ~4000 cells, runs in ~1 s
    return build_hierarchy(fast_calibration, (0.0125,))


@pytest.fixture(scope="session")
def two_level_hierarchy(fast_calibration) -> AtomHierarchy:
    # ratio 5e-3 clears both decay gates; never evolved (too many cells)
    return build_hierarchy(fast_calibration, (0.008, 4e-5))
