from __future__ import annotations

import numpy as np
import pytest

from mfkalman import (
    GainSchedule,
    build_scenario,
    classical_scenario,
    dirac_measure,
    kernel_bundle,
    make_grid,
    measure_averages,
)
from mfkalman.scenarios import random_smooth_scenario


@pytest.fixture(scope="session")
def classical_small():
    """Classical benchmark at a test-friendly resolution."""
    return classical_scenario(steps=100)


@pytest.fixture(scope="session")
def classical_pack(classical_small):
    """(scenario, bars, zero-gain bundle) for the classical benchmark."""
    scen = classical_small
    bars = measure_averages(scen)
    zero = GainSchedule.constant(scen.grid, 0.0)
    return scen, bars, kernel_bundle(scen, zero)


@pytest.fixture(scope="session")
def rough_pack():
    """Seeded smooth scenario with mean coupling, plus a generic gain."""
    scen = random_smooth_scenario(seed=1234, steps=200)
    gain_vals = 0.4 + 0.2 * np.cos(2 * np.pi * scen.grid.nodes)
    gain = GainSchedule(scen.grid, gain_vals[:, None, None])
    bars = measure_averages(scen)
    return scen, bars, gain, kernel_bundle(scen, gain)


def scalar_scenario(grid=None, steps=100, **kw):
    """Scalar scenario shortcut with unit defaults."""
    grid = grid or make_grid(1.0, steps)
    kw.setdefault("measure", dirac_measure(0.0))
    return build_scenario(grid, **kw)
