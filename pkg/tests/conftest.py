"""Shared fixtures: simulated image pairs, cached solver runs, criterion log."""
from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np
import pytest

from epiunwarp.correction import jacobian_correction, relative_improvement, simulate_pair
from epiunwarp.image_model import Grid
from epiunwarp.objective import Objective
from epiunwarp.optim import solve
from epiunwarp.ot_init import init_field_map
from epiunwarp.simulation import make_phantom, synth_field_map

FIXTURE_DIMS = (64, 64, 48)
FIXTURE_SEEDS = tuple(range(10))
FIXTURE_AMPLITUDE = 3.0   # peak displacement, voxels
FIXTURE_NOISE = 4.0       # std of the noise added to each distorted image

# every OptReport produced through run_solver, for the feasibility criterion
SOLVER_REPORTS = []
# criterion id -> list of (passed, detail)
CRITERIA = {}


def run_solver(name, obj, b0, opts=None, logger=None):
    b, report = solve(name, obj, b0, opts, logger)
    SOLVER_REPORTS.append(report)
    return b, report


def record_criterion(cid, passed, detail):
    """Store and print the outcome of one (part of an) acceptance criterion."""
    CRITERIA.setdefault(cid, []).append((bool(passed), detail))
    print(f"criterion {cid}: {'PASS' if passed else 'FAIL'} {detail}")
    return bool(passed)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(CRITERIA):
        parts = CRITERIA[cid]
        ok = all(p for p, _ in parts)
        details = "; ".join(d for _, d in parts)
        terminalreporter.write_line(f"criterion {cid:>2}: {'PASS' if ok else 'FAIL'}  {details}")


@dataclass
class SimFixture:
    """A simulated +v/-v pair with its true field map and cached results."""

    seed: int
    grid: Grid
    truth: object
    b_true: np.ndarray
    vol_plus: object
    vol_minus: object
    cache: dict = field(default_factory=dict)

    @property
    def pair(self):
        return self.vol_plus.data, self.vol_minus.data

    def ri(self, b):
        return relative_improvement(self.pair, jacobian_correction(b, self.vol_plus, self.vol_minus))

    def init(self, blur):
        key = ("init", blur)
        if key not in self.cache:
            self.cache[key] = init_field_map(self.vol_plus, self.vol_minus, blur=blur)
        return self.cache[key]

    def objective(self, dtype=np.float64):
        key = ("obj", np.dtype(dtype).name)
        if key not in self.cache:
            self.cache[key] = Objective.from_volumes(self.vol_plus, self.vol_minus, dtype=dtype)
        return self.cache[key]

    def solved(self, name, dtype=np.float64):
        """Solver result from the blurred OT start, cached per solver and precision."""
        key = ("solve", name, np.dtype(dtype).name)
        if key not in self.cache:
            obj = self.objective(dtype)
            self.cache[key] = run_solver(name, obj, self.init(True).astype(dtype))
        return self.cache[key]


@functools.lru_cache(maxsize=None)
def make_fixture(seed, dims=FIXTURE_DIMS, amplitude=FIXTURE_AMPLITUDE, noise=FIXTURE_NOISE):
    grid = Grid(dims)
    truth = make_phantom(grid, seed=seed)
    b_true = synth_field_map(grid, "smooth-random", amplitude * grid.h[2], seed=seed)
    vp, vm = simulate_pair(truth, b_true, noise=noise, seed=seed)
    return SimFixture(seed, grid, truth, b_true, vp, vm)


@pytest.fixture(scope="session")
def sim_fixtures():
    return [make_fixture(s) for s in FIXTURE_SEEDS]


@pytest.fixture(scope="session")
def small_fixture():
    return make_fixture(0, dims=(16, 16, 12), amplitude=1.5, noise=0.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
