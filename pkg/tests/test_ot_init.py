import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from epiunwarp import operators as ops
from epiunwarp.errors import ShapeError
from epiunwarp.image_model import Grid
from epiunwarp.ot_init import (CLAMP, batched_interp, cdf, centers_to_nodes, clamp_feasible, column_field,
                               init_field_map, pseudo_inverse, to_measure, transport_plan)
from epiunwarp.volume_io import Volume

from oracles import coupling_midpoint_field

columns = hnp.arrays(np.float64, st.integers(2, 16), elements=st.floats(0, 100))


def test_to_measure_zero_column_is_uniform():
    assert np.allclose(to_measure(np.zeros(5)), 0.2)


@given(col=hnp.arrays(np.float64, st.integers(2, 16), elements=st.floats(-100, 100)))
def test_to_measure_positive_unit_mass(col):
    mu = to_measure(col)
    assert np.all(mu > 0)
    assert np.isclose(mu.sum(), 1.0)


def test_cdf_examples():
    assert np.allclose(cdf(np.full(4, 0.25)), [0.25, 0.5, 0.75, 1.0])
    c = cdf(to_measure(np.array([1e6, 0.0, 0.0, 0.0])))
    assert np.allclose(c, 1.0, atol=1e-2)


@given(col=columns)
def test_cdf_nondecreasing_ends_at_one(col):
    c = cdf(to_measure(col))
    assert np.all(np.diff(c) >= 0)
    assert c[-1] == 1.0


def test_pseudo_inverse_uniform_is_linear():
    inv = pseudo_inverse(cdf(np.full(8, 1 / 8)))
    r = np.linspace(0, 1, 33)
    assert np.allclose(inv(r), 8 * r)


@given(col=columns)
def test_pseudo_inverse_monotone_and_inverts_cdf(col):
    c = cdf(to_measure(col))
    inv = pseudo_inverse(c)
    r = np.linspace(0, 1, 41)
    q = inv(r)
    assert np.all(np.diff(q) >= -1e-12)
    assert q[0] == 0 and q[-1] == len(col)
    # C is strictly increasing after the positivity shift, so C^-1 hits the edges
    assert np.allclose(inv(c), np.arange(1, len(col) + 1), atol=1e-9)


@settings(max_examples=50)
@given(rows=st.integers(1, 6), n=st.integers(3, 10), seed=st.integers(0, 2 ** 31))
def test_batched_interp_matches_numpy(rows, n, seed):
    rng = np.random.default_rng(seed)
    xp = np.cumsum(rng.random((rows, n)), axis=1)
    xp[:, 1] = xp[:, 0]  # include a repeated knot
    fp = rng.standard_normal((rows, n))
    x = rng.uniform(-1, xp.max() + 1, (rows, 7))
    out = batched_interp(x, xp, fp)
    for i in range(rows):
        # at a repeated knot the later value wins
        keep = np.r_[np.diff(xp[i]) > 0, True]
        assert np.allclose(out[i], np.interp(x[i], xp[i][keep], fp[i][keep]), atol=1e-12)


def test_identical_columns_give_zero_field(rng):
    mu = to_measure(rng.random(12))
    assert np.all(column_field(mu, mu) == 0)


@given(a=columns, seed=st.integers(0, 2 ** 31))
def test_column_field_antisymmetric(a, seed):
    b = np.random.default_rng(seed).random(len(a)) * 50
    mu, nu = to_measure(a), to_measure(b)
    assert np.array_equal(column_field(mu, nu), -column_field(nu, mu))


@given(a=columns, seed=st.integers(0, 2 ** 31))
def test_transport_maps_monotone(a, seed):
    b = np.random.default_rng(seed).random(len(a)) * 50
    plan = transport_plan(to_measure(a), to_measure(b))
    assert np.all(np.diff(plan.T_plus) >= -1e-12)
    assert np.all(np.diff(plan.T_minus) >= -1e-12)


@pytest.mark.parametrize("h3", [1.0, 2.0])
def test_bump_offset_sign(h3):
    # +v bump two voxels above the middle, -v bump two below
    m, mid = 16, 8
    x, y = np.zeros(m), np.zeros(m)
    x[mid + 2] = 10.0
    y[mid - 2] = 10.0
    mu, nu = to_measure(x), to_measure(y)
    plan = transport_plan(mu, nu)
    centers = np.arange(m) + 0.5
    # each bump travels two voxels to the halfway position
    assert abs((centers - plan.T_plus)[mid + 2] - 2) < 0.01
    assert abs((plan.T_minus - centers)[mid - 2] - 2) < 0.01
    # the profile averages that with the background of the other image, which stays put
    b = column_field(mu, nu, h3)
    oracle = coupling_midpoint_field(mu, nu, h3)
    for k in (mid - 2, mid + 2):
        assert b[k] > 0.9 * h3
        assert abs(b[k] - oracle[k]) <= 0.3 * h3
    assert np.all(np.abs(b[: mid - 2]) < 1e-9) and np.all(np.abs(b[mid + 3:]) < 1e-9)


def test_column_field_shape_mismatch():
    with pytest.raises(ShapeError):
        column_field(np.full(4, 0.25), np.full(5, 0.2))


def test_centers_to_nodes():
    bc = np.array([[[1.0, 3.0, 5.0]]])
    assert np.allclose(centers_to_nodes(bc), [[[1.0, 2.0, 4.0, 5.0]]])


@given(seed=st.integers(0, 2 ** 31), scale=st.floats(0.1, 10))
def test_clamp_feasible(seed, scale):
    b = np.random.default_rng(seed).standard_normal((2, 3, 6)) * scale
    out = clamp_feasible(b, 1.3)
    assert np.max(np.abs(ops.diff_pe(out, 1.3))) <= CLAMP + 1e-12


def test_init_identical_volumes_is_zero(rng):
    vol = Volume(rng.uniform(0, 100, (4, 5, 6)))
    for blur in (True, False):
        b = init_field_map(vol, vol, blur)
        assert b.shape == (4, 5, 7)
        assert np.all(b == 0)


def test_init_shape_mismatch(rng):
    with pytest.raises(ShapeError):
        init_field_map(Volume(np.ones((3, 3, 4))), Volume(np.ones((3, 3, 5))))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2 ** 31), blur=st.booleans())
def test_init_always_feasible(seed, blur):
    rng = np.random.default_rng(seed)
    ip, im = rng.uniform(0, 100, (2, 3, 3, 8))
    grid = Grid((3, 3, 8), (1.0, 1.0, 1.7))
    b = init_field_map(ip, im, blur, grid)
    assert np.max(np.abs(ops.diff_pe(b, grid.h[2]))) <= CLAMP + 1e-12


def test_init_recovers_shift_of_compact_profile():
    # +v copy displaced by +1.5 voxels and -v copy by -1.5 in every column
    m = 24
    pos = np.arange(m) + 0.5
    prof = lambda d: np.clip(1 - np.abs(pos - 12 - d) / 4, 0, None) * 100
    ip = np.broadcast_to(prof(1.5), (3, 3, m)).copy()
    im = np.broadcast_to(prof(-1.5), (3, 3, m)).copy()
    b = init_field_map(ip, im, False, Grid((3, 3, m)))
    assert abs(b[1, 1, 12] - 1.5) < 0.2
