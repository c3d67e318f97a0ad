import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from snomdp.exceptions import ParseError
from snomdp.gp import Kernel, kernel_eval
from snomdp.gridworld import (ACTIONS, ElevationField, EnvironmentTruth, GridWorld,
                              elevation_environment, ingest_elevation_grid, neighborhood,
                              observe, rescale_reward, sample_gp_environment,
                              slope_safety_from_elevation, transition, true_lipschitz,
                              write_environment_csv, write_esri_ascii)


def test_stay_is_identity():
    assert transition(GridWorld(20, 20), (0, 0), "stay") == (0, 0)


def test_boundary_move_self_absorbs():
    assert transition(GridWorld(20, 20), (0, 0), "left") == (0, 0)
    assert transition(GridWorld(3, 2), (2, 1), "right") == (2, 1)
    assert transition(GridWorld(3, 2), (2, 1), "up") == (2, 1)


def test_action_fan_out_on_20x20():
    w = GridWorld(20, 20)
    got = {a: transition(w, (3, 4), a) for a in ACTIONS}
    assert got == {"stay": (3, 4), "up": (3, 5), "right": (4, 4), "down": (3, 3),
                   "left": (2, 4)}


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 7), st.integers(1, 7))
def test_transition_is_total(width, height):
    w = GridWorld(width, height)
    for s in w.states():
        for a in range(len(ACTIONS)):
            x, y = transition(w, s, a)
            assert 0 <= x < width and 0 <= y < height
        assert transition(w, s, "stay") == s


def test_index_roundtrip_is_lexicographic():
    w = GridWorld(4, 3)
    assert [w.index(s) for s in w.states()] == list(range(12))
    assert w.state(w.index((2, 1))) == (2, 1)
    assert w.states()[:4] == [(0, 0), (0, 1), (0, 2), (1, 0)]
    with pytest.raises(ValueError):
        w.index((4, 0))


def test_corner_neighbourhood_is_deduplicated():
    w = GridWorld(5, 5)
    assert neighborhood(w, (0, 0)) == [(0, 0), (0, 1), (1, 0)]
    assert len(neighborhood(w, (2, 2))) == 5


def test_sample_environment_is_deterministic_and_in_range():
    w = GridWorld(8, 6)
    k = Kernel("rbf", 2.0, 1.0)
    a = sample_gp_environment(w, k, k, seed=3, r_max=2.0)
    b = sample_gp_environment(w, k, k, seed=3, r_max=2.0)
    assert np.array_equal(a.reward, b.reward) and np.array_equal(a.safety, b.safety)
    assert a.reward.min() > 0 and a.reward.max() <= 2.0
    assert a.reward.shape == (8, 6)
    c = sample_gp_environment(w, k, k, seed=4, r_max=2.0)
    assert not np.array_equal(a.safety, c.safety)


def test_rescale_reward_hits_documented_endpoints():
    r = rescale_reward(np.array([-3.0, 0.0, 5.0]), 2.0)
    assert r[0] == pytest.approx(0.02) and r[-1] == 2.0


def test_safety_draw_covariance_matches_kernel():
    # Monte-Carlo covariance at two fixed states against the kernel value
    w = GridWorld(3, 3)
    k = Kernel("rbf", 2.0, 1.0)
    i, j = w.index((0, 0)), w.index((1, 1))
    draws = np.array([sample_gp_environment(w, k, k, seed=s).safety_flat[[i, j]]
                      for s in range(10_000)])
    emp = np.mean(draws[:, 0] * draws[:, 1])
    target = kernel_eval(k, w.coords[i], w.coords[j])
    assert abs(emp - target) / target < 0.05


def test_noiseless_observation_returns_truth():
    w = GridWorld(4, 4)
    k = Kernel()
    env = sample_gp_environment(w, k, k, seed=0)
    obs = observe(env, w, (1, 1), np.random.default_rng(0))
    assert len(obs) == 5
    for o in obs:
        assert o.reward_sample == env.reward[o.state]
        assert o.safety_sample == env.safety[o.state]
    assert len(observe(env, w, (0, 0), np.random.default_rng(0))) == 3


def test_observation_noise_scale():
    w = GridWorld(1, 1)
    env = EnvironmentTruth(np.ones((1, 1)), np.zeros((1, 1)), 1.0, noise_safety=0.075)
    rng = np.random.default_rng(1)
    samples = [observe(env, w, (0, 0), rng)[0].safety_sample for _ in range(10_000)]
    assert abs(np.std(samples) / 0.075 - 1) < 0.05


def test_environment_truth_rejects_bad_fields():
    with pytest.raises(ValueError):
        EnvironmentTruth(np.zeros((2, 2)), np.zeros((2, 2)), 1.0)
    with pytest.raises(ValueError):
        EnvironmentTruth(np.ones((2, 2)), np.array([[0.0, np.nan], [0, 0]]), 1.0)


def test_true_lipschitz_on_ramp():
    w = GridWorld(5, 1, cell_size=2.0)
    f = np.arange(5.0).reshape(5, 1) * 3.0
    assert true_lipschitz(w, f) == pytest.approx(1.5)


# -- elevation grids ----------------------------------------------------------

def test_csv_ingest_direct_readback():
    e = ingest_elevation_grid(b"1,2\n3,4\n", "csv", cell_size=1)
    assert e.values.tolist() == [[1, 2], [3, 4]]


def test_csv_needs_cell_size():
    with pytest.raises(ParseError):
        ingest_elevation_grid("1,2\n3,4\n", "csv")


def test_csv_ragged_row_names_row_two():
    with pytest.raises(ParseError) as err:
        ingest_elevation_grid("1,2,3\n4,5\n", "csv", cell_size=1)
    assert err.value.row == 2


def test_csv_non_numeric_names_cell():
    with pytest.raises(ParseError) as err:
        ingest_elevation_grid("1,2\n3,x\n", "csv", cell_size=1)
    assert (err.value.row, err.value.column) == (2, 2)


ESRI = """ncols 3
nrows 2
xllcorner 0
yllcorner 0
cellsize 1
NODATA_value -9999
1 2 3
4 5 6
"""


def test_esri_ingest_shape():
    e = ingest_elevation_grid(io.BytesIO(ESRI.encode()), "esri_ascii")
    assert (e.ncols, e.nrows) == (3, 2)
    assert e.values.tolist() == [[1, 2, 3], [4, 5, 6]]
    assert e.world().shape == (3, 2)


def test_esri_errors():
    with pytest.raises(ParseError):
        ingest_elevation_grid(ESRI.replace("cellsize 1\n", ""), "esri_ascii")
    with pytest.raises(ParseError) as err:
        ingest_elevation_grid(ESRI.replace("4 5 6", "4 -9999 6"), "esri_ascii")
    assert (err.value.row, err.value.column) == (2, 2)
    with pytest.raises(ParseError):
        ingest_elevation_grid(ESRI, "esri_ascii", cell_size=2.0)
    with pytest.raises(ParseError):
        ingest_elevation_grid(ESRI.replace("4 5 6", "4 5"), "esri_ascii")


def test_esri_roundtrip():
    e = ElevationField(np.array([[0.5, 1.25], [2.0, -3.0]]), 10.0)
    back = ingest_elevation_grid(write_esri_ascii(e), "esri_ascii")
    assert np.array_equal(back.values, e.values) and back.cell_size == 10.0


def test_flat_field_is_safe_everywhere():
    g = slope_safety_from_elevation(ElevationField(np.full((3, 4), 7.0), 5.0))
    assert np.all(g == 0) and np.all(g >= -math.tan(math.radians(25)))


def test_unit_rise_over_run_is_unsafe():
    g = slope_safety_from_elevation(ElevationField(np.array([[0.0, 2.0], [0.0, 2.0]]), 2.0))
    assert np.all(g == -1.0)
    assert np.all(g < -math.tan(math.radians(25)))


def test_raised_centre_by_hand():
    z = np.zeros((3, 3))
    z[1, 1] = 3.0
    g = slope_safety_from_elevation(ElevationField(z, 1.0))
    expected = np.array([[0, -3, 0], [-3, -3, -3], [0, -3, 0]], dtype=float)
    assert np.array_equal(g, expected)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 6), st.integers(2, 6), st.integers(0, 10_000))
def test_slope_commutes_with_transpose(r, c, seed):
    z = np.random.default_rng(seed).normal(size=(r, c))
    a = slope_safety_from_elevation(ElevationField(z, 1.5))
    b = slope_safety_from_elevation(ElevationField(z.T, 1.5))
    assert np.array_equal(a.T, b)


def test_elevation_environment_axes():
    z = np.zeros((2, 3))
    z[0, 2] = 5.0  # row 0, col 2 -> state (2, 0)
    world, env = elevation_environment(ElevationField(z, 1.0), Kernel(), seed=0)
    assert world.shape == (3, 2)
    assert env.safety[2, 0] == -5.0 and env.safety[0, 1] == 0.0


def test_environment_csv_columns():
    w = GridWorld(2, 2)
    env = EnvironmentTruth(np.full((2, 2), 0.5), np.zeros((2, 2)), 1.0)
    buf = io.StringIO()
    write_environment_csv(env, w, buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "x,y,reward,safety" and lines[1] == "0,0,0.5,0.0"
    assert len(lines) == 5
