import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trajdiff.core import Grid, MaskSet, Trajectory, cell_of, distance_meters, slot_index
from trajdiff.errors import InputError


@pytest.mark.parametrize("ts, expected", [(0, 0), (1800, 1), (86399, 47), (33000, 18)])
def test_slot_index_examples(ts, expected):
    assert slot_index(ts, 30) == expected


@pytest.mark.parametrize("ts", [-1, 86400, 1e9])
def test_slot_index_rejects_out_of_range(ts):
    with pytest.raises(InputError):
        slot_index(ts, 30)


def test_slot_index_rejects_bad_slot_length():
    with pytest.raises(InputError):
        slot_index(10, 7)


def test_slot_index_monotone_and_surjective():
    seen = [slot_index(t, 30) for t in range(0, 86400, 60)]
    assert all(a <= b for a, b in zip(seen, seen[1:]))
    assert set(seen) == set(range(48))


def test_cell_of_origin(grid4):
    assert cell_of(grid4.origin_lat, grid4.origin_lon, grid4) == 0


def test_cell_of_offsets(grid4):
    lat, lon = grid4.to_latlon(515.0 * 1.5, 0.0)
    assert cell_of(lat, lon, grid4) == 1
    lat, lon = grid4.to_latlon(0.0, 515.0 * 3.2)
    assert cell_of(lat, lon, grid4) == 12


def test_cell_of_outside(grid4):
    lat, lon = grid4.to_latlon(-1.0, 10.0)
    with pytest.raises(InputError):
        cell_of(lat, lon, grid4)
    lat, lon = grid4.to_latlon(10.0, 4 * 515.0 + 1)
    with pytest.raises(InputError):
        cell_of(lat, lon, grid4)


def test_cell_of_inverts_centroid(grid4):
    for loc in range(grid4.n_cells):
        assert cell_of(*grid4.centroid(loc), grid4) == loc


def test_distance_examples(grid4):
    assert distance_meters(5, 5, grid4) == 0
    assert distance_meters(0, 1, grid4) == pytest.approx(515.0)
    assert distance_meters(0, 5, grid4) == pytest.approx(728.3, abs=0.1)


def test_distance_rejects_null(grid4):
    with pytest.raises(InputError):
        distance_meters(grid4.null_loc, 0, grid4)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 15), st.integers(0, 15), st.integers(0, 15))
def test_distance_is_a_metric(a, b, c):
    g = Grid(4, 4, cell_side_m=515.0)
    ab, bc, ac = distance_meters(a, b, g), distance_meters(b, c, g), distance_meters(a, c, g)
    assert ab == distance_meters(b, a, g)
    assert (ab == 0) == (a == b)
    assert ac <= ab + bc + 1e-9


def test_trajectory_and_masks():
    t = Trajectory("u", 3, (1, None, 2))
    assert t.n_observed == 2 and t.observed_idx == [0, 2]
    m = MaskSet.from_trajectory(t, [2])
    assert m.labels == "OMT"
    assert m.visible(t).slots == (1, None, None)
    with pytest.raises(InputError):
        MaskSet.from_trajectory(t, [1])
    with pytest.raises(InputError):
        MaskSet("OXT")
    with pytest.raises(InputError):
        MaskSet("OOT").check(t)


def test_grid_validation():
    with pytest.raises(InputError):
        Grid(0, 3)
    with pytest.raises(InputError):
        Grid(3, 3, cell_side_m=0)
    g = Grid(2, 3)
    assert g.null_loc == 6
    assert g.centroids().shape == (6, 2)
    np.testing.assert_allclose(g.centroids()[4], [1.5 * 515, 1.5 * 515])
