"""Formation generators and neighbor lists."""

import io
import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.distance import cdist

from dstr.topology import (Formation, gen_hex_grid, gen_hex_rings, gen_single_hop,
                           max_diameter, neighbor_lists, ring_count)


def oracle_neighbors(positions, radius):
    d = cdist(positions, positions)
    np.fill_diagonal(d, np.inf)
    return [np.flatnonzero(row <= radius * (1 + 1e-9)) for row in d]


def same_lists(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def test_grid_examples():
    one = gen_hex_grid(1, 1)
    assert one.size == 1 and len(one.neighbors[0]) == 0
    small = gen_hex_grid(2, 2)
    assert set(small.degrees()) <= {2, 3}
    big = gen_hex_grid(9, 9)
    centre = 4 * 9 + 4
    assert len(big.neighbors[centre]) == 6
    assert big.degrees().max() == 6


@pytest.mark.parametrize("R,u", [(0, 1), (1, 7), (9, 271), (43, 5677)])
def test_ring_examples(R, u):
    assert ring_count(R) == u
    if R <= 9:
        f = gen_hex_rings(R)
        assert f.size == u
        if R:
            assert f.degrees().max() == 6


@given(st.integers(0, 81))
def test_ring_formula(R):
    assert ring_count(R) == 1 + 3 * R * (R + 1)
    # ring k holds 6k UAVs
    assert ring_count(R) == 1 + sum(6 * k for k in range(1, R + 1))


def test_ring_generator_count_to_30():
    for R in range(0, 31):
        assert gen_hex_rings(R).size == ring_count(R)


@pytest.mark.parametrize("u", [1, 5, 200])
def test_single_hop_complete(u):
    f = gen_single_hop(u)
    assert all(len(n) == u - 1 for n in f.neighbors)


def test_max_diameter():
    assert max_diameter(gen_hex_grid(1, 1)) == 0.0
    assert max_diameter(Formation([[0, 0], [10, 0]], 10)) == pytest.approx(10)
    for f in (gen_hex_grid(10, 10), gen_hex_rings(5)):
        assert max_diameter(f) == pytest.approx(cdist(f.positions, f.positions).max())


def test_formation_invariants():
    f = gen_hex_rings(6)
    sets = f.neighbor_sets()
    for i, s in enumerate(sets):
        assert i not in s
        for j in s:
            assert i in sets[j]
    assert len({tuple(p) for p in f.positions}) == f.size
    with pytest.raises(ValueError):
        Formation([[0, 0]], 0)


def test_inclusive_boundary():
    # lattice neighbours sit at exactly the safety radius
    f = Formation([[0, 0], [10, 0], [20.0000001, 0]], 10)
    assert [list(n) for n in f.neighbors] == [[1], [0], []]


def test_write_csv_round_trip():
    f = gen_hex_grid(3, 4)
    buf = io.StringIO()
    f.write_csv(buf)
    rows = buf.getvalue().strip().splitlines()
    assert rows[0] == "id,x,y,z" and len(rows) == 13
    back = np.array([[float(v) for v in r.split(",")[1:]] for r in rows[1:]])
    assert np.array_equal(back, f.positions)


@settings(max_examples=200)
@given(st.integers(2, 300), st.floats(1, 40), st.integers(0, 2**32 - 1))
def test_neighbors_match_brute_force(n, radius, seed):
    pts = np.random.default_rng(seed).uniform(0, 100, size=(n, 3))
    assert same_lists(neighbor_lists(pts, radius), oracle_neighbors(pts, radius))


@pytest.mark.parametrize("maker", [lambda: gen_hex_grid(40, 50), lambda: gen_hex_rings(25)],
                         ids=["grid2000", "rings25"])
def test_neighbors_large(maker):
    f = maker()
    assert f.size <= 2000
    assert same_lists(f.neighbors, oracle_neighbors(f.positions, f.safety_radius))


def test_generator_errors():
    for bad in (lambda: gen_hex_grid(0, 3), lambda: gen_hex_grid(2, 2, -1),
                lambda: gen_hex_rings(-1), lambda: gen_single_hop(0)):
        with pytest.raises(ValueError):
            bad()
