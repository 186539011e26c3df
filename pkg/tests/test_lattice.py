"""Geometry, indexing, and dump format checks.

Counting oracles are hand-enumerated for small radii; structural
invariants (every interior neighbor is a member, boundary is the outer
shell) are exercised over randomized radii and dimensions.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from homog.lattice import (
    GridFunction,
    build_ball,
    build_box,
    build_torus,
    differences,
    dump_grid,
    load_grid,
    unit_directions,
)


def test_unit_directions_order():
    dirs = unit_directions(2)
    assert dirs.tolist() == [[1, 0], [-1, 0], [0, 1], [0, -1]]
    dirs3 = unit_directions(3)
    assert dirs3.shape == (6, 3)
    # pairs (+e_i, -e_i) are adjacent
    assert np.array_equal(dirs3[0::2], -dirs3[1::2])


# hand counts: interior is the lattice ball |x| <= R-1, boundary its
# one-step outer shell
@pytest.mark.parametrize("R,d,n_int,n_bnd", [
    (1.0, 2, 1, 4),     # origin plus the 4 neighbors
    (2.0, 2, 5, 8),     # plus diagonal corners and axis tips
    (3.0, 2, 13, 12),
    (2.0, 3, 7, 18),
])
def test_ball_counts(R, d, n_int, n_bnd):
    dom = build_ball(R, d)
    assert dom.n_interior == n_int
    assert dom.n_boundary == n_bnd
    assert dom.n_sites == n_int + n_bnd


def test_ball_interior_is_closed_ball_radius_R_minus_1():
    dom = build_ball(3.5, 2)
    ic = dom.interior_coords()
    r = np.linalg.norm(ic, axis=1)
    assert np.all(r <= 2.5 + 1e-12)
    bc = dom.boundary_coords()
    assert np.all(np.linalg.norm(bc, axis=1) > 2.5)


def test_box_counts_and_shape():
    dom = build_box(2, 2)
    assert dom.n_sites == 25
    assert dom.n_interior == 9
    assert dom.n_boundary == 16
    assert dom.shape == (5, 5)
    assert np.all(np.abs(dom.boundary_coords()).max(axis=1) == 2)


def test_torus_everything_interior():
    dom = build_torus(4, 3)
    assert dom.n_sites == 64
    assert dom.n_interior == 64
    assert dom.n_boundary == 0
    assert len(dom.boundary_pos) == 0


def test_site_index_roundtrip_and_absent():
    for dom in (build_ball(3.0, 2), build_box(2, 3), build_torus(5, 2)):
        idx = dom.site_index(dom.coords)
        assert np.array_equal(idx, np.arange(dom.n_sites))
    ball = build_ball(3.0, 2)
    assert ball.site_index(np.array([9, 9])) == -1
    assert ball.site_index(np.array([3, 3])) == -1  # corner of bounding box
    box = build_box(2, 2)
    assert box.site_index(np.array([3, 0])) == -1


def test_torus_index_wraps():
    dom = build_torus(4, 2)
    assert dom.site_index(np.array([4, 0])) == dom.site_index(np.array([0, 0]))
    assert dom.site_index(np.array([-1, 2])) == dom.site_index(np.array([3, 2]))


def test_coords_are_lexicographic():
    for dom in (build_ball(2.5, 2), build_box(1, 2), build_torus(3, 2)):
        c = dom.coords
        key = [c[:, i] for i in range(c.shape[1] - 1, -1, -1)]
        assert np.array_equal(np.lexsort(key), np.arange(len(c)))


def test_neighbor_indices_small_torus():
    dom = build_torus(3, 2)
    # site (0,0) has index 0; lex order means index = 3*x + y
    row = dom.neighbor_indices()[0]
    assert row.tolist() == [3, 6, 1, 2]  # (1,0), (2,0), (0,1), (0,2)


def test_neighbor_indices_consistency():
    for dom in (build_ball(3.0, 2), build_box(2, 2)):
        nbr = dom.neighbor_indices()
        dirs = unit_directions(dom.d)
        ic = dom.interior_coords()
        for j in range(2 * dom.d):
            assert np.array_equal(dom.coords[nbr[:, j]], ic + dirs[j])


def test_centered_coords_torus():
    dom = build_torus(4, 2)
    cc = dom.centered_coords()
    assert cc.min() == -2 and cc.max() == 1
    # centering is a relabeling: same sites mod L
    assert np.array_equal(cc % 4, dom.coords % 4)
    dom5 = build_torus(5, 2)
    assert dom5.centered_coords().min() == -2
    assert dom5.centered_coords().max() == 2


def test_differences_on_parabola():
    dom = build_ball(4.0, 2)
    u = GridFunction.from_callable(dom, lambda c: (c ** 2).sum(axis=1).astype(float))
    x = np.array([1, -2])
    df = differences(u, x)
    assert np.array_equal(df.forward, [2 * 1 + 1, 2 * (-2) + 1])
    assert np.array_equal(df.backward, [-2 * 1 + 1, -2 * (-2) + 1])
    assert np.array_equal(df.second, [2.0, 2.0])


def test_differences_missing_neighbor_raises():
    dom = build_ball(2.0, 2)
    u = GridFunction.zeros(dom)
    with pytest.raises(KeyError):
        differences(u, np.array([2, 0]))  # boundary site, outward neighbor absent


def test_grid_function_validation():
    dom = build_torus(3, 2)
    with pytest.raises(ValueError):
        GridFunction(dom, np.zeros(5))
    g = GridFunction.zeros(dom)
    assert g.grid_view().shape == (3, 3)
    ball = build_ball(2.0, 2)
    with pytest.raises(ValueError):
        GridFunction.zeros(ball).grid_view()


def test_build_validation():
    with pytest.raises(ValueError):
        build_ball(0.5, 2)
    with pytest.raises(ValueError):
        build_ball(3.0, 1)
    with pytest.raises(ValueError):
        build_box(0, 2)
    with pytest.raises(ValueError):
        build_torus(2, 2)


def test_dump_and_load_roundtrip(tmp_path):
    dom = build_ball(3.0, 2)
    rng = np.random.default_rng(5)
    u = GridFunction(dom, rng.normal(size=dom.n_sites))
    path = str(tmp_path / "field.grid")
    dump_grid(u, path)
    values, header = load_grid(path)
    assert np.array_equal(values, u.values)
    assert header == {"d": 2, "kind": "ball", "R_or_L": 3.0,
                      "site_count": dom.n_sites, "ordering": "lex"}


def test_load_grid_length_mismatch(tmp_path):
    dom = build_torus(3, 2)
    path = str(tmp_path / "f.grid")
    dump_grid(GridFunction.zeros(dom), path)
    np.zeros(4).astype("<f8").tofile(path)  # truncate the payload
    with pytest.raises(ValueError):
        load_grid(path)


@settings(max_examples=30, deadline=None)
@given(R=st.floats(min_value=1.0, max_value=6.0), d=st.sampled_from([2, 3]))
def test_ball_structure(R, d):
    dom = build_ball(R, d)
    member = set(map(tuple, dom.coords))
    interior = set(map(tuple, dom.interior_coords()))
    boundary = set(map(tuple, dom.boundary_coords()))
    assert member == interior | boundary
    assert not interior & boundary
    dirs = unit_directions(d)
    for x in interior:
        for v in dirs:
            assert tuple(np.array(x) + v) in member
    for y in boundary:
        assert any(tuple(np.array(y) + v) in interior for v in dirs)
        assert np.linalg.norm(y) > R - 1


@settings(max_examples=20, deadline=None)
@given(W=st.integers(min_value=1, max_value=4), d=st.sampled_from([2, 3]))
def test_box_structure(W, d):
    dom = build_box(W, d)
    assert dom.n_sites == (2 * W + 1) ** d
    assert dom.n_interior == (2 * W - 1) ** d
    nbr = dom.neighbor_indices()
    assert nbr.shape == (dom.n_interior, 2 * d)
    assert nbr.min() >= 0
