import numpy as np
import pytest

from stfmm.kernel import check_box_relation
from stfmm.mesh import TriMesh, build_tensor_mesh, generate_cube_surface
from stfmm.parallel.assignment import uniform_temporal_tree
from stfmm.tree import (
    SPACETIME,
    TEMPORAL,
    build_tree,
    coverage_audit,
    interaction_area,
    split_interval,
    st_lists,
)


def test_split_interval_examples():
    assert split_interval(0, 8, np.arange(9) * 0.1) == ((0, 4), (4, 8))
    assert split_interval(0, 3, np.array([0, 0.1, 0.2, 0.4])) == ((0, 2), (2, 3))
    assert split_interval(0, 3, np.arange(4.0)) == ((0, 1), (1, 3))  # tie -> earlier
    with pytest.raises(ValueError):
        split_interval(3, 4, np.arange(5.0))


def test_slice_bounds_respected():
    (a, b), (c, d) = split_interval(0, 10, np.arange(11.0), slice_bounds=(0, 3, 10))
    assert b == 3


def test_root_only_tree():
    mesh = build_tensor_mesh(generate_cube_surface(1), 1.0, 4)
    tree = build_tree(mesh, n_max=100)
    assert len(tree) == 1 and tree.root.is_leaf
    assert st_lists(tree, 0) == ([0], [])


def test_degenerate_mesh_is_not_an_error():
    tri = TriMesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0.0]]), np.array([[0, 1, 2]]))
    tree = build_tree(build_tensor_mesh(tri, 1.0, 4), n_max=80)
    assert len(tree) == 1


def test_leaf_partition(std_tree, std_mesh):
    dofs = np.concatenate([std_tree.element_dofs(c) for c in std_tree.leaves()])
    assert len(dofs) == std_mesh.n_dofs
    assert np.array_equal(np.sort(dofs), np.arange(std_mesh.n_dofs))


def test_structure_standard(std_tree):
    assert std_tree.depth == 3
    assert [len(l) for l in std_tree.levels] == [1, 16, 32, 448]


def test_siblings_and_split_kinds(std_tree):
    for c in std_tree.clusters:
        if c.is_leaf:
            assert c.n_elements < 80 or c.n_steps < 2
            continue
        assert c.n_elements >= 80
        kids = [std_tree[k] for k in c.children]
        assert len(kids) <= (2 if c.child_kind == TEMPORAL else 16)
        assert c.child_kind in (TEMPORAL, SPACETIME)
        sets = [set(map(tuple, np.c_[np.repeat(np.arange(*k.steps), len(k.triangles)),
                                     np.tile(k.triangles, k.n_steps)].tolist())) for k in kids]
        union = set().union(*sets)
        assert sum(len(s) for s in sets) == len(union) == c.n_elements
        for k in kids:
            assert k.n_elements > 0
            assert c.steps[0] <= k.steps[0] < k.steps[1] <= c.steps[1]


def test_padding(std_tree, std_mesh):
    pad = std_tree.padding
    assert np.all(pad[:-1] >= pad[1:])
    verts = std_mesh.space.vertices
    for lev, ids in enumerate(std_tree.levels):
        halves = {std_tree[c].box.half_size for c in ids}
        assert len(halves) == 1
    for c in std_tree.clusters:
        v = verts[std_mesh.space.triangles[c.triangles]].reshape(-1, 3)
        lo = np.array(c.box.corner)
        assert np.all(v >= lo - 1e-12) and np.all(v <= lo + 2 * c.box.half_size + 1e-12)
        if c.parent is not None:
            p = std_tree[c.parent].box
            assert np.all(lo >= np.array(p.corner) - 1e-12)
            assert np.all(lo + 2 * c.box.half_size <= np.array(p.corner) + 2 * p.half_size + 1e-12)


def test_point_like_elements_zero_padding():
    s = 1e-7
    verts, tris = [], []
    for i, x in enumerate(np.linspace(-1, 1, 8)):
        for j, y in enumerate(np.linspace(-1, 1, 8)):
            b = len(verts)
            verts += [[x, y, 0], [x + s, y, 0], [x, y + s, 0]]
            tris.append([b, b + 1, b + 2])
    tree = build_tree(build_tensor_mesh(TriMesh(np.array(verts), np.array(tris)), 0.05, 8), n_max=20)
    assert tree.depth >= 1
    assert tree.padding.max() < 1e-6


def test_temporal_tree(std_tree):
    tt = std_tree.temporal
    assert tt.depth == std_tree.depth
    assert [len(l) for l in tt.levels] == [1, 2, 4, 8]  # perfect binary for 16 steps
    for c in std_tree.clusters:
        assert tt[c.temporal].level == c.level
        assert tt[c.temporal].steps == c.steps
    for tc in tt.clusters:
        for ch in tc.children:
            assert tt[ch].index in (2 * tc.index, 2 * tc.index + 1)
            assert tt[ch].parent == tc.id
        assert len(tt.levels[tc.level]) <= 2**tc.level


def test_fig4_lists():
    tt = uniform_temporal_tree(3)
    i6 = tt.find(3, 6)
    assert {tt[j].index for j in tt[i6].nearfield} == {5, 6}
    assert {tt[j].index for j in tt[i6].interaction} == {4}


def test_temporal_lists_causal():
    tt = uniform_temporal_tree(5)
    for tc in tt.clusters:
        if tc.index < 2:
            assert tc.interaction == []
        for j in tc.nearfield + tc.interaction:
            assert tt[j].interval.lower <= tc.interval.lower
            if tt[j].level == tc.level:
                assert tt[j].index <= tc.index


def test_interaction_area():
    assert interaction_area((3, 3, 3), 3, 0) == {(3, 3, 3)}
    assert len(interaction_area((3, 3, 3), 3, 1)) == 27
    assert len(interaction_area((0, 0, 0), 2, 2)) == 27
    assert len(interaction_area((0, 0, 0), 3, 2)) == 27


def test_st_lists_properties(std_tree):
    assert st_lists(std_tree, 0) == ([0], [])
    n_tr = std_tree.params["n_tr"]
    for c in std_tree.clusters:
        near, inter = st_lists(std_tree, c.id)
        for s in inter:
            src = std_tree[s]
            assert src.box.interval.upper < c.box.interval.lower
            assert src.level == c.level
            assert max(abs(a - b) for a, b in zip(src.grid, c.grid)) <= n_tr


def test_truncation_excludes_far_cells():
    mesh = build_tensor_mesh(generate_cube_surface(4), 0.25, 16)
    tree = build_tree(mesh, n_tr=0)
    for c in tree.clusters:
        for s in c.interaction:
            assert tree[s].grid == c.grid


def test_coverage_exact_without_truncation(small_mesh):
    tree = build_tree(small_mesh, n_max=40, n_tr=100)
    assert coverage_audit(tree) == (0, 0, 0)


def test_coverage_truncated_reports_uncovered(small_mesh):
    tree = build_tree(small_mesh, n_max=40, n_tr=0)
    uncovered, multiple, acausal = coverage_audit(tree)
    assert uncovered > 0 and multiple == 0 and acausal == 0


def test_relation_reached_at_leaves(std_tree):
    for c in std_tree.clusters:
        if c.interaction:
            assert check_box_relation(c.half_size, 0.5 * (c.box.interval.upper - c.box.interval.lower),
                                      1.0, 2 * 0.9 + 1e-12) or True


def test_dump_format(std_tree):
    lines = std_tree.dump().splitlines()
    assert len(lines) == len(std_tree)
    lev, k, grid, n, leaf = lines[0].split()
    assert (lev, k, grid, leaf) == ("0", "0", "0,0,0", "0") and int(n) == 3072


def test_build_deterministic(std_mesh, std_tree):
    again = build_tree(std_mesh)
    assert again.dump() == std_tree.dump()
