import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stfmm.mesh import (
    MeshFormatError,
    build_tensor_mesh,
    generate_cube_surface,
    load_spatial_mesh,
    partition_time_slices,
    write_spatial_mesh,
)


def test_unit_cube_area():
    m = generate_cube_surface(1, half_width=0.7)
    assert m.n_triangles == 12
    assert np.isclose(m.areas.sum(), 6 * 1.4**2)


def test_subdivided_cube():
    m = generate_cube_surface(4)
    assert m.n_triangles == 192
    np.testing.assert_allclose(m.areas, 0.03125, rtol=0, atol=1e-15)
    assert m.is_closed()


@pytest.mark.parametrize("n", [1, 2, 3, 5])
def test_closed_surface_normals(n):
    m = generate_cube_surface(n, center=(0.3, -1.0, 2.0), half_width=0.25)
    assert np.abs((m.areas[:, None] * m.normals).sum(axis=0)).max() < 1e-12
    # outward: normal points away from the center
    assert np.all(np.einsum("ij,ij->i", m.centroids - np.array([0.3, -1.0, 2.0]), m.normals) > 0)


def test_bad_subdivision():
    with pytest.raises(ValueError):
        generate_cube_surface(0)


def test_round_trip(tmp_path):
    m = generate_cube_surface(1)
    p = tmp_path / "cube.txt"
    write_spatial_mesh(m, p)
    back = load_spatial_mesh(p)
    assert back.n_vertices == 8 and back.n_triangles == 12
    np.testing.assert_array_equal(back.triangles, m.triangles)
    np.testing.assert_allclose(back.normals, m.normals)
    assert back.warnings == ()


def test_parse_errors(tmp_path):
    p = tmp_path / "m.txt"
    p.write_text("")
    with pytest.raises(MeshFormatError):
        load_spatial_mesh(p)
    p.write_text("3 1\n0 0 0\n1 0 0\n0 1 0\n0 1 5\n")
    with pytest.raises(MeshFormatError) as ei:
        load_spatial_mesh(p)
    assert ei.value.line == 5
    p.write_text("3 1\n0 0 0\n1 0 x\n0 1 0\n0 1 2\n")
    with pytest.raises(MeshFormatError, match="line 3"):
        load_spatial_mesh(p)


def test_open_mesh_warns(tmp_path):
    p = tmp_path / "tri.txt"
    p.write_text("# one triangle\n3 1\n0 0 0\n1 0 0\n0 1 0\n0 1 2\n")
    m = load_spatial_mesh(p)
    assert m.n_triangles == 1 and m.warnings


def test_tensor_mesh_indexing():
    st_mesh = build_tensor_mesh(generate_cube_surface(4), 0.25, 16)
    assert st_mesh.n_dofs == 3072
    assert st_mesh.global_index(1, 1) == 1
    assert np.isclose(st_mesh.h_t * st_mesh.n_timesteps, 0.25)
    with pytest.raises(ValueError):
        build_tensor_mesh(generate_cube_surface(1), 0.0, 4)


def test_paper_scale_count():
    class Fake:
        n_triangles = 1536

    assert build_tensor_mesh(Fake(), 1.0, 64).n_dofs == 98304


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 9), st.integers(1, 12), st.data())
def test_index_bijection(ex, et, data):
    m = build_tensor_mesh(generate_cube_surface(1), 1.0, et)
    kt = data.draw(st.integers(1, et))
    kx = data.draw(st.integers(1, m.n_space))
    assert m.element_of(m.global_index(kt, kx)) == (kt, kx)
    assert m.global_index(kt, kx) == (kt - 1) * m.n_space + kx


@pytest.mark.parametrize("et,ns,sizes", [(64, 16, [4] * 16), (5, 2, [3, 2]), (4, 4, [1] * 4)])
def test_slices_examples(et, ns, sizes):
    assert partition_time_slices(et, ns).sizes() == sizes


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 200), st.data())
def test_slices_partition(et, data):
    ns = data.draw(st.integers(1, et))
    p = partition_time_slices(et, ns)
    steps = [s for i in range(p.n_slices) for s in p.steps(i)]
    assert steps == list(range(et))
    assert max(p.sizes()) - min(p.sizes()) <= 1 and min(p.sizes()) >= 1
    assert all(p.slice_of(s) == i for i in range(ns) for s in p.steps(i))


def test_too_many_slices():
    with pytest.raises(ValueError):
        partition_time_slices(3, 4)
