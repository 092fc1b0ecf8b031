import numpy as np
import pytest

from hpscatter.errors import (
    DegenerateTriangleError,
    EmptyBasisError,
    MeshError,
    MeshParseError,
    NonManifoldEdgeError,
)
from hpscatter.geometry import (
    SurfaceKind,
    TriangleMesh,
    build_rwg,
    classify_surface,
    geodesic_max_edge,
    load_mesh,
    make_cube,
    make_geodesic_sphere,
    make_plate,
    make_sphere,
    write_mesh,
)


def write_text(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return str(path)


def test_load_single_triangle(tmp_path):
    path = write_text(tmp_path, "one.tri", "# one triangle\n3 1\n0 0 0\n1 0 0\n0 1 0\n0 1 2\n")
    mesh = load_mesh(path)
    assert mesh.n_nodes == 3
    assert mesh.n_triangles == 1
    assert len(mesh.boundary_edges) == 3
    assert len(mesh.interior_edges) == 0


def test_load_two_triangles_sharing_an_edge(tmp_path):
    text = "4 2\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n0 1 2\n0 2 3\n"
    mesh = load_mesh(write_text(tmp_path, "pair.tri", text))
    assert len(mesh.interior_edges) == 1
    assert mesh.edges[mesh.interior_edges[0]].tolist() == [0, 2]


def test_repeated_node_is_degenerate(tmp_path):
    path = write_text(tmp_path, "bad.tri", "3 1\n0 0 0\n1 0 0\n0 1 0\n0 1 1\n")
    with pytest.raises(DegenerateTriangleError):
        load_mesh(path)


def test_zero_area_triangle_is_degenerate():
    nodes = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
    with pytest.raises(DegenerateTriangleError) as info:
        TriangleMesh(nodes, [[0, 1, 2]])
    assert info.value.triangle == 0


def test_non_manifold_edge():
    nodes = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1]], dtype=float)
    with pytest.raises(NonManifoldEdgeError) as info:
        TriangleMesh(nodes, [[0, 1, 2], [1, 0, 3], [0, 1, 4]])
    assert info.value.edge == (0, 1)


def test_parse_errors(tmp_path):
    with pytest.raises(MeshParseError):
        load_mesh(str(tmp_path / "missing.tri"))
    with pytest.raises(MeshParseError):
        load_mesh(write_text(tmp_path, "short.tri", "3 1\n0 0 0\n1 0 0\n"))
    with pytest.raises(MeshParseError):
        load_mesh(write_text(tmp_path, "junk.tri", "three one\n"))
    with pytest.raises(MeshError):
        load_mesh(write_text(tmp_path, "range.tri", "3 1\n0 0 0\n1 0 0\n0 1 0\n0 1 5\n"))


def test_obj_quads_are_fan_triangulated(tmp_path):
    text = "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n"
    mesh = load_mesh(write_text(tmp_path, "quad.obj", text))
    assert mesh.n_triangles == 2
    assert np.isclose(mesh.triangle_areas().sum(), 1.0)


def test_write_then_load_preserves_mesh(tmp_path, cube_mesh):
    path = str(tmp_path / "cube.tri")
    write_mesh(cube_mesh, path)
    loaded = load_mesh(path)
    assert np.array_equal(loaded.triangles, cube_mesh.triangles)
    assert np.array_equal(loaded.nodes, cube_mesh.nodes)
    assert "float64" not in (tmp_path / "cube.tri").read_text(encoding="utf-8")


def test_icosahedron_counts():
    mesh = make_sphere(1.0, 0.9)
    assert (mesh.n_nodes, mesh.n_triangles, mesh.n_edges) == (12, 20, 30)
    assert len(mesh.interior_edges) == 30
    assert classify_surface(mesh) is SurfaceKind.CLOSED


def test_one_subdivision_counts():
    mesh = make_sphere(1.0, 0.6)
    assert (mesh.n_nodes, mesh.n_triangles, mesh.n_edges) == (42, 80, 120)


def test_sphere_edge_bound_and_radii():
    radius, target = 1.0, 0.1
    mesh = make_sphere(radius, target)
    assert mesh.max_edge_length() <= 1.5 * target
    radii = np.linalg.norm(mesh.nodes, axis=1)
    assert np.max(np.abs(radii - radius)) <= 1e-9 * radius
    assert len(mesh.interior_edges) == 3 * mesh.n_triangles // 2
    assert mesh.is_consistently_oriented()
    assert mesh.signed_volume() > 0


def test_sphere_precondition():
    with pytest.raises(ValueError):
        make_sphere(1.0, 1.5)


@pytest.mark.parametrize("nu", [1, 2, 3, 5])
def test_geodesic_counts(nu):
    mesh = make_geodesic_sphere(0.5, nu)
    assert mesh.n_edges == 30 * nu * nu
    assert mesh.n_triangles == 20 * nu * nu
    assert np.isclose(mesh.max_edge_length(), geodesic_max_edge(0.5, nu))


def test_plate_counts():
    single = make_plate(1.0, 1)
    assert single.n_triangles == 2
    assert len(single.interior_edges) == 1
    double = make_plate(1.0, 2)
    assert double.n_triangles == 8
    assert len(double.interior_edges) == 8
    assert classify_surface(double) is SurfaceKind.OPEN
    assert np.allclose(double.nodes[:, 2], 0.0)
    assert np.allclose(double.triangle_normals(), [0.0, 0.0, 1.0])
    assert np.isclose(double.triangle_areas().sum(), 1.0)


def test_cube_counts_and_orientation():
    cube = make_cube(1.0, 1)
    assert cube.n_triangles == 12
    assert cube.n_edges == 18
    assert len(cube.interior_edges) == 18
    assert classify_surface(cube) is SurfaceKind.CLOSED
    assert cube.is_consistently_oriented()
    assert np.isclose(cube.signed_volume(), 1.0)


def test_rwg_counts():
    assert build_rwg(make_plate(1.0, 1)).n == 1
    assert build_rwg(make_sphere(1.0, 0.9)).n == 30
    assert build_rwg(make_cube(1.0, 1)).n == 18


def test_rwg_requires_interior_edges():
    mesh = TriangleMesh(np.eye(3), [[0, 1, 2]])
    with pytest.raises(EmptyBasisError):
        build_rwg(mesh)


def test_rwg_ordering_is_deterministic(cube_mesh):
    first = build_rwg(cube_mesh)
    second = build_rwg(cube_mesh)
    assert np.array_equal(first.edge_ids, second.edge_ids)
    assert np.array_equal(first.triangles, second.triangles)
    pairs = [tuple(cube_mesh.edges[e]) for e in first.edge_ids]
    assert pairs == sorted(pairs)


def test_rwg_function_fields(cube_basis):
    mesh = cube_basis.mesh
    for f in cube_basis:
        assert f.plus_triangle != f.minus_triangle
        assert f.length > 0
        edge = set(mesh.edges[f.edge].tolist())
        assert edge <= set(mesh.triangles[f.plus_triangle].tolist())
        assert edge <= set(mesh.triangles[f.minus_triangle].tolist())
        assert f.plus_free_vertex not in edge
        assert f.minus_free_vertex not in edge


def test_rwg_divergence_integrates_to_zero(cube_basis):
    # the charge of every RWG function sums to zero over its two triangles
    areas = cube_basis.mesh.triangle_areas()[cube_basis.triangles]
    charge = (cube_basis.divergences() * areas).sum(axis=1)
    assert np.allclose(charge, 0.0)


def test_translation_keeps_topology(cube_mesh):
    moved = cube_mesh.translated([1.0, -2.0, 0.5])
    assert np.array_equal(moved.edges, cube_mesh.edges)
    assert np.allclose(moved.triangle_areas(), cube_mesh.triangle_areas())
