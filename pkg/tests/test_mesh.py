import csv
import math

import numpy as np
import pytest

from app.services.mesh import (
    Field,
    Mesh,
    build_mesh,
    build_mesh_1d,
    build_mesh_rect_2d,
    write_field_csv,
    write_mesh_csv,
)


def test_mesh_1d_layout():
    mesh = build_mesh_1d(10)
    assert mesh.dim == 1
    assert mesh.n_nodes == 11
    assert mesh.n_elements == 10
    assert mesh.measure == pytest.approx(1.0)
    assert list(mesh.boundary_nodes) == [0, 10]
    assert len(mesh.interior_nodes) == 9
    assert mesh.h == pytest.approx(0.1)


def test_mesh_2d_layout():
    mesh = build_mesh_rect_2d(4, 3)
    assert mesh.dim == 2
    assert mesh.n_nodes == 20
    assert mesh.n_elements == 24
    assert mesh.measure == pytest.approx(1.0)
    assert len(mesh.boundary_nodes) == 2 * (4 + 3)
    assert np.all(mesh.volumes > 0.0)


def test_build_mesh_rejects_bad_sizes():
    with pytest.raises(ValueError):
        build_mesh_1d(1)
    with pytest.raises(ValueError):
        build_mesh_rect_2d(1, 4)
    with pytest.raises(ValueError):
        build_mesh(3, n=4)


def test_degenerate_element_rejected():
    with pytest.raises(ValueError):
        Mesh(np.array([0.0, 0.0, 1.0]), np.array([[0, 1], [1, 2]]), [0, 2])


def test_mesh_arrays_are_read_only(mesh_1d):
    with pytest.raises(ValueError):
        mesh_1d.nodes[0, 0] = 5.0


def test_gradient_of_linear_function(mesh_1d, mesh_2d):
    g1 = mesh_1d.gradient(3.0 * mesh_1d.nodes[:, 0])
    np.testing.assert_allclose(g1, 3.0)
    x, y = mesh_2d.nodes[:, 0], mesh_2d.nodes[:, 1]
    g2 = mesh_2d.gradient(x + 2.0 * y)
    np.testing.assert_allclose(g2[:, 0], 1.0, atol=1e-12)
    np.testing.assert_allclose(g2[:, 1], 2.0, atol=1e-12)


@pytest.mark.parametrize("mode", ["nodal", "gauss"])
def test_quadrature_weights_sum_to_measure(mesh_1d, mesh_2d, mode):
    for mesh in (mesh_1d, mesh_2d):
        _, weights = mesh.quad_rule(mode)
        assert weights.sum() == pytest.approx(mesh.measure)


def test_gauss_rule_integrates_p1_interpolant_exactly(mesh_2d):
    coeffs = np.sin(mesh_2d.nodes[:, 0] + mesh_2d.nodes[:, 1])
    values = mesh_2d.at_quadrature(coeffs, "gauss")
    _, weights = mesh_2d.quad_rule("gauss")
    # vertex average times area is exact for a P1 interpolant
    exact = float(np.sum(mesh_2d.volumes * coeffs[mesh_2d.elements].mean(axis=1)))
    assert float(np.sum(weights * values)) == pytest.approx(exact, rel=1e-12)


def test_unknown_quadrature_mode(mesh_1d):
    with pytest.raises(ValueError):
        mesh_1d.quad_rule("simpson")


def test_describe_reports_mesh_size(mesh_1d, mesh_2d):
    info = mesh_1d.describe()
    assert (info["dim"], info["n_nodes"], info["n_elements"]) == (1, 65, 64)
    assert info["h"] == pytest.approx(1.0 / 64)
    assert info["measure"] == pytest.approx(1.0)
    assert mesh_2d.describe()["h"] == pytest.approx(mesh_2d.h)


def test_field_validation(mesh_1d):
    with pytest.raises(ValueError):
        Field(mesh_1d, np.ones(mesh_1d.n_nodes))
    with pytest.raises(ValueError):
        Field(mesh_1d, np.zeros(mesh_1d.n_nodes - 1))
    coeffs = np.zeros(mesh_1d.n_nodes)
    coeffs[3] = np.nan
    with pytest.raises(ValueError):
        Field(mesh_1d, coeffs)


def test_field_arithmetic(mesh_1d):
    u = mesh_1d.bubble()
    v = u.scaled(2.0)
    np.testing.assert_allclose((v - u).coeffs, u.coeffs)
    np.testing.assert_allclose((u + u).coeffs, v.coeffs)
    assert u.copy().coeffs is not u.coeffs
    assert u.sup_norm() == pytest.approx(0.25)


def test_l2_norm_of_sine():
    mesh = build_mesh_1d(200)
    u = mesh.field_from_function(lambda x: np.sin(np.pi * x[:, 0]))
    assert u.l2_norm() == pytest.approx(math.sqrt(0.5), rel=1e-3)
    assert u.l2_distance(u) == 0.0


def test_random_field_is_reproducible_and_vanishes_on_boundary(mesh_2d):
    a = mesh_2d.random_field(np.random.default_rng(7))
    b = mesh_2d.random_field(np.random.default_rng(7))
    np.testing.assert_array_equal(a.coeffs, b.coeffs)
    assert np.all(a.coeffs[mesh_2d.boundary_mask] == 0.0)
    assert np.all(mesh_2d.random_field(np.random.default_rng(8), nonnegative=True).coeffs >= 0.0)


def test_write_field_csv(tmp_path, mesh_2d):
    u = mesh_2d.bubble()
    path = tmp_path / "u.csv"
    write_field_csv({"u": u, "w": u.scaled(2.0)}, path)
    with open(path) as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["node_id", "x", "y", "u", "w"]
    assert len(rows) == mesh_2d.n_nodes + 1
    k = int(mesh_2d.interior_nodes[0])
    assert float(rows[k + 1][4]) == 2.0 * float(rows[k + 1][3])


def test_write_mesh_csv(tmp_path, mesh_1d):
    write_mesh_csv(mesh_1d, tmp_path)
    with open(tmp_path / "mesh_elements.csv") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["element_id", "v0", "v1"]
    assert len(rows) == mesh_1d.n_elements + 1


@pytest.mark.parametrize("nx, nodes, triangles, boundary", [(2, 9, 8, 8), (3, 16, 18, 12)])
def test_small_square_meshes(nx, nodes, triangles, boundary):
    mesh = build_mesh_rect_2d(nx, nx)
    assert (mesh.n_nodes, mesh.n_elements, len(mesh.boundary_nodes)) == (nodes, triangles, boundary)


def test_mesh_measures():
    np.testing.assert_allclose(build_mesh_1d(2).nodes[:, 0], [0.0, 0.5, 1.0])
    assert abs(build_mesh_1d(100).volumes.sum() - 1.0) <= 1e-14
    assert abs(build_mesh_rect_2d(10, 10).volumes.sum() - 1.0) <= 1e-13
