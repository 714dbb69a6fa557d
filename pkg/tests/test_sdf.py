import numpy as np
import pytest

from stein_coverage import sdf as S
from stein_coverage.scenarios import cylinder_points, sphere_points, torus_points


def test_sphere_example():
    v, g = S.SphereSdf(1.0).value_grad(np.array([2.0, 0, 0]))
    assert v == pytest.approx(1.0)
    assert np.allclose(g, [1, 0, 0])


def test_torus_example():
    assert S.TorusSdf(2.0, 0.5).value(np.array([2.5, 0, 0])) == pytest.approx(0.0, abs=1e-15)


@pytest.mark.parametrize(
    "sdf,pts",
    [
        (S.SphereSdf(0.1), sphere_points(500, 0.1)),
        (S.TorusSdf(0.15, 0.05), torus_points(500, 0.15, 0.05)),
        (S.CylinderSdf(0.1), cylinder_points(500, 0.1)),
    ],
)
def test_analytic_zero_on_surface(sdf, pts):
    assert np.max(np.abs(sdf.value(pts))) < 1e-9


@pytest.mark.parametrize(
    "sdf",
    [
        S.SphereSdf(0.3),
        S.TorusSdf(0.5, 0.2),
        S.CylinderSdf(0.4),
        S.PlaneSdf((1.0, 2.0, 2.0), 0.1),
        S.RoundedBoxSdf((0.3, 0.2, 0.1), 0.05),
    ],
)
def test_unit_gradient_and_fd(sdf):
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, size=(200, 3))
    g = sdf.grad(x)
    assert np.allclose(np.linalg.norm(g, axis=1), 1.0, atol=1e-6)
    # gradient is the derivative of the value (away from kinks)
    h = 1e-6
    fd = np.stack([(sdf.value(x + h * e) - sdf.value(x - h * e)) / (2 * h) for e in np.eye(3)], axis=1)
    ok = np.abs(np.linalg.norm(fd, axis=1) - 1) < 1e-4
    assert ok.mean() > 0.9
    assert np.allclose(fd[ok], g[ok], atol=1e-4)


def test_medial_axis_error():
    with pytest.raises(S.MedialAxisError):
        S.SphereSdf(1.0).grad(np.zeros(3))


def test_normal_jacobian_sphere():
    x = np.array([0.3, -0.2, 0.4])
    r = np.linalg.norm(x)
    n = x / r
    ref = (np.eye(3) - np.outer(n, n)) / r
    assert np.allclose(S.SphereSdf(1.0).normal_jacobian(x), ref, atol=1e-6)


def test_grid_sdf_matches_sphere():
    pts = sphere_points(4000, 0.5)
    grid = S.GridSdf.from_point_cloud(pts, resolution=48)
    rng = np.random.default_rng(1)
    d = rng.normal(size=(300, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    x = d * rng.uniform(0.3, 0.65, size=(300, 1))
    err = np.abs(grid.value(x) - S.SphereSdf(0.5).value(x))
    assert err.max() < 2 * grid.spacing


def test_grid_estimated_normals_outward():
    pts = sphere_points(1000, 1.0)
    n = S.estimate_normals(pts, 20)
    assert np.all(np.einsum("ij,ij->i", n, pts) > 0.9)


def test_grid_clamp_flag_and_roundtrip(tmp_path):
    grid = S.GridSdf.from_point_cloud(sphere_points(1000, 0.5), resolution=16)
    s = grid.query(np.array([[0.0, 0.0, 0.5], [10.0, 0.0, 0.0]]))
    assert list(s.clamped) == [False, True]
    assert np.allclose(np.linalg.norm(s.grad, axis=1), 1.0)
    grid.save(tmp_path / "g.npz")
    back = S.GridSdf.load(tmp_path / "g.npz")
    assert np.array_equal(back.values, grid.values)
    assert np.array_equal(back.origin, grid.origin) and back.spacing == grid.spacing


def test_grid_trilinear_exact_for_linear_field():
    ax = np.arange(5.0)
    X, Y, Z = np.meshgrid(ax, ax, ax, indexing="ij")
    grid = S.GridSdf((0, 0, 0), 1.0, 2 * X - Y + 0.5 * Z)
    x = np.random.default_rng(2).uniform(0, 4, size=(50, 3))
    assert np.allclose(grid.value(x), 2 * x[:, 0] - x[:, 1] + 0.5 * x[:, 2], atol=1e-12)
    assert np.allclose(grid.grad(x), np.array([2, -1, 0.5]) / np.linalg.norm([2, -1, 0.5]))
