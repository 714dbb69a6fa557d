import numpy as np
import pytest

from stein_coverage import liegroup as lg


@pytest.fixture(autouse=True, scope="session")
def _isolated_cache(tmp_path_factory):
    # keep the spectral-basis cache out of the user's home directory
    mp = pytest.MonkeyPatch()
    mp.setenv("STEIN_COVERAGE_CACHE", str(tmp_path_factory.mktemp("basis_cache")))
    yield
    mp.undo()


def random_twist(rng, n=None, max_angle=np.pi - 0.1, max_trans=1.0):
    shape = (6,) if n is None else (n, 6)
    xi = rng.normal(size=shape)
    w = xi[..., :3]
    ang = rng.uniform(0, max_angle, size=shape[:-1])
    xi[..., :3] = w / np.linalg.norm(w, axis=-1, keepdims=True) * ang[..., None]
    xi[..., 3:] *= max_trans
    return xi


def random_pose(rng, n=None):
    return lg.exp(random_twist(rng, n))


def make_scene(points, weights=None, n_basis=30, sdf=None, k=20, sigma_a=None, tau_d=20.0):
    from stein_coverage import surface as sf
    from stein_coverage.energy import Scene

    cloud = sf.PointCloudSurface.from_points(points, weights)
    basis = sf.spectral_basis(sf.build_graph_laplacian(cloud, 8), n_basis)
    phi = sf.diffuse(cloud, basis, tau_d, 0.5)
    sigma = sigma_a if sigma_a is not None else 2.0 * cloud.median_spacing()
    return Scene(cloud, basis, sdf, sf.target_coeffs(phi, basis), min(k, cloud.n_points), sigma, "test")


@pytest.fixture(scope="session")
def torus_scene():
    from stein_coverage.scenarios import torus_points
    from stein_coverage.sdf import TorusSdf

    pts = torus_points(500, 0.15, 0.05, seed=2)
    w = np.exp(-np.sum((pts - [0.2, 0, 0]) ** 2, axis=1) / 0.002)
    return make_scene(pts, w, 30, TorusSdf(0.15, 0.05), k=20)


def near_surface_traj(scene, rng, n_t=8, jitter=0.01, rot=0.4):
    """Poses near random cloud nodes with random orientations."""
    idx = rng.choice(scene.surface.n_points, n_t, replace=False)
    P = lg.exp(random_twist(rng, n_t, max_angle=rot, max_trans=0.0))
    P[:, :3, 3] = scene.surface.points[idx] + jitter * rng.normal(size=(n_t, 3))
    return P


# small variants of the built-in scenarios that keep CLI and bench tests fast
TINY = [
    "cloud.n_points=400",
    "spectral.n_basis=20",
    "trajectory.n_steps=8",
    "solver.n_particles=3",
    "solver.max_iters=3",
    "bench.seeds=[0, 1]",
]


@pytest.fixture(scope="session")
def tiny_two_patch():
    from stein_coverage.scenarios import load_scenario

    return load_scenario("two_patch", TINY)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
