"""Built-in surfaces and scenario assembly.

The generators are deterministic functions of their parameters and seed.
They stand in for scanned meshes: each scenario paints a few distant ROI
patches on an analytic surface whose exact SDF is known.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io
from .config import ConfigError, ScenarioConfig, dump_config, load_config
from .energy import EnergyWeights, Scene, TrajectoryObjective
from .sdf import CylinderSdf, GridSdf, PlaneSdf, Sdf, SphereSdf, TorusSdf
from .solvers import SolverConfig, init_straight_line, perturb_particles
from .surface import (
    PointCloudSurface,
    SpectralBasis,
    cached_spectral_basis,
    diffuse,
    target_coeffs,
)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# generators


def torus_points(n: int, major: float = 0.15, minor: float = 0.05, seed: int = 0) -> np.ndarray:
    """Area-uniform torus samples (rejection on the ring-radius density)."""
    rng = np.random.default_rng(seed)
    out = []
    have = 0
    while have < n:
        u, v, a = rng.random((3, 2 * n))
        u, v = 2 * np.pi * u, 2 * np.pi * v
        keep = a * (major + minor) <= major + minor * np.cos(v)
        u, v = u[keep], v[keep]
        ring = major + minor * np.cos(v)
        out.append(np.stack([ring * np.cos(u), ring * np.sin(u), minor * np.sin(v)], axis=1))
        have += len(u)
    return np.concatenate(out)[:n]


def sphere_points(n: int, radius: float = 0.1) -> np.ndarray:
    """Fibonacci lattice on the sphere."""
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    rho = np.sqrt(1.0 - z * z)
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    return radius * np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)


def cylinder_points(n: int, radius: float = 0.1, height: float = 0.16, seed: int = 0) -> np.ndarray:
    """Uniform samples on the side of a z-axis cylinder centred at the origin."""
    rng = np.random.default_rng(seed)
    u, h = rng.random((2, n))
    a = 2 * np.pi * u
    return np.stack([radius * np.cos(a), radius * np.sin(a), height * (h - 0.5)], axis=1)


def two_patch_points(n: int, length: float = 0.4, width: float = 0.2, seed: int = 0) -> np.ndarray:
    """Uniform samples on a flat ``length x width`` rectangle in z = 0."""
    rng = np.random.default_rng(seed)
    xy = rng.random((n, 2)) - 0.5
    return np.stack([length * xy[:, 0], width * xy[:, 1], np.zeros(n)], axis=1)


def generate_cloud(cfg) -> np.ndarray:
    c = cfg.cloud
    if c.generator == "torus":
        return torus_points(c.n_points, c.major_radius, c.minor_radius, c.seed)
    if c.generator == "sphere":
        return sphere_points(c.n_points, c.radius)
    if c.generator == "cylinder":
        return cylinder_points(c.n_points, c.radius, c.height, c.seed)
    if c.generator == "two_patch":
        return two_patch_points(c.n_points, c.length, c.width, c.seed)
    raise ConfigError("cloud.generator: required when cloud.source is 'generator'")


def analytic_sdf(cfg) -> Sdf:
    c = cfg.cloud
    if c.source != "generator":
        raise ConfigError("sdf.kind: 'analytic' needs a generated cloud; use 'grid' for file clouds")
    return {
        "torus": lambda: TorusSdf(c.major_radius, c.minor_radius),
        "sphere": lambda: SphereSdf(c.radius),
        "cylinder": lambda: CylinderSdf(c.radius),
        "two_patch": lambda: PlaneSdf((0.0, 0.0, 1.0), 0.0),
    }[c.generator]()


def paint_roi(points: np.ndarray, cfg, file_weights=None) -> np.ndarray:
    """Per-node ROI mass (unnormalized) from the ``roi`` section."""
    roi = cfg.roi
    n = len(points)
    if roi.mode == "nodes":
        w = np.zeros(n)
        bad = [i for i in roi.nodes if not 0 <= i < n]
        if bad or not roi.nodes:
            raise ConfigError(f"roi.nodes: indices must be in [0, {n - 1}] and non-empty")
        w[np.asarray(roi.nodes)] = 1.0
        return w
    if roi.mode == "file":
        if roi.path is not None:
            _, w = io.read_cloud(roi.path)
        else:
            w = file_weights
        if w is None or len(w) != n:
            raise ConfigError("roi: file mode needs per-node weights matching the cloud")
        return np.asarray(w, dtype=float)
    if not roi.patches:
        return np.ones(n)
    w = np.zeros(n)
    for patch in roi.patches:
        inside = np.linalg.norm(points - np.asarray(patch.center), axis=1) <= patch.radius
        w[inside] += patch.weight
    if not np.any(w > 0):
        raise ConfigError("roi.patches: no cloud node lies inside any patch")
    return w


# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Scenario:
    """A fully built scenario: config, scene, objective and initialization."""

    config: ScenarioConfig
    scene: Scene
    weights: EnergyWeights
    phi_raw: np.ndarray
    phi: np.ndarray
    basis_cached: bool

    @property
    def name(self) -> str:
        return self.config.name

    @property
    def surface(self) -> PointCloudSurface:
        return self.scene.surface

    @property
    def basis(self) -> SpectralBasis:
        return self.scene.basis

    def objective(self, jacobian: str = "analytic") -> TrajectoryObjective:
        return TrajectoryObjective(self.scene, self.weights, jacobian)

    def initial_trajectory(self) -> np.ndarray:
        return init_straight_line(self.surface, self.config.trajectory.n_steps)

    def initial_particles(self, seed: int) -> np.ndarray:
        s = self.config.solver
        return perturb_particles(self.initial_trajectory(), s.n_particles, s.noise_var, seed)

    def solver_config(self, method: str, verbose: bool = False) -> SolverConfig:
        s = self.config.solver
        return SolverConfig(
            method=method,
            step_size=s.step_size,
            max_iters=s.max_iters,
            profile=self.config.profile,
            stop_tol=s.stop_tol,
            kernel_length=s.kernel_length,
            n_particles=s.n_particles,
            noise_var=s.noise_var,
            damping_init=s.damping_init,
            damping_down=s.damping_down,
            damping_up=s.damping_up,
            ls_shrink=s.ls_shrink,
            ls_slope=s.ls_slope,
            ls_max_halvings=s.ls_max_halvings,
            kernel_mode=s.kernel_mode,
            verbose=verbose,
        )


def build_scenario(cfg: ScenarioConfig, cache=None) -> Scenario:
    file_weights = None
    if cfg.cloud.source == "file":
        if not cfg.cloud.path:
            raise ConfigError("cloud.path: required when cloud.source is 'file'")
        points, file_weights = io.read_cloud(cfg.cloud.path)
    else:
        points = generate_cloud(cfg)
    surface = PointCloudSurface.from_points(points, paint_roi(points, cfg, file_weights))

    sp = cfg.spectral
    if sp.n_basis >= surface.n_points:
        raise ConfigError(f"spectral.n_basis: S={sp.n_basis} must be below N={surface.n_points}")
    basis, cached = cached_spectral_basis(surface, sp.n_basis, sp.k_graph, sp.sigma_g, sp.lambda_exponent, cache)
    phi = diffuse(surface, basis, sp.tau_d, sp.beta)

    sdf = analytic_sdf(cfg) if cfg.sdf.kind == "analytic" else GridSdf.from_point_cloud(
        surface.points, cfg.sdf.resolution, cfg.sdf.n_neighbors
    )
    dep = cfg.deposition
    sigma_a = dep.sigma_a if dep.sigma_a is not None else 2.0 * surface.median_spacing()
    scene = Scene(
        surface=surface,
        basis=basis,
        sdf=sdf,
        target=target_coeffs(phi, basis),
        k_deposit=min(dep.k, surface.n_points),
        sigma_a=float(sigma_a),
        name=cfg.name,
    )
    weights = EnergyWeights(**cfg.weights.model_dump())
    return Scenario(cfg, scene, weights, np.asarray(surface.roi_weight), phi, cached)


def load_scenario(name_or_path, overrides=(), profile=None, cache=None, echo_dir=None) -> Scenario:
    """Validate, build, and optionally write the post-override config echo."""
    cfg = load_config(name_or_path, overrides, profile)
    scenario = build_scenario(cfg, cache)
    if echo_dir is not None:
        write_echo(cfg, echo_dir)
    return scenario


def write_echo(cfg: ScenarioConfig, out_dir, filename: str | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / (filename or f"{cfg.name}.config.yaml")
    path.write_text(dump_config(cfg))
    return path
