"""Trajectory energies in residual (sum-of-squares) form.

All four terms are written as ``V = 0.5 * ||r||^2`` with ``sqrt(w)`` folded
into the residuals, so one residual vector and its Jacobian serve the
energy, the gradient ``J^T r`` and the Gauss-Newton matrix ``J^T J``.

Jacobians are taken with respect to right perturbations of each pose and
laid out timestep-major: column ``6*t + j`` is twist coordinate ``j`` of
pose ``t`` (``j < 3`` rotation, ``j >= 3`` translation).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import liegroup as lg
from .sdf import Sdf
from .surface import PointCloudSurface, SpectralBasis, deposit, target_coeffs

_E3 = np.array([0.0, 0.0, 1.0])


class NonFiniteError(ValueError):
    pass


@dataclass(frozen=True)
class EnergyWeights:
    w_s: float = 5.0
    w_a: float = 3.0
    w_f: float = 3.0
    w_e: float = 0.1

    def __post_init__(self):
        if min(self.w_s, self.w_a, self.w_f, self.w_e) < 0:
            raise ValueError("energy weights must be non-negative")

    def scaled(self, **factors) -> "EnergyWeights":
        d = asdict(self)
        d.update({k: d[k] * v for k, v in factors.items()})
        return EnergyWeights(**d)


@dataclass(frozen=True)
class EnergyReport:
    V_s: float
    V_a: float
    V_f: float
    V_e: float
    V_total: float

    @classmethod
    def from_terms(cls, V_s, V_a, V_f, V_e) -> "EnergyReport":
        V_s, V_a, V_f, V_e = float(V_s), float(V_a), float(V_f), float(V_e)
        return cls(V_s, V_a, V_f, V_e, V_s + V_a + V_f + V_e)

    def as_dict(self) -> dict:
        return asdict(self)

    def csv_row(self, scenario: str, method: str, seed: int, iterations: int, seconds: float) -> list:
        return [scenario, method, seed, self.V_s, self.V_a, self.V_f, self.V_e, self.V_total, iterations, seconds]


@dataclass(frozen=True, eq=False)
class Scene:
    """Everything an energy evaluation reads; immutable once built."""

    surface: PointCloudSurface
    basis: SpectralBasis
    sdf: Sdf
    target: np.ndarray
    k_deposit: int = 60
    sigma_a: float = 0.01
    name: str = ""


def _check_traj(traj) -> np.ndarray:
    traj = np.asarray(traj, dtype=float)
    if traj.ndim != 3 or traj.shape[1:] != (4, 4):
        raise ValueError(f"trajectory must be (N_t, 4, 4), got {traj.shape}")
    return traj


# ---------------------------------------------------------------------------
# per-term residuals; each returns (r, J) with J=None unless requested


def smoothness_residual(traj, w_s: float, jacobian: bool = False):
    traj = _check_traj(traj)
    n = len(traj)
    if n < 3:
        raise ValueError("smoothness needs at least three poses")
    d = lg.ominus(traj[1:], traj[:-1])
    sw = np.sqrt(w_s)
    r = sw * (d[1:] - d[:-1])
    if not jacobian:
        return r.ravel(), None
    jr = lg.right_jacobian_inv(d)  # d d_t / d x_{t+1}
    jl = lg.left_jacobian_inv(d)  # -d d_t / d x_t
    J = np.zeros((n - 2, 6, n, 6))
    k = np.arange(n - 2)
    J[k, :, k + 2, :] = jr[1:]
    J[k, :, k + 1, :] = -jl[1:] - jr[:-1]
    J[k, :, k, :] = jl[:-1]
    return r.ravel(), sw * J.reshape(6 * (n - 2), 6 * n)


def align_residual(traj, sdf: Sdf, w_a: float, jacobian: bool = False):
    traj = _check_traj(traj)
    n = len(traj)
    R, p = traj[:, :3, :3], traj[:, :3, 3]
    _, normal = sdf.value_grad(p)
    z = R[:, :, 2]
    sw = np.sqrt(w_a)
    r = sw * (np.einsum("ti,ti->t", z, normal) - 1.0)
    if not jacobian:
        return r, None
    Rt_n = np.einsum("tji,tj->ti", R, normal)
    N = sdf.normal_jacobian(p)
    J = np.zeros((n, n, 6))
    J[np.arange(n), np.arange(n), :3] = np.cross(_E3, Rt_n)
    J[np.arange(n), np.arange(n), 3:] = np.einsum("tji,tkj,tk->ti", R, N, z)
    return r, sw * J.reshape(n, 6 * n)


def attach_residual(traj, sdf: Sdf, w_f: float, jacobian: bool = False):
    traj = _check_traj(traj)
    n = len(traj)
    p = traj[:, :3, 3]
    value, normal = sdf.value_grad(p)
    sw = np.sqrt(w_f)
    r = sw * value
    if not jacobian:
        return r, None
    J = np.zeros((n, n, 6))
    J[np.arange(n), np.arange(n), 3:] = np.einsum("tji,tj->ti", traj[:, :3, :3], normal)
    return r, sw * J.reshape(n, 6 * n)


def ergodic_residual(traj, scene: Scene, w_e: float, jacobian: bool = False, knn=None):
    """Spectral coverage residual ``sqrt(w_e * Lambda) * (c(X) - c)``.

    ``knn`` freezes the neighbor assignment (an ``(N_t, K)`` index array);
    otherwise it is recomputed from the current positions.
    """
    traj = _check_traj(traj)
    n = len(traj)
    basis = scene.basis
    dep = deposit(traj[:, :3, 3], scene.surface, scene.k_deposit, scene.sigma_a, idx=knn)
    c = target_coeffs(dep.phi, basis)
    scale = np.sqrt(w_e * basis.lambda_weights)
    r = scale * (c - scene.target)
    if not jacobian:
        return r, None
    # d w_tk / d p_t = -w_tk (p_t - p_k) / sigma^2 ; phi = u / s
    a = -dep.weights[..., None] * dep.diff / scene.sigma_a**2
    E = basis.eigvecs[dep.idx]  # (N_t, K, S)
    dc = (np.matmul(E.transpose(0, 2, 1), a) - c[None, :, None] * a.sum(axis=1)[:, None, :]) / dep.total
    J = np.zeros((len(c), n, 6))
    J[:, :, 3:] = np.matmul(dc, traj[:, :3, :3]).transpose(1, 0, 2)
    return r, scale[:, None] * J.reshape(len(c), 6 * n)


# ---------------------------------------------------------------------------
# individual energies


def eval_smoothness(traj, w_s: float) -> float:
    r, _ = smoothness_residual(traj, w_s)
    return 0.5 * float(r @ r)


def eval_align(traj, sdf: Sdf, w_a: float) -> float:
    r, _ = align_residual(traj, sdf, w_a)
    return 0.5 * float(r @ r)


def eval_attach(traj, sdf: Sdf, w_f: float) -> float:
    r, _ = attach_residual(traj, sdf, w_f)
    return 0.5 * float(r @ r)


def eval_ergodic(traj, scene: Scene, w_e: float) -> float:
    r, _ = ergodic_residual(traj, scene, w_e)
    return 0.5 * float(r @ r)


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Residual:
    r: np.ndarray
    J: np.ndarray | None
    slices: dict

    def report(self) -> EnergyReport:
        return EnergyReport.from_terms(
            *(0.5 * float(self.r[self.slices[k]] @ self.r[self.slices[k]]) for k in ("s", "a", "f", "e"))
        )


def residuals(traj, scene: Scene, weights: EnergyWeights, jacobian: bool = False, knn=None) -> Residual:
    """Stacked residual ``[smooth, align, attach, ergodic]`` (and its Jacobian)."""
    traj = _check_traj(traj)
    parts = [
        smoothness_residual(traj, weights.w_s, jacobian),
        align_residual(traj, scene.sdf, weights.w_a, jacobian),
        attach_residual(traj, scene.sdf, weights.w_f, jacobian),
        ergodic_residual(traj, scene, weights.w_e, jacobian, knn),
    ]
    slices, start = {}, 0
    for key, (r, _) in zip("safe", parts):
        slices[key] = slice(start, start + len(r))
        start += len(r)
    r = np.concatenate([p[0] for p in parts])
    J = np.vstack([p[1] for p in parts]) if jacobian else None
    return Residual(r, J, slices)


def total_energy(traj, scene: Scene, weights: EnergyWeights) -> EnergyReport:
    return residuals(traj, scene, weights).report()


def fd_jacobian(fun, traj, h: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of ``fun(traj) -> vector`` w.r.t. right perturbations."""
    traj = _check_traj(traj)
    n = len(traj)
    cols = []
    for t in range(n):
        for j in range(6):
            e = np.zeros(6)
            e[j] = h
            plus, minus = traj.copy(), traj.copy()
            plus[t] = lg.oplus(traj[t], e)
            minus[t] = lg.oplus(traj[t], -e)
            cols.append((fun(plus) - fun(minus)) / (2.0 * h))
    return np.stack(cols, axis=-1)


def frozen_knn(traj, scene: Scene) -> np.ndarray:
    return scene.surface.knn(np.asarray(traj)[:, :3, 3], scene.k_deposit)[1]


def residual_jacobian(traj, scene: Scene, weights: EnergyWeights, method: str = "analytic") -> Residual:
    """Residual and Jacobian with the KNN assignment frozen at ``traj``."""
    knn = frozen_knn(traj, scene)
    if method == "analytic":
        return residuals(traj, scene, weights, jacobian=True, knn=knn)
    if method != "fd":
        raise ValueError(f"unknown jacobian method {method!r}")
    base = residuals(traj, scene, weights, knn=knn)
    J = fd_jacobian(lambda x: residuals(x, scene, weights, knn=knn).r, traj)
    return Residual(base.r, J, base.slices)


def _check_finite_grad(g: np.ndarray) -> np.ndarray:
    bad = ~np.all(np.isfinite(g.reshape(-1, 6)), axis=1)
    if np.any(bad):
        raise NonFiniteError(f"non-finite gradient at timestep {int(np.flatnonzero(bad)[0])}")
    return g


def grad_energy(traj, scene: Scene, weights: EnergyWeights, method: str = "analytic") -> np.ndarray:
    """Tangent-space gradient of V, flattened timestep-major to ``6 * N_t``."""
    res = residual_jacobian(traj, scene, weights, method)
    return _check_finite_grad(res.J.T @ res.r)


def ridge(JtJ: np.ndarray) -> float:
    return max(1e-8 * float(np.trace(JtJ)) / JtJ.shape[0], 1e-12)


def gauss_newton_matrix(J: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(J)):
        bad = np.argwhere(~np.isfinite(J))[0]
        raise NonFiniteError(f"non-finite Jacobian entry at residual {bad[0]}, timestep {bad[1] // 6}")
    H = J.T @ J
    H[np.diag_indices_from(H)] += ridge(H)
    return H


def gn_hessian(traj, scene: Scene, weights: EnergyWeights, method: str = "analytic") -> np.ndarray:
    return gauss_newton_matrix(residual_jacobian(traj, scene, weights, method).J)


class TrajectoryObjective:
    """The scene energy packaged for the solvers.

    Solvers only need ``energy``, ``report`` and ``linearize``; any object with
    the same three methods can be optimized.
    """

    def __init__(self, scene: Scene, weights: EnergyWeights, jacobian: str = "analytic"):
        self.scene = scene
        self.weights = weights
        self.jacobian = jacobian

    def energy(self, traj) -> float:
        r = residuals(traj, self.scene, self.weights).r
        return 0.5 * float(r @ r)

    def report(self, traj) -> EnergyReport:
        return total_energy(traj, self.scene, self.weights)

    def linearize(self, traj):
        res = residual_jacobian(traj, self.scene, self.weights, self.jacobian)
        return res.r, res.J
