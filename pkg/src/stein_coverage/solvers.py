"""Trajectory optimizers over SE(3) particles.

* ``gn``        manifold Gauss-Newton with Armijo backtracking and adaptive damping
* ``batch_gn``  independent GN runs from perturbed copies of the initialization
* ``se``        fixed-step SE(3) SVGD (score + kernel repulsion, parallel transported)
* ``tsvec``     SE(3) SVGD preconditioned by kernel-averaged Gauss-Newton matrices
* ``pgd``       Euclidean gradient descent on (translation, quaternion) with
                re-normalization; the manifold-unaware baseline

Particles are ``(N_p, N_t, 4, 4)`` arrays; tangent fields are ``(N_t, 6)``
per particle, flattened timestep-major where a solver needs a vector.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg
from scipy.spatial.distance import cdist

from . import liegroup as lg
from .energy import EnergyReport, gauss_newton_matrix, ridge
from .sdf import MedialAxisError
from .surface import PointCloudSurface

# Relative rotations closer than this to pi are treated as kernel-disconnected.
FAR_ANGLE_MARGIN = 1e-3
METHODS = ("gn", "batch_gn", "se", "tsvec", "pgd")
DEFAULT_STEP = {"gn": 1.0, "batch_gn": 1.0, "pgd": 1.0, "se": 0.02, "tsvec": 0.1}
DEFAULT_ITERS = {
    "desk": {"gn": 200, "batch_gn": 200, "pgd": 500, "se": 2000, "tsvec": 200},
    "paper": {"gn": 1000, "batch_gn": 1000, "pgd": 1000, "se": 9999, "tsvec": 1000},
}


class OverlapError(ValueError):
    """Two distinct particles coincide at some timestep."""


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    method: str = "tsvec"
    step_size: float | None = None
    max_iters: int | None = None
    profile: str = "desk"
    stop_tol: float = 1e-4
    kernel_length: float = 0.05
    n_particles: int = 16
    noise_var: float = 0.005
    damping_init: float = 1e-3
    damping_down: float = 0.5
    damping_up: float = 4.0
    ls_shrink: float = 0.5
    ls_slope: float = 1e-4
    ls_max_halvings: int = 20
    kernel_mode: str = "per_step"
    max_rotation_step: float = np.pi / 2
    verbose: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.kernel_length <= 0:
            raise ValueError("kernel_length must be positive")
        if self.kernel_mode not in ("per_step", "trajectory"):
            raise ValueError("kernel_mode must be 'per_step' or 'trajectory'")
        if self.profile not in DEFAULT_ITERS:
            raise ValueError(f"unknown profile {self.profile!r}")

    @property
    def step(self) -> float:
        return DEFAULT_STEP[self.method] if self.step_size is None else float(self.step_size)

    @property
    def iters(self) -> int:
        return DEFAULT_ITERS[self.profile][self.method] if self.max_iters is None else int(self.max_iters)


@dataclass
class SolveReport:
    method: str
    status: str
    iterations: int
    trace: list
    initial_energy: float
    final: list
    best_index: int
    wall_time: float
    particles: np.ndarray = field(repr=False)

    @property
    def best(self) -> EnergyReport:
        return self.final[self.best_index]

    @property
    def best_trajectory(self) -> np.ndarray:
        return self.particles[self.best_index]

    def to_dict(self, include_particles: bool = False) -> dict:
        d = {
            "method": self.method,
            "status": self.status,
            "iterations": self.iterations,
            "wall_time": self.wall_time,
            "initial_energy": self.initial_energy,
            "best_index": self.best_index,
            "best": self.best.as_dict(),
            "final": [f.as_dict() for f in self.final],
            "trace": list(self.trace),
            "best_trajectory": self.best_trajectory.reshape(-1, 16).tolist(),
        }
        if include_particles:
            d["particles"] = self.particles.reshape(len(self.particles), -1, 16).tolist()
        return d


# ---------------------------------------------------------------------------
# initialization


def init_straight_line(surface: PointCloudSurface, n_steps: int) -> np.ndarray:
    """Straight line between the two most distant ROI nodes, identity rotations."""
    if n_steps < 2:
        raise ValueError("need at least two poses")
    roi = np.flatnonzero(surface.roi_weight > 0)
    if len(roi) < 2:
        raise ValueError("need at least two ROI nodes with positive weight")
    pts = surface.points[roi]
    if len(pts) > 3000:
        from scipy.spatial import ConvexHull

        hull = ConvexHull(pts).vertices
        roi, pts = roi[hull], pts[hull]
    i, j = np.unravel_index(int(np.argmax(cdist(pts, pts))), (len(pts), len(pts)))
    a, b = pts[i], pts[j]
    s = np.linspace(0.0, 1.0, n_steps)[:, None]
    traj = np.tile(np.eye(4), (n_steps, 1, 1))
    traj[:, :3, 3] = (1.0 - s) * a + s * b
    traj[0, :3, 3], traj[-1, :3, 3] = a, b
    return traj


def perturb_particles(traj, n_particles: int, noise_var: float, seed: int) -> np.ndarray:
    """Copies of ``traj`` with per-pose twist noise; particle 0 is left untouched.

    Noise for particle ``i`` is drawn from ``default_rng([seed, i])`` as an
    ``(N_t, 6)`` block, so it is a fixed function of ``(seed, i, t)``.
    """
    traj = np.asarray(traj, dtype=float)
    if n_particles < 1:
        raise ValueError("n_particles must be >= 1")
    if n_particles > 1 and noise_var <= 0:
        raise ValueError("noise_var must be positive when n_particles > 1")
    out = np.empty((n_particles,) + traj.shape)
    out[0] = traj
    std = np.sqrt(noise_var)
    for i in range(1, n_particles):
        eps = np.random.default_rng([seed, i]).normal(scale=std, size=(len(traj), 6))
        out[i] = lg.oplus(traj, eps)
    return out


# ---------------------------------------------------------------------------
# kernel


def traj_kernel(X, Y, l: float) -> float:
    d = lg.ominus(np.asarray(X), np.asarray(Y))
    return float(np.sum(np.exp(-np.einsum("ti,ti->t", d, d) / l)))


def _kernel_grad_from_diff(d: np.ndarray, l: float):
    k = np.exp(-np.einsum("...i,...i->...", d, d) / l)
    JtD = np.einsum("...ji,...j->...i", lg.right_jacobian_inv(d), d)
    return k, (-2.0 / l) * k[..., None] * JtD


def kernel_grad1(X, Y, l: float) -> np.ndarray:
    """Tangent gradient of ``traj_kernel`` w.r.t. each pose of ``X``, ``(N_t, 6)``."""
    d = lg.ominus(np.asarray(X), np.asarray(Y))
    return _kernel_grad_from_diff(d, l)[1]


@dataclass(frozen=True)
class Interactions:
    """Pairwise quantities for source ``i`` and target ``j`` (axes 0 and 1)."""

    k: np.ndarray  # (N, N, T) per-step kernel values
    transport: np.ndarray  # (N, N, T, 6, 6) Ad(x_j^-1 x_i)
    grad_k: np.ndarray  # (N, N, T, 6) kernel gradient, already transported to target j


def interactions(particles, l: float) -> Interactions:
    """Kernel values, transports and transported kernel gradients for all pairs.

    Pairs whose relative rotation sits at the log branch cut (angle near pi)
    get ``k = 0`` and a zero kernel gradient; the exact kernel there is below
    ``exp(-(pi - 1e-3)^2 / l)``, which is negligible for any usable length scale.
    """
    P = np.asarray(particles, dtype=float)
    n = len(P)
    for i in range(n):
        for j in range(i + 1, n):
            same = np.all(P[i] == P[j], axis=(-2, -1))
            if np.any(same):
                t = int(np.flatnonzero(same)[0])
                raise OverlapError(
                    f"particles {i} and {j} coincide at timestep {t}; re-noise the particle set"
                )
    rel = lg.inverse(P)[None, :] @ P[:, None]  # rel[i, j] = x_j^-1 x_i
    eye = np.arange(n)
    rel[eye, eye] = np.eye(4)
    far = lg.rotation_angle(rel) >= np.pi - FAR_ANGLE_MARGIN
    d = lg.log(np.where(far[..., None, None], np.eye(4), rel))
    k, gk = _kernel_grad_from_diff(d, l)
    k = np.where(far, 0.0, k)
    gk = np.where(far[..., None], 0.0, gk)
    Ad = lg.adjoint(rel)
    return Interactions(k, Ad, np.einsum("ijtab,ijtb->ijta", Ad, gk))


def svgd_direction(particles, grads, l: float, mode: str = "per_step", inter: Interactions | None = None):
    """SE(3) Stein direction for every particle, ``(N, N_t, 6)``.

    ``grads[i]`` is the tangent gradient of log p at particle ``i``. Source
    contributions are parallel transported into the target's tangent spaces
    and averaged. ``mode='per_step'`` weights each timestep's score by that
    step's kernel value; ``'trajectory'`` uses the summed trajectory kernel.
    """
    P = np.asarray(particles, dtype=float)
    n, T = P.shape[:2]
    g = np.asarray(grads, dtype=float).reshape(n, T, 6)
    inter = interactions(P, l) if inter is None else inter
    if mode == "per_step":
        w = inter.k
    elif mode == "trajectory":
        w = np.broadcast_to(inter.k.sum(axis=2, keepdims=True), inter.k.shape)
    else:
        raise ValueError(f"unknown kernel mode {mode!r}")
    score = np.einsum("ijtab,ijt,itb->ijta", inter.transport, w, g)
    return (score + inter.grad_k).mean(axis=0)


def precondition(phi, particles, hessians, l: float, mode: str = "per_step", inter: Interactions | None = None):
    """Solve the kernel-averaged Gauss-Newton system for every target particle.

    For target ``j``: ``A_j = mean_i(W_ij * H_i + g_ij g_ij^T)`` with
    ``W_ij = kv kv^T`` built from per-step kernel values (``per_step``) or
    ``k(X_i, X_j)^2`` (``trajectory``), and ``g_ij`` the transported kernel
    gradient. Returns ``alpha`` of shape ``(N, N_t, 6)``.
    """
    P = np.asarray(particles, dtype=float)
    n, T = P.shape[:2]
    phi = np.asarray(phi, dtype=float).reshape(n, 6 * T)
    H = np.asarray(hessians, dtype=float)
    inter = interactions(P, l) if inter is None else inter
    D = 6 * T
    gk = inter.grad_k.reshape(n, n, D)
    if mode == "per_step":
        # blocks (t, s) of A_j: sum_i k_ij(t) k_ij(s) H_i[t, s], batched over (t, s)
        kk = inter.k[:, :, :, None] * inter.k[:, :, None, :]  # (i, j, t, s)
        Hb = H.reshape(n, T, 6, T, 6).transpose(1, 3, 0, 2, 4).reshape(T * T, n, 36)
        Ab = np.matmul(kk.reshape(n, n, T * T).transpose(2, 1, 0), Hb)  # (ts, j, 36)
        A = Ab.reshape(T, T, n, 6, 6).transpose(2, 0, 3, 1, 4).reshape(n, D, D)
    elif mode == "trajectory":
        ksum2 = inter.k.sum(axis=2) ** 2  # (i, j)
        A = np.tensordot(ksum2.T, H, axes=(1, 0))
    else:
        raise ValueError(f"unknown kernel mode {mode!r}")
    A += np.matmul(gk.transpose(1, 2, 0), gk.transpose(1, 0, 2))
    A /= n
    out = np.stack([_spd_solve(A[j], phi[j]) for j in range(n)])
    return out.reshape(n, T, 6)


def _spd_solve(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    try:
        return scipy.linalg.cho_solve(scipy.linalg.cho_factor(A), b)
    except np.linalg.LinAlgError:
        pass
    A = A + 10.0 * ridge(A) * np.eye(len(A))
    try:
        return scipy.linalg.cho_solve(scipy.linalg.cho_factor(A), b)
    except np.linalg.LinAlgError as exc:
        raise SolverError("preconditioner factorization failed after ridge increase") from exc


# ---------------------------------------------------------------------------
# helpers


def clip_twists(xi: np.ndarray, max_rot: float) -> np.ndarray:
    """Scale any per-step twist whose rotation exceeds ``max_rot`` back onto it."""
    xi = np.asarray(xi, dtype=float)
    nrm = np.linalg.norm(xi[..., :3], axis=-1)
    scale = np.where(nrm > max_rot, max_rot / np.where(nrm > 0, nrm, 1.0), 1.0)
    return xi * scale[..., None]


def retract(traj, xi, max_rot: float = np.pi / 2) -> np.ndarray:
    return lg.oplus(traj, clip_twists(np.asarray(xi).reshape(np.asarray(traj).shape[:-2] + (6,)), max_rot))


def _safe_energy(objective, traj) -> float:
    try:
        v = objective.energy(traj)
    except (lg.BranchError, MedialAxisError):
        return np.inf
    return v if np.isfinite(v) else np.inf


def _log(cfg: SolverConfig, it: int, values, step: float) -> None:
    if cfg.verbose:
        v = np.asarray(values, dtype=float)
        print(
            f"method={cfg.method} iter={it} V_min={v.min():.6e} V_mean={v.mean():.6e} "
            f"V_max={v.max():.6e} step={step:.3e}",
            flush=True,
        )


def _finish(method, status, iterations, trace, v0, objective, particles, t0) -> SolveReport:
    final = [objective.report(x) for x in particles]
    best = int(np.argmin([f.V_total for f in final]))
    return SolveReport(
        method, status, iterations, [float(v) for v in trace], float(v0), final, best,
        time.perf_counter() - t0, np.asarray(particles),
    )


# ---------------------------------------------------------------------------
# Gauss-Newton family


def _gn_single(objective, x, cfg: SolverConfig):
    """One damped GN run; returns (trajectory, trace, iterations, status)."""
    V = v0 = objective.energy(x)
    trace = []
    mu_rel = cfg.damping_init
    status = "max_iters"
    it = 0
    for it in range(1, cfg.iters + 1):
        r, J = objective.linearize(x)
        g = J.T @ r
        H = gauss_newton_matrix(J)
        mu = mu_rel * float(np.mean(np.diag(H)))
        delta = _spd_solve(H + mu * np.eye(len(H)), -g)
        slope = float(g @ delta)
        tau = cfg.step
        for halvings in range(cfg.ls_max_halvings + 1):
            x_new = retract(x, tau * delta, cfg.max_rotation_step)
            V_new = _safe_energy(objective, x_new)
            if V_new <= V + cfg.ls_slope * tau * slope:
                break
            tau *= cfg.ls_shrink
        else:
            status = "stalled"
            it -= 1
            break
        mu_rel *= cfg.damping_down if halvings == 0 else cfg.damping_up
        dV = V - V_new
        x, V = x_new, V_new
        trace.append(V)
        _log(cfg, it, [V], tau)
        if abs(dV) < cfg.stop_tol * max(1.0, v0):
            status = "converged"
            break
    return x, trace, it, status


def run_gn(objective, init, config: SolverConfig) -> SolveReport:
    t0 = time.perf_counter()
    init = np.asarray(init, dtype=float)
    x, trace, it, status = _gn_single(objective, init, config)
    return _finish("gn", status, it, trace, objective.energy(init), objective, x[None], t0)


def run_batch_gn(objective, particles, config: SolverConfig) -> SolveReport:
    """Independent GN runs; ``iterations`` is the largest count in the batch."""
    t0 = time.perf_counter()
    P = np.asarray(particles, dtype=float)
    results = [_gn_single(objective, x, config) for x in P]
    final = np.stack([r[0] for r in results])
    energies = [objective.energy(x) for x in final]
    best = int(np.argmin(energies))
    statuses = {r[3] for r in results}
    status = "converged" if statuses == {"converged"} else sorted(statuses)[-1]
    rep = _finish("batch_gn", status, max(r[2] for r in results), results[best][1],
                  objective.energy(P[0]), objective, final, t0)
    return rep


# ---------------------------------------------------------------------------
# Stein variational family


def _particle_linearizations(objective, P):
    rs, Js = zip(*(objective.linearize(x) for x in P))
    grads = np.stack([J.T @ r for r, J in zip(rs, Js)])
    energies = np.array([0.5 * float(r @ r) for r in rs])
    if not np.all(np.isfinite(grads)):
        raise SolverError("non-finite gradient")
    return rs, Js, grads, energies


def run_se(objective, particles, config: SolverConfig) -> SolveReport:
    """Fixed-step SE(3) SVGD on p ~ exp(-V); runs exactly ``max_iters`` iterations."""
    t0 = time.perf_counter()
    P = np.array(particles, dtype=float)
    n, T = P.shape[:2]
    v0 = objective.energy(P[0])
    trace = []
    for it in range(config.iters):
        _, _, grads, energies = _particle_linearizations(objective, P)
        if it > 0:
            trace.append(energies.min())
        _log(config, it, energies, config.step)
        phi = svgd_direction(P, -grads, config.kernel_length, config.kernel_mode)
        P = retract(P, config.step * phi, config.max_rotation_step)
    rep = _finish("se", "max_iters", config.iters, trace, v0, objective, P, t0)
    rep.trace.append(rep.best.V_total)
    return rep


def tsvec_step(objective, P, config: SolverConfig):
    """One preconditioned SE(3) SVGD update; returns (new particles, energies, alpha)."""
    _, Js, grads, energies = _particle_linearizations(objective, P)
    H = np.stack([gauss_newton_matrix(J) for J in Js])
    inter = interactions(P, config.kernel_length)
    phi = svgd_direction(P, -grads, config.kernel_length, config.kernel_mode, inter)
    alpha = precondition(phi, P, H, config.kernel_length, config.kernel_mode, inter)
    return retract(P, config.step * alpha, config.max_rotation_step), energies, alpha


def run_tsvec(objective, particles, config: SolverConfig) -> SolveReport:
    t0 = time.perf_counter()
    P = np.array(particles, dtype=float)
    v0 = objective.energy(P[0])
    trace = []
    for it in range(config.iters):
        P, energies, _ = tsvec_step(objective, P, config)
        if it > 0:
            trace.append(energies.min())
        _log(config, it, energies, config.step)
    rep = _finish("tsvec", "max_iters", config.iters, trace, v0, objective, P, t0)
    rep.trace.append(rep.best.V_total)
    return rep


# ---------------------------------------------------------------------------
# projected gradient baseline


def _quat_left(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack(
        [
            np.stack([w, -x, -y, -z], -1),
            np.stack([x, w, -z, y], -1),
            np.stack([y, z, w, -x], -1),
            np.stack([z, -y, x, w], -1),
        ],
        axis=-2,
    )


def run_pgd(objective, init, config: SolverConfig) -> SolveReport:
    """Backtracking gradient descent in R^7 per pose, quaternions re-normalized.

    The gradient with respect to ``(t, q)`` is the Euclidean gradient of
    ``V(t, R(q / |q|))``; steps ignore the group structure apart from the
    normalization after each update.
    """
    t0 = time.perf_counter()
    x = np.asarray(init, dtype=float)
    tq = lg.pose_to_tq(x)
    V = v0 = objective.energy(x)
    trace = []
    status = "max_iters"
    tau = config.step
    it = 0
    for it in range(1, config.iters + 1):
        r, J = objective.linearize(lg.pose_from_tq(tq))
        g = (J.T @ r).reshape(-1, 6)
        R = lg.matrix_from_quat(tq[:, 3:])
        grad = np.concatenate(
            [np.einsum("tij,tj->ti", R, g[:, 3:]), 2.0 * np.einsum("tij,tj->ti", _quat_left(tq[:, 3:])[:, :, 1:], g[:, :3])],
            axis=1,
        )
        gg = float(np.sum(grad * grad))
        tau = min(2.0 * tau, config.step)
        for _ in range(config.ls_max_halvings + 1):
            cand = tq - tau * grad
            cand[:, 3:] /= np.linalg.norm(cand[:, 3:], axis=1, keepdims=True)
            V_new = _safe_energy(objective, lg.pose_from_tq(cand))
            if V_new <= V - config.ls_slope * tau * gg:
                break
            tau *= config.ls_shrink
        else:
            status = "stalled"
            it -= 1
            break
        dV = V - V_new
        tq, V = cand, V_new
        trace.append(V)
        _log(config, it, [V], tau)
        if abs(dV) < config.stop_tol * max(1.0, v0):
            status = "converged"
            break
    return _finish("pgd", status, it, trace, v0, objective, lg.pose_from_tq(tq)[None], t0)


def solve(objective, particles, config: SolverConfig) -> SolveReport:
    """Dispatch on ``config.method``. Single-trajectory methods use particle 0."""
    P = np.asarray(particles, dtype=float)
    if P.ndim == 3:
        P = P[None]
    m = config.method
    if m == "gn":
        return run_gn(objective, P[0], config)
    if m == "pgd":
        return run_pgd(objective, P[0], config)
    if m == "batch_gn":
        return run_batch_gn(objective, P, config)
    if m == "se":
        return run_se(objective, P, config)
    return run_tsvec(objective, P, config)


def with_method(config: SolverConfig, method: str) -> SolverConfig:
    return replace(config, method=method)
