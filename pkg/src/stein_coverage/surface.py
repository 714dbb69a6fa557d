"""Point-cloud scene model: KNN index, graph spectrum, diffusion, deposition."""

from __future__ import annotations

import hashlib
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import eigsh
from scipy.spatial import cKDTree

log = logging.getLogger(__name__)

CACHE_ENV = "STEIN_COVERAGE_CACHE"
# Dense LAPACK is used up to this many nodes, ARPACK shift-invert beyond.
DENSE_EIG_LIMIT = 4000


class DisconnectedGraphError(ValueError):
    pass


class EigenSolverError(RuntimeError):
    pass


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class PointCloudSurface:
    """Immutable point cloud with per-node ROI mass and a KD-tree."""

    points: np.ndarray
    roi_weight: np.ndarray
    kd_index: cKDTree = field(repr=False)

    @classmethod
    def from_points(cls, points, weights=None) -> "PointCloudSurface":
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must be (N, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points contain non-finite values")
        w = np.ones(len(pts)) if weights is None else np.asarray(weights, dtype=float)
        if w.shape != (len(pts),):
            raise ValueError("roi weight must have one entry per point")
        if np.any(w < 0):
            raise ValueError("roi weights must be non-negative")
        total = w.sum()
        if total <= 0:
            raise ValueError("roi weights sum to zero")
        return cls(_readonly(pts), _readonly(w / total), cKDTree(pts))

    @property
    def n_points(self) -> int:
        return len(self.points)

    def knn(self, query, k: int):
        """Return ``(distances, indices)`` of the ``k`` nearest cloud nodes, ascending."""
        if k > self.n_points:
            raise ValueError(f"k={k} exceeds cloud size {self.n_points}")
        d, i = self.kd_index.query(np.asarray(query, dtype=float), k=k)
        if k == 1:
            d, i = d[..., None], i[..., None]
        return d, i

    def median_spacing(self) -> float:
        d, _ = self.knn(self.points, 2)
        return float(np.median(d[:, 1]))

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.points, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.roi_weight, dtype="<f8").tobytes())
        return h.hexdigest()


def brute_force_knn(points: np.ndarray, query: np.ndarray, k: int):
    """O(N*M) reference KNN used to cross-check the KD-tree."""
    diff = np.asarray(query)[:, None, :] - np.asarray(points)[None, :, :]
    d2 = np.einsum("mnk,mnk->mn", diff, diff)
    idx = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return np.sqrt(np.take_along_axis(d2, idx, axis=1)), idx


# ---------------------------------------------------------------------------
# Graph Laplacian and spectral basis


def knn_adjacency(points: np.ndarray, k_graph: int = 8, sigma_g: float | None = None) -> sp.csr_matrix:
    """Symmetrized k-NN graph with Gaussian edge weights ``exp(-d^2 / 2 sigma^2)``."""
    pts = np.asarray(points, dtype=float)
    n = len(pts)
    if not 1 <= k_graph < n:
        raise ValueError(f"k_graph must be in [1, {n - 1}], got {k_graph}")
    d, idx = cKDTree(pts).query(pts, k=k_graph + 1)
    d, idx = d[:, 1:], idx[:, 1:]
    if sigma_g is None:
        sigma_g = float(np.median(d))
    if sigma_g <= 0:
        raise ValueError("sigma_g must be positive")
    rows = np.repeat(np.arange(n), k_graph)
    w = np.exp(-(d.ravel() ** 2) / (2.0 * sigma_g**2))
    W = sp.csr_matrix((w, (rows, idx.ravel())), shape=(n, n))
    return W.maximum(W.T).tocsr()


def normalized_laplacian(W: sp.spmatrix) -> sp.csr_matrix:
    """``I - D^-1/2 W D^-1/2``; raises if the graph is disconnected."""
    W = sp.csr_matrix(W, dtype=float)
    n_comp, _ = connected_components(W, directed=False)
    if n_comp != 1:
        raise DisconnectedGraphError(f"graph is disconnected: {n_comp} components")
    deg = np.asarray(W.sum(axis=1)).ravel()
    dinv = sp.diags(1.0 / np.sqrt(deg))
    L = sp.identity(W.shape[0], format="csr") - dinv @ W @ dinv
    return ((L + L.T) * 0.5).tocsr()


def build_graph_laplacian(cloud: PointCloudSurface, k_graph: int = 8, sigma_g: float | None = None):
    return normalized_laplacian(knn_adjacency(cloud.points, k_graph, sigma_g))


@dataclass(frozen=True, eq=False)
class SpectralBasis:
    """Leading graph Fourier modes.

    ``eigvecs`` are scaled so that ``eigvecs.T @ eigvecs / N == I``, i.e. they
    are orthonormal under the mass matrix ``I / N``. This keeps coefficients
    of a unit-mass distribution O(1) regardless of cloud size.
    """

    eigvecs: np.ndarray
    eigvals: np.ndarray
    lambda_weights: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.eigvecs.shape[0]

    @property
    def size(self) -> int:
        return self.eigvecs.shape[1]

    @property
    def orthonormal(self) -> np.ndarray:
        return self.eigvecs / np.sqrt(self.n_nodes)

    def mass_gram(self) -> np.ndarray:
        return self.eigvecs.T @ self.eigvecs / self.n_nodes


def sobolev_weights(eigvals: np.ndarray, exponent: float = 2.0) -> np.ndarray:
    return (1.0 + np.asarray(eigvals)) ** (-exponent)


def _fix_signs(U: np.ndarray) -> np.ndarray:
    U = U.copy()
    for j in range(U.shape[1]):
        col = U[:, j]
        nz = np.flatnonzero(np.abs(col) > 1e-10 * np.max(np.abs(col)))
        if nz.size and col[nz[0]] < 0:
            U[:, j] = -col
    return U


def spectral_basis(L, n_basis: int, exponent: float = 2.0) -> SpectralBasis:
    """The ``n_basis`` smallest eigenpairs of a symmetric Laplacian."""
    n = L.shape[0]
    if not 1 <= n_basis < n:
        raise ValueError(f"basis size must satisfy 1 <= S < N (S={n_basis}, N={n})")
    if n <= DENSE_EIG_LIMIT:
        dense = L.toarray() if sp.issparse(L) else np.asarray(L, dtype=float)
        vals, vecs = scipy.linalg.eigh(dense, subset_by_index=[0, n_basis - 1])
    else:
        v0 = np.ones(n) / np.sqrt(n)
        vals, vecs = eigsh(sp.csc_matrix(L), k=n_basis, sigma=-1e-3, which="LM", v0=v0)
        order = np.argsort(vals)
        vals, vecs = vals[order], vecs[:, order]
    resid = L @ vecs - vecs * vals
    rnorm = float(np.max(np.linalg.norm(resid, axis=0)))
    if rnorm > 1e-6:
        raise EigenSolverError(f"eigensolver did not converge (residual norm {rnorm:.3e})")
    vecs = _fix_signs(vecs)
    vals = np.where(np.abs(vals) < 1e-12, 0.0, vals)
    return SpectralBasis(
        _readonly(vecs * np.sqrt(n)),
        _readonly(vals),
        _readonly(sobolev_weights(vals, exponent)),
    )


def diffuse(cloud: PointCloudSurface, basis: SpectralBasis, tau_d: float, beta: float = 0.5) -> np.ndarray:
    """Heat-diffuse the ROI mass in the spectral domain and blend with the raw mass."""
    if tau_d < 0:
        raise ValueError("tau_d must be >= 0")
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must be in [0, 1]")
    w = np.asarray(cloud.roi_weight)
    U = basis.orthonormal
    smooth = U @ (np.exp(-basis.eigvals * tau_d) * (U.T @ w))
    phi = np.clip(beta * smooth + (1.0 - beta) * w, 0.0, None)
    total = phi.sum()
    if total <= 0:
        raise ValueError("diffused distribution has no positive mass")
    return phi / total


def target_coeffs(phi: np.ndarray, basis: SpectralBasis) -> np.ndarray:
    return basis.eigvecs.T @ np.asarray(phi, dtype=float)


# ---------------------------------------------------------------------------
# Trajectory deposition


@dataclass(frozen=True)
class Deposit:
    """Gaussian KNN deposition of query positions onto the cloud.

    ``weights`` are scaled by a common factor (the largest raw weight) so
    far-away queries do not underflow; ``phi`` is unaffected by the scale.
    """

    phi: np.ndarray
    idx: np.ndarray
    diff: np.ndarray
    weights: np.ndarray
    total: float


def deposit(positions, cloud: PointCloudSurface, k: int, sigma_a: float, idx=None) -> Deposit:
    if sigma_a <= 0:
        raise ValueError("sigma_a must be positive")
    pos = np.atleast_2d(np.asarray(positions, dtype=float))
    if idx is None:
        _, idx = cloud.knn(pos, k)
    diff = pos[:, None, :] - cloud.points[idx]
    logw = -np.einsum("tkc,tkc->tk", diff, diff) / (2.0 * sigma_a**2)
    w = np.exp(logw - logw.max())
    u = np.bincount(idx.ravel(), weights=w.ravel(), minlength=cloud.n_points)
    total = float(u.sum())
    return Deposit(u / total, idx, diff, w, total)


def deposit_trajectory(traj, cloud: PointCloudSurface, k: int, sigma_a: float) -> np.ndarray:
    """Empirical node distribution of a trajectory (poses or positions)."""
    traj = np.asarray(traj, dtype=float)
    pos = traj[..., :3, 3] if traj.shape[-2:] == (4, 4) else traj
    return deposit(pos, cloud, k, sigma_a).phi


# ---------------------------------------------------------------------------
# Basis cache


def cache_dir() -> Path:
    return Path(os.environ.get(CACHE_ENV, Path.home() / ".cache" / "stein_coverage"))


def basis_cache_key(cloud: PointCloudSurface, n_basis: int, k_graph: int, sigma_g, exponent: float) -> str:
    sig = "auto" if sigma_g is None else repr(float(sigma_g))
    raw = f"{cloud.digest()}|S={n_basis}|k={k_graph}|sigma={sig}|p={float(exponent)!r}"
    return hashlib.sha256(raw.encode()).hexdigest()[:24]


def save_basis(path: Path, basis: SpectralBasis) -> None:
    """Write a basis as ``.npz``; every array is stored little-endian float64."""
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp.npz")
    np.savez(
        tmp,
        eigvecs=np.asarray(basis.eigvecs, dtype="<f8"),
        eigvals=np.asarray(basis.eigvals, dtype="<f8"),
        lambda_weights=np.asarray(basis.lambda_weights, dtype="<f8"),
    )
    os.replace(tmp, path)


def load_basis(path: Path) -> SpectralBasis:
    with np.load(path) as f:
        return SpectralBasis(
            _readonly(f["eigvecs"]), _readonly(f["eigvals"]), _readonly(f["lambda_weights"])
        )


def cached_spectral_basis(
    cloud: PointCloudSurface,
    n_basis: int,
    k_graph: int = 8,
    sigma_g: float | None = None,
    exponent: float = 2.0,
    cache: Path | None | bool = None,
) -> tuple[SpectralBasis, bool]:
    """Build (or load) the basis; returns ``(basis, loaded_from_cache)``.

    ``cache=False`` disables caching; ``None`` uses :func:`cache_dir`.
    """
    if cache is False:
        return spectral_basis(build_graph_laplacian(cloud, k_graph, sigma_g), n_basis, exponent), False
    root = cache_dir() if cache is None or cache is True else Path(cache)
    path = root / f"basis_{basis_cache_key(cloud, n_basis, k_graph, sigma_g, exponent)}.npz"
    if path.exists():
        log.info("spectral basis loaded from cache %s (eigensolve skipped)", path)
        return load_basis(path), True
    basis = spectral_basis(build_graph_laplacian(cloud, k_graph, sigma_g), n_basis, exponent)
    save_basis(path, basis)
    log.info("spectral basis computed and cached at %s", path)
    return basis, False
