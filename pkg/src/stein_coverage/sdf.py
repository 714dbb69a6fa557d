"""Signed distance fields: analytic primitives and a trilinear grid."""

from __future__ import annotations

from collections import deque
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree

# Gradients shorter than this before normalization are treated as medial-axis points.
MEDIAL_TOL = 1e-8


class MedialAxisError(ValueError):
    """SDF gradient vanishes, so no unit normal exists."""


class SdfSample(NamedTuple):
    value: np.ndarray
    grad: np.ndarray
    clamped: np.ndarray


def _normalize(g: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(g, axis=-1, keepdims=True)
    if np.any(n < MEDIAL_TOL):
        raise MedialAxisError("SDF gradient vanishes (query lies on the medial axis)")
    return g / n


class Sdf:
    """Base class. Subclasses implement ``_raw(x) -> (value, gradient)``."""

    fd_step = 1e-6

    def _raw(self, x: np.ndarray):
        raise NotImplementedError

    def query(self, x) -> SdfSample:
        x = np.asarray(x, dtype=float)
        v, g = self._raw(x.reshape(-1, 3))
        return SdfSample(
            v.reshape(x.shape[:-1]),
            _normalize(g).reshape(x.shape),
            np.zeros(x.shape[:-1], dtype=bool),
        )

    def value_grad(self, x):
        s = self.query(x)
        return s.value, s.grad

    def value(self, x):
        x = np.asarray(x, dtype=float)
        return self._raw(x.reshape(-1, 3))[0].reshape(x.shape[:-1])

    def grad(self, x):
        return self.query(x).grad

    def normal_jacobian(self, x) -> np.ndarray:
        """``d n / d x`` of the unit normal, ``(..., 3, 3)``, by central differences."""
        x = np.asarray(x, dtype=float)
        h = self.fd_step
        cols = []
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            cols.append((self.grad(x + e) - self.grad(x - e)) / (2.0 * h))
        return np.stack(cols, axis=-1)


def sdf_eval(sdf: Sdf, x) -> SdfSample:
    return sdf.query(x)


class SphereSdf(Sdf):
    def __init__(self, radius: float, center=(0.0, 0.0, 0.0)):
        self.radius = float(radius)
        self.center = np.asarray(center, dtype=float)

    def _raw(self, x):
        d = x - self.center
        r = np.linalg.norm(d, axis=-1)
        safe = np.where(r > 0, r, 1.0)[:, None]
        return r - self.radius, np.where(r[:, None] > 0, d / safe, 0.0)

    def normal_jacobian(self, x):
        x = np.asarray(x, dtype=float)
        d = x - self.center
        r = np.linalg.norm(d, axis=-1)
        n = d / r[..., None]
        return (np.eye(3) - n[..., :, None] * n[..., None, :]) / r[..., None, None]


class TorusSdf(Sdf):
    """Torus around the z axis through ``center``."""

    def __init__(self, major_radius: float, minor_radius: float, center=(0.0, 0.0, 0.0)):
        self.major = float(major_radius)
        self.minor = float(minor_radius)
        self.center = np.asarray(center, dtype=float)

    def _raw(self, x):
        d = x - self.center
        rho = np.hypot(d[:, 0], d[:, 1])
        q = np.stack([rho - self.major, d[:, 2]], axis=-1)
        qn = np.linalg.norm(q, axis=-1)
        safe_rho = np.where(rho > 0, rho, 1.0)
        safe_qn = np.where(qn > 0, qn, 1.0)
        g = np.stack(
            [q[:, 0] * d[:, 0] / safe_rho, q[:, 0] * d[:, 1] / safe_rho, q[:, 1]], axis=-1
        ) / safe_qn[:, None]
        g[(rho == 0) | (qn == 0)] = 0.0
        return qn - self.minor, g


class CylinderSdf(Sdf):
    """Infinite cylinder along z through ``center``."""

    def __init__(self, radius: float, center=(0.0, 0.0, 0.0)):
        self.radius = float(radius)
        self.center = np.asarray(center, dtype=float)

    def _raw(self, x):
        d = x - self.center
        rho = np.hypot(d[:, 0], d[:, 1])
        safe = np.where(rho > 0, rho, 1.0)
        g = np.stack([d[:, 0] / safe, d[:, 1] / safe, np.zeros(len(d))], axis=-1)
        g[rho == 0] = 0.0
        return rho - self.radius, g


class PlaneSdf(Sdf):
    """Half-space ``normal . x <= offset``; positive on the normal side."""

    def __init__(self, normal=(0.0, 0.0, 1.0), offset: float = 0.0):
        n = np.asarray(normal, dtype=float)
        self.normal = n / np.linalg.norm(n)
        self.offset = float(offset)

    def _raw(self, x):
        return x @ self.normal - self.offset, np.broadcast_to(self.normal, x.shape).copy()

    def normal_jacobian(self, x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape + (3,))


class RoundedBoxSdf(Sdf):
    def __init__(self, half_extents, radius: float = 0.0, center=(0.0, 0.0, 0.0)):
        self.half = np.asarray(half_extents, dtype=float)
        self.radius = float(radius)
        self.center = np.asarray(center, dtype=float)

    def _raw(self, x):
        d = x - self.center
        s = np.sign(d)
        s[s == 0] = 1.0
        q = np.abs(d) - (self.half - self.radius)
        qp = np.maximum(q, 0.0)
        outer = np.linalg.norm(qp, axis=-1)
        inner = np.minimum(q.max(axis=-1), 0.0)
        g = np.zeros_like(d)
        out = outer > 0
        g[out] = s[out] * qp[out] / outer[out, None]
        ins = ~out
        axis = np.argmax(q[ins], axis=-1)
        g[np.flatnonzero(ins), axis] = s[ins, axis]
        return outer + inner - self.radius, g


# ---------------------------------------------------------------------------


def estimate_normals(points: np.ndarray, n_neighbors: int = 20) -> np.ndarray:
    """Local-PCA normals, oriented consistently and then outward by majority vote."""
    pts = np.asarray(points, dtype=float)
    tree = cKDTree(pts)
    k = min(n_neighbors, len(pts))
    _, idx = tree.query(pts, k=k)
    nb = pts[idx] - pts[idx].mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", nb, nb)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]

    # propagate orientation across the k-NN graph (breadth first)
    centroid = pts.mean(axis=0)
    seen = np.zeros(len(pts), dtype=bool)
    for start in np.argsort(-np.linalg.norm(pts - centroid, axis=1)):
        if seen[start]:
            continue
        if normals[start] @ (pts[start] - centroid) < 0:
            normals[start] *= -1.0
        seen[start] = True
        queue = deque([start])
        while queue:
            i = queue.popleft()
            for j in idx[i]:
                if not seen[j]:
                    if normals[j] @ normals[i] < 0:
                        normals[j] *= -1.0
                    seen[j] = True
                    queue.append(j)

    votes = np.einsum("ni,ni->n", normals, pts - centroid)
    if np.sum(votes > 0) < np.sum(votes < 0):
        normals = -normals
    return normals


class GridSdf(Sdf):
    """Regular-grid SDF with trilinear interpolation.

    Gradients come from central differences on the grid, interpolated
    trilinearly and normalized. Queries outside the grid are clamped to the
    boundary and flagged in :meth:`query`.
    """

    def __init__(self, origin, spacing: float, values: np.ndarray):
        self.origin = np.asarray(origin, dtype=float)
        self.spacing = float(spacing)
        self.values = np.asarray(values, dtype=float)
        if self.values.ndim != 3 or min(self.values.shape) < 2:
            raise ValueError("grid values must be a 3-D array with >= 2 nodes per axis")
        self.fd_step = 1e-3 * self.spacing
        self._grads = np.stack(np.gradient(self.values, self.spacing), axis=-1)
        self.upper = self.origin + self.spacing * (np.array(self.values.shape) - 1)

    @classmethod
    def from_point_cloud(
        cls, points: np.ndarray, resolution: int = 64, n_neighbors: int = 20, padding: float = 0.15
    ) -> "GridSdf":
        pts = np.asarray(points, dtype=float)
        normals = estimate_normals(pts, n_neighbors)
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        pad = padding * float(np.max(hi - lo))
        lo, hi = lo - pad, hi + pad
        h = float(np.max(hi - lo)) / (resolution - 1)
        shape = tuple(int(np.ceil((hi[i] - lo[i]) / h)) + 1 for i in range(3))
        axes = [lo[i] + h * np.arange(shape[i]) for i in range(3)]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)

        tree = cKDTree(pts)
        spacing = float(np.median(tree.query(pts, k=2)[0][:, 1]))
        _, nearest = tree.query(grid, k=1)
        offset = grid - pts[nearest]
        n = normals[nearest]
        s = np.einsum("ij,ij->i", offset, n)
        tang = np.linalg.norm(offset - s[:, None] * n, axis=1)
        excess = np.maximum(tang - spacing, 0.0)
        sign = np.where(s >= 0, 1.0, -1.0)
        values = sign * np.sqrt(s * s + excess * excess)
        return cls(lo, h, values.reshape(shape))

    def _locate(self, x):
        u = (x - self.origin) / self.spacing
        hi = np.array(self.values.shape) - 1
        clamped = np.any((u < 0) | (u > hi), axis=-1)
        u = np.clip(u, 0, hi)
        i0 = np.minimum(np.floor(u).astype(int), hi - 1)
        return i0, u - i0, clamped

    def _interp(self, field, i0, f):
        out = 0.0
        for dx in (0, 1):
            wx = f[:, 0] if dx else 1.0 - f[:, 0]
            for dy in (0, 1):
                wy = f[:, 1] if dy else 1.0 - f[:, 1]
                for dz in (0, 1):
                    wz = f[:, 2] if dz else 1.0 - f[:, 2]
                    w = wx * wy * wz
                    val = field[i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz]
                    out = out + (w[:, None] * val if val.ndim == 2 else w * val)
        return out

    def _raw(self, x):
        i0, f, _ = self._locate(x)
        return self._interp(self.values, i0, f), self._interp(self._grads, i0, f)

    def query(self, x) -> SdfSample:
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1, 3)
        i0, f, clamped = self._locate(flat)
        v = self._interp(self.values, i0, f)
        g = _normalize(self._interp(self._grads, i0, f))
        return SdfSample(v.reshape(x.shape[:-1]), g.reshape(x.shape), clamped.reshape(x.shape[:-1]))

    def save(self, path) -> None:
        """Write ``.npz``: header (origin, spacing, shape) + row-major little-endian values."""
        np.savez(
            Path(path),
            origin=np.asarray(self.origin, dtype="<f8"),
            spacing=np.asarray([self.spacing], dtype="<f8"),
            shape=np.asarray(self.values.shape, dtype="<i8"),
            values=np.ascontiguousarray(self.values, dtype="<f8").ravel(order="C"),
        )

    @classmethod
    def load(cls, path) -> "GridSdf":
        with np.load(Path(path)) as f:
            shape = tuple(int(s) for s in f["shape"])
            return cls(f["origin"], float(f["spacing"][0]), f["values"].reshape(shape, order="C"))
