"""SE(3) / se(3) algebra on batched numpy arrays.

Conventions
-----------
* A pose is a homogeneous ``(..., 4, 4)`` float64 array ``[[R, r], [0, 1]]``.
* A twist is a ``(..., 6)`` array ordered ``(omega, v)``: rotational part
  first (radians), translational part second (meters).
* Perturbations act on the right: ``oplus(P, eps) = P @ exp(eps)`` and
  ``ominus(Q, P) = log(P^-1 Q)``.

Every function broadcasts over leading batch dimensions.
"""

from __future__ import annotations

import numpy as np

# Below this angle the trig coefficients switch to Taylor series.
SMALL_ANGLE = 1e-2
# log() refuses rotations this close to pi.
BRANCH_MARGIN = 1e-6
# Orthogonality defect that triggers re-projection onto SO(3).
ORTHO_TOL = 1e-9


class BranchError(ValueError):
    """Rotation angle too close to pi for the principal logarithm."""


def skew(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def unskew(S: np.ndarray) -> np.ndarray:
    return np.stack([S[..., 2, 1], S[..., 0, 2], S[..., 1, 0]], axis=-1)


def hat(xi: np.ndarray) -> np.ndarray:
    """Map a twist ``(omega, v)`` to its 4x4 se(3) matrix."""
    xi = np.asarray(xi, dtype=float)
    if xi.shape[-1] != 6:
        raise ValueError(f"twist must have trailing dimension 6, got {xi.shape}")
    out = np.zeros(xi.shape[:-1] + (4, 4))
    out[..., :3, :3] = skew(xi[..., :3])
    out[..., :3, 3] = xi[..., 3:]
    return out


def vee(M: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Inverse of :func:`hat`.

    Raises ``ValueError`` when ``M`` is not an se(3) matrix (rotation block
    not skew-symmetric or nonzero bottom row) beyond ``tol``.
    """
    M = np.asarray(M, dtype=float)
    if M.shape[-2:] != (4, 4):
        raise ValueError(f"expected (..., 4, 4) matrix, got {M.shape}")
    W = M[..., :3, :3]
    if np.max(np.abs(W + np.swapaxes(W, -1, -2)), initial=0.0) > tol:
        raise ValueError("rotation block is not skew-symmetric")
    if np.max(np.abs(M[..., 3, :]), initial=0.0) > tol:
        raise ValueError("bottom row of an se(3) matrix must be zero")
    return np.concatenate([unskew(W), M[..., :3, 3]], axis=-1)


def _coeffs(theta: np.ndarray):
    """Return sin(t)/t, (1-cos t)/t^2, (t-sin t)/t^3 with series near zero."""
    small = theta < SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    t2s = theta * theta
    a = np.where(small, 1.0 - t2s / 6.0 + t2s * t2s / 120.0, np.sin(t) / t)
    b = np.where(
        small,
        0.5 - t2s / 24.0 + t2s * t2s / 720.0,
        2.0 * np.sin(0.5 * t) ** 2 / (t * t),
    )
    c = np.where(
        small,
        1.0 / 6.0 - t2s / 120.0 + t2s * t2s / 5040.0,
        (t - np.sin(t)) / (t * t * t),
    )
    return a, b, c


def so3_exp(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w, axis=-1)
    a, b, _ = _coeffs(theta)
    K = skew(w)
    return np.eye(3) + a[..., None, None] * K + b[..., None, None] * (K @ K)


def so3_left_jacobian(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w, axis=-1)
    _, b, c = _coeffs(theta)
    K = skew(w)
    return np.eye(3) + b[..., None, None] * K + c[..., None, None] * (K @ K)


def exp(xi: np.ndarray) -> np.ndarray:
    """Closed-form SE(3) exponential (Rodrigues + V-matrix coupling)."""
    xi = np.asarray(xi, dtype=float)
    w, v = xi[..., :3], xi[..., 3:]
    theta = np.linalg.norm(w, axis=-1)
    a, b, c = _coeffs(theta)
    K = skew(w)
    K2 = K @ K
    R = np.eye(3) + a[..., None, None] * K + b[..., None, None] * K2
    V = np.eye(3) + b[..., None, None] * K + c[..., None, None] * K2
    out = np.zeros(xi.shape[:-1] + (4, 4))
    out[..., :3, :3] = R
    out[..., :3, 3] = np.einsum("...ij,...j->...i", V, v)
    out[..., 3, 3] = 1.0
    return out


def rotation_angle(P: np.ndarray) -> np.ndarray:
    """Rotation angle in [0, pi] of each pose (or rotation matrix)."""
    P = np.asarray(P, dtype=float)
    R = P[..., :3, :3]
    sin_t = np.linalg.norm(0.5 * unskew(R - np.swapaxes(R, -1, -2)), axis=-1)
    cos_t = 0.5 * (np.trace(R, axis1=-2, axis2=-1) - 1.0)
    return np.arctan2(sin_t, cos_t)


def log(P: np.ndarray) -> np.ndarray:
    """Principal SE(3) logarithm; raises :class:`BranchError` near angle pi."""
    P = np.asarray(P, dtype=float)
    R = P[..., :3, :3]
    s = 0.5 * unskew(R - np.swapaxes(R, -1, -2))
    sin_t = np.linalg.norm(s, axis=-1)
    cos_t = 0.5 * (np.trace(R, axis1=-2, axis2=-1) - 1.0)
    theta = np.arctan2(sin_t, cos_t)
    if np.any(theta >= np.pi - BRANCH_MARGIN):
        raise BranchError(
            f"rotation angle {float(np.max(theta)):.9f} is outside the principal branch"
        )
    small = theta < SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    t2s = theta * theta
    scale = np.where(small, 1.0 + t2s / 6.0 + 7.0 * t2s * t2s / 360.0, t / np.where(small, 1.0, sin_t))
    w = s * scale[..., None]
    d = np.where(
        small,
        1.0 / 12.0 + t2s / 720.0 + t2s * t2s / 30240.0,
        (1.0 - t / (2.0 * np.tan(0.5 * t))) / (t * t),
    )
    K = skew(w)
    Vinv = np.eye(3) - 0.5 * K + d[..., None, None] * (K @ K)
    v = np.einsum("...ij,...j->...i", Vinv, P[..., :3, 3])
    return np.concatenate([w, v], axis=-1)


def inverse(P: np.ndarray) -> np.ndarray:
    P = np.asarray(P, dtype=float)
    Rt = np.swapaxes(P[..., :3, :3], -1, -2)
    out = np.zeros_like(P)
    out[..., :3, :3] = Rt
    out[..., :3, 3] = -np.einsum("...ij,...j->...i", Rt, P[..., :3, 3])
    out[..., 3, 3] = 1.0
    return out


def project_so3(R: np.ndarray) -> np.ndarray:
    """Nearest rotation (polar decomposition via SVD)."""
    U, _, Vt = np.linalg.svd(R)
    D = np.ones(R.shape[:-1])
    D[..., -1] = np.sign(np.linalg.det(U @ Vt))
    return (U * D[..., None, :]) @ Vt


def orthogonality_defect(P: np.ndarray) -> np.ndarray:
    R = np.asarray(P)[..., :3, :3]
    E = np.swapaxes(R, -1, -2) @ R - np.eye(3)
    return np.sqrt(np.sum(E * E, axis=(-2, -1)))


def renormalize(P: np.ndarray) -> np.ndarray:
    """Re-project rotations whose orthogonality defect exceeds ``ORTHO_TOL``."""
    bad = orthogonality_defect(P) > ORTHO_TOL
    if not np.any(bad):
        return P
    P = P.copy()
    P[bad, :3, :3] = project_so3(P[bad, :3, :3])
    P[..., 3, :] = (0.0, 0.0, 0.0, 1.0)
    return P


def oplus(P: np.ndarray, xi: np.ndarray) -> np.ndarray:
    """Right retraction ``P exp(xi^)``."""
    return renormalize(np.asarray(P, dtype=float) @ exp(xi))


def ominus(P2: np.ndarray, P1: np.ndarray) -> np.ndarray:
    """``log(P1^-1 P2)``: the twist taking ``P1`` to ``P2`` in P1's body frame."""
    return log(inverse(P1) @ np.asarray(P2, dtype=float))


def adjoint(P: np.ndarray) -> np.ndarray:
    """Group adjoint ``Ad_P`` acting on ``(omega, v)`` twists."""
    P = np.asarray(P, dtype=float)
    R = P[..., :3, :3]
    out = np.zeros(P.shape[:-2] + (6, 6))
    out[..., :3, :3] = R
    out[..., 3:, 3:] = R
    out[..., 3:, :3] = skew(P[..., :3, 3]) @ R
    return out


def ad(xi: np.ndarray) -> np.ndarray:
    """Algebra adjoint: ``ad(a) @ b == vee([hat(a), hat(b)])``."""
    xi = np.asarray(xi, dtype=float)
    W = skew(xi[..., :3])
    out = np.zeros(xi.shape[:-1] + (6, 6))
    out[..., :3, :3] = W
    out[..., 3:, 3:] = W
    out[..., 3:, :3] = skew(xi[..., 3:])
    return out


def _q_block(xi: np.ndarray) -> np.ndarray:
    # Off-diagonal block of the SE(3) left Jacobian (Barfoot's Q matrix).
    w, v = xi[..., :3], xi[..., 3:]
    theta = np.linalg.norm(w, axis=-1)
    small = theta < SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    _, _, c1 = _coeffs(theta)
    c2 = np.where(
        small,
        1.0 / 24.0 - t2 / 720.0 + t2 * t2 / 40320.0,
        (t * t + 2.0 * np.cos(t) - 2.0) / (2.0 * t**4),
    )
    c3 = np.where(
        small,
        1.0 / 120.0 - t2 / 2520.0 + t2 * t2 / 120960.0,
        (2.0 * t - 3.0 * np.sin(t) + t * np.cos(t)) / (2.0 * t**5),
    )
    W = skew(w)
    Vh = skew(v)
    WV = W @ Vh
    VW = Vh @ W
    WVW = WV @ W
    WW = W @ W
    return (
        0.5 * Vh
        + c1[..., None, None] * (WV + VW + WVW)
        + c2[..., None, None] * (WW @ Vh + VW @ W - 3.0 * WVW)
        + c3[..., None, None] * (WVW @ W + W @ WVW)
    )


def left_jacobian(xi: np.ndarray) -> np.ndarray:
    """SE(3) left Jacobian: ``exp(xi + d) ~= exp(Jl(xi) d) exp(xi)``."""
    xi = np.asarray(xi, dtype=float)
    J = so3_left_jacobian(xi[..., :3])
    out = np.zeros(xi.shape[:-1] + (6, 6))
    out[..., :3, :3] = J
    out[..., 3:, 3:] = J
    out[..., 3:, :3] = _q_block(xi)
    return out


def right_jacobian(xi: np.ndarray) -> np.ndarray:
    """SE(3) right Jacobian: ``exp(xi + d) ~= exp(xi) exp(Jr(xi) d)``."""
    return left_jacobian(-np.asarray(xi, dtype=float))


def right_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    """Inverse right Jacobian, i.e. ``d log(P exp(e)) / d e`` at ``log(P) = xi``."""
    return _block_lower_inv(right_jacobian(xi))


def left_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    return _block_lower_inv(left_jacobian(xi))


def _block_lower_inv(J: np.ndarray) -> np.ndarray:
    # [[A, 0], [B, A]]^-1 = [[A^-1, 0], [-A^-1 B A^-1, A^-1]]
    Ainv = np.linalg.inv(J[..., :3, :3])
    out = np.zeros_like(J)
    out[..., :3, :3] = Ainv
    out[..., 3:, 3:] = Ainv
    out[..., 3:, :3] = -Ainv @ J[..., 3:, :3] @ Ainv
    return out


def riem_grad(P: np.ndarray, euclid_grad: np.ndarray) -> np.ndarray:
    """Tangent-space gradient of ``f`` at ``P`` from its 4x4 Euclidean gradient.

    The result ``g`` satisfies ``d/dtau f(P oplus tau*eps) = g . eps`` under
    the plain dot product on R^6. The bottom row of ``euclid_grad`` is ignored.
    """
    P = np.asarray(P, dtype=float)
    G = np.asarray(euclid_grad, dtype=float)
    R = P[..., :3, :3]
    Rt = np.swapaxes(R, -1, -2)
    dR = G[..., :3, :3]
    omega = Rt @ dR - np.swapaxes(dR, -1, -2) @ R
    g_w = unskew(omega)
    g_v = np.einsum("...ij,...j->...i", Rt, G[..., :3, 3])
    return np.concatenate([g_w, g_v], axis=-1)


def parallel_transport(P_from: np.ndarray, P_to: np.ndarray, xi: np.ndarray) -> np.ndarray:
    """Move a twist from the tangent space at ``P_from`` to that at ``P_to``."""
    A = adjoint(inverse(P_to) @ np.asarray(P_from, dtype=float))
    return np.einsum("...ij,...j->...i", A, np.asarray(xi, dtype=float))


def make_pose(R=None, t=None) -> np.ndarray:
    P = np.eye(4)
    if R is not None:
        P[:3, :3] = R
    if t is not None:
        P[:3, 3] = t
    return P


def check_pose(P: np.ndarray, tol: float = 1e-9) -> None:
    """Raise ``ValueError`` unless every pose in ``P`` is a valid SE(3) element."""
    P = np.asarray(P, dtype=float)
    if P.shape[-2:] != (4, 4):
        raise ValueError(f"pose must be (..., 4, 4), got {P.shape}")
    if not np.all(np.isfinite(P)):
        raise ValueError("pose contains non-finite entries")
    if np.max(orthogonality_defect(P), initial=0.0) > tol:
        raise ValueError("rotation block is not orthonormal")
    if np.max(np.abs(np.linalg.det(P[..., :3, :3]) - 1.0), initial=0.0) > tol:
        raise ValueError("rotation determinant is not +1")
    if not np.array_equal(P[..., 3, :], np.broadcast_to([0.0, 0.0, 0.0, 1.0], P.shape[:-2] + (4,))):
        raise ValueError("bottom row must be exactly [0, 0, 0, 1]")


# ---------------------------------------------------------------------------
# Quaternions, (w, x, y, z) order, unit norm, w >= 0.


def quat_from_matrix(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    batch = R.shape[:-2]
    R = R.reshape(-1, 3, 3)
    q = np.empty((R.shape[0], 4))
    tr = np.trace(R, axis1=1, axis2=2)
    for i, M in enumerate(R):
        if tr[i] > 0.0:
            s = 2.0 * np.sqrt(tr[i] + 1.0)
            q[i] = (0.25 * s, (M[2, 1] - M[1, 2]) / s, (M[0, 2] - M[2, 0]) / s, (M[1, 0] - M[0, 1]) / s)
        else:
            k = int(np.argmax(np.diag(M)))
            j, l = (k + 1) % 3, (k + 2) % 3
            s = 2.0 * np.sqrt(1.0 + M[k, k] - M[j, j] - M[l, l])
            vec = np.empty(3)
            vec[k] = 0.25 * s
            vec[j] = (M[j, k] + M[k, j]) / s
            vec[l] = (M[l, k] + M[k, l]) / s
            q[i] = ((M[l, j] - M[j, l]) / s, *vec)
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    q[q[:, 0] < 0.0] *= -1.0
    return q.reshape(batch + (4,))


def matrix_from_quat(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    out = np.empty(q.shape[:-1] + (3, 3))
    out[..., 0, 0] = 1 - 2 * (y * y + z * z)
    out[..., 0, 1] = 2 * (x * y - w * z)
    out[..., 0, 2] = 2 * (x * z + w * y)
    out[..., 1, 0] = 2 * (x * y + w * z)
    out[..., 1, 1] = 1 - 2 * (x * x + z * z)
    out[..., 1, 2] = 2 * (y * z - w * x)
    out[..., 2, 0] = 2 * (x * z - w * y)
    out[..., 2, 1] = 2 * (y * z + w * x)
    out[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def pose_to_tq(P: np.ndarray) -> np.ndarray:
    """Serialize poses as ``(tx, ty, tz, qw, qx, qy, qz)`` with ``qw >= 0``."""
    P = np.asarray(P, dtype=float)
    return np.concatenate([P[..., :3, 3], quat_from_matrix(P[..., :3, :3])], axis=-1)


def pose_from_tq(tq: np.ndarray) -> np.ndarray:
    tq = np.asarray(tq, dtype=float)
    out = np.zeros(tq.shape[:-1] + (4, 4))
    out[..., :3, :3] = matrix_from_quat(tq[..., 3:])
    out[..., :3, 3] = tq[..., :3]
    out[..., 3, 3] = 1.0
    return out
