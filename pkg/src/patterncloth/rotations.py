"""Batched SO(3) helpers for axis-angle (rotation vector) parameters."""

from __future__ import annotations

import numpy as np


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrices, (..., 3) -> (..., 3, 3)."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def _coeffs(theta: np.ndarray):
    # a = sin t / t, b = (1 - cos t) / t^2, c = (t - sin t) / t^3 with series near 0
    t2 = theta * theta
    small = theta < 1e-4
    ts = np.where(small, 1.0, theta)
    a = np.where(small, 1 - t2 / 6 + t2 * t2 / 120, np.sin(ts) / ts)
    b = np.where(small, 0.5 - t2 / 24 + t2 * t2 / 720, (1 - np.cos(ts)) / ts**2)
    c = np.where(small, 1 / 6 - t2 / 120 + t2 * t2 / 5040, (ts - np.sin(ts)) / ts**3)
    return a, b, c


def exp_so3(w: np.ndarray) -> np.ndarray:
    """Rodrigues' formula, (..., 3) -> (..., 3, 3)."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w, axis=-1)
    a, b, _ = _coeffs(theta)
    K = skew(w)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + a[..., None, None] * K + b[..., None, None] * (K @ K)


def right_jacobian(w: np.ndarray) -> np.ndarray:
    """J_r(w) with d/dw (exp(w) y) = -exp(w) [y]_x J_r(w)."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w, axis=-1)
    _, b, c = _coeffs(theta)
    K = skew(w)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye - b[..., None, None] * K + c[..., None, None] * (K @ K)


def log_so3(R: np.ndarray) -> np.ndarray:
    """Inverse of :func:`exp_so3` with angles in [0, pi]."""
    R = np.asarray(R, dtype=float)
    cos = np.clip((np.trace(R, axis1=-2, axis2=-1) - 1) / 2, -1.0, 1.0)
    theta = np.arccos(cos)
    vee = np.stack(
        [R[..., 2, 1] - R[..., 1, 2], R[..., 0, 2] - R[..., 2, 0], R[..., 1, 0] - R[..., 0, 1]],
        axis=-1,
    )
    out = np.empty(R.shape[:-2] + (3,))
    small = theta < 1e-6
    near_pi = theta > np.pi - 1e-4
    regular = ~(small | near_pi)
    out[small] = 0.5 * vee[small]
    if np.any(regular):
        t = theta[regular]
        out[regular] = (t / (2 * np.sin(t)))[..., None] * vee[regular]
    if np.any(near_pi):
        Rp = R[near_pi]
        t = theta[near_pi]
        B = (Rp + np.eye(3)) / 2
        diag = np.clip(np.diagonal(B, axis1=-2, axis2=-1), 0, None)
        i = np.argmax(diag, axis=-1)
        rows = np.take_along_axis(B, i[:, None, None], axis=1)[:, 0, :]
        axis = rows / np.sqrt(np.maximum(diag[np.arange(len(i)), i], 1e-300))[:, None]
        sgn = np.sign(np.einsum("ni,ni->n", axis, vee[near_pi]))
        sgn[sgn == 0] = 1
        axis = axis * sgn[:, None] / np.linalg.norm(axis, axis=-1, keepdims=True)
        out[near_pi] = axis * t[:, None]
    return out


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """(w, x, y, z) quaternions, normalized on the fly, (..., 4) -> (..., 3, 3)."""
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrices to unit quaternions with w >= 0."""
    w = log_so3(R)
    theta = np.linalg.norm(w, axis=-1, keepdims=True)
    half = theta / 2
    with np.errstate(invalid="ignore", divide="ignore"):
        axis = np.where(theta > 0, w / np.where(theta > 0, theta, 1), 0.0)
    q = np.concatenate([np.cos(half), np.sin(half) * axis], axis=-1)
    return q


def rotvec_to_quat(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w, axis=-1, keepdims=True)
    half = theta / 2
    s = np.where(theta > 1e-8, np.sin(half) / np.where(theta > 1e-8, theta, 1), 0.5 - theta**2 / 48)
    return np.concatenate([np.cos(half), s * w], axis=-1)


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=float), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=float), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def look_at(center, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-to-camera rotation for a camera at ``center`` facing ``target``.

    Camera axes: x right, y down, z forward.
    """
    center = np.asarray(center, dtype=float)
    z = np.asarray(target, dtype=float) - center
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=float))
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, np.array([0.0, 1.0, 0.0]))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z])
