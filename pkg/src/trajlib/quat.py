"""Quaternion helpers used by the geometry and robot modules.

Quaternions are stored as (w, x, y, z). The rotation-matrix map is the
scale-invariant one, R(q) = R(q / |q|), so partial derivatives with respect
to the raw components are automatically tangent to the unit sphere. That is
the convention all collision gradients and capsule jacobians follow: callers
perturbing a component and renormalizing measure exactly these derivatives.
"""

from __future__ import annotations

import numpy as np

IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])


def normalize(q):
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def multiply(q1, q2):
    """Hamilton product, batched over leading axes."""
    q1 = np.asarray(q1, dtype=float)
    q2 = np.asarray(q2, dtype=float)
    w1, x1, y1, z1 = np.moveaxis(q1, -1, 0)
    w2, x2, y2, z2 = np.moveaxis(q2, -1, 0)
    return np.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        axis=-1,
    )


def conjugate(q):
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * float(angle)
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def rotation_matrix(q):
    """Rotation matrix of q, batched; invariant to the norm of q."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = np.moveaxis(q, -1, 0)
    s = w * w + x * x + y * y + z * z
    r = np.empty(q.shape[:-1] + (3, 3))
    r[..., 0, 0] = w * w + x * x - y * y - z * z
    r[..., 0, 1] = 2.0 * (x * y - w * z)
    r[..., 0, 2] = 2.0 * (x * z + w * y)
    r[..., 1, 0] = 2.0 * (x * y + w * z)
    r[..., 1, 1] = w * w - x * x + y * y - z * z
    r[..., 1, 2] = 2.0 * (y * z - w * x)
    r[..., 2, 0] = 2.0 * (x * z - w * y)
    r[..., 2, 1] = 2.0 * (y * z + w * x)
    r[..., 2, 2] = w * w - x * x - y * y + z * z
    return r / s[..., None, None]


def rotation_matrix_derivs(q):
    """Partials of rotation_matrix w.r.t. the four raw components.

    Returns an array of shape (..., 4, 3, 3) whose [..., k] entry is
    dR/dq_k of the scale-invariant map.
    """
    q = np.asarray(q, dtype=float)
    w, x, y, z = np.moveaxis(q, -1, 0)
    s = w * w + x * x + y * y + z * z
    r = rotation_matrix(q)
    dn = np.empty(q.shape[:-1] + (4, 3, 3))
    dn[..., 0, 0, 0] = w
    dn[..., 0, 0, 1] = -z
    dn[..., 0, 0, 2] = y
    dn[..., 0, 1, 0] = z
    dn[..., 0, 1, 1] = w
    dn[..., 0, 1, 2] = -x
    dn[..., 0, 2, 0] = -y
    dn[..., 0, 2, 1] = x
    dn[..., 0, 2, 2] = w
    dn[..., 1, 0, 0] = x
    dn[..., 1, 0, 1] = y
    dn[..., 1, 0, 2] = z
    dn[..., 1, 1, 0] = y
    dn[..., 1, 1, 1] = -x
    dn[..., 1, 1, 2] = -w
    dn[..., 1, 2, 0] = z
    dn[..., 1, 2, 1] = w
    dn[..., 1, 2, 2] = -x
    dn[..., 2, 0, 0] = -y
    dn[..., 2, 0, 1] = x
    dn[..., 2, 0, 2] = w
    dn[..., 2, 1, 0] = x
    dn[..., 2, 1, 1] = y
    dn[..., 2, 1, 2] = z
    dn[..., 2, 2, 0] = -w
    dn[..., 2, 2, 1] = z
    dn[..., 2, 2, 2] = -y
    dn[..., 3, 0, 0] = -z
    dn[..., 3, 0, 1] = -w
    dn[..., 3, 0, 2] = x
    dn[..., 3, 1, 0] = w
    dn[..., 3, 1, 1] = -z
    dn[..., 3, 1, 2] = y
    dn[..., 3, 2, 0] = x
    dn[..., 3, 2, 1] = y
    dn[..., 3, 2, 2] = z
    dn *= 2.0
    # dR/dq_k = (dN/dq_k - 2 q_k R) / s
    qk = np.moveaxis(q, -1, 0)
    for k in range(4):
        dn[..., k, :, :] -= 2.0 * qk[k][..., None, None] * r
    return dn / s[..., None, None, None]


def rotate(q, v):
    """Rotate vectors v by quaternions q (batched)."""
    r = rotation_matrix(q)
    return np.einsum("...ij,...j->...i", r, np.asarray(v, dtype=float))


def from_matrix(r):
    """Quaternion from a rotation matrix, max-trace branch, w >= 0."""
    r = np.asarray(r, dtype=float)
    m00, m11, m22 = r[0, 0], r[1, 1], r[2, 2]
    trace = m00 + m11 + m22
    choices = [trace, m00, m11, m22]
    best = int(np.argmax(choices))
    if best == 0:
        s = np.sqrt(trace + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
        )
    elif best == 1:
        s = np.sqrt(1.0 + m00 - m11 - m22) * 2.0
        q = np.array(
            [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
        )
    elif best == 2:
        s = np.sqrt(1.0 + m11 - m00 - m22) * 2.0
        q = np.array(
            [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
        )
    else:
        s = np.sqrt(1.0 + m22 - m00 - m11) * 2.0
        q = np.array(
            [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
        )
    if q[0] < 0.0:
        q = -q
    return normalize(q)


def from_euler_xyz(ex, ey, ez):
    """Quaternion of R = Rz(ez) @ Ry(ey) @ Rx(ex) (fixed-axis x-y-z)."""
    qx = from_axis_angle([1.0, 0.0, 0.0], ex)
    qy = from_axis_angle([0.0, 1.0, 0.0], ey)
    qz = from_axis_angle([0.0, 0.0, 1.0], ez)
    return multiply(qz, multiply(qy, qx))


def rotation_angle(r):
    """Angle of a rotation matrix, in [0, pi]."""
    c = 0.5 * (np.trace(r) - 1.0)
    return float(np.arccos(np.clip(c, -1.0, 1.0)))
