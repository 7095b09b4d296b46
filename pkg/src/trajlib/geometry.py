"""Convex collision primitives and the differentiable minimum scaling factor.

Two rigidly placed convex bodies are uniformly inflated about their own pose
origins by a common factor alpha until they first share a point. That smallest
factor is returned together with a shared (witness) point and the gradient of
alpha with respect to the 14 pose parameters of the pair (position and
quaternion of each body). alpha > 1 means the unscaled bodies are separated,
which is how the trajectory optimizer expresses collision-freedom.

Sphere and capsule pairs are solved by reducing to a scalar root find on the
scaled segment distance; pairs involving polytopes are solved by a small
primal-dual interior-point iteration on the shared-point convex program. Both
paths recover the gradient from the multipliers of the program at its optimum
(envelope theorem on the Lagrangian), so no solver iterations are ever
differentiated.

Quaternion derivatives follow the convention in :mod:`trajlib.quat`: partials
of the scale-invariant rotation map with respect to the raw components.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np
from scipy.optimize import linprog

from . import quat
from .errors import DegenerateGeometry, NonConvergence

_Z_AXIS = np.array([0.0, 0.0, 1.0])

# Inner conic solver limits (small problems; tight tolerance keeps the
# downstream gradients clean).
IPM_MAX_ITERS = 100
IPM_TOL = 1e-9


@dataclass(frozen=True)
class Pose:
    """Rigid placement: position and unit quaternion (w, x, y, z)."""

    position: np.ndarray
    orientation: np.ndarray

    def __init__(self, position=(0.0, 0.0, 0.0), orientation=(1.0, 0.0, 0.0, 0.0)):
        position = np.asarray(position, dtype=float).reshape(3).copy()
        orientation = np.asarray(orientation, dtype=float).reshape(4).copy()
        norm = np.linalg.norm(orientation)
        if norm < 1e-12:
            raise ValueError("orientation quaternion has zero norm")
        orientation = orientation / norm
        position.flags.writeable = False
        orientation.flags.writeable = False
        object.__setattr__(self, "position", position)
        object.__setattr__(self, "orientation", orientation)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    def params(self) -> np.ndarray:
        """The 7-vector position ++ quaternion."""
        return np.concatenate([self.position, self.orientation])

    @classmethod
    def from_params(cls, params) -> "Pose":
        params = np.asarray(params, dtype=float).reshape(7)
        return cls(params[:3], params[3:])

    def rotation(self) -> np.ndarray:
        return quat.rotation_matrix(self.orientation)

    def transform_point(self, point) -> np.ndarray:
        return self.position + self.rotation() @ np.asarray(point, dtype=float)

    def compose(self, other: "Pose") -> "Pose":
        """self applied after other's local placement (self * other)."""
        return Pose(
            self.position + self.rotation() @ other.position,
            quat.multiply(self.orientation, other.orientation),
        )


@dataclass(frozen=True)
class Sphere:
    radius: float

    def __post_init__(self):
        if not self.radius > 0.0:
            raise ValueError("sphere radius must be positive")


@dataclass(frozen=True)
class Capsule:
    """Segment of half_length along local z, inflated by radius."""

    half_length: float
    radius: float

    def __post_init__(self):
        if not self.radius > 0.0:
            raise ValueError("capsule radius must be positive")
        if self.half_length < 0.0:
            raise ValueError("capsule half_length must be non-negative")


@dataclass(frozen=True)
class Polytope:
    """Bounded halfspace intersection {v : A v <= b} containing the origin."""

    normals: np.ndarray
    offsets: np.ndarray
    _skip_bounded_check: bool = field(default=False, repr=False, compare=False)

    def __init__(self, normals, offsets, _skip_bounded_check=False):
        normals = np.asarray(normals, dtype=float)
        offsets = np.asarray(offsets, dtype=float).reshape(-1)
        if normals.ndim != 2 or normals.shape[1] != 3:
            raise ValueError("normals must be an (m, 3) array")
        if normals.shape[0] != offsets.shape[0]:
            raise ValueError("normals and offsets row counts differ")
        if normals.shape[0] < 4:
            raise ValueError("a bounded polytope needs at least 4 halfspaces")
        if not np.all(offsets > 0.0):
            raise ValueError("offsets must be positive (origin strictly inside)")
        norms = np.linalg.norm(normals, axis=1)
        if np.any(norms < 1e-12):
            raise ValueError("zero-length halfspace normal")
        normals = normals.copy()
        offsets = offsets.copy()
        normals.flags.writeable = False
        offsets.flags.writeable = False
        object.__setattr__(self, "normals", normals)
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "_skip_bounded_check", _skip_bounded_check)
        if not _skip_bounded_check and not self._is_bounded():
            raise ValueError("halfspace set is unbounded")

    def _is_bounded(self) -> bool:
        # Bounded iff every coordinate direction supports a finite LP optimum.
        for axis in range(3):
            for sign in (1.0, -1.0):
                c = np.zeros(3)
                c[axis] = -sign
                res = linprog(
                    c, A_ub=self.normals, b_ub=self.offsets, bounds=[(None, None)] * 3,
                    method="highs",
                )
                if res.status == 3:  # unbounded
                    return False
        return True

    @classmethod
    def box(cls, half_extents) -> "Polytope":
        """Axis-aligned box with the given local half-extents."""
        h = np.asarray(half_extents, dtype=float).reshape(3)
        normals = np.vstack([np.eye(3), -np.eye(3)])
        offsets = np.concatenate([h, h])
        return cls(normals, offsets, _skip_bounded_check=True)


ConvexShape = Union[Sphere, Capsule, Polytope]


@dataclass(frozen=True)
class ScalingResult:
    """Minimum mutual scaling with witness point and pose-parameter gradient."""

    alpha: float
    witness_point: np.ndarray
    grad: np.ndarray  # d alpha / d (posA, quatA, posB, quatB), length 14


# ---------------------------------------------------------------------------
# segment-segment closest points
# ---------------------------------------------------------------------------


def _segseg_params(w0, u1, u2, a, b):
    """Closest parameters (s, t) of |w0 + s u1 - t u2| with |s|<=a, |t|<=b.

    All inputs batched over the leading axis; u1, u2 unit vectors; a, b >= 0.
    """
    eps = 1e-14
    p1 = -a[:, None] * u1  # segment 1 start, relative to its own center
    p2 = -b[:, None] * u2
    d1 = 2.0 * a[:, None] * u1
    d2 = 2.0 * b[:, None] * u2
    r = (w0 + p1) - p2
    aa = np.einsum("ij,ij->i", d1, d1)
    ee = np.einsum("ij,ij->i", d2, d2)
    ff = np.einsum("ij,ij->i", d2, r)
    cc = np.einsum("ij,ij->i", d1, r)
    bb = np.einsum("ij,ij->i", d1, d2)
    denom = aa * ee - bb * bb

    def safe_div(num, den):
        return num / np.where(np.abs(den) < eps, 1.0, den)

    clamp = lambda v: np.clip(v, 0.0, 1.0)

    s = np.where(denom > eps, clamp(safe_div(bb * ff - cc * ee, denom)), 0.0)
    t_nom = bb * s + ff
    t = safe_div(t_nom, ee)
    s_low = clamp(safe_div(-cc, aa))
    s_high = clamp(safe_div(bb - cc, aa))
    s = np.where(t_nom < 0.0, s_low, np.where(t_nom > ee, s_high, s))
    t = clamp(t)

    # degenerate segments
    deg1 = aa <= eps
    deg2 = ee <= eps
    s = np.where(deg1, 0.0, s)
    t = np.where(deg1, clamp(safe_div(ff, ee)), t)
    t = np.where(deg2, 0.0, t)
    s = np.where(deg2 & ~deg1, clamp(safe_div(-cc, aa)), s)
    s = np.where(deg1 & deg2, 0.0, s)
    t = np.where(deg1 & deg2, 0.0, t)

    return (2.0 * s - 1.0) * a, (2.0 * t - 1.0) * b


def _segseg_distance(w0, u1, u2, a, b):
    s, t = _segseg_params(w0, u1, u2, a, b)
    diff = w0 + s[:, None] * u1 - t[:, None] * u2
    return np.linalg.norm(diff, axis=1), s, t


def segment_segment_distance(a0, a1, b0, b1):
    """Minimum distance between closed segments and the achieving points."""
    a0 = np.asarray(a0, dtype=float).reshape(3)
    a1 = np.asarray(a1, dtype=float).reshape(3)
    b0 = np.asarray(b0, dtype=float).reshape(3)
    b1 = np.asarray(b1, dtype=float).reshape(3)
    c1 = 0.5 * (a0 + a1)
    c2 = 0.5 * (b0 + b1)
    la = 0.5 * np.linalg.norm(a1 - a0)
    lb = 0.5 * np.linalg.norm(b1 - b0)
    u1 = (a1 - a0) / (2.0 * la) if la > 0.0 else _Z_AXIS
    u2 = (b1 - b0) / (2.0 * lb) if lb > 0.0 else _Z_AXIS
    dist, s, t = _segseg_distance(
        (c1 - c2)[None, :], u1[None, :], u2[None, :], np.array([la]), np.array([lb])
    )
    pa = c1 + s[0] * u1
    pb = c2 + t[0] * u2
    return float(dist[0]), pa, pb


# ---------------------------------------------------------------------------
# sphere / capsule pairs: scalar root find on the scaled segment distance
# ---------------------------------------------------------------------------


def _capsule_pair_batch(p1, q1, r1, l1, p2, q2, r2, l2, want_grad=True):
    """alpha (and gradient) for batched capsule/sphere pairs.

    Spheres are capsules with zero half-length. Radii and half-lengths may be
    scalars or per-element arrays. Returns (alpha, witness, grad or None).
    """
    n = p1.shape[0]
    r1 = np.broadcast_to(np.asarray(r1, dtype=float), (n,))
    r2 = np.broadcast_to(np.asarray(r2, dtype=float), (n,))
    l1 = np.broadcast_to(np.asarray(l1, dtype=float), (n,))
    l2 = np.broadcast_to(np.asarray(l2, dtype=float), (n,))
    rsum = r1 + r2
    if np.any(rsum <= 0.0):
        raise DegenerateGeometry("zero-radius pair has no scaling factor")
    u1 = quat.rotation_matrix(q1) @ _Z_AXIS
    u2 = quat.rotation_matrix(q2) @ _Z_AXIS
    w0 = p1 - p2
    d0 = np.linalg.norm(w0, axis=1)

    if not np.any(l1 > 0.0) and not np.any(l2 > 0.0):
        alpha = d0 / rsum
        s = np.zeros(n)
        t = np.zeros(n)
    else:
        # g(alpha) = segdist(alpha) - alpha * rsum is strictly decreasing with
        # g(0) = |w0| >= 0 and g(|w0|/rsum) <= 0. Safeguarded Newton on the
        # bracket; the slope comes from the envelope of the clamped minimum.
        hi = d0 / rsum
        lo = np.zeros(n)
        live = d0 > 1e-15
        alpha = np.where(live, hi, 0.0)
        gtol = 1e-12 * np.maximum(1.0, d0)
        for _ in range(60):
            dist, s, t = _segseg_distance(w0, u1, u2, l1 * alpha, l2 * alpha)
            g = dist - alpha * rsum
            pos = g > 0.0
            lo = np.where(live & pos, np.maximum(lo, alpha), lo)
            hi = np.where(live & ~pos, np.minimum(hi, alpha), hi)
            if not np.any(live & (np.abs(g) > gtol)):
                break
            diff = w0 + s[:, None] * u1 - t[:, None] * u2
            ok = dist > 1e-15
            wh = np.where(ok[:, None], diff / np.where(ok, dist, 1.0)[:, None], 0.0)
            at1 = np.abs(s) >= l1 * alpha * (1.0 - 1e-9) - 1e-15
            at2 = np.abs(t) >= l2 * alpha * (1.0 - 1e-9) - 1e-15
            slope = -(
                rsum
                + np.where(at1, l1 * np.abs(np.einsum("ij,ij->i", wh, u1)), 0.0)
                + np.where(at2, l2 * np.abs(np.einsum("ij,ij->i", wh, u2)), 0.0)
            )
            step = np.where(live, alpha - g / slope, 0.0)
            inside = (step > lo) & (step < hi) & np.isfinite(step)
            alpha = np.where(live, np.where(inside, step, 0.5 * (lo + hi)), 0.0)
        _, s, t = _segseg_distance(w0, u1, u2, l1 * alpha, l2 * alpha)

    y1 = p1 + s[:, None] * u1
    y2 = p2 + t[:, None] * u2
    diff = y1 - y2
    dist = np.linalg.norm(diff, axis=1)
    ok = dist > 1e-15
    what = np.where(ok[:, None], diff / np.where(ok, dist, 1.0)[:, None], 0.0)
    witness = y1 - (alpha * r1)[:, None] * what

    if not want_grad:
        return alpha, witness, None

    # Multiplier of the shared-point constraint from stationarity in alpha;
    # segment-extent bounds contribute only where the closest parameter is
    # clamped.
    dot1 = np.einsum("ij,ij->i", what, u1)
    dot2 = np.einsum("ij,ij->i", what, u2)
    at1 = np.abs(s) >= l1 * alpha * (1.0 - 1e-9) - 1e-15
    at2 = np.abs(t) >= l2 * alpha * (1.0 - 1e-9) - 1e-15
    denom = rsum + np.where(at1, l1 * np.abs(dot1), 0.0) + np.where(
        at2, l2 * np.abs(dot2), 0.0
    )
    mu = 1.0 / denom

    grad = np.zeros((n, 14))
    grad[:, 0:3] = mu[:, None] * what
    grad[:, 7:10] = -mu[:, None] * what
    if np.any(l1 > 0.0):
        du1 = quat.rotation_matrix_derivs(q1) @ _Z_AXIS  # (n, 4, 3)
        grad[:, 3:7] = (mu * s)[:, None] * np.einsum("ikj,ij->ik", du1, what)
    if np.any(l2 > 0.0):
        du2 = quat.rotation_matrix_derivs(q2) @ _Z_AXIS
        grad[:, 10:14] = -(mu * t)[:, None] * np.einsum("ikj,ij->ik", du2, what)
    grad[~ok] = 0.0  # coincident origins: alpha = 0, subgradient pinned at 0
    return alpha, witness, grad


def caplike_scaling_batch(params_a, r_a, l_a, params_b, r_b, l_b, want_grad=True):
    """Mixed sphere/capsule pairs in one batch with per-element shape data."""
    params_a = np.atleast_2d(np.asarray(params_a, dtype=float))
    params_b = np.atleast_2d(np.asarray(params_b, dtype=float))
    return _capsule_pair_batch(
        params_a[:, 0:3], params_a[:, 3:7], r_a, l_a,
        params_b[:, 0:3], params_b[:, 3:7], r_b, l_b, want_grad,
    )


# ---------------------------------------------------------------------------
# conic shared-point program for pairs involving polytopes
# ---------------------------------------------------------------------------


class _ConicPair:
    """Batched assembly of min alpha s.t. the scaled bodies share a point.

    Decision vector z = (x, alpha, eta_a?, eta_b?) where eta variables exist
    only for capsule bodies with positive half-length. Constraints are linear
    rows F z + e <= 0 and second-order rows |P z + v| - (c . z + d) <= 0.
    """

    def __init__(self, shapes, p, q, want_grad):
        self.shapes = shapes
        self.n = p[0].shape[0]
        self.p = p
        self.q = q
        self.R = [quat.rotation_matrix(qi) for qi in q]
        self.dR = [quat.rotation_matrix_derivs(qi) if want_grad else None for qi in q]
        self.eta_index = []
        nz = 4
        for shape in shapes:
            if isinstance(shape, Capsule) and shape.half_length > 0.0:
                self.eta_index.append(nz)
                nz += 1
            else:
                self.eta_index.append(-1)
        self.nz = nz
        self._assemble()

    def _assemble(self):
        n, nz = self.n, self.nz
        lin_F, lin_e, lin_body = [], [], []
        soc_P, soc_v, soc_c, soc_body = [], [], [], []
        for side, shape in enumerate(self.shapes):
            p, R = self.p[side], self.R[side]
            eta = self.eta_index[side]
            if isinstance(shape, Polytope):
                a_world = np.einsum("kj,nji->nki", shape.normals, np.swapaxes(R, 1, 2))
                # rows: a_j . R^T (x - p) - alpha b_j <= 0
                m = shape.normals.shape[0]
                F = np.zeros((n, m, nz))
                F[:, :, 0:3] = a_world
                F[:, :, 3] = -shape.offsets[None, :]
                e = -np.einsum("nki,ni->nk", a_world, p)
                lin_F.append(F)
                lin_e.append(e)
                lin_body.extend([side] * m)
            else:
                radius = shape.radius
                half = shape.half_length if isinstance(shape, Capsule) else 0.0
                P = np.zeros((n, 3, nz))
                P[:, :, 0:3] = np.eye(3)[None]
                if eta >= 0:
                    P[:, :, eta] = -(R @ _Z_AXIS)
                v = -self.p[side]
                c = np.zeros((n, nz))
                c[:, 3] = radius
                soc_P.append(P[:, None])
                soc_v.append(v[:, None])
                soc_c.append(c[:, None])
                soc_body.append(side)
                if eta >= 0:
                    F = np.zeros((n, 2, nz))
                    F[:, 0, eta] = 1.0
                    F[:, 0, 3] = -half
                    F[:, 1, eta] = -1.0
                    F[:, 1, 3] = -half
                    lin_F.append(F)
                    lin_e.append(np.zeros((n, 2)))
                    lin_body.extend([-1, -1])  # no pose dependence
        self.F = np.concatenate(lin_F, axis=1) if lin_F else np.zeros((n, 0, nz))
        self.e = np.concatenate(lin_e, axis=1) if lin_e else np.zeros((n, 0))
        self.lin_body = np.array(lin_body, dtype=int)
        if soc_P:
            self.P = np.concatenate(soc_P, axis=1)
            self.v = np.concatenate(soc_v, axis=1)
            self.c = np.concatenate(soc_c, axis=1)
        else:
            self.P = np.zeros((n, 0, 3, nz))
            self.v = np.zeros((n, 0, 3))
            self.c = np.zeros((n, 0, nz))
        self.soc_body = np.array(soc_body, dtype=int)
        self.ml = self.F.shape[1]
        self.ms = self.P.shape[1]

    # -- evaluation ---------------------------------------------------------

    def initial_point(self):
        n, nz = self.n, self.nz
        z = np.zeros((n, nz))
        z[:, 0:3] = 0.5 * (self.p[0] + self.p[1])
        # smallest alpha making every row strictly feasible at x0, eta=0
        alpha_need = np.zeros(n)
        if self.ml:
            num = np.einsum("nki,ni->nk", self.F[:, :, 0:3], z[:, 0:3]) + self.e
            denom = -self.F[:, :, 3]
            alpha_need = np.maximum(alpha_need, np.max(num / denom, axis=1))
        if self.ms:
            w = np.einsum("nkij,nj->nki", self.P, z) + self.v
            alpha_need = np.maximum(
                alpha_need, np.max(np.linalg.norm(w, axis=2) / self.c[:, :, 3], axis=1)
            )
        z[:, 3] = 1.5 * alpha_need + 0.5
        return z

    def residuals(self, z):
        g = np.empty((self.n, self.ml + self.ms))
        if self.ml:
            g[:, : self.ml] = np.einsum("nki,ni->nk", self.F, z) + self.e
        if self.ms:
            w = np.einsum("nkij,nj->nki", self.P, z) + self.v
            g[:, self.ml :] = np.linalg.norm(w, axis=2) - (
                np.einsum("nki,ni->nk", self.c, z)
            )
        return g

    def grad_hess(self, z, lam):
        """Constraint gradients Dg (n, m, nz) and weighted Hessian sum."""
        n, nz = self.n, self.nz
        m = self.ml + self.ms
        Dg = np.zeros((n, m, nz))
        H = np.zeros((n, nz, nz))
        if self.ml:
            Dg[:, : self.ml] = self.F
        if self.ms:
            w = np.einsum("nkij,nj->nki", self.P, z) + self.v
            norm = np.linalg.norm(w, axis=2)
            norm_safe = np.maximum(norm, 1e-12)
            what = w / norm_safe[..., None]
            PtW = np.einsum("nkij,nki->nkj", self.P, what)
            Dg[:, self.ml :] = PtW - self.c
            lam_soc = lam[:, self.ml :]
            # sum_k lam_k P^T (I - what what^T) P / norm
            PtP = np.einsum("nkij,nkil->nkjl", self.P, self.P)
            outer = np.einsum("nkj,nkl->nkjl", PtW, PtW)
            H += np.einsum(
                "nk,nkjl->njl", lam_soc / norm_safe, PtP - outer
            )
        return Dg, H

    # -- gradient of alpha wrt the 14 pose parameters -----------------------

    def pose_gradient(self, z, lam):
        n = self.n
        grad = np.zeros((n, 14))
        lam_lin = lam[:, : self.ml]
        lam_soc = lam[:, self.ml :]
        x = z[:, 0:3]
        for side, shape in enumerate(self.shapes):
            off = 7 * side
            p, R, dR = self.p[side], self.R[side], self.dR[side]
            if isinstance(shape, Polytope):
                rows = np.nonzero(self.lin_body == side)[0]
                a_world = np.einsum(
                    "kj,nji->nki", shape.normals, np.swapaxes(R, 1, 2)
                )  # (n, m, 3)
                lam_rows = lam_lin[:, rows]
                grad[:, off : off + 3] += -np.einsum("nk,nki->ni", lam_rows, a_world)
                # d/dq_k of a_j . R^T (x - p)
                xp = x - p
                da = np.einsum("nqji,kj->nqki", np.swapaxes(dR, 2, 3), shape.normals)
                grad[:, off + 3 : off + 7] += np.einsum(
                    "nk,nqki,ni->nq", lam_rows, da, xp
                )
            else:
                k = int(np.nonzero(self.soc_body == side)[0][0])
                w = np.einsum("nij,nj->ni", self.P[:, k], z) + self.v[:, k]
                norm = np.maximum(np.linalg.norm(w, axis=1), 1e-12)
                what = w / norm[:, None]
                lam_k = lam_soc[:, k]
                grad[:, off : off + 3] += -(lam_k[:, None] * what)
                eta = self.eta_index[side]
                if eta >= 0:
                    du = dR @ _Z_AXIS  # (n, 4, 3)
                    grad[:, off + 3 : off + 7] += -(
                        lam_k * z[:, eta]
                    )[:, None] * np.einsum("nqi,ni->nq", du, what)
        return grad


def _pdip_solve(problem: _ConicPair):
    """Batched primal-dual interior-point solve of the shared-point program."""
    n, nz = problem.n, problem.nz
    m = problem.ml + problem.ms
    z = problem.initial_point()
    g = problem.residuals(z)
    if np.any(g >= 0.0):
        # nudge alpha up until strictly interior (should not trigger)
        for _ in range(40):
            bad = np.any(g >= -1e-12, axis=1)
            if not np.any(bad):
                break
            z[bad, 3] = z[bad, 3] * 2.0 + 1.0
            g = problem.residuals(z)
    lam = 1.0 / np.maximum(-g, 1e-6)
    c_obj = np.zeros(nz)
    c_obj[3] = 1.0

    converged = np.zeros(n, dtype=bool)
    for _ in range(IPM_MAX_ITERS):
        Dg, H = problem.grad_hess(z, lam)
        r_dual = c_obj[None, :] + np.einsum("nk,nki->ni", lam, Dg)
        gap = -np.einsum("nk,nk->n", lam, g) / m
        res_inf = np.maximum(np.abs(r_dual).max(axis=1), gap)
        converged = res_inf <= IPM_TOL
        if np.all(converged):
            break
        mu = 0.1 * gap
        r_cent = -lam * g - mu[:, None]

        # reduced system: (H + Dg^T diag(-lam/g) Dg) dz = -r_dual - Dg^T (r_cent / g)
        w = -lam / g
        Heff = H + np.einsum("nki,nk,nkj->nij", Dg, w, Dg)
        Heff += 1e-12 * np.eye(nz)[None]
        rhs = -r_dual - np.einsum("nki,nk->ni", Dg, r_cent / g)
        try:
            dz = np.linalg.solve(Heff, rhs[..., None])[..., 0]
        except np.linalg.LinAlgError:
            Heff += 1e-8 * np.eye(nz)[None]
            dz = np.linalg.solve(Heff, rhs[..., None])[..., 0]
        dlam = (r_cent - lam * np.einsum("nki,ni->nk", Dg, dz)) / g

        # fraction to boundary on lam, then backtrack to keep g < 0
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(dlam < 0.0, -lam / dlam, np.inf)
        step = np.minimum(1.0, 0.99 * ratio.min(axis=1))
        step = np.where(converged, 0.0, step)
        for _ in range(60):
            z_try = z + step[:, None] * dz
            g_try = problem.residuals(z_try)
            bad = np.any(g_try >= 0.0, axis=1) & ~converged
            if not np.any(bad):
                break
            step = np.where(bad, 0.5 * step, step)
        z = z + step[:, None] * dz
        lam = lam + step[:, None] * dlam
        g = problem.residuals(z)
    else:
        Dg, _ = problem.grad_hess(z, lam)
        r_dual = c_obj[None, :] + np.einsum("nk,nki->ni", lam, Dg)
        gap = -np.einsum("nk,nk->n", lam, g) / m
        res_inf = np.maximum(np.abs(r_dual).max(axis=1), gap)
        if np.any(res_inf > IPM_TOL):
            worst = float(res_inf.max())
            raise NonConvergence(
                f"interior-point solver exceeded {IPM_MAX_ITERS} iterations "
                f"(worst KKT residual {worst:.3e})"
            )
    return z, lam


def _conic_pair_batch(shapes, p, q, want_grad=True):
    problem = _ConicPair(shapes, p, q, want_grad)
    z, lam = _pdip_solve(problem)
    alpha = z[:, 3].copy()
    witness = z[:, 0:3].copy()
    grad = problem.pose_gradient(z, lam) if want_grad else None
    return alpha, witness, grad


# ---------------------------------------------------------------------------
# public entry points
# ---------------------------------------------------------------------------


def _as_caplike(shape):
    """(radius, half_length) for sphere/capsule shapes, None for polytopes."""
    if isinstance(shape, Sphere):
        return shape.radius, 0.0
    if isinstance(shape, Capsule):
        return shape.radius, shape.half_length
    return None


def scaling_batch(shape_a, params_a, shape_b, params_b, want_grad=True):
    """alpha, witness and gradient for one shape pair over batched poses.

    params arrays are (n, 7) position ++ quaternion rows; a (7,) argument is
    broadcast across the batch. Returns (alpha (n,), witness (n, 3),
    grad (n, 14) or None).
    """
    params_a = np.atleast_2d(np.asarray(params_a, dtype=float))
    params_b = np.atleast_2d(np.asarray(params_b, dtype=float))
    n = max(params_a.shape[0], params_b.shape[0])
    if params_a.shape[0] == 1 and n > 1:
        params_a = np.broadcast_to(params_a, (n, 7))
    if params_b.shape[0] == 1 and n > 1:
        params_b = np.broadcast_to(params_b, (n, 7))
    pa, qa = params_a[:, 0:3], params_a[:, 3:7]
    pb, qb = params_b[:, 0:3], params_b[:, 3:7]

    cap_a = _as_caplike(shape_a)
    cap_b = _as_caplike(shape_b)
    if cap_a is not None and cap_b is not None:
        ra, la = cap_a
        rb, lb = cap_b
        return _capsule_pair_batch(pa, qa, ra, la, pb, qb, rb, lb, want_grad)
    return _conic_pair_batch((shape_a, shape_b), (pa, pb), (qa, qb), want_grad)


def _shape_extent(shape) -> float:
    if isinstance(shape, Sphere):
        return shape.radius
    if isinstance(shape, Capsule):
        return shape.radius + shape.half_length
    return float(np.max(shape.offsets / np.linalg.norm(shape.normals, axis=1)))


def min_scaling(shape_a: ConvexShape, pose_a: Pose, shape_b: ConvexShape, pose_b: Pose) -> ScalingResult:
    """Smallest common scaling at which the two placed bodies share a point."""
    if (
        np.linalg.norm(pose_a.position - pose_b.position) < 1e-12
        and _shape_extent(shape_a) + _shape_extent(shape_b) <= 0.0
    ):
        raise DegenerateGeometry("coincident origins with zero-size shapes")
    alpha, witness, grad = scaling_batch(
        shape_a, pose_a.params()[None, :], shape_b, pose_b.params()[None, :], True
    )
    return ScalingResult(float(alpha[0]), witness[0], grad[0])


def min_scaling_value(shape_a, pose_a, shape_b, pose_b) -> float:
    """alpha alone, skipping gradient computation."""
    if (
        np.linalg.norm(pose_a.position - pose_b.position) < 1e-12
        and _shape_extent(shape_a) + _shape_extent(shape_b) <= 0.0
    ):
        raise DegenerateGeometry("coincident origins with zero-size shapes")
    alpha, _, _ = scaling_batch(
        shape_a, pose_a.params()[None, :], shape_b, pose_b.params()[None, :], False
    )
    return float(alpha[0])


def membership_residual(shape: ConvexShape, pose: Pose, alpha: float, point) -> float:
    """How far point sits outside the alpha-scaled body (<= 0 means inside)."""
    point = np.asarray(point, dtype=float).reshape(3)
    r = pose.rotation()
    local = r.T @ (point - pose.position)
    if isinstance(shape, Sphere):
        return float(np.linalg.norm(local) - alpha * shape.radius)
    if isinstance(shape, Capsule):
        h = alpha * shape.half_length
        zc = np.clip(local[2], -h, h)
        return float(
            np.linalg.norm(local - np.array([0.0, 0.0, zc])) - alpha * shape.radius
        )
    return float(np.max(shape.normals @ local - alpha * shape.offsets))
