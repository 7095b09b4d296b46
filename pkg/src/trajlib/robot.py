"""Serial-chain robot models: kinematics, dynamics, and their derivatives.

Models are trees of links connected by revolute, prismatic or fixed joints.
All heavy operations run batched over a leading axis of configurations so the
trajectory optimizer can evaluate a whole knot grid in one call; the public
single-configuration functions wrap the batched cores.

Dynamics follow the world-frame recursive Newton-Euler formulation, with the
mass matrix assembled by the composite-rigid-body algorithm. Derivatives of
the inverse dynamics with respect to q and qdot are propagated analytically
through the same recursions, which is what makes the collocation defect
jacobians exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from . import quat
from .errors import DimensionMismatch, SingularMassMatrix, UnknownFrame
from .geometry import Capsule, Pose

GRAVITY_DEFAULT = (0.0, 0.0, -9.81)


@dataclass(frozen=True)
class JointSpec:
    name: str
    type: str  # revolute | prismatic | fixed
    parent: str
    child: str
    axis: Tuple[float, float, float] = (0.0, 0.0, 1.0)
    origin: Pose = field(default_factory=Pose)
    bounds: Tuple[float, float] = (-np.pi, np.pi)
    velocity_limit: float = 10.0
    effort_limit: float = 100.0
    actuated: bool = True

    def __post_init__(self):
        if self.type not in ("revolute", "prismatic", "fixed"):
            raise ValueError(f"unknown joint type {self.type!r}")
        if self.type != "fixed":
            if not self.bounds[0] < self.bounds[1]:
                raise ValueError(f"joint {self.name}: bounds must satisfy lo < hi")
            if self.actuated and not (self.velocity_limit > 0 and self.effort_limit > 0):
                raise ValueError(f"joint {self.name}: actuated joints need positive limits")
            axis = np.asarray(self.axis, dtype=float)
            if abs(np.linalg.norm(axis) - 1.0) > 1e-9:
                raise ValueError(f"joint {self.name}: axis must be a unit vector")


@dataclass(frozen=True)
class LinkSpec:
    name: str
    mass: float = 0.0
    com: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    inertia: Tuple = ((0.0,) * 3,) * 3  # 3x3 about the CoM, link frame
    capsules: Tuple[Tuple[str, Capsule, Pose], ...] = ()

    def __post_init__(self):
        if self.mass < 0:
            raise ValueError(f"link {self.name}: negative mass")
        inertia = np.asarray(self.inertia, dtype=float)
        if inertia.shape != (3, 3):
            raise ValueError(f"link {self.name}: inertia must be 3x3")
        if np.abs(inertia - inertia.T).max() > 1e-12:
            raise ValueError(f"link {self.name}: inertia must be symmetric")
        eig = np.linalg.eigvalsh(inertia)
        if eig[0] < -1e-12:
            raise ValueError(f"link {self.name}: inertia not positive semidefinite")
        a, b, c = np.maximum(eig, 0.0)
        if a > b + c + 1e-9 or b > a + c + 1e-9 or c > a + b + 1e-9:
            raise ValueError(f"link {self.name}: principal moments violate triangle inequality")


@dataclass(frozen=True)
class ArmSpec:
    """A named serial subchain with an end-effector frame."""

    joints: Tuple[str, ...]
    ee_link: str
    ee_offset: Tuple[float, float, float] = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class RobotModel:
    links: Tuple[LinkSpec, ...]
    joints: Tuple[JointSpec, ...]
    gravity: Tuple[float, float, float] = GRAVITY_DEFAULT
    self_collision_pairs: Tuple[Tuple[str, str], ...] = ()
    arms: Dict[str, ArmSpec] = field(default_factory=dict)
    neutral: Optional[Tuple[float, ...]] = None  # IK seed; bounds midpoint if unset

    def __post_init__(self):
        names = [l.name for l in self.links]
        if len(set(names)) != len(names):
            raise ValueError("duplicate link names")
        link_index = {n: i for i, n in enumerate(names)}
        seen_children = set()
        for j in self.joints:
            if j.parent not in link_index or j.child not in link_index:
                raise ValueError(f"joint {j.name}: unknown parent or child link")
            if j.child in seen_children:
                raise ValueError(f"link {j.child} has two parent joints (not a tree)")
            if link_index[j.child] <= link_index[j.parent]:
                raise ValueError("links must be listed parent-before-child")
            if j.child == names[0]:
                raise ValueError("root link cannot be a joint child")
            seen_children.add(j.child)
        for i, name in enumerate(names[1:], start=1):
            if name not in seen_children:
                raise ValueError(f"link {name} is not connected to the tree")
        cap_ids = [cid for l in self.links for cid, _, _ in l.capsules]
        if len(set(cap_ids)) != len(cap_ids):
            raise ValueError("duplicate capsule identifiers")
        for a, b in self.self_collision_pairs:
            if a not in cap_ids or b not in cap_ids:
                raise ValueError(f"self-collision pair ({a}, {b}) names unknown capsules")
        for arm_name, arm in self.arms.items():
            if arm.ee_link not in link_index:
                raise ValueError(f"arm {arm_name}: unknown ee link {arm.ee_link}")
            joint_names = {j.name for j in self.joints}
            for jn in arm.joints:
                if jn not in joint_names:
                    raise ValueError(f"arm {arm_name}: unknown joint {jn}")

    # -- compiled structure --------------------------------------------------

    @property
    def _c(self) -> "_Compiled":
        cached = self.__dict__.get("_compiled")
        if cached is None:
            cached = _Compiled(self)
            self.__dict__["_compiled"] = cached
        return cached

    @property
    def nq(self) -> int:
        return self._c.n

    @property
    def nu(self) -> int:
        return int(self._c.actuation.shape[1])

    @property
    def actuation(self) -> np.ndarray:
        """The n x m selector matrix of actuated joints."""
        return self._c.actuation.copy()

    @property
    def capsule_ids(self) -> Tuple[str, ...]:
        return tuple(self._c.cap_ids)

    @property
    def dof_names(self) -> Tuple[str, ...]:
        return tuple(self._c.dof_names)

    def joint_limits(self) -> Tuple[np.ndarray, np.ndarray]:
        return self._c.q_lo.copy(), self._c.q_hi.copy()

    def velocity_limits(self) -> np.ndarray:
        return self._c.qd_lim.copy()

    def effort_limits(self) -> np.ndarray:
        return self._c.u_lim.copy()

    def frame_names(self) -> Tuple[str, ...]:
        return tuple([l.name for l in self.links] + [f"{a}_ee" for a in self.arms])

    def neutral_q(self) -> np.ndarray:
        """The fixed IK seed: the model's neutral pose, else bounds midpoint."""
        if self.neutral is not None:
            q = np.asarray(self.neutral, dtype=float)
            if q.shape != (self.nq,):
                raise DimensionMismatch("neutral pose length differs from dof count")
            return q.copy()
        return 0.5 * (self._c.q_lo + self._c.q_hi)

    def arm_dofs(self, arm: str) -> np.ndarray:
        if arm not in self.arms:
            raise UnknownFrame(f"unknown arm {arm!r}")
        return self._c.arm_dofs[arm].copy()

    def max_reach(self, arm: str) -> float:
        """Conservative upper bound on the arm's end-effector reach from base."""
        return self._c.arm_reach[arm]


class _Compiled:
    """Flat arrays describing the tree, built once per model."""

    def __init__(self, model: RobotModel):
        self.model = model
        self.link_index = {l.name: i for i, l in enumerate(model.links)}
        nl = len(model.links)
        self.nl = nl
        self.parent = np.full(nl, -1, dtype=int)
        self.jtype = np.zeros(nl, dtype=int)  # 0 fixed/root, 1 revolute, 2 prismatic
        self.dof = np.full(nl, -1, dtype=int)
        self.axis = np.zeros((nl, 3))
        self.origin_R = np.tile(np.eye(3), (nl, 1, 1))
        self.origin_t = np.zeros((nl, 3))
        self.origin_q = np.tile(quat.IDENTITY, (nl, 1))
        dof_names = []
        joint_of_link = {}
        for j in model.joints:
            ci = self.link_index[j.child]
            joint_of_link[j.child] = j
            self.parent[ci] = self.link_index[j.parent]
            self.origin_R[ci] = j.origin.rotation()
            self.origin_t[ci] = j.origin.position
            self.origin_q[ci] = j.origin.orientation
            if j.type == "revolute":
                self.jtype[ci] = 1
            elif j.type == "prismatic":
                self.jtype[ci] = 2
            if j.type != "fixed":
                self.dof[ci] = len(dof_names)
                dof_names.append(j.name)
                self.axis[ci] = np.asarray(j.axis, dtype=float)
        self.n = len(dof_names)
        self.dof_names = dof_names
        self.joint_by_name = {j.name: j for j in model.joints}

        q_lo, q_hi, qd_lim, u_lim, act = [], [], [], [], []
        for name in dof_names:
            j = self.joint_by_name[name]
            q_lo.append(j.bounds[0])
            q_hi.append(j.bounds[1])
            qd_lim.append(j.velocity_limit)
            u_lim.append(j.effort_limit)
            act.append(j.actuated)
        self.q_lo = np.array(q_lo)
        self.q_hi = np.array(q_hi)
        self.qd_lim = np.array(qd_lim)
        self.u_lim = np.array(u_lim)
        cols = [k for k, a in enumerate(act) if a]
        B = np.zeros((self.n, len(cols)))
        for m_idx, k in enumerate(cols):
            B[k, m_idx] = 1.0
        self.actuation = B
        self.u_lim = self.u_lim[cols]

        self.mass = np.array([l.mass for l in model.links])
        self.com = np.array([l.com for l in model.links], dtype=float)
        self.inertia = np.array([l.inertia for l in model.links], dtype=float)

        caps = []
        for li, l in enumerate(model.links):
            for cid, shape, mount in l.capsules:
                caps.append((cid, li, shape, mount))
        self.cap_ids = [c[0] for c in caps]
        self.cap_link = np.array([c[1] for c in caps], dtype=int)
        self.cap_shape = [c[2] for c in caps]
        self.cap_mount_t = np.array([c[3].position for c in caps]) if caps else np.zeros((0, 3))
        self.cap_mount_q = np.array([c[3].orientation for c in caps]) if caps else np.zeros((0, 4))
        self.cap_by_id = {cid: k for k, (cid, _, _, _) in enumerate(caps)}

        # frames: all links plus one per arm
        self.frames = {l.name: (i, np.zeros(3)) for i, l in enumerate(model.links)}
        for arm_name, arm in model.arms.items():
            self.frames[f"{arm_name}_ee"] = (
                self.link_index[arm.ee_link],
                np.asarray(arm.ee_offset, dtype=float),
            )

        self.arm_dofs = {}
        self.arm_reach = {}
        for arm_name, arm in model.arms.items():
            dofs = []
            for jn in arm.joints:
                j = self.joint_by_name[jn]
                if j.type != "fixed":
                    dofs.append(dof_names.index(jn))
            self.arm_dofs[arm_name] = np.array(sorted(dofs), dtype=int)
            # reach bound: sum of joint-to-joint offsets along the chain from
            # the arm's first joint, plus prismatic travel and the ee offset
            reach = float(np.linalg.norm(arm.ee_offset))
            li = self.link_index[arm.ee_link]
            first_joint = self.joint_by_name[arm.joints[0]]
            stop = self.link_index[first_joint.child]
            while li >= 0 and li != self.parent[stop]:
                reach += float(np.linalg.norm(self.origin_t[li]))
                if self.jtype[li] == 2:
                    reach += max(abs(self.q_lo[self.dof[li]]), abs(self.q_hi[self.dof[li]]))
                if li == stop:
                    break
                li = self.parent[li]
            self.arm_reach[arm_name] = reach

    def arm_base_point(self, arm_name: str, q0: np.ndarray) -> np.ndarray:
        """World anchor of the arm's first joint at configuration q0."""
        arm = self.model.arms[arm_name]
        first = self.joint_by_name[arm.joints[0]]
        R, o, _, _ = fk_batch(self.model, q0[None, :])
        return o[self.link_index[first.child]][0]


def _check_q(model: RobotModel, q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape[-1] != model.nq:
        raise DimensionMismatch(f"expected {model.nq} coordinates, got {q.shape[-1]}")
    return q


def _skew(v):
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def _axis_rotation(axis, angle):
    """Rotation about a fixed unit axis, batched over angle (K,)."""
    c = np.cos(angle)[:, None, None]
    s = np.sin(angle)[:, None, None]
    k = _skew(np.asarray(axis, dtype=float))
    return np.eye(3)[None] + s * k[None] + (1.0 - c) * (k @ k)[None]


# ---------------------------------------------------------------------------
# forward kinematics
# ---------------------------------------------------------------------------


def fk_batch(model: RobotModel, Q: np.ndarray):
    """World rotation, origin, joint axis and quaternion of every link.

    Returns (R, o, z, qn): lists over links of arrays (K,3,3), (K,3), (K,3),
    (K,4). z is the world direction of the link's driving joint axis.
    """
    c = model._c
    Q = _check_q(model, np.atleast_2d(Q))
    K = Q.shape[0]
    R = [None] * c.nl
    o = [None] * c.nl
    z = [None] * c.nl
    qn = [None] * c.nl
    R[0] = np.broadcast_to(np.eye(3), (K, 3, 3))
    o[0] = np.zeros((K, 3))
    z[0] = np.zeros((K, 3))
    qn[0] = np.broadcast_to(quat.IDENTITY, (K, 4))
    for i in range(1, c.nl):
        p = c.parent[i]
        R_pre = R[p] @ c.origin_R[i]
        o_pre = o[p] + np.einsum("kij,j->ki", R[p], c.origin_t[i])
        q_pre = quat.multiply(qn[p], c.origin_q[i])
        if c.jtype[i] == 1:  # revolute
            theta = Q[:, c.dof[i]]
            A = _axis_rotation(c.axis[i], theta)
            R[i] = R_pre @ A
            o[i] = o_pre
            half = 0.5 * theta
            qj = np.zeros((K, 4))
            qj[:, 0] = np.cos(half)
            qj[:, 1:] = np.sin(half)[:, None] * c.axis[i][None, :]
            qn[i] = quat.multiply(q_pre, qj)
            z[i] = R_pre @ c.axis[i]
        elif c.jtype[i] == 2:  # prismatic
            s = Q[:, c.dof[i]]
            R[i] = R_pre
            zi = R_pre @ c.axis[i]
            o[i] = o_pre + s[:, None] * zi
            qn[i] = q_pre
            z[i] = zi
        else:  # fixed
            R[i] = R_pre
            o[i] = o_pre
            qn[i] = q_pre
            z[i] = np.zeros((K, 3))
    return R, o, z, qn


def fk_derivs_batch(model: RobotModel, Q: np.ndarray):
    """FK plus per-link derivatives of R, o and the link quaternion wrt q.

    Returns (R, o, z, qn, DR, Do, Dq) where DR[i] is (K,3,3,n), Do[i] is
    (K,3,n) and Dq[i] is (K,4,n).
    """
    c = model._c
    Q = _check_q(model, np.atleast_2d(Q))
    K = Q.shape[0]
    n = c.n
    R, o, z, qn = fk_batch(model, Q)
    DR = [np.zeros((K, 3, 3, n)) for _ in range(c.nl)]
    Do = [np.zeros((K, 3, n)) for _ in range(c.nl)]
    Dq = [np.zeros((K, 4, n)) for _ in range(c.nl)]
    for i in range(1, c.nl):
        p = c.parent[i]
        # pre-joint frame derivatives
        DR_pre = np.einsum("kabn,bc->kacn", DR[p], c.origin_R[i])
        Do_pre = Do[p] + np.einsum("kabn,b->kan", DR[p], c.origin_t[i])
        Dq_pre = _quat_mul_dleft(Dq[p], c.origin_q[i])
        if c.jtype[i] == 1:
            d = c.dof[i]
            theta = Q[:, d]
            A = _axis_rotation(c.axis[i], theta)
            DR[i] = np.einsum("kabn,kbc->kacn", DR_pre, A)
            # dA/dtheta = A [axis]x
            Sk = _skew(c.axis[i])
            R_pre = R[p] @ c.origin_R[i]
            DR[i][:, :, :, d] += R_pre @ (A @ Sk)
            Do[i] = Do_pre
            half = 0.5 * theta
            qj = np.zeros((K, 4))
            qj[:, 0] = np.cos(half)
            qj[:, 1:] = np.sin(half)[:, None] * c.axis[i][None, :]
            Dq[i] = _quat_mul_dleft_var(Dq_pre, qj)
            q_pre = quat.multiply(qn[p], c.origin_q[i])
            dqj = 0.5 * quat.multiply(qj, np.concatenate([[0.0], c.axis[i]]))
            Dq[i][:, :, d] += quat.multiply(q_pre, dqj)
        elif c.jtype[i] == 2:
            d = c.dof[i]
            s = Q[:, d]
            DR[i] = DR_pre
            Dz = np.einsum("kabn,b->kan", DR_pre, c.axis[i])
            zi = z[i]
            Do[i] = Do_pre + s[:, None, None] * Dz
            Do[i][:, :, d] += zi
            Dq[i] = Dq_pre
        else:
            DR[i] = DR_pre
            Do[i] = Do_pre
            Dq[i] = Dq_pre
    return R, o, z, qn, DR, Do, Dq


def _quat_mul_dleft(Dq_left, q_right_const):
    """d(q_left * q_const)/dx from d(q_left)/dx, constant right factor."""
    w, x, y, z = q_right_const
    M = np.array(
        [
            [w, -x, -y, -z],
            [x, w, z, -y],
            [y, -z, w, x],
            [z, y, -x, w],
        ]
    )
    return np.einsum("ab,kbn->kan", M, Dq_left)


def _quat_mul_dleft_var(Dq_left, q_right_var):
    """Same but the right factor varies across the batch (K,4)."""
    return np.einsum("kab,kbn->kan", _right_mult_matrix(q_right_var), Dq_left)


def _right_mult_matrix(qr):
    """Matrix Rm with (q_left * q_right) = Rm(q_right) @ q_left."""
    w, x, y, z = qr.T
    K = qr.shape[0]
    M = np.empty((K, 4, 4))
    M[:, 0, 0], M[:, 0, 1], M[:, 0, 2], M[:, 0, 3] = w, -x, -y, -z
    M[:, 1, 0], M[:, 1, 1], M[:, 1, 2], M[:, 1, 3] = x, w, z, -y
    M[:, 2, 0], M[:, 2, 1], M[:, 2, 2], M[:, 2, 3] = y, -z, w, x
    M[:, 3, 0], M[:, 3, 1], M[:, 3, 2], M[:, 3, 3] = z, y, -x, w
    return M


def forward_kinematics(model: RobotModel, q) -> list:
    """World pose of every link frame, in link order."""
    q = _check_q(model, q)
    R, o, _, qn = fk_batch(model, q[None, :])
    return [Pose(o[i][0], qn[i][0]) for i in range(len(model.links))]


def capsule_params_from_fk(model: RobotModel, fk):
    """Capsule params/jacobians from a precomputed fk_derivs_batch result."""
    c = model._c
    R, o, z, qn, DR, Do, Dq = fk
    K = o[0].shape[0]
    ncaps = len(c.cap_ids)
    P = np.zeros((K, ncaps, 7))
    J = np.zeros((K, ncaps, 7, c.n))
    for k in range(ncaps):
        li = c.cap_link[k]
        P[:, k, 0:3] = o[li] + np.einsum("kab,b->ka", np.asarray(R[li]), c.cap_mount_t[k])
        P[:, k, 3:7] = quat.multiply(qn[li], c.cap_mount_q[k])
        J[:, k, 0:3, :] = Do[li] + np.einsum("kabn,b->kan", DR[li], c.cap_mount_t[k])
        J[:, k, 3:7, :] = _quat_mul_dleft(Dq[li], c.cap_mount_q[k])
    return P, J


def capsule_params_batch(model: RobotModel, Q):
    """World 7-vector params and jacobians of every attached capsule.

    Returns (P, J): P is (K, ncaps, 7) and J is (K, ncaps, 7, n).
    """
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    return capsule_params_from_fk(model, fk_derivs_batch(model, Q))


def capsule_params_values_batch(model: RobotModel, Q):
    """Capsule world params only (no jacobians); cheap path for validators."""
    c = model._c
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R, o, z, qn = fk_batch(model, Q)
    K = Q.shape[0]
    ncaps = len(c.cap_ids)
    P = np.zeros((K, ncaps, 7))
    for k in range(ncaps):
        li = c.cap_link[k]
        P[:, k, 0:3] = o[li] + np.einsum("kab,b->ka", np.asarray(R[li]), c.cap_mount_t[k])
        P[:, k, 3:7] = quat.multiply(qn[li], c.cap_mount_q[k])
    return P


def frame_position_from_fk(model: RobotModel, fk, frame_name: str):
    """Frame world position and position jacobian from precomputed FK."""
    c = model._c
    if frame_name not in c.frames:
        raise UnknownFrame(f"unknown frame {frame_name!r}")
    li, offset = c.frames[frame_name]
    R, o, z, qn, DR, Do, Dq = fk
    pos = o[li] + np.einsum("kab,b->ka", np.asarray(R[li]), offset)
    jac = Do[li] + np.einsum("kabn,b->kan", DR[li], offset)
    return pos, jac


def capsule_params(model: RobotModel, q):
    """World BodyParams and d(params)/dq for every capsule at one q."""
    P, J = capsule_params_batch(model, _check_q(model, q)[None, :])
    return P[0], J[0]


def end_effector(model: RobotModel, q, frame_name: str) -> Pose:
    c = model._c
    if frame_name not in c.frames:
        raise UnknownFrame(f"unknown frame {frame_name!r}")
    li, offset = c.frames[frame_name]
    q = _check_q(model, q)
    R, o, _, qn = fk_batch(model, q[None, :])
    return Pose(o[li][0] + R[li][0] @ offset, qn[li][0])


def frame_position_batch(model: RobotModel, Q, frame_name: str):
    """World position of a frame over batched configurations, with jacobian."""
    fk = fk_derivs_batch(model, np.atleast_2d(Q))
    return frame_position_from_fk(model, fk, frame_name)


def end_effector_jacobian(model: RobotModel, q, frame_name: str) -> np.ndarray:
    """Geometric jacobian (position rows then rotation rows), 6 x n."""
    c = model._c
    if frame_name not in c.frames:
        raise UnknownFrame(f"unknown frame {frame_name!r}")
    li, offset = c.frames[frame_name]
    q = _check_q(model, q)
    R, o, z, qn = fk_batch(model, q[None, :])
    p = o[li][0] + R[li][0] @ offset
    J = np.zeros((6, model.nq))
    i = li
    while i > 0:
        d = c.dof[i]
        if d >= 0:
            if c.jtype[i] == 1:
                J[0:3, d] = np.cross(z[i][0], p - o[i][0])
                J[3:6, d] = z[i][0]
            else:
                J[0:3, d] = z[i][0]
        i = c.parent[i]
    return J


# ---------------------------------------------------------------------------
# dynamics
# ---------------------------------------------------------------------------


def _cross_v(a, b):
    out = np.empty(np.broadcast_shapes(a.shape, b.shape))
    out[..., 0] = a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1]
    out[..., 1] = a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2]
    out[..., 2] = a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]
    return out


def _cross_dv(Da, b):
    """cross(Da[:, :, n], b) column-wise: (K,3,n) x (K,3) -> (K,3,n)."""
    b = b[:, :, None]
    out = np.empty_like(Da)
    out[:, 0] = Da[:, 1] * b[:, 2] - Da[:, 2] * b[:, 1]
    out[:, 1] = Da[:, 2] * b[:, 0] - Da[:, 0] * b[:, 2]
    out[:, 2] = Da[:, 0] * b[:, 1] - Da[:, 1] * b[:, 0]
    return out


def _cross_vd(a, Db):
    a = a[:, :, None]
    out = np.empty_like(Db)
    out[:, 0] = a[:, 1] * Db[:, 2] - a[:, 2] * Db[:, 1]
    out[:, 1] = a[:, 2] * Db[:, 0] - a[:, 0] * Db[:, 2]
    out[:, 2] = a[:, 0] * Db[:, 1] - a[:, 1] * Db[:, 0]
    return out


def rnea_batch(model: RobotModel, Q, Qd, Qdd, gravity=None, derivs=False, fk=None):
    """Inverse dynamics tau(q, qd, qdd), batched, optionally with partials.

    Returns tau (K, n) or (tau, dtau_dq, dtau_dqd) with (K, n, n) partials.
    The partial with respect to qdd is the mass matrix; use mass_matrix_batch.
    """
    c = model._c
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    Qd = np.atleast_2d(np.asarray(Qd, dtype=float))
    Qdd = np.atleast_2d(np.asarray(Qdd, dtype=float))
    if Qd.shape != Q.shape or Qdd.shape != Q.shape:
        raise DimensionMismatch("q, qd, qdd shapes differ")
    K, n = Q.shape
    if n != c.n:
        raise DimensionMismatch(f"expected {c.n} coordinates, got {n}")
    g = np.asarray(model.gravity if gravity is None else gravity, dtype=float)

    if derivs:
        if fk is None:
            fk = fk_derivs_batch(model, Q)
        R, o, z, qn, DR, Do, _ = fk
    else:
        if fk is None:
            R, o, z, qn = fk_batch(model, Q)
        else:
            R, o, z, qn = fk[:4]
        DR = Do = None

    zeros3 = np.zeros((K, 3))
    w = [zeros3] * c.nl  # angular velocity
    dw = [zeros3] * c.nl  # angular acceleration
    a = [None] * c.nl  # linear acceleration of the link origin
    a[0] = np.broadcast_to(-g, (K, 3))
    w[0] = zeros3
    dw[0] = zeros3

    if derivs:
        zD = np.zeros((K, 3, n))
        Dq_w = [zD] * c.nl
        Dv_w = [zD] * c.nl
        Dq_dw = [zD] * c.nl
        Dv_dw = [zD] * c.nl
        Dq_a = [zD] * c.nl
        Dv_a = [zD] * c.nl
        Dz = [zD] * c.nl

    for i in range(1, c.nl):
        p = c.parent[i]
        r = o[i] - o[p]
        wi = w[p]
        dwi = dw[p]
        ai = a[p] + _cross_v(dw[p], r) + _cross_v(w[p], _cross_v(w[p], r))
        if derivs:
            Dr = Do[i] - Do[p]
            Dq_wi = Dq_w[p]
            Dv_wi = Dv_w[p]
            Dq_dwi = Dq_dw[p]
            Dv_dwi = Dv_dw[p]
            wpr = _cross_v(w[p], r)
            Dq_wpr = _cross_dv(Dq_w[p], r) + _cross_vd(w[p], Dr)
            Dv_wpr = _cross_dv(Dv_w[p], r)
            Dq_ai = (
                Dq_a[p]
                + _cross_dv(Dq_dw[p], r)
                + _cross_vd(dw[p], Dr)
                + _cross_dv(Dq_w[p], wpr)
                + _cross_vd(w[p], Dq_wpr)
            )
            Dv_ai = (
                Dv_a[p]
                + _cross_dv(Dv_dw[p], r)
                + _cross_dv(Dv_w[p], wpr)
                + _cross_vd(w[p], Dv_wpr)
            )
        if c.jtype[i] == 1:
            d = c.dof[i]
            zi = z[i]
            qd_i = Qd[:, d]
            qdd_i = Qdd[:, d]
            wi = w[p] + zi * qd_i[:, None]
            wxz = _cross_v(w[p], zi)
            dwi = dw[p] + zi * qdd_i[:, None] + wxz * qd_i[:, None]
            if derivs:
                Dzi = np.einsum("kabn,bc,c->kan", DR[p], c.origin_R[i], c.axis[i])
                Dq_wi = Dq_w[p] + Dzi * qd_i[:, None, None]
                Dv_wi = Dv_w[p].copy()
                Dv_wi[:, :, d] += zi
                Dq_wxz = _cross_dv(Dq_w[p], zi) + _cross_vd(w[p], Dzi)
                Dv_wxz = _cross_dv(Dv_w[p], zi)
                Dq_dwi = Dq_dw[p] + Dzi * qdd_i[:, None, None] + Dq_wxz * qd_i[:, None, None]
                Dv_dwi = Dv_dw[p] + Dv_wxz * qd_i[:, None, None]
                Dv_dwi[:, :, d] += wxz
                Dz_i = Dzi
        elif c.jtype[i] == 2:
            d = c.dof[i]
            zi = z[i]
            qd_i = Qd[:, d]
            qdd_i = Qdd[:, d]
            coriolis = 2.0 * _cross_v(w[p], zi) * qd_i[:, None]
            ai = ai + zi * qdd_i[:, None] + coriolis
            if derivs:
                Dzi = np.einsum("kabn,bc,c->kan", DR[p], c.origin_R[i], c.axis[i])
                Dq_ai = Dq_ai + Dzi * qdd_i[:, None, None] + 2.0 * qd_i[:, None, None] * (
                    _cross_dv(Dq_w[p], zi) + _cross_vd(w[p], Dzi)
                )
                Dv_ai = Dv_ai + 2.0 * qd_i[:, None, None] * _cross_dv(Dv_w[p], zi)
                Dv_ai[:, :, d] += 2.0 * _cross_v(w[p], zi)
                Dz_i = Dzi
        else:
            if derivs:
                Dz_i = zD

        w[i] = wi
        dw[i] = dwi
        a[i] = ai
        if derivs:
            Dq_w[i] = Dq_wi
            Dv_w[i] = Dv_wi
            Dq_dw[i] = Dq_dwi
            Dv_dw[i] = Dv_dwi
            Dq_a[i] = Dq_ai
            Dv_a[i] = Dv_ai
            Dz[i] = Dz_i

    # per-link wrenches about the link origin
    F = [None] * c.nl
    N = [None] * c.nl
    if derivs:
        Dq_F = [None] * c.nl
        Dv_F = [None] * c.nl
        Dq_N = [None] * c.nl
        Dv_N = [None] * c.nl
    for i in range(c.nl):
        m = c.mass[i]
        rc = np.einsum("kab,b->ka", np.asarray(R[i]), c.com[i])
        wxrc = _cross_v(w[i], rc)
        ac = a[i] + _cross_v(dw[i], rc) + _cross_v(w[i], wxrc)
        Iw = np.einsum("kab,bc,kdc->kad", np.asarray(R[i]), c.inertia[i], np.asarray(R[i]))
        Iww = np.einsum("kab,kb->ka", Iw, w[i])
        F[i] = m * ac
        N[i] = np.einsum("kab,kb->ka", Iw, dw[i]) + _cross_v(w[i], Iww)
        N[i] = N[i] + _cross_v(rc, F[i])
        if derivs:
            Drc = np.einsum("kabn,b->kan", DR[i], c.com[i])
            Dq_wxrc = _cross_dv(Dq_w[i], rc) + _cross_vd(w[i], Drc)
            Dv_wxrc = _cross_dv(Dv_w[i], rc)
            Dq_ac = (
                Dq_a[i]
                + _cross_dv(Dq_dw[i], rc)
                + _cross_vd(dw[i], Drc)
                + _cross_dv(Dq_w[i], wxrc)
                + _cross_vd(w[i], Dq_wxrc)
            )
            Dv_ac = Dv_a[i] + _cross_dv(Dv_dw[i], rc) + _cross_dv(Dv_w[i], wxrc) + _cross_vd(
                w[i], Dv_wxrc
            )
            Dq_F[i] = m * Dq_ac
            Dv_F[i] = m * Dv_ac
            DIw = np.einsum("kabn,bc,kdc->kadn", DR[i], c.inertia[i], np.asarray(R[i]))
            DIw = DIw + np.einsum("kab,bc,kdcn->kadn", np.asarray(R[i]), c.inertia[i], DR[i])
            Dq_Iww = np.einsum("kabn,kb->kan", DIw, w[i]) + np.einsum(
                "kab,kbn->kan", Iw, Dq_w[i]
            )
            Dv_Iww = np.einsum("kab,kbn->kan", Iw, Dv_w[i])
            Dq_N[i] = (
                np.einsum("kabn,kb->kan", DIw, dw[i])
                + np.einsum("kab,kbn->kan", Iw, Dq_dw[i])
                + _cross_dv(Dq_w[i], Iww)
                + _cross_vd(w[i], Dq_Iww)
                + _cross_dv(Drc, F[i])
                + _cross_vd(rc, Dq_F[i])
            )
            Dv_N[i] = (
                np.einsum("kab,kbn->kan", Iw, Dv_dw[i])
                + _cross_dv(Dv_w[i], Iww)
                + _cross_vd(w[i], Dv_Iww)
                + _cross_vd(rc, Dv_F[i])
            )

    # backward accumulation
    f = [None] * c.nl
    nmom = [None] * c.nl
    if derivs:
        Dq_f = [None] * c.nl
        Dv_f = [None] * c.nl
        Dq_n = [None] * c.nl
        Dv_n = [None] * c.nl
    tau = np.zeros((K, n))
    dtau_q = np.zeros((K, n, n)) if derivs else None
    dtau_v = np.zeros((K, n, n)) if derivs else None
    for i in range(c.nl - 1, -1, -1):
        f[i] = F[i].copy()
        nmom[i] = N[i].copy()
        if derivs:
            Dq_f[i] = Dq_F[i].copy()
            Dv_f[i] = Dv_F[i].copy()
            Dq_n[i] = Dq_N[i].copy()
            Dv_n[i] = Dv_N[i].copy()
        for j in range(i + 1, c.nl):
            if c.parent[j] != i:
                continue
            rij = o[j] - o[i]
            f[i] += f[j]
            nmom[i] += nmom[j] + _cross_v(rij, f[j])
            if derivs:
                Drij = Do[j] - Do[i]
                Dq_f[i] += Dq_f[j]
                Dv_f[i] += Dv_f[j]
                Dq_n[i] += Dq_n[j] + _cross_dv(Drij, f[j]) + _cross_vd(rij, Dq_f[j])
                Dv_n[i] += Dv_n[j] + _cross_vd(rij, Dv_f[j])
        d = c.dof[i]
        if d >= 0:
            if c.jtype[i] == 1:
                tau[:, d] = np.einsum("ka,ka->k", z[i], nmom[i])
                if derivs:
                    dtau_q[:, d, :] = np.einsum("kan,ka->kn", Dz[i], nmom[i]) + np.einsum(
                        "ka,kan->kn", z[i], Dq_n[i]
                    )
                    dtau_v[:, d, :] = np.einsum("ka,kan->kn", z[i], Dv_n[i])
            else:
                tau[:, d] = np.einsum("ka,ka->k", z[i], f[i])
                if derivs:
                    dtau_q[:, d, :] = np.einsum("kan,ka->kn", Dz[i], f[i]) + np.einsum(
                        "ka,kan->kn", z[i], Dq_f[i]
                    )
                    dtau_v[:, d, :] = np.einsum("ka,kan->kn", z[i], Dv_f[i])

    if derivs:
        return tau, dtau_q, dtau_v
    return tau


def mass_matrix_batch(model: RobotModel, Q, fk=None):
    """Composite-rigid-body mass matrix, batched: (K, n, n)."""
    c = model._c
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    K, n = Q.shape
    if n != c.n:
        raise DimensionMismatch(f"expected {c.n} coordinates, got {n}")
    if fk is None:
        R, o, z, qn = fk_batch(model, Q)
    else:
        R, o, z, qn = fk[:4]
    # composite inertia of each subtree about the world origin
    mass_c = np.zeros((K, c.nl))
    mc_c = np.zeros((K, c.nl, 3))  # mass * com
    io_c = np.zeros((K, c.nl, 3, 3))  # inertia about world origin
    eye = np.eye(3)
    for i in range(c.nl):
        m = c.mass[i]
        ci = o[i] + np.einsum("kab,b->ka", np.asarray(R[i]), c.com[i])
        icom = np.einsum("kab,bc,kdc->kad", np.asarray(R[i]), c.inertia[i], np.asarray(R[i]))
        c2 = np.einsum("ka,kb->kab", ci, ci)
        cc = np.einsum("ka,ka->k", ci, ci)
        mass_c[:, i] = m
        mc_c[:, i] = m * ci
        io_c[:, i] = icom + m * (cc[:, None, None] * eye[None] - c2)
    for i in range(c.nl - 1, 0, -1):
        p = c.parent[i]
        mass_c[:, p] += mass_c[:, i]
        mc_c[:, p] += mc_c[:, i]
        io_c[:, p] += io_c[:, i]

    M = np.zeros((K, n, n))
    for j in range(1, c.nl):
        dj = c.dof[j]
        if dj < 0:
            continue
        if c.jtype[j] == 1:
            wj = z[j]
            vj = _cross_v(o[j], z[j])  # velocity of the world-origin point
        else:
            wj = np.zeros((K, 3))
            vj = z[j]
        # composite momentum-rate wrench about the world origin
        f_lin = mass_c[:, j, None] * vj + _cross_v(wj, mc_c[:, j])
        n_ang = np.einsum("kab,kb->ka", io_c[:, j], wj) + _cross_v(mc_c[:, j], vj)
        i = j
        while i > 0:
            di = c.dof[i]
            if di >= 0:
                if c.jtype[i] == 1:
                    wi = z[i]
                    vi = _cross_v(o[i], z[i])
                else:
                    wi = np.zeros((K, 3))
                    vi = z[i]
                val = np.einsum("ka,ka->k", wi, n_ang) + np.einsum("ka,ka->k", vi, f_lin)
                M[:, di, dj] = val
                M[:, dj, di] = val
            i = c.parent[i]
    return M


def mass_matrix(model: RobotModel, q) -> np.ndarray:
    return mass_matrix_batch(model, _check_q(model, q)[None, :])[0]


def bias_forces(model: RobotModel, q, qd) -> np.ndarray:
    """C(q, qd) qd: velocity products, no gravity."""
    q = _check_q(model, q)
    qd = _check_q(model, qd)
    return rnea_batch(model, q[None, :], qd[None, :], np.zeros((1, model.nq)), gravity=(0, 0, 0))[0]


def gravity_forces(model: RobotModel, q) -> np.ndarray:
    q = _check_q(model, q)
    zero = np.zeros((1, model.nq))
    return rnea_batch(model, q[None, :], zero, zero)[0]


def forward_dynamics_batch(model: RobotModel, Q, Qd, U, fk=None):
    """qdd = M^{-1} (B u - C qd - G), batched."""
    c = model._c
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    Qd = np.atleast_2d(np.asarray(Qd, dtype=float))
    U = np.atleast_2d(np.asarray(U, dtype=float))
    if U.shape[-1] != c.actuation.shape[1]:
        raise DimensionMismatch(
            f"expected {c.actuation.shape[1]} controls, got {U.shape[-1]}"
        )
    bias = rnea_batch(model, Q, Qd, np.zeros_like(Q), fk=fk)
    M = mass_matrix_batch(model, Q, fk=fk)
    rhs = U @ c.actuation.T - bias
    try:
        L = np.linalg.cholesky(M)
    except np.linalg.LinAlgError as exc:
        raise SingularMassMatrix("mass matrix is not positive definite") from exc
    y = np.linalg.solve(L, rhs[..., None])
    return np.linalg.solve(np.swapaxes(L, -1, -2), y)[..., 0]


def forward_dynamics(model: RobotModel, q, qd, u) -> np.ndarray:
    q = _check_q(model, q)
    qd = _check_q(model, qd)
    return forward_dynamics_batch(model, q[None, :], qd[None, :], np.atleast_2d(u))[0]


def forward_dynamics_derivs_batch(model: RobotModel, Q, Qd, U, fk=None):
    """qdd plus partials wrt q, qd and u.

    Differentiates the inverse-dynamics identity tau(q, qd, qdd) = B u at the
    forward-dynamics solution: d qdd = -M^{-1} (dtau_q dq + dtau_v dqd - B du).
    """
    c = model._c
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    Qd = np.atleast_2d(np.asarray(Qd, dtype=float))
    U = np.atleast_2d(np.asarray(U, dtype=float))
    if fk is None:
        fk = fk_derivs_batch(model, Q)
    qdd = forward_dynamics_batch(model, Q, Qd, U, fk=fk)
    _, dtau_q, dtau_v = rnea_batch(model, Q, Qd, qdd, derivs=True, fk=fk)
    M = mass_matrix_batch(model, Q, fk=fk)
    Minv = np.linalg.inv(M)
    dqdd_q = -np.einsum("kab,kbc->kac", Minv, dtau_q)
    dqdd_v = -np.einsum("kab,kbc->kac", Minv, dtau_v)
    dqdd_u = np.einsum("kab,bc->kac", Minv, c.actuation)
    return qdd, dqdd_q, dqdd_v, dqdd_u


def kinetic_energy(model: RobotModel, q, qd) -> float:
    q = _check_q(model, q)
    qd = _check_q(model, qd)
    M = mass_matrix(model, q)
    return float(0.5 * qd @ M @ qd)


def potential_energy(model: RobotModel, q) -> float:
    c = model._c
    q = _check_q(model, q)
    R, o, _, _ = fk_batch(model, q[None, :])
    g = np.asarray(model.gravity, dtype=float)
    total = 0.0
    for i in range(c.nl):
        ci = o[i][0] + np.asarray(R[i][0]) @ c.com[i]
        total -= c.mass[i] * g @ ci
    return float(total)


def rk4_step(model: RobotModel, q, qd, u, h: float):
    """One RK4 step of the forward dynamics; returns (q, qd)."""

    def f(state):
        qq, vv = state
        return vv, forward_dynamics(model, qq, vv, u)

    k1 = f((q, qd))
    k2 = f((q + 0.5 * h * k1[0], qd + 0.5 * h * k1[1]))
    k3 = f((q + 0.5 * h * k2[0], qd + 0.5 * h * k2[1]))
    k4 = f((q + h * k3[0], qd + h * k3[1]))
    qn = q + (h / 6.0) * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
    vn = qd + (h / 6.0) * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
    return qn, vn


# ---------------------------------------------------------------------------
# inverse kinematics (damped least squares)
# ---------------------------------------------------------------------------


def solve_ik(
    model: RobotModel,
    arm: str,
    target_position,
    target_orientation=None,
    q0: Optional[np.ndarray] = None,
    seed_q: Optional[np.ndarray] = None,
    pos_tol: float = 1e-3,
    ori_tol: float = 1e-2,
    max_iters: int = 200,
    damping: float = 0.05,
) -> Optional[np.ndarray]:
    """Damped-least-squares IK for one arm; None when it does not converge.

    Only the arm's joints move; the remaining coordinates stay at q0 (the
    model's neutral configuration by default). Orientation is optional; when
    given it is matched to ori_tol radians. Joint limits are enforced by
    clamping after every step.
    """
    if arm not in model.arms:
        raise UnknownFrame(f"unknown arm {arm!r}")
    c = model._c
    target_position = np.asarray(target_position, dtype=float).reshape(3)
    base_q = model.neutral_q() if q0 is None else np.asarray(q0, dtype=float).copy()
    q = base_q.copy()
    if seed_q is not None:
        q = np.asarray(seed_q, dtype=float).copy()
    dofs = model.arm_dofs(arm)
    frame = f"{arm}_ee"

    # quick reject: target beyond any possible reach of the chain
    anchor = c.arm_base_point(arm, base_q)
    if np.linalg.norm(target_position - anchor) > model.max_reach(arm) + pos_tol:
        return None

    R_target = (
        quat.rotation_matrix(target_orientation) if target_orientation is not None else None
    )
    lo, hi = model.joint_limits()
    for _ in range(max_iters):
        pose = end_effector(model, q, frame)
        err_p = target_position - pose.position
        rows = [err_p]
        if R_target is not None:
            R_err = R_target @ pose.rotation().T
            # rotation vector of R_err
            w = np.array(
                [R_err[2, 1] - R_err[1, 2], R_err[0, 2] - R_err[2, 0], R_err[1, 0] - R_err[0, 1]]
            )
            angle = quat.rotation_angle(R_err)
            s = np.linalg.norm(w)
            err_r = (angle / s) * w if s > 1e-12 else np.zeros(3)
            rows.append(err_r)
        err = np.concatenate(rows)
        ok_p = np.linalg.norm(err_p) < pos_tol
        ok_r = R_target is None or quat.rotation_angle(R_target @ pose.rotation().T) < ori_tol
        if ok_p and ok_r:
            return q
        J6 = end_effector_jacobian(model, q, frame)
        J = J6[0:3] if R_target is None else J6
        J = J[:, dofs]
        JJt = J @ J.T + damping**2 * np.eye(J.shape[0])
        dq = J.T @ np.linalg.solve(JJt, err)
        q[dofs] = np.clip(q[dofs] + dq, lo[dofs], hi[dofs])
    return None
