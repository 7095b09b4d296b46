"""Direct-collocation transcription and a self-contained constrained solver.

The optimal-control problem is discretized at N+1 knots with trapezoidal
dynamics defects; decision variables are all knot states and controls. Four
constraint groups are registered, each with an analytically coded jacobian:

* ``C1``  trapezoidal defect equalities,
* ``C2``  box bounds on joint positions, velocities and efforts,
* ``C3``  collision scaling factors alpha - 1 >= margin at every knot,
* ``C4``  end-effector position equalities at the final (and waypoint) knots.

The solver is an augmented-Lagrangian outer loop over an L-BFGS-B inner
minimizer (box bounds handled natively by the inner solver, inequalities by
clamped multipliers). Solutions are re-checked by :func:`validate`, which
shares no state with the solver and resamples collision constraints at ten
times the knot resolution.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.optimize import minimize

from . import geometry as geo
from . import robot as rb
from .errors import DomainError, InfeasibleGoal, InvalidSpec
from .geometry import ConvexShape, Pose

DEFECT_TOL = 1e-4  # permissible deviation from the dynamics equation
GOAL_TOL = 1e-3  # end-effector position error
ALPHA_MARGIN = 1e-3  # alpha - 1 >= margin at knots
INEQ_TOL = 1e-6  # slack allowed on inequality residuals at convergence


# ---------------------------------------------------------------------------
# problem description
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ObstacleInstance:
    """A convex obstacle with a fixed pose or a per-knot pose schedule."""

    name: str
    shape: ConvexShape
    pose: Optional[Pose] = None
    schedule: Optional[Tuple[Pose, ...]] = None

    def __post_init__(self):
        if (self.pose is None) == (self.schedule is None):
            raise InvalidSpec(f"obstacle {self.name}: provide exactly one of pose/schedule")

    def params_at(self, knot: int) -> np.ndarray:
        if self.pose is not None:
            return self.pose.params()
        return self.schedule[knot].params()

    def pose_at_time(self, tau: float, n_knots: int) -> Pose:
        """Pose at fractional knot coordinate tau in [0, N]."""
        if self.pose is not None:
            return self.pose
        i = int(np.clip(np.floor(tau), 0, n_knots - 2))
        w = tau - i
        pa, pb = self.schedule[i], self.schedule[i + 1]
        pos = (1 - w) * pa.position + w * pb.position
        q = (1 - w) * pa.orientation + w * pb.orientation
        if np.dot(pa.orientation, pb.orientation) < 0:
            q = (1 - w) * pa.orientation - w * pb.orientation
        return Pose(pos, q)


@dataclass(frozen=True)
class Waypoint:
    knot: int
    position: Tuple[float, float, float]


@dataclass(frozen=True)
class ProblemSpec:
    model: rb.RobotModel
    x0: np.ndarray  # stacked (q, qd), length 2n
    goals: Dict[str, Tuple[float, float, float]]  # arm -> target position
    waypoints: Dict[str, Tuple[Waypoint, ...]] = field(default_factory=dict)
    obstacles: Tuple[ObstacleInstance, ...] = ()
    n_segments: int = 31
    horizon: float = 4.0
    self_collision: bool = True
    obstacle_collision: bool = True
    alpha_margin: float = ALPHA_MARGIN
    # extra capsule radius used only while solving, so that knot-wise
    # constraints imply clearance between knots; validation always checks the
    # true geometry
    capsule_inflation: float = 0.0

    def __post_init__(self):
        n = self.model.nq
        x0 = np.asarray(self.x0, dtype=float).reshape(2 * n)
        object.__setattr__(self, "x0", x0)
        if self.n_segments < 2:
            raise InvalidSpec("need at least 2 segments")
        if not self.horizon > 0:
            raise InvalidSpec("horizon must be positive")
        for arm, g in self.goals.items():
            if arm not in self.model.arms:
                raise InvalidSpec(f"goal for unknown arm {arm!r}")
            if not np.all(np.isfinite(g)):
                raise InvalidSpec("goal positions must be finite")
        for arm, wps in self.waypoints.items():
            if arm not in self.model.arms:
                raise InvalidSpec(f"waypoints for unknown arm {arm!r}")
            for wp in wps:
                if not 0 < wp.knot <= self.n_segments:
                    raise InvalidSpec("waypoint knot index out of range")
        for ob in self.obstacles:
            if ob.schedule is not None and len(ob.schedule) != self.n_segments + 1:
                raise InvalidSpec(
                    f"obstacle {ob.name}: schedule length must be N+1 = {self.n_segments + 1}"
                )


@dataclass
class ConstraintGroup:
    name: str
    kind: str  # "equality" | "inequality-lower-bound"
    tolerance: float
    rows: int
    residual: Callable[[np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray], np.ndarray]


@dataclass
class Transcription:
    spec: ProblemSpec
    n: int
    m: int
    N: int
    dim: int
    groups: List[ConstraintGroup]
    z_lower: np.ndarray
    z_upper: np.ndarray
    goal_ik: Dict[str, np.ndarray]
    _eval: "_FullEval" = None

    def group(self, name: str) -> ConstraintGroup:
        for g in self.groups:
            if g.name == name:
                return g
        raise KeyError(name)

    def split(self, z):
        """Views (X (N+1, 2n), U (N+1, m)) of a decision vector."""
        K = self.N + 1
        X = z[: K * 2 * self.n].reshape(K, 2 * self.n)
        U = z[K * 2 * self.n :].reshape(K, self.m)
        return X, U

    def join(self, X, U):
        return np.concatenate([np.asarray(X).ravel(), np.asarray(U).ravel()])

    def initial_guess(self, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        spec = self.spec
        model = spec.model
        n, K = self.n, self.N + 1
        q0 = spec.x0[:n]
        q_goal = q0.copy()
        for arm, qik in self.goal_ik.items():
            dofs = model.arm_dofs(arm)
            q_goal[dofs] = qik[dofs]
        w = np.linspace(0.0, 1.0, K)[:, None]
        Q = (1 - w) * q0[None, :] + w * q_goal[None, :]
        if rng is not None:
            Q[1:-1] += 0.1 * rng.standard_normal(Q[1:-1].shape)
        lo, hi = model.joint_limits()
        Q = np.clip(Q, lo[None, :], hi[None, :])
        X = np.zeros((K, 2 * n))
        X[:, :n] = Q
        X[0] = spec.x0
        grav = rb.rnea_batch(model, Q, np.zeros_like(Q), np.zeros_like(Q))
        B = model.actuation
        U = grav @ B  # least-squares actuation of the gravity load (B columns unit)
        U = np.clip(U, -model.effort_limits(), model.effort_limits())
        return self.join(X, U)


# ---------------------------------------------------------------------------
# Bezier tracks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BezierTrack:
    """Degree-5 Bernstein encoding of all joints over normalized time."""

    control_points: np.ndarray  # (njoints, 6)
    horizon: float
    fit_residual: float = 0.0

    @property
    def njoints(self) -> int:
        return self.control_points.shape[0]


def _bernstein5(s: np.ndarray) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    c = np.array([1.0, 5.0, 10.0, 10.0, 5.0, 1.0])
    i = np.arange(6)
    return c * s[..., None] ** i * (1.0 - s[..., None]) ** (5 - i)


def fit_bezier(trajectory: "Trajectory") -> BezierTrack:
    """Least-squares degree-5 fit of each joint position over s = t/T."""
    K = trajectory.times.shape[0]
    if K < 6:
        raise InvalidSpec("need at least 6 knots to fit a quintic")
    s = trajectory.times / trajectory.times[-1]
    B = _bernstein5(s)  # (K, 6)
    n = trajectory.states.shape[1] // 2
    Q = trajectory.states[:, :n]
    cp, *_ = np.linalg.lstsq(B, Q, rcond=None)
    resid = float(np.abs(B @ cp - Q).max())
    return BezierTrack(cp.T.copy(), float(trajectory.times[-1]), resid)


def eval_bezier(track: BezierTrack, s: float):
    """De Casteljau evaluation; returns (values, d values / d s)."""
    if not 0.0 <= s <= 1.0:
        raise DomainError(f"s = {s} outside [0, 1]")
    pts = track.control_points.T.copy()  # (6, nj)
    dpts = 5.0 * (pts[1:] - pts[:-1])  # hodograph control points (5, nj)
    for r in range(5):
        pts = (1.0 - s) * pts[:-1] + s * pts[1:]
    for r in range(4):
        dpts = (1.0 - s) * dpts[:-1] + s * dpts[1:]
    return pts[0], dpts[0]


def eval_bezier_many(track: BezierTrack, s: np.ndarray):
    """Vectorized evaluation at many s in [0,1]; returns (S, nj) positions."""
    s = np.asarray(s, dtype=float)
    if np.any((s < 0) | (s > 1)):
        raise DomainError("s outside [0, 1]")
    return _bernstein5(s) @ track.control_points.T


# ---------------------------------------------------------------------------
# trajectory container and CSV schema
# ---------------------------------------------------------------------------


@dataclass
class Trajectory:
    times: np.ndarray  # (N+1,)
    states: np.ndarray  # (N+1, 2n)
    controls: np.ndarray  # (N+1, m)
    status: str = "Solved"
    objective: float = 0.0
    solve_time: float = 0.0
    history: List[dict] = field(default_factory=list)

    def joint_positions(self) -> np.ndarray:
        return self.states[:, : self.states.shape[1] // 2]


def trajectory_csv(traj: Trajectory) -> str:
    """CSV per the export schema: t,q*,qd*,u* rows at 17 significant digits."""
    n = traj.states.shape[1] // 2
    m = traj.controls.shape[1]
    header = (
        ["t"]
        + [f"q{i}" for i in range(n)]
        + [f"qd{i}" for i in range(n)]
        + [f"u{i}" for i in range(m)]
    )
    lines = [",".join(header)]
    for k in range(traj.times.shape[0]):
        row = np.concatenate([[traj.times[k]], traj.states[k], traj.controls[k]])
        lines.append(",".join(format(v, ".17g") for v in row))
    return "\n".join(lines) + "\n"


def kinematic_csv(times: np.ndarray, Q: np.ndarray, Qd: Optional[np.ndarray] = None) -> str:
    """CSV for kinematic data (no controls): the m = 0 case of the schema."""
    n = Q.shape[1]
    header = ["t"] + [f"q{i}" for i in range(n)]
    blocks = [Q]
    if Qd is not None:
        header += [f"qd{i}" for i in range(n)]
        blocks.append(Qd)
    lines = [",".join(header)]
    data = np.column_stack([times] + blocks)
    for row in data:
        lines.append(",".join(format(v, ".17g") for v in row))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# shared evaluation cache
# ---------------------------------------------------------------------------


class _PolyGroup:
    """Capsule-vs-polytope pairs for one obstacle, solved by the conic path."""

    def __init__(self, shape_a, obstacle, cap_a_idx):
        self.shape_a = shape_a
        self.obstacle = obstacle
        self.cap_a = np.asarray(cap_a_idx, dtype=int)
        self.count = len(cap_a_idx)


class _FullEval:
    """One-pass evaluation of everything the constraint groups need at z."""

    def __init__(self, tr: "Transcription"):
        self.tr = tr
        spec = tr.spec
        model = spec.model
        c = model._c
        self.K = tr.N + 1
        self.h = spec.horizon / tr.N
        self._key = None
        self._data = None

        # All sphere/capsule pairs (self pairs and round obstacles) share one
        # batched closed-form call; polytope obstacles go through the conic
        # path per obstacle. Pair order: self pairs in model order, then
        # caplike obstacle pairs per obstacle, then polytope pairs.
        solver_shape = [_inflate(s, spec.capsule_inflation) for s in c.cap_shape]

        def _rl(shape):
            if isinstance(shape, geo.Sphere):
                return shape.radius, 0.0
            return shape.radius, shape.half_length

        capA, capB, rA, lA, rB, lB = [], [], [], [], [], []
        if spec.self_collision and model.self_collision_pairs:
            for a, b in model.self_collision_pairs:
                ia, ib = c.cap_by_id[a], c.cap_by_id[b]
                capA.append(ia)
                capB.append(ib)
                ra, la_ = _rl(solver_shape[ia])
                rbv, lb_ = _rl(solver_shape[ib])
                rA.append(ra)
                lA.append(la_)
                rB.append(rbv)
                lB.append(lb_)
        self.n_self = len(capA)
        self.cl_obstacles: List[tuple] = []  # (obstacle, slice in pair axis)
        self.poly_groups: List[_PolyGroup] = []
        if spec.obstacle_collision:
            for ob in spec.obstacles:
                if isinstance(ob.shape, geo.Polytope):
                    buckets: Dict[object, list] = {}
                    for ia, shape in enumerate(solver_shape):
                        buckets.setdefault(shape, []).append(ia)
                    for shape, la in buckets.items():
                        self.poly_groups.append(_PolyGroup(shape, ob, la))
                    continue
                start = len(capA)
                rbv, lb_ = _rl(ob.shape)
                for ia, shape in enumerate(solver_shape):
                    capA.append(ia)
                    capB.append(-1)
                    ra, la_ = _rl(shape)
                    rA.append(ra)
                    lA.append(la_)
                    rB.append(rbv)
                    lB.append(lb_)
                self.cl_obstacles.append((ob, slice(start, len(capA))))
        self.cl_capA = np.asarray(capA, dtype=int)
        self.cl_capB = np.asarray(capB, dtype=int)
        self.cl_selfmask = self.cl_capB >= 0
        self.cl_rA = np.asarray(rA)
        self.cl_lA = np.asarray(lA)
        self.cl_rB = np.asarray(rB)
        self.cl_lB = np.asarray(lB)
        self.n_caplike = len(capA)
        self.solver_shape = solver_shape
        self.n_pairs = self.n_caplike + sum(g.count for g in self.poly_groups)

        self.goal_arms = sorted(spec.goals.keys())
        self.constraint_knots = {}  # arm -> list of (knot, target)
        for arm in self.goal_arms:
            entries = [(tr.N, np.asarray(spec.goals[arm], dtype=float))]
            for wp in spec.waypoints.get(arm, ()):
                entries.append((wp.knot, np.asarray(wp.position, dtype=float)))
            self.constraint_knots[arm] = sorted(entries, key=lambda e: e[0])

    def at(self, z: np.ndarray) -> dict:
        key = z.tobytes()
        if key == self._key:
            return self._data
        tr = self.tr
        spec = tr.spec
        model = spec.model
        n, m, K = tr.n, tr.m, self.K
        X, U = tr.split(z)
        Q = X[:, :n]
        Qd = X[:, n:]
        fk = rb.fk_derivs_batch(model, Q)
        qdd, dq, dv, du = rb.forward_dynamics_derivs_batch(model, Q, Qd, U, fk=fk)
        data = {"X": X, "U": U, "Q": Q, "Qd": Qd, "qdd": qdd, "dq": dq, "dv": dv, "du": du}

        if self.n_pairs > 0:
            P, J = rb.capsule_params_from_fk(model, fk)
            alphas = np.zeros((K, self.n_pairs))
            dalpha = np.zeros((K, self.n_pairs, n))
            col = 0
            if self.n_caplike:
                cnt = self.n_caplike
                PA = P[:, self.cl_capA]  # (K, cnt, 7)
                PB = np.empty_like(PA)
                sm = self.cl_selfmask
                PB[:, sm] = P[:, self.cl_capB[sm]]
                for ob, sl in self.cl_obstacles:
                    if ob.pose is not None:
                        PB[:, sl] = ob.pose.params()[None, None, :]
                    else:
                        sched = np.stack([p.params() for p in ob.schedule])
                        PB[:, sl] = sched[:, None, :]
                rA = np.tile(self.cl_rA, K)
                lA = np.tile(self.cl_lA, K)
                rB = np.tile(self.cl_rB, K)
                lB = np.tile(self.cl_lB, K)
                a, _, grad = geo.caplike_scaling_batch(
                    PA.reshape(-1, 7), rA, lA, PB.reshape(-1, 7), rB, lB, True
                )
                a = a.reshape(K, cnt)
                grad = grad.reshape(K, cnt, 14)
                dal = np.einsum("kcp,kcpn->kcn", grad[:, :, :7], J[:, self.cl_capA])
                dal[:, sm] += np.einsum(
                    "kcp,kcpn->kcn", grad[:, sm, 7:], J[:, self.cl_capB[sm]]
                )
                alphas[:, :cnt] = a
                dalpha[:, :cnt] = dal
                col = cnt
            for g in self.poly_groups:
                pa = P[:, g.cap_a].reshape(-1, 7)
                ob = g.obstacle
                if ob.pose is not None:
                    pb = np.broadcast_to(ob.pose.params()[None, :], (K * g.count, 7))
                else:
                    sched = np.stack([p.params() for p in ob.schedule])
                    pb = np.repeat(sched[:, None, :], g.count, axis=1).reshape(-1, 7)
                a, _, grad = geo.scaling_batch(g.shape_a, pa, ob.shape, pb, True)
                a = a.reshape(K, g.count)
                grad = grad.reshape(K, g.count, 14)
                dal = np.einsum("kcp,kcpn->kcn", grad[:, :, :7], J[:, g.cap_a])
                alphas[:, col : col + g.count] = a
                dalpha[:, col : col + g.count] = dal
                col += g.count
            data["alphas"] = alphas
            data["dalpha"] = dalpha

        ee = {}
        for arm in self.goal_arms:
            pos, jac = rb.frame_position_from_fk(model, fk, f"{arm}_ee")
            ee[arm] = (pos, jac)
        data["ee"] = ee

        self._key = key
        self._data = data
        return data

    # -- fast paths used by the solver (no dense jacobians) -----------------

    def eq_residual(self, z):
        """Stacked equality residuals: C1 defects then C4 goal rows."""
        tr = self.tr
        d = self.at(z)
        F = np.concatenate([d["Qd"], d["qdd"]], axis=1)
        X = d["X"]
        defect = X[1:] - X[:-1] - 0.5 * self.h * (F[:-1] + F[1:])
        parts = [defect.ravel()]
        for arm in self.goal_arms:
            pos = d["ee"][arm][0]
            for knot, target in self.constraint_knots[arm]:
                parts.append(pos[knot] - target)
        return np.concatenate(parts) if parts else np.zeros(0)

    def ineq_residual(self, z):
        if self.n_pairs == 0:
            return np.zeros(0)
        d = self.at(z)
        return (d["alphas"] - 1.0 - self.tr.spec.alpha_margin).ravel()

    def eq_jtvec(self, z, y):
        """J_eq^T y accumulated block-wise into a dim-sized gradient."""
        tr = self.tr
        n, m, K, N = tr.n, tr.m, self.K, tr.N
        d = self.at(z)
        out = np.zeros(tr.dim)
        gX, gU = tr.split(out)
        Y = y[: N * 2 * n].reshape(N, 2 * n)
        # w_j = sum of adjacent defect rows touching knot j
        W = np.zeros((K, 2 * n))
        W[:-1] += Y
        W[1:] += Y
        gX[1:] += Y
        gX[:-1] -= Y
        w1, w2 = W[:, :n], W[:, n:]
        # A_j^T W = [dq^T w2 ; w1 + dv^T w2]
        gX[:, :n] -= 0.5 * self.h * np.einsum("kba,kb->ka", d["dq"], w2)
        gX[:, n:] -= 0.5 * self.h * (w1 + np.einsum("kba,kb->ka", d["dv"], w2))
        gU[:] -= 0.5 * self.h * np.einsum("kba,kb->ka", d["du"], w2)
        off = N * 2 * n
        for arm in self.goal_arms:
            jac = d["ee"][arm][1]
            for knot, target in self.constraint_knots[arm]:
                gX[knot, :n] += jac[knot].T @ y[off : off + 3]
                off += 3
        return out

    def ineq_jtvec(self, z, y):
        out = np.zeros(self.tr.dim)
        if self.n_pairs == 0:
            return out
        tr = self.tr
        d = self.at(z)
        gX, _ = tr.split(out)
        Y = y.reshape(self.K, self.n_pairs)
        gX[:, : tr.n] += np.einsum("kpn,kp->kn", d["dalpha"], Y)
        return out

    @property
    def n_eq(self):
        tr = self.tr
        goals = sum(len(self.constraint_knots[a]) for a in self.goal_arms)
        return tr.N * 2 * tr.n + 3 * goals

    @property
    def n_in(self):
        return self.K * self.n_pairs


# ---------------------------------------------------------------------------
# transcription
# ---------------------------------------------------------------------------


def _inflate(shape, margin: float):
    if margin > 0.0 and isinstance(shape, geo.Capsule):
        return geo.Capsule(shape.half_length, shape.radius + margin)
    return shape


def _collision_clear(spec: ProblemSpec, q: np.ndarray, knot: int) -> bool:
    """All enabled collision pairs strictly separated at configuration q.

    Uses the solver's (possibly inflated) capsules so that configurations
    accepted here are also feasible for the transcribed constraints.
    """
    model = spec.model
    c = model._c
    shapes = [_inflate(s, spec.capsule_inflation) for s in c.cap_shape]
    P = rb.capsule_params_values_batch(model, q[None, :])[0]
    if spec.self_collision:
        for a, b in model.self_collision_pairs:
            ia, ib = c.cap_by_id[a], c.cap_by_id[b]
            alpha, _, _ = geo.scaling_batch(
                shapes[ia], P[ia][None], shapes[ib], P[ib][None], False
            )
            if alpha[0] <= 1.0:
                return False
    if spec.obstacle_collision:
        for ob in spec.obstacles:
            for ia, shape in enumerate(shapes):
                alpha, _, _ = geo.scaling_batch(
                    shape, P[ia][None], ob.shape, ob.params_at(knot)[None], False
                )
                if alpha[0] <= 1.0:
                    return False
    return True


def _goal_ik_or_raise(spec: ProblemSpec) -> Dict[str, np.ndarray]:
    """IK solutions for all goals, or InfeasibleGoal.

    Tries a deterministic set of seeds per arm; a goal is infeasible when no
    IK solution exists or every found solution collides in the final scene.
    """
    model = spec.model
    n = model.nq
    q_base = spec.x0[:n].copy()
    rng = np.random.default_rng(987654321)
    found: Dict[str, List[np.ndarray]] = {}
    for arm in sorted(spec.goals.keys()):
        target = np.asarray(spec.goals[arm], dtype=float)
        sols = []
        seeds = [None] + [
            model.neutral_q() + 0.35 * rng.standard_normal(n) for _ in range(4)
        ]
        lo, hi = model.joint_limits()
        for seed in seeds:
            if seed is not None:
                seed = np.clip(seed, lo, hi)
            q = rb.solve_ik(model, arm, target, q0=q_base, seed_q=seed)
            if q is not None:
                sols.append(q)
        if not sols:
            raise InfeasibleGoal(f"no inverse-kinematics solution for arm {arm!r} goal")
        found[arm] = sols

    # combine one solution per arm and require a collision-free final state
    arms = sorted(spec.goals.keys())
    counts = [len(found[a]) for a in arms]
    best = None
    for flat in range(int(np.prod(counts))):
        idx = []
        rem = flat
        for cnt in counts:
            idx.append(rem % cnt)
            rem //= cnt
        q = q_base.copy()
        for a, i in zip(arms, idx):
            q[model.arm_dofs(a)] = found[a][i][model.arm_dofs(a)]
        if _collision_clear(spec, q, spec.n_segments):
            best = {a: found[a][i] for a, i in zip(arms, idx)}
            break
    if best is None:
        raise InfeasibleGoal(
            "every inverse-kinematics solution for the goal violates collision "
            "constraints in the final state"
        )
    return best


def transcribe(spec: ProblemSpec) -> Transcription:
    """Build the NLP: decision layout, bounds and the constraint registry."""
    model = spec.model
    n = model.nq
    m = model.nu
    N = spec.n_segments
    K = N + 1
    dim = K * (2 * n + m)

    x0 = spec.x0
    lo, hi = model.joint_limits()
    if np.any(x0[:n] < lo - 1e-12) or np.any(x0[:n] > hi + 1e-12):
        raise InvalidSpec("start configuration violates joint limits")
    vlim = model.velocity_limits()
    if np.any(np.abs(x0[n:]) > vlim + 1e-12):
        raise InvalidSpec("start velocity violates limits")
    if not _collision_clear(spec, x0[:n], 0):
        raise InvalidSpec("start configuration is in collision")
    goal_ik = _goal_ik_or_raise(spec) if spec.goals else {}

    tr = Transcription(
        spec=spec, n=n, m=m, N=N, dim=dim, groups=[],
        z_lower=np.empty(dim), z_upper=np.empty(dim), goal_ik=goal_ik,
    )

    # bounds (C2) as hard box bounds on z
    zl = np.full(dim, -np.inf)
    zu = np.full(dim, np.inf)
    Xl, Ul = tr.split(zl)
    Xu, Uu = tr.split(zu)
    Xl[:, :n] = lo[None, :]
    Xu[:, :n] = hi[None, :]
    Xl[:, n:] = -vlim[None, :]
    Xu[:, n:] = vlim[None, :]
    ulim = model.effort_limits()
    Ul[:] = -ulim[None, :]
    Uu[:] = ulim[None, :]
    Xl[0] = x0
    Xu[0] = x0
    tr.z_lower = zl
    tr.z_upper = zu

    ev = _FullEval(tr)
    tr._eval = ev
    h = spec.horizon / N

    # --- C1: trapezoidal defects -------------------------------------------
    def c1_res(z):
        d = ev.at(z)
        F = np.concatenate([d["Qd"], d["qdd"]], axis=1)  # (K, 2n)
        X = d["X"]
        defect = X[1:] - X[:-1] - 0.5 * h * (F[:-1] + F[1:])
        return defect.ravel()

    def c1_jac(z):
        d = ev.at(z)
        nK = K
        J = np.zeros((N * 2 * n, dim))
        # A_i = df/dx at knot i: [[0, I], [dq, dv]]; B_i = [[0], [du]]
        A = np.zeros((nK, 2 * n, 2 * n))
        A[:, :n, n:] = np.eye(n)[None]
        A[:, n:, :n] = d["dq"]
        A[:, n:, n:] = d["dv"]
        Bm = np.zeros((nK, 2 * n, m))
        Bm[:, n:, :] = d["du"]
        eye = np.eye(2 * n)
        xoff = 0
        uoff = K * 2 * n
        for i in range(N):
            r = slice(i * 2 * n, (i + 1) * 2 * n)
            J[r, xoff + i * 2 * n : xoff + (i + 1) * 2 * n] = -eye - 0.5 * h * A[i]
            J[r, xoff + (i + 1) * 2 * n : xoff + (i + 2) * 2 * n] = eye - 0.5 * h * A[i + 1]
            J[r, uoff + i * m : uoff + (i + 1) * m] = -0.5 * h * Bm[i]
            J[r, uoff + (i + 1) * m : uoff + (i + 2) * m] = -0.5 * h * Bm[i + 1]
        return J

    tr.groups.append(
        ConstraintGroup("C1", "equality", DEFECT_TOL, N * 2 * n, c1_res, c1_jac)
    )

    # --- C2: box bounds ------------------------------------------------------
    finite = np.isfinite(zl) & np.isfinite(zu)
    idx_fin = np.nonzero(finite)[0]

    def c2_res(z):
        return np.concatenate([z[idx_fin] - zl[idx_fin], zu[idx_fin] - z[idx_fin]])

    def c2_jac(z):
        J = np.zeros((2 * idx_fin.size, dim))
        J[np.arange(idx_fin.size), idx_fin] = 1.0
        J[idx_fin.size + np.arange(idx_fin.size), idx_fin] = -1.0
        return J

    tr.groups.append(
        ConstraintGroup(
            "C2", "inequality-lower-bound", 0.0, 2 * idx_fin.size, c2_res, c2_jac
        )
    )

    # --- C3: collision scaling ----------------------------------------------
    if ev.n_pairs > 0:
        margin = spec.alpha_margin

        def c3_res(z):
            d = ev.at(z)
            return (d["alphas"] - 1.0 - margin).ravel()

        def c3_jac(z):
            d = ev.at(z)
            J = np.zeros((K * ev.n_pairs, dim))
            dal = d["dalpha"]  # (K, P, n)
            for i in range(K):
                rows = slice(i * ev.n_pairs, (i + 1) * ev.n_pairs)
                J[rows, i * 2 * n : i * 2 * n + n] = dal[i]
            return J

        tr.groups.append(
            ConstraintGroup(
                "C3", "inequality-lower-bound", 0.0, K * ev.n_pairs, c3_res, c3_jac
            )
        )

    # --- C4: end-effector targets --------------------------------------------
    if ev.goal_arms:
        entries = [
            (arm, knot, target)
            for arm in ev.goal_arms
            for knot, target in ev.constraint_knots[arm]
        ]

        def c4_res(z):
            d = ev.at(z)
            out = np.empty(3 * len(entries))
            for j, (arm, knot, target) in enumerate(entries):
                out[3 * j : 3 * j + 3] = d["ee"][arm][0][knot] - target
            return out

        def c4_jac(z):
            d = ev.at(z)
            J = np.zeros((3 * len(entries), dim))
            for j, (arm, knot, target) in enumerate(entries):
                jac = d["ee"][arm][1][knot]  # (3, n)
                J[3 * j : 3 * j + 3, knot * 2 * n : knot * 2 * n + n] = jac
            return J

        tr.groups.append(
            ConstraintGroup("C4", "equality", GOAL_TOL, 3 * len(entries), c4_res, c4_jac)
        )

    return tr


def objective(tr: Transcription, z: np.ndarray):
    """Sum of squared controls over all knots, with its exact gradient."""
    X, U = tr.split(z)
    grad = np.zeros_like(z)
    _, gU = tr.split(grad)
    gU[:] = 2.0 * U
    return float(np.sum(U * U)), grad


# ---------------------------------------------------------------------------
# augmented-Lagrangian solver
# ---------------------------------------------------------------------------


@dataclass
class SolveOptions:
    max_outer: int = 30
    inner_maxiter: int = 200
    penalty0: float = 10.0
    penalty_growth: float = 10.0
    penalty_cap: float = 1e8
    time_cap: float = 600.0
    restarts: int = 5
    seed: int = 0


def _violation(groups_eq, groups_ineq, z) -> float:
    v = 0.0
    for g in groups_eq:
        r = g.residual(z)
        if r.size:
            v = max(v, float(np.abs(r).max()))
    for g in groups_ineq:
        r = g.residual(z)
        if r.size:
            v = max(v, float(max(0.0, -r.min())))
    return v


def solve(tr: Transcription, options: Optional[SolveOptions] = None) -> Trajectory:
    """Solve the transcribed problem; returns a status-carrying Trajectory."""
    options = options or SolveOptions()
    t_start = time.perf_counter()
    rng = np.random.default_rng(options.seed)
    ev = tr._eval
    bounds = list(zip(tr.z_lower, tr.z_upper))
    n_defect = tr.N * 2 * tr.n

    def viol_of(z) -> float:
        r_eq = ev.eq_residual(z)
        r_in = ev.ineq_residual(z)
        v = float(np.abs(r_eq).max()) if r_eq.size else 0.0
        if r_in.size:
            v = max(v, float(max(0.0, -r_in.min())))
        return v

    def converged(z) -> bool:
        r_eq = ev.eq_residual(z)
        if r_eq[:n_defect].size and np.abs(r_eq[:n_defect]).max() > DEFECT_TOL:
            return False
        if r_eq[n_defect:].size and np.abs(r_eq[n_defect:]).max() > GOAL_TOL:
            return False
        r_in = ev.ineq_residual(z)
        if r_in.size and -r_in.min() > INEQ_TOL:
            return False
        return True

    best = None
    for attempt in range(options.restarts + 1):
        z = tr.initial_guess(rng if attempt > 0 else None)
        lam_eq = np.zeros(ev.n_eq)
        lam_in = np.zeros(ev.n_in)
        rho = options.penalty0
        history = []
        viol_acc = viol_of(z)
        z_acc = z.copy()
        status = "MaxIterations"

        for outer in range(options.max_outer):
            if time.perf_counter() - t_start > options.time_cap:
                status = "TimedOut"
                break

            def al_fun(zz, _rho=rho, _le=lam_eq, _li=lam_in):
                val, grad = objective(tr, zz)
                r_eq = ev.eq_residual(zz)
                if r_eq.size:
                    val += float(-_le @ r_eq + 0.5 * _rho * r_eq @ r_eq)
                    grad += ev.eq_jtvec(zz, _rho * r_eq - _le)
                r_in = ev.ineq_residual(zz)
                if r_in.size:
                    t = np.maximum(0.0, _li - _rho * r_in)
                    val += float(0.5 / _rho * (t @ t - _li @ _li))
                    grad -= ev.ineq_jtvec(zz, t)
                return val, grad

            gtol = float(np.clip(0.05 * viol_acc, 1e-9, 1e-3))
            res = minimize(
                al_fun, z, jac=True, method="L-BFGS-B", bounds=bounds,
                options={
                    "maxiter": options.inner_maxiter,
                    "maxcor": 25,
                    "ftol": 1e-16,
                    "gtol": gtol,
                },
            )
            z_new = res.x
            viol_new = viol_of(z_new)
            accepted = viol_new <= viol_acc + 1e-12
            history.append(
                {
                    "outer": outer,
                    "violation": viol_new,
                    "accepted": accepted,
                    "rho": rho,
                    "objective": objective(tr, z_new)[0],
                }
            )
            if accepted:
                made_progress = viol_new <= 0.25 * viol_acc
                z = z_new
                z_acc = z_new.copy()
                prev_viol = viol_acc
                viol_acc = viol_new
                lam_eq -= rho * ev.eq_residual(z)
                lam_in = np.maximum(0.0, lam_in - rho * ev.ineq_residual(z))
                if converged(z):
                    status = "Solved"
                    break
                if not made_progress and prev_viol > 0:
                    rho = min(rho * options.penalty_growth, options.penalty_cap)
            else:
                z = z_acc.copy()
                if rho >= options.penalty_cap and viol_new > 100 * DEFECT_TOL:
                    status = "Infeasible"
                    break
                rho = min(rho * options.penalty_growth, options.penalty_cap)

        traj = _build_trajectory(tr, z_acc, status, t_start, history)
        if status == "Solved":
            return traj
        if best is None or viol_of(tr.join(traj.states, traj.controls)) < viol_of(
            tr.join(best.states, best.controls)
        ):
            best = traj
        if status == "TimedOut":
            break
    return best


def traj_violation(tr: Transcription, traj: Trajectory) -> float:
    z = tr.join(traj.states, traj.controls)
    groups_eq = [g for g in tr.groups if g.kind == "equality"]
    groups_ineq = [g for g in tr.groups if g.kind == "inequality-lower-bound" and g.name != "C2"]
    return _violation(groups_eq, groups_ineq, z)


def _build_trajectory(tr, z, status, t_start, history) -> Trajectory:
    X, U = tr.split(z)
    times = np.linspace(0.0, tr.spec.horizon, tr.N + 1)
    return Trajectory(
        times=times,
        states=X.copy(),
        controls=U.copy(),
        status=status,
        objective=float(np.sum(U * U)),
        solve_time=time.perf_counter() - t_start,
        history=history,
    )


def solve_problem(spec: ProblemSpec, options: Optional[SolveOptions] = None) -> Trajectory:
    """transcribe + solve in one call."""
    return solve(transcribe(spec), options)


# ---------------------------------------------------------------------------
# independent validation
# ---------------------------------------------------------------------------


@dataclass
class CategoryReport:
    name: str
    worst: float
    threshold: float
    passed: bool
    detail: str = ""


@dataclass
class ValidationReport:
    categories: List[CategoryReport]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.categories)

    def category(self, name: str) -> CategoryReport:
        for c in self.categories:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_text(self) -> str:
        lines = ["validation report", "================="]
        for c in self.categories:
            flag = "PASS" if c.passed else "FAIL"
            lines.append(
                f"{flag}  {c.name:<18} worst={c.worst:.6e} threshold={c.threshold:.6e}"
                + (f"  ({c.detail})" if c.detail else "")
            )
        lines.append("overall: " + ("PASS" if self.passed else "FAIL"))
        return "\n".join(lines) + "\n"


def validate(traj: Trajectory, spec: ProblemSpec, resample: int = 10) -> ValidationReport:
    """Re-check a trajectory against the problem with no solver state."""
    model = spec.model
    n = model.nq
    K = traj.times.shape[0]
    N = K - 1
    h = spec.horizon / N
    Q = traj.states[:, :n]
    Qd = traj.states[:, n:]
    U = traj.controls
    cats: List[CategoryReport] = []

    # dynamics defects (trapezoidal residual, recomputed from scratch)
    qdd = rb.forward_dynamics_batch(model, Q, Qd, U)
    F = np.concatenate([Qd, qdd], axis=1)
    defect = traj.states[1:] - traj.states[:-1] - 0.5 * h * (F[:-1] + F[1:])
    worst_defect = float(np.abs(defect).max()) if defect.size else 0.0
    cats.append(CategoryReport("dynamics_defects", worst_defect, DEFECT_TOL, worst_defect <= DEFECT_TOL))

    # bounds at knots
    lo, hi = model.joint_limits()
    vlim = model.velocity_limits()
    ulim = model.effort_limits()
    bviol = 0.0
    bviol = max(bviol, float(np.maximum(lo[None] - Q, 0).max()), float(np.maximum(Q - hi[None], 0).max()))
    bviol = max(bviol, float((np.abs(Qd) - vlim[None]).clip(min=0).max()))
    if U.size:
        bviol = max(bviol, float((np.abs(U) - ulim[None]).clip(min=0).max()))
    cats.append(CategoryReport("bounds", bviol, 1e-9, bviol <= 1e-9))

    # start state
    x0_err = float(np.abs(traj.states[0] - spec.x0).max())
    cats.append(CategoryReport("start_state", x0_err, 1e-9, x0_err <= 1e-9))

    # goal error
    worst_goal = 0.0
    for arm in sorted(spec.goals.keys()):
        target = np.asarray(spec.goals[arm], dtype=float)
        pos = rb.end_effector(model, Q[-1], f"{arm}_ee").position
        worst_goal = max(worst_goal, float(np.linalg.norm(pos - target)))
        for wp in spec.waypoints.get(arm, ()):
            pos = rb.end_effector(model, Q[wp.knot], f"{arm}_ee").position
            worst_goal = max(worst_goal, float(np.linalg.norm(pos - np.asarray(wp.position))))
    cats.append(CategoryReport("goal_error", worst_goal, GOAL_TOL, worst_goal <= GOAL_TOL))

    # collision clearance at resampled states (cubic interpolation of q)
    c = model._c
    pairs_on = (spec.self_collision and model.self_collision_pairs) or (
        spec.obstacle_collision and spec.obstacles
    )
    if pairs_on:
        spline = CubicSpline(traj.times, Q, axis=0)
        ts = np.linspace(traj.times[0], traj.times[-1], resample * N + 1)
        Qs = spline(ts)
        fk = rb.fk_derivs_batch(model, Qs)
        P, _ = rb.capsule_params_from_fk(model, fk)
        min_alpha = np.inf
        where = ""
        if spec.self_collision:
            for a, b in model.self_collision_pairs:
                ia, ib = c.cap_by_id[a], c.cap_by_id[b]
                al, _, _ = geo.scaling_batch(
                    c.cap_shape[ia], P[:, ia], c.cap_shape[ib], P[:, ib], False
                )
                k = int(np.argmin(al))
                if al[k] < min_alpha:
                    min_alpha = float(al[k])
                    where = f"self {a}-{b} @t={ts[k]:.3f}"
        if spec.obstacle_collision:
            tau = ts / spec.horizon * N
            for ob in spec.obstacles:
                obp = np.stack([ob.pose_at_time(x, K).params() for x in tau])
                for ia, shape in enumerate(c.cap_shape):
                    al, _, _ = geo.scaling_batch(shape, P[:, ia], ob.shape, obp, False)
                    k = int(np.argmin(al))
                    if al[k] < min_alpha:
                        min_alpha = float(al[k])
                        where = f"obstacle {ob.name}-{c.cap_ids[ia]} @t={ts[k]:.3f}"
        cats.append(
            CategoryReport(
                "min_alpha", min_alpha, 1.0, min_alpha > 1.0, detail=where
            )
        )
    return ValidationReport(cats)
