"""Reference robot models: a planar 2-link arm, a spatial 3-DOF arm, and a
dual-arm fixture of two 4-DOF arms on a common base.

These are desk-scale fixtures used by the bundled scenes, the demos and the
test suite. The dual fixture carries 8 collision capsules with an all-pairs
self-collision list (28 pairs); capsules are mounted with small gaps at the
joints so adjacent pairs stay separated in feasible configurations.
"""

from __future__ import annotations

import numpy as np

from .geometry import Capsule, Pose
from .robot import ArmSpec, JointSpec, LinkSpec, RobotModel

# mount rotating the capsule's local z axis onto the link's +x axis
_X_MOUNT = np.array([np.cos(np.pi / 4), 0.0, np.sin(np.pi / 4), 0.0])


def _rod_inertia(mass: float, length: float, radius: float) -> np.ndarray:
    """Solid-cylinder inertia about its CoM, axis along x."""
    ixx = 0.5 * mass * radius**2
    iyy = izz = mass * (3 * radius**2 + length**2) / 12.0
    return np.diag([ixx, iyy, izz])


def _link_along_x(name, length, mass, radius, capsule_id=None, gap=0.02):
    caps = ()
    if capsule_id is not None:
        half = max(0.5 * length - gap, 0.01)
        caps = (
            (
                capsule_id,
                Capsule(half_length=half, radius=radius),
                Pose([0.5 * length, 0.0, 0.0], _X_MOUNT),
            ),
        )
    return LinkSpec(
        name=name,
        mass=mass,
        com=(0.5 * length, 0.0, 0.0),
        inertia=tuple(map(tuple, _rod_inertia(mass, length, radius))),
        capsules=caps,
    )


def planar_two_link(link_length: float = 1.0, capsule_radius: float = 0.08) -> RobotModel:
    """Two revolute-z joints moving in the xy plane; unit links by default."""
    links = (
        LinkSpec(name="base"),
        _link_along_x("link1", link_length, 1.0, capsule_radius, "cap1"),
        _link_along_x("link2", link_length, 1.0, capsule_radius, "cap2"),
    )
    joints = (
        JointSpec(
            name="j1", type="revolute", parent="base", child="link1",
            axis=(0, 0, 1), bounds=(-np.pi, np.pi), velocity_limit=6.0, effort_limit=40.0,
        ),
        JointSpec(
            name="j2", type="revolute", parent="link1", child="link2",
            axis=(0, 0, 1), origin=Pose([link_length, 0, 0]),
            bounds=(-2.8, 2.8), velocity_limit=6.0, effort_limit=40.0,
        ),
    )
    return RobotModel(
        links=links,
        joints=joints,
        gravity=(0.0, 0.0, -9.81),
        self_collision_pairs=(),
        arms={"arm": ArmSpec(joints=("j1", "j2"), ee_link="link2", ee_offset=(link_length, 0, 0))},
    )


def spatial_three_dof() -> RobotModel:
    """Yaw-pitch-pitch arm used for the dynamics oracle tests."""
    l1, l2, l3 = 0.3, 0.5, 0.4
    links = (
        LinkSpec(name="base"),
        LinkSpec(
            name="column", mass=1.2, com=(0, 0, 0.5 * l1),
            inertia=tuple(map(tuple, np.diag([0.02, 0.02, 0.004]))),
        ),
        _link_along_x("upper", l2, 1.0, 0.06, "cap_u"),
        _link_along_x("fore", l3, 0.8, 0.05, "cap_f"),
    )
    joints = (
        JointSpec(name="yaw", type="revolute", parent="base", child="column",
                  axis=(0, 0, 1), bounds=(-np.pi, np.pi), velocity_limit=5.0, effort_limit=30.0),
        JointSpec(name="shoulder", type="revolute", parent="column", child="upper",
                  axis=(0, 1, 0), origin=Pose([0, 0, l1]),
                  bounds=(-2.2, 2.2), velocity_limit=5.0, effort_limit=30.0),
        JointSpec(name="elbow", type="revolute", parent="upper", child="fore",
                  axis=(0, 1, 0), origin=Pose([l2, 0, 0]),
                  bounds=(-2.5, 2.5), velocity_limit=5.0, effort_limit=20.0),
    )
    return RobotModel(
        links=links,
        joints=joints,
        self_collision_pairs=(),
        arms={"arm": ArmSpec(joints=("yaw", "shoulder", "elbow"), ee_link="fore",
                             ee_offset=(l3, 0, 0))},
    )


def dual_four_dof() -> RobotModel:
    """Two 4-DOF arms (yaw + three pitches) on a shared torso.

    Eight capsules, one per moving link, and all 28 pairs in the
    self-collision list. Capsules leave 0.08 m of bare link at each joint so
    adjacent pairs clear each other through the working range; folding an arm
    onto itself or onto the other arm still trips the constraint, which is
    the behaviour the self-collision list exists to forbid. Arm bases sit
    0.5 m apart at 0.4 m height; the shared workspace is in front of the
    torso (positive x).
    """
    seg = (0.35, 0.3, 0.25)  # per-arm segment lengths after the yaw column
    torso_half_gap = 0.25
    links = [
        LinkSpec(
            name="base",
            capsules=(
                ("l_cap0", Capsule(half_length=0.12, radius=0.06), Pose([0, torso_half_gap, 0.18])),
                ("r_cap0", Capsule(half_length=0.12, radius=0.06), Pose([0, -torso_half_gap, 0.18])),
            ),
        )
    ]
    joints = []
    for side, ysign in (("left", 1.0), ("right", -1.0)):
        prefix = side[0]
        links.append(
            LinkSpec(
                name=f"{prefix}_shoulder", mass=0.8, com=(0, 0, 0.05),
                inertia=tuple(map(tuple, np.diag([0.004, 0.004, 0.002]))),
            )
        )
        joints.append(
            JointSpec(
                name=f"{prefix}_yaw", type="revolute", parent="base",
                child=f"{prefix}_shoulder", axis=(0, 0, 1),
                origin=Pose([0.0, ysign * torso_half_gap, 0.4]),
                bounds=(-2.6, 2.6), velocity_limit=4.0, effort_limit=30.0,
            )
        )
        names = [f"{prefix}_upper", f"{prefix}_mid", f"{prefix}_lower"]
        radii = (0.05, 0.045, 0.04)
        masses = (0.9, 0.7, 0.5)
        bounds = ((-1.5, 1.5), (-2.4, 2.4), (-2.4, 2.4))
        parent = f"{prefix}_shoulder"
        offset = Pose([0, 0, 0.1])
        for k, (nm, ln, rad, mass) in enumerate(zip(names, seg, radii, masses)):
            links.append(
                _link_along_x(nm, ln, mass, rad, f"{prefix}_cap{k + 1}", gap=0.08)
            )
            joints.append(
                JointSpec(
                    name=f"{prefix}_pitch{k + 1}", type="revolute", parent=parent,
                    child=nm, axis=(0, 1, 0), origin=offset,
                    bounds=bounds[k], velocity_limit=4.0, effort_limit=25.0,
                )
            )
            parent = nm
            offset = Pose([ln, 0, 0])

    cap_ids = [cid for l in links for cid, _, _ in l.capsules]
    pairs = [
        (cap_ids[i], cap_ids[j])
        for i in range(len(cap_ids))
        for j in range(i + 1, len(cap_ids))
    ]
    return RobotModel(
        links=tuple(links),
        joints=tuple(joints),
        self_collision_pairs=tuple(pairs),
        arms={
            "left": ArmSpec(
                joints=("l_yaw", "l_pitch1", "l_pitch2", "l_pitch3"),
                ee_link="l_lower", ee_offset=(seg[2], 0, 0),
            ),
            "right": ArmSpec(
                joints=("r_yaw", "r_pitch1", "r_pitch2", "r_pitch3"),
                ee_link="r_lower", ee_offset=(seg[2], 0, 0),
            ),
        },
        neutral=(0.0, 0.25, 0.65, 0.35, 0.0, 0.25, 0.65, 0.35),
    )


def point_mass_pendulum(length: float = 1.0, mass: float = 1.0) -> RobotModel:
    """Point mass on a massless rod, swinging about the world y axis.

    At q = 0 the mass hangs straight down; gravity torque is -m g l sin(q).
    """
    links = (
        LinkSpec(name="base"),
        LinkSpec(name="bob", mass=mass, com=(0.0, 0.0, -length)),
    )
    joints = (
        JointSpec(name="hinge", type="revolute", parent="base", child="bob",
                  axis=(0, 1, 0), bounds=(-2 * np.pi, 2 * np.pi),
                  velocity_limit=50.0, effort_limit=50.0),
    )
    return RobotModel(links=links, joints=joints)


REGISTRY = {
    "planar2": planar_two_link,
    "spatial3": spatial_three_dof,
    "dual4": dual_four_dof,
    "pendulum": point_mass_pendulum,
}
