"""Closed-form kinematics, rigid-body matrices and collision geometry for a
planar two-link arm with parallel revolute joints.

The arm lives in the world x-y plane with gravity along -z, so gravity never
enters the joint equations of motion. Links are modeled as uniform thin rods
for dynamics and as capsules (segments with a radius) for distance queries;
the base is a disc at the origin. Generalized coordinates are ordered as six
base coordinates (x, y, z translation then x, y, z rotation) followed by the
two joint angles; the base is welded to the world, so base velocities are
always zero, but the base columns of the mass matrix are still populated.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

Z_AXIS = np.array([0.0, 0.0, 1.0])

UPPER_ARM_OBSTACLE = ("upper_arm", "obstacle")
FOREARM_OBSTACLE = ("forearm", "obstacle")
END_EFFECTOR_BASE = ("end_effector", "base")
ALL_PAIRS = (UPPER_ARM_OBSTACLE, FOREARM_OBSTACLE, END_EFFECTOR_BASE)

Pair = tuple[str, str]


@dataclass(frozen=True)
class PlanarRobot:
    """Geometry and inertial parameters of the two-link arm."""

    l1: float = 0.1
    l2: float = 0.1
    m1: float = 0.1
    m2: float = 0.1
    link_radius: float = 0.01
    base_radius: float = 0.02

    def __post_init__(self):
        for name in ("l1", "l2", "m1", "m2", "link_radius", "base_radius"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def rod_inertias(self) -> tuple[float, float]:
        """Moments of inertia about each rod's center, transverse axes."""
        return (self.m1 * self.l1**2 / 12.0, self.m2 * self.l2**2 / 12.0)


@dataclass
class JointState:
    theta: np.ndarray
    theta_dot: np.ndarray
    theta_ddot: np.ndarray

    @classmethod
    def zeros(cls) -> "JointState":
        return cls(np.zeros(2), np.zeros(2), np.zeros(2))


class ClosestPair(NamedTuple):
    """Signed surface distance, unit normal toward the link point, link point."""

    distance: float
    normal: np.ndarray
    point: np.ndarray


@dataclass(frozen=True)
class Circle:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        center = np.zeros(3)
        raw = np.asarray(self.center, dtype=float).ravel()
        center[: raw.shape[0]] = raw
        object.__setattr__(self, "center", center)
        if self.radius < 0:
            raise ValueError("radius must be nonnegative")


def forward_kinematics(robot: PlanarRobot, theta) -> tuple[np.ndarray, np.ndarray]:
    """World positions of the elbow (forearm base) and of the end effector."""
    t1, t2 = float(theta[0]), float(theta[1])
    p_fa = np.array([robot.l1 * np.cos(t1), robot.l1 * np.sin(t1), 0.0])
    t12 = t1 + t2
    p_ee = p_fa + np.array([robot.l2 * np.cos(t12), robot.l2 * np.sin(t12), 0.0])
    return p_fa, p_ee


def _zcross(v: np.ndarray) -> np.ndarray:
    """z x v for an in-plane vector."""
    return np.array([-v[1], v[0], 0.0])


def _link_frames(robot: PlanarRobot, theta):
    """Unit directions, COM positions and COM joint-Jacobians of both rods."""
    t1, t2 = float(theta[0]), float(theta[1])
    t12 = t1 + t2
    u1 = np.array([np.cos(t1), np.sin(t1), 0.0])
    u2 = np.array([np.cos(t12), np.sin(t12), 0.0])
    c1 = 0.5 * robot.l1 * u1
    p_fa = robot.l1 * u1
    c2 = p_fa + 0.5 * robot.l2 * u2
    # COM velocity = J @ theta_dot; columns are z x (lever arm of each joint).
    J1 = np.stack([_zcross(c1), np.zeros(3)], axis=1)
    J2 = np.stack([_zcross(c2), _zcross(c2 - p_fa)], axis=1)
    return u1, u2, c1, c2, J1, J2


def mass_matrix_and_bias(robot: PlanarRobot, q, q_dot) -> tuple[np.ndarray, np.ndarray]:
    """Joint rows of the floating-base mass matrix (2x8) and bias vector (2,).

    ``q`` and ``q_dot`` are the 8-element generalized position/velocity vectors;
    the first six entries are the (welded) base coordinates and must have zero
    velocity. Gravity acts along -z and therefore contributes nothing.
    """
    q = np.asarray(q, dtype=float).ravel()
    q_dot = np.asarray(q_dot, dtype=float).ravel()
    if q.shape != (8,) or q_dot.shape != (8,):
        raise ValueError("q and q_dot must have 8 entries (6 base + 2 joints)")
    if np.abs(q_dot[:6]).max(initial=0.0) != 0.0:
        raise ValueError("base velocities must be zero")
    theta = q[6:]
    theta_dot = q_dot[6:]
    u1, u2, c1, c2, J1, J2 = _link_frames(robot, theta)
    i1, i2 = robot.rod_inertias
    masses = (robot.m1, robot.m2)
    coms = (c1, c2)
    jacs = (J1, J2)
    # Joints driving each link's rotation rate about z: link 1 sees joint 1,
    # link 2 sees both.
    spins = (np.array([1.0, 0.0]), np.array([1.0, 1.0]))
    inertias = (i1, i2)

    H = np.zeros((2, 8))
    for m, c, J, w, izz in zip(masses, coms, jacs, spins, inertias):
        H[:, 0:3] += m * J.T                                   # base translation
        # c x J[:, k] for in-plane c and J columns points along z.
        H[:, 5] += m * (c[0] * J[1, :] - c[1] * J[0, :]) + izz * w
        H[:, 6:8] += m * (J.T @ J) + izz * np.outer(w, w)      # joint block

    # Bias: Coriolis/centrifugal only (planar, zero base motion, no in-plane
    # gravity). COM accelerations at zero joint acceleration are centripetal.
    w1 = theta_dot[0]
    w2 = theta_dot[0] + theta_dot[1]
    a1 = -(w1**2) * c1
    a2 = -(w1**2) * (robot.l1 * u1) - (w2**2) * (0.5 * robot.l2 * u2)
    C = robot.m1 * (J1.T @ a1) + robot.m2 * (J2.T @ a2)
    return H, C


def joint_space_matrices(robot: PlanarRobot, theta, theta_dot):
    """Convenience wrapper building the generalized vectors for a welded base."""
    q = np.zeros(8)
    q[6:] = np.asarray(theta, dtype=float).ravel()
    q_dot = np.zeros(8)
    q_dot[6:] = np.asarray(theta_dot, dtype=float).ravel()
    return mass_matrix_and_bias(robot, q, q_dot)


def _closest_on_segment(a: np.ndarray, b: np.ndarray, point: np.ndarray) -> np.ndarray:
    d = b - a
    dd = float(d @ d)
    if dd == 0.0:
        return a
    t = float((point - a) @ d) / dd
    return a + np.clip(t, 0.0, 1.0) * d


def closest_pair(robot: PlanarRobot, theta, obstacle: Circle, pair: Pair) -> ClosestPair:
    """Closest-point query for one monitored pair.

    Links are capsules around their axis segments and the base is a disc at the
    origin; the returned point lies on the link axis, the normal points from
    the other body toward it, and the distance is between surfaces (negative
    when overlapping).
    """
    p_fa, p_ee = forward_kinematics(robot, theta)
    if pair == UPPER_ARM_OBSTACLE:
        other_center, other_radius = obstacle.center, obstacle.radius
        point = _closest_on_segment(np.zeros(3), p_fa, other_center)
    elif pair == FOREARM_OBSTACLE:
        other_center, other_radius = obstacle.center, obstacle.radius
        point = _closest_on_segment(p_fa, p_ee, other_center)
    elif pair == END_EFFECTOR_BASE:
        other_center, other_radius = np.zeros(3), robot.base_radius
        point = p_ee
    else:
        raise ValueError(f"unknown pair {pair!r}")
    delta = point - other_center
    gap = float(np.linalg.norm(delta))
    normal = delta / gap if gap > 1e-12 else np.array([1.0, 0.0, 0.0])
    distance = gap - robot.link_radius - other_radius
    return ClosestPair(distance=distance, normal=normal, point=point)


def distance_jacobian_row(robot: PlanarRobot, theta, pair: Pair, cp: ClosestPair) -> np.ndarray:
    """Row mapping joint velocities to the distance rate for a static obstacle."""
    n, p = cp.normal, cp.point
    first = n[1] * p[0] - n[0] * p[1]  # n . (z x p)
    if pair == UPPER_ARM_OBSTACLE:
        second = 0.0
    elif pair in (FOREARM_OBSTACLE, END_EFFECTOR_BASE):
        p_fa, _ = forward_kinematics(robot, theta)
        second = n[1] * (p[0] - p_fa[0]) - n[0] * (p[1] - p_fa[1])
    else:
        raise ValueError(f"unknown pair {pair!r}")
    return np.array([first, second])
