"""Planar reaching environment: episode protocol, extended state vector,
reward computation and collision-triggered termination.

The robot is position-controlled: an action is the joint step to perform over
one control interval, applied exactly (kinematic update). Joint velocities are
the forward difference of the executed step, and the dynamics quantities the
constraint recipes need (mass-matrix rows, bias, monitored distances and their
Jacobian rows) are computed internally and appended to the observation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import robot as robot_mod
from .constraints import (
    ConstraintSet,
    LayoutError,
    build_affine_position_block,
    build_collision_block,
    build_constant_velocity_block,
    build_torque_block,
)
from .robot import ALL_PAIRS, Circle, JointState, Pair, PlanarRobot


class NonFiniteAction(Exception):
    pass


class SamplingExhausted(Exception):
    pass


TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class EnvConfig:
    dt: float = 0.01
    max_steps: int = 200
    sample_range: float = 0.27
    beta_coll: float = 10.0
    proximity_threshold: float = 0.03
    proximity_bonus: float = 2.0
    obstacle_radius: float = 0.02
    qd_max: float = TWO_PI
    tau_max: float = 5.0
    xi: float = 1.0
    d_security: float = 0.01
    d_influence: float = 0.05
    elbow_min: float = -math.pi
    elbow_max: float = math.pi
    pairs: tuple[Pair, ...] = ALL_PAIRS
    seed: int = 0

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be at least 1")
        if self.beta_coll <= 0:
            raise ValueError("beta_coll must be positive")
        if self.sample_range <= 0:
            raise ValueError("sample_range must be positive")
        if not self.d_security < self.d_influence:
            raise ValueError("d_security must be below d_influence")
        if not self.elbow_min < self.elbow_max:
            raise ValueError("elbow_min must be below elbow_max")
        object.__setattr__(self, "pairs", tuple(tuple(p) for p in self.pairs))


@dataclass(frozen=True)
class ObservationLayout:
    """Index map of the flattened state vector.

    Order: forearm-base position (3), elbow angle (1), joint velocities (2),
    end-effector position (3), target and obstacle positions relative to the
    end effector (3 + 3), then the auxiliary extension: mass-matrix rows
    (2 x 8, row-major), bias (2), and per monitored pair its distance (1) and
    distance-Jacobian row (2).
    """

    pairs: tuple[Pair, ...]
    p_fa: slice = field(default=slice(0, 3), init=False)
    theta_elbow: int = field(default=3, init=False)
    theta_dot: slice = field(default=slice(4, 6), init=False)
    p_ee: slice = field(default=slice(6, 9), init=False)
    target_rel: slice = field(default=slice(9, 12), init=False)
    obstacle_rel: slice = field(default=slice(12, 15), init=False)
    h_tau: slice = field(default=slice(15, 31), init=False)
    c_tau: slice = field(default=slice(31, 33), init=False)

    def __post_init__(self):
        pairs = tuple(tuple(p) for p in self.pairs)
        object.__setattr__(self, "pairs", pairs)
        base = self.c_tau.stop
        dist, jrow = {}, {}
        for k, pair in enumerate(pairs):
            dist[pair] = base + 3 * k
            jrow[pair] = (base + 3 * k + 1, base + 3 * k + 2)
        object.__setattr__(self, "_pair_distance", dist)
        object.__setattr__(self, "_pair_jacobian", jrow)
        object.__setattr__(self, "dim", base + 3 * len(pairs))
        # Accessors consumed by the constraint builders.
        object.__setattr__(self, "joint_positions", (None, self.theta_elbow))
        object.__setattr__(self, "joint_velocities", (4, 5))
        object.__setattr__(
            self, "mass_rows", tuple(tuple(range(15 + 8 * j, 23 + 8 * j)) for j in range(2))
        )
        object.__setattr__(self, "bias_indices", (31, 32))

    def pair_distance_index(self, pair: Pair) -> int:
        try:
            return self._pair_distance[tuple(pair)]
        except KeyError:
            raise LayoutError(f"pair {pair!r} is not monitored") from None

    def pair_jacobian_indices(self, pair: Pair) -> tuple[int, int]:
        try:
            return self._pair_jacobian[tuple(pair)]
        except KeyError:
            raise LayoutError(f"pair {pair!r} is not monitored") from None


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    terminated: bool
    truncated: bool
    info: dict[str, Any]


def clip_elbow(angle: float, lo: float = -math.pi, hi: float = math.pi) -> float:
    return float(min(max(angle, lo), hi))


def wrap_angle(angle: float) -> float:
    """Wrap into (-pi, pi]."""
    wrapped = math.fmod(angle + math.pi, TWO_PI)
    if wrapped <= 0.0:
        wrapped += TWO_PI
    return wrapped - math.pi


def make_layout(pairs=ALL_PAIRS) -> ObservationLayout:
    return ObservationLayout(pairs=tuple(pairs))


def make_constraint_set(cfg: EnvConfig, layout: ObservationLayout) -> ConstraintSet:
    """The standard block set: velocity, elbow position, torque, one
    velocity-damping row per monitored pair."""
    qd = np.full(2, cfg.qd_max)
    tau = np.full(2, cfg.tau_max)
    blocks = [
        build_constant_velocity_block(cfg.dt, -qd, qd),
        build_affine_position_block(
            [-np.inf, cfg.elbow_min], [np.inf, cfg.elbow_max], layout
        ),
        build_torque_block(cfg.dt, -tau, tau, layout),
    ]
    for pair in cfg.pairs:
        blocks.append(
            build_collision_block(pair, cfg.xi, cfg.d_security, cfg.d_influence, layout, cfg.dt)
        )
    return ConstraintSet(blocks=tuple(blocks), n_x=2)


class ReacherEnv:
    """One environment instance; not thread-safe, run instances in parallel
    with independent rng streams instead."""

    def __init__(self, config: EnvConfig | None = None, robot: PlanarRobot | None = None, rng=None):
        self.config = config or EnvConfig()
        self.robot = robot or PlanarRobot()
        self.layout = make_layout(self.config.pairs)
        self._rng = rng if rng is not None else np.random.default_rng(self.config.seed)
        self.state = JointState.zeros()
        self.target = np.zeros(3)
        self.obstacle = Circle(np.array([1.0, 1.0]), self.config.obstacle_radius)
        self._steps = 0
        self._done = True
        self._distances: dict[Pair, float] = {}

    @property
    def steps(self) -> int:
        return self._steps

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        cfg = self.config
        self.state = JointState.zeros()
        self._steps = 0
        self._done = False
        R = cfg.sample_range
        self.target = np.append(self._rng.uniform(-R, R, size=2), 0.0)
        obstacle_pairs = [p for p in cfg.pairs if "obstacle" in p]
        for _ in range(1000):
            self.obstacle = Circle(self._rng.uniform(-R, R, size=2), cfg.obstacle_radius)
            clear = all(
                robot_mod.closest_pair(self.robot, self.state.theta, self.obstacle, p).distance > 0.0
                for p in obstacle_pairs
            )
            if clear:
                break
        else:
            raise SamplingExhausted("could not place the obstacle clear of the robot")
        return self._observe()

    def step(self, action) -> StepResult:
        if self._done:
            raise RuntimeError("episode is over; call reset() first")
        a = np.asarray(action, dtype=float).ravel()
        if a.shape != (2,):
            raise NonFiniteAction(f"action must have 2 entries, got shape {a.shape}")
        if not np.isfinite(a).all():
            raise NonFiniteAction(f"non-finite action {a}")
        cfg = self.config
        old = self.state
        new_elbow = clip_elbow(old.theta[1] + a[1], cfg.elbow_min, cfg.elbow_max)
        executed = np.array([a[0], new_elbow - old.theta[1]])
        new_theta = np.array([wrap_angle(old.theta[0] + a[0]), new_elbow])
        new_dot = executed / cfg.dt
        new_ddot = (new_dot - old.theta_dot) / cfg.dt
        self.state = JointState(new_theta, new_dot, new_ddot)
        self._steps += 1

        obs = self._observe()
        collision = any(d <= 0.0 for d in self._distances.values())
        p_ee = obs[self.layout.p_ee]
        d_target = float(np.linalg.norm(self.target - p_ee))
        r_dist = -d_target
        r_coll = -20.0 * cfg.beta_coll if collision else 0.0
        r_prox = cfg.proximity_bonus if d_target <= cfg.proximity_threshold else 0.0
        reward = r_dist + r_coll + r_prox
        terminated = collision
        truncated = (not collision) and self._steps >= cfg.max_steps
        self._done = terminated or truncated
        info = {
            "collision": collision,
            "d_target": d_target,
            "r_dist": r_dist,
            "r_coll": r_coll,
            "r_prox": r_prox,
        }
        return StepResult(obs, reward, terminated, truncated, info)

    def _observe(self) -> np.ndarray:
        lay = self.layout
        obs = np.empty(lay.dim)
        p_fa, p_ee = robot_mod.forward_kinematics(self.robot, self.state.theta)
        obs[lay.p_fa] = p_fa
        obs[lay.theta_elbow] = self.state.theta[1]
        obs[lay.theta_dot] = self.state.theta_dot
        obs[lay.p_ee] = p_ee
        obs[lay.target_rel] = self.target - p_ee
        obs[lay.obstacle_rel] = self.obstacle.center - p_ee
        H, C = robot_mod.joint_space_matrices(self.robot, self.state.theta, self.state.theta_dot)
        obs[lay.h_tau] = H.ravel()
        obs[lay.c_tau] = C
        self._distances = {}
        for pair in lay.pairs:
            cp = robot_mod.closest_pair(self.robot, self.state.theta, self.obstacle, pair)
            row = robot_mod.distance_jacobian_row(self.robot, self.state.theta, pair, cp)
            d_idx = lay.pair_distance_index(pair)
            j0, j1 = lay.pair_jacobian_indices(pair)
            obs[d_idx] = cp.distance
            obs[j0], obs[j1] = row
            self._distances[pair] = cp.distance
        return obs
