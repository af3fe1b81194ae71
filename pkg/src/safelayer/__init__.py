"""Constrained-action reinforcement learning: a batched interior-point QP
projection layer, a planar reacher environment with auxiliary dynamics state,
trust-region policy optimization, and the four safe policy-update strategies.
"""

from .qp import QpProblem, QpSolution, solve, solve_batch, solution_gradient
from .reacher import EnvConfig, ReacherEnv
from .robot import PlanarRobot
from .safe_rl import STRATEGIES, build_traj, optlayer_apply, run_strategy
from .trpo import TrpoConfig

__all__ = [
    "QpProblem",
    "QpSolution",
    "solve",
    "solve_batch",
    "solution_gradient",
    "EnvConfig",
    "ReacherEnv",
    "PlanarRobot",
    "STRATEGIES",
    "build_traj",
    "optlayer_apply",
    "run_strategy",
    "TrpoConfig",
    "__version__",
]

__version__ = "0.1.0"
