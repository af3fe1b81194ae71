"""Safe-action orchestration: project every policy prediction onto the
assembled constraint set, quantify how much the raw prediction violated the
constraints, build training trajectories, and run the four policy-update
strategies.

Strategies: UP executes raw predictions (unconstrained baseline); CP executes
projected actions but trains on predictions; CC trains on the projected
actions themselves; CPC trains twice per batch, first on predictions with
violation-discounted rewards, then on projected actions with the raw rewards.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import policy as policy_mod
from . import qp, trpo
from .constraints import ConstraintSet, assemble
from .reacher import EnvConfig, ReacherEnv
from .robot import PlanarRobot

STRATEGIES = ("UP", "CP", "CC", "CPC")

# Per-row violations at or below this (after unit-norm row scaling) count as
# satisfied, so the cost is exactly zero for feasible predictions.
VIOLATION_TOL = 1e-8
# Zero-step feasibility probe and executed-action check tolerances.
FEASIBILITY_PROBE_TOL = 1e-8
SAFETY_TOL = 1e-6


class InfeasibleQp(Exception):
    """The assembled constraints exclude the null step: configuration bug."""


class SafetyViolation(Exception):
    """A projected action failed the constraint check before execution."""


@dataclass
class TrajectoryRecord:
    observation: np.ndarray
    predicted_action: np.ndarray
    safe_action: np.ndarray
    reward: float
    value: float
    violation_cost: float
    terminated: bool
    truncated: bool


def _unit_rows(M, v):
    if not v.shape[0]:
        return M, v
    norms = np.linalg.norm(M, axis=1)
    norms = np.where(norms > 1e-12, norms, 1.0)
    return M / norms[:, None], v / norms


def violation_cost(G, h, A, b, action, tol: float = VIOLATION_TOL) -> float:
    """Total constraint violation of ``action``, with every row scaled to unit
    norm so all rows contribute on the same footing."""
    action = np.asarray(action, dtype=float).ravel()
    cost = 0.0
    if b.shape[0]:
        norms = np.linalg.norm(A, axis=1)
        norms = np.where(norms > 1e-12, norms, 1.0)
        resid = (A @ action - b) / norms
        resid[np.abs(resid) <= tol] = 0.0
        cost += float(np.linalg.norm(resid))
    if h.shape[0]:
        norms = np.linalg.norm(G, axis=1)
        norms = np.where(norms > 1e-12, norms, 1.0)
        resid = (G @ action - h) / norms
        resid[resid <= tol] = 0.0
        cost += float(np.linalg.norm(np.maximum(resid, 0.0)))
    return cost


def _project_batch(states, predictions, cset: ConstraintSet, k_max: int):
    mats = []
    problems = []
    for state, prediction in zip(states, predictions):
        G, h, A, b = assemble(cset, state)
        if h.shape[0] and float(h.min()) < -FEASIBILITY_PROBE_TOL:
            worst = int(np.argmin(h))
            raise InfeasibleQp(
                f"null step violates assembled row {worst} (h={h[worst]:g}); "
                "constraint configuration bug"
            )
        mats.append((G, h, A, b))
        # Row scaling never changes the optimum; unit-norm rows condition the
        # solve much better than the raw mixed-unit rows (torque rows carry
        # norms orders of magnitude above the velocity rows).
        Gn, hn = _unit_rows(G, h)
        An, bn = _unit_rows(A, b)
        problems.append(qp.QpProblem.projection(prediction, Gn, hn, An, bn))
    solutions = qp.solve_batch(problems, k_max)
    safe = np.stack([sol.x_star for sol in solutions])
    costs = np.array(
        [violation_cost(*mat, pred) for mat, pred in zip(mats, predictions)]
    )
    return safe, costs, mats


def optlayer_apply(state, predicted_action, cset: ConstraintSet,
                   k_max: int = qp.DEFAULT_K_MAX):
    """Project one prediction onto the constraints assembled for ``state``.

    Returns the closest feasible action and the violation cost of the raw
    prediction (zero exactly when the prediction already satisfies every
    constraint).
    """
    safe, costs, _ = _project_batch([state], [np.asarray(predicted_action, float)], cset, k_max)
    return safe[0], float(costs[0])


def _check_executed(mat, action) -> None:
    G, h, A, b = mat
    if h.shape[0]:
        excess = float((G @ action - h).max())
        if excess > SAFETY_TOL:
            raise SafetyViolation(f"projected action violates inequalities by {excess:g}")
    if b.shape[0]:
        excess = float(np.abs(A @ action - b).max())
        if excess > SAFETY_TOL:
            raise SafetyViolation(f"projected action violates equalities by {excess:g}")


def _rollout_group(envs, params, cset, constrained, rngs, k_max):
    """Run one episode on every env in lockstep (shared policy snapshot,
    batched projection). Returns per-env record lists and bootstrap values."""
    k = len(envs)
    obs = [env.reset() for env in envs]
    records = [[] for _ in range(k)]
    final_values = np.zeros(k)
    active = list(range(k))
    while active:
        stacked = np.stack([obs[i] for i in active])
        means, std, values = policy_mod.forward_batch(params, stacked)
        predictions = np.empty_like(means)
        for j, i in enumerate(active):
            predictions[j] = means[j] + std * rngs[i].standard_normal(std.shape[0])
        safe, costs, mats = _project_batch(list(stacked), predictions, cset, k_max)
        still = []
        for j, i in enumerate(active):
            executed = safe[j] if constrained else predictions[j]
            if constrained:
                _check_executed(mats[j], executed)
            result = envs[i].step(executed)
            records[i].append(
                TrajectoryRecord(
                    observation=obs[i],
                    predicted_action=predictions[j],
                    safe_action=safe[j],
                    reward=result.reward,
                    value=float(values[j]),
                    violation_cost=float(costs[j]),
                    terminated=result.terminated,
                    truncated=result.truncated,
                )
            )
            if result.terminated:
                final_values[i] = 0.0
            elif result.truncated:
                final_values[i] = float(
                    policy_mod.values_batch(params, result.observation[None])[0]
                )
            else:
                obs[i] = result.observation
                still.append(i)
        active = still
    return records, final_values


def build_traj(env, params, cset: ConstraintSet, constrained: bool, rng,
               k_max: int = qp.DEFAULT_K_MAX) -> list[TrajectoryRecord]:
    """One episode: predict, project, execute (projected action when
    ``constrained`` else the raw prediction), recording all six per-step
    quantities."""
    records, _ = _rollout_group([env], params, cset, constrained, [rng], k_max)
    return records[0]


def make_env_pool(env_cfg: EnvConfig, robot: PlanarRobot, count: int, seed: int):
    """Environment instances with independent, reproducible rng streams."""
    return [
        ReacherEnv(env_cfg, robot, rng=np.random.default_rng(np.random.SeedSequence((seed, i))))
        for i in range(count)
    ]


@dataclass
class EpisodeRow:
    episode: int
    reward: float
    steps: int
    collision: bool
    cum_collisions: int
    mean_violation: float


@dataclass
class UpdateRow:
    update: int
    phase: str
    episodes: int
    steps: int
    mean_reward: float
    mean_kl: float
    surrogate_improvement: float
    value_loss: float


def _make_batch(episodes, use_safe_actions: bool, subtract_costs: bool) -> trpo.Batch:
    all_records = [rec for records, _ in episodes for rec in records]
    observations = np.stack([rec.observation for rec in all_records])
    if use_safe_actions:
        actions = np.stack([rec.safe_action for rec in all_records])
    else:
        actions = np.stack([rec.predicted_action for rec in all_records])
    rewards = np.array([rec.reward for rec in all_records])
    if subtract_costs:
        rewards = rewards - np.array([rec.violation_cost for rec in all_records])
    values = np.array([rec.value for rec in all_records])
    ends = np.cumsum([len(records) for records, _ in episodes])
    terminated = np.array([records[-1].terminated for records, _ in episodes])
    final_values = np.array([fv for _, fv in episodes])
    return trpo.Batch(
        observations=observations,
        actions=actions,
        rewards=rewards,
        values=values,
        episode_ends=ends,
        terminated=terminated,
        final_values=final_values,
    )


def run_strategy(tag: str, envs, params, cset: ConstraintSet, trpo_cfg: trpo.TrpoConfig,
                 episodes: int, *, batch_steps: int = 2048, sample_seed: int = 0,
                 k_max: int = qp.DEFAULT_K_MAX, on_episode=None, on_update=None,
                 updater=trpo.update):
    """Train for an episode budget under one policy-update strategy.

    Rollouts accumulate until at least ``batch_steps`` steps (or the budget is
    exhausted), then the policy is updated per the strategy. Returns the final
    parameters plus episode and update logs. ``updater`` is injectable for
    testing.
    """
    if tag not in STRATEGIES:
        raise ValueError(f"unknown strategy {tag!r}; expected one of {STRATEGIES}")
    constrained = tag != "UP"
    rngs = [
        np.random.default_rng(np.random.SeedSequence((sample_seed, i, 101)))
        for i in range(len(envs))
    ]
    episode_log: list[EpisodeRow] = []
    update_log: list[UpdateRow] = []
    episode_idx = 0
    cum_collisions = 0
    update_idx = 0
    while episode_idx < episodes:
        round_episodes = []
        round_steps = 0
        while round_steps < batch_steps and episode_idx < episodes:
            k = min(len(envs), episodes - episode_idx)
            group_records, group_finals = _rollout_group(
                envs[:k], params, cset, constrained, rngs[:k], k_max
            )
            for i in range(k):
                records = group_records[i]
                round_episodes.append((records, group_finals[i]))
                round_steps += len(records)
                collided = bool(records[-1].terminated)
                cum_collisions += int(collided)
                row = EpisodeRow(
                    episode=episode_idx,
                    reward=float(sum(rec.reward for rec in records)),
                    steps=len(records),
                    collision=collided,
                    cum_collisions=cum_collisions,
                    mean_violation=float(
                        np.mean([rec.violation_cost for rec in records])
                    ),
                )
                episode_log.append(row)
                if on_episode is not None:
                    on_episode(row)
                episode_idx += 1

        mean_reward = float(
            np.mean([sum(r.reward for r in records) for records, _ in round_episodes])
        )

        def run_update(batch, phase):
            nonlocal params, update_idx
            params, stats = updater(params, batch, trpo_cfg)
            row = UpdateRow(
                update=update_idx,
                phase=phase,
                episodes=episode_idx,
                steps=round_steps,
                mean_reward=mean_reward,
                mean_kl=stats.mean_kl,
                surrogate_improvement=stats.surrogate_improvement,
                value_loss=stats.value_loss,
            )
            update_log.append(row)
            if on_update is not None:
                on_update(row)
            update_idx += 1

        if tag in ("UP", "CP"):
            run_update(_make_batch(round_episodes, use_safe_actions=False, subtract_costs=False), tag.lower())
        elif tag == "CC":
            run_update(_make_batch(round_episodes, use_safe_actions=True, subtract_costs=False), "cc")
        else:  # CPC: predictions with discounted rewards, then corrections.
            run_update(_make_batch(round_episodes, use_safe_actions=False, subtract_costs=True), "cpc-pred")
            run_update(_make_batch(round_episodes, use_safe_actions=True, subtract_costs=False), "cpc-corr")

    return params, episode_log, update_log
