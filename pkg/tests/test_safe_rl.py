import numpy as np
import pytest

from safelayer import constraints as cb
from safelayer import policy as pol
from safelayer import safe_rl, trpo
from safelayer.constraints import assemble
from safelayer.reacher import EnvConfig, ReacherEnv, make_constraint_set, make_layout

CFG = EnvConfig()
LAYOUT = make_layout(CFG.pairs)
CSET = make_constraint_set(CFG, LAYOUT)


def reacher_state(seed, steps=0):
    env = ReacherEnv(CFG)
    obs = env.reset(seed=seed)
    gen = np.random.default_rng(seed)
    for _ in range(steps):
        result = env.step(gen.uniform(-0.04, 0.04, 2))
        obs = result.observation
        if result.terminated or result.truncated:
            obs = env.reset(seed=seed + 1)
    return obs


def independent_cost(G, h, A, b, action, tol=1e-8):
    total = 0.0
    if len(b):
        norms = np.linalg.norm(A, axis=1)
        r = (A @ action - b) / np.where(norms > 1e-12, norms, 1.0)
        r = np.where(np.abs(r) <= tol, 0.0, r)
        total += np.sqrt((r**2).sum())
    if len(h):
        norms = np.linalg.norm(G, axis=1)
        r = (G @ action - h) / np.where(norms > 1e-12, norms, 1.0)
        r = np.maximum(np.where(r <= tol, 0.0, r), 0.0)
        total += np.sqrt((r**2).sum())
    return total


class TestOptLayerApply:
    def test_feasible_prediction_is_identity(self):
        state = reacher_state(0)
        prediction = np.array([0.001, -0.002])
        safe, cost = safe_rl.optlayer_apply(state, prediction, CSET)
        assert np.abs(safe - prediction).max() < 1e-6
        assert cost == 0.0

    def test_row_normalization_example(self):
        # Row 2x <= 2 normalizes to x <= 1: projecting 3 gives 1 with cost 2.
        cset = cb.ConstraintSet(
            blocks=(cb.constant_block(np.array([[2.0]]), np.array([2.0])),), n_x=1
        )
        safe, cost = safe_rl.optlayer_apply(np.zeros(1), np.array([3.0]), cset)
        assert safe == pytest.approx([1.0], abs=1e-7)
        assert cost == pytest.approx(2.0, abs=1e-9)

    def test_equality_violation_example(self):
        cset = cb.ConstraintSet(
            blocks=(cb.equality_block(np.array([[1.0, 0.0]]), np.array([0.0])),), n_x=2
        )
        safe, cost = safe_rl.optlayer_apply(np.zeros(4), np.array([0.3, 0.0]), cset)
        assert safe == pytest.approx([0.0, 0.0], abs=1e-9)
        assert cost == pytest.approx(0.3, abs=1e-9)

    def test_cost_zero_iff_unchanged(self, rng):
        for trial in range(200):
            state = reacher_state(trial % 7, steps=trial % 5)
            prediction = rng.normal(0.0, 0.15, 2)
            safe, cost = safe_rl.optlayer_apply(state, prediction, CSET)
            if cost == 0.0:
                assert np.abs(safe - prediction).max() < 1e-6
            else:
                assert np.abs(safe - prediction).max() > 1e-8

    def test_cost_matches_independent_recomputation(self, rng):
        for trial in range(100):
            state = reacher_state(trial % 5, steps=trial % 4)
            prediction = rng.normal(0.0, 0.3, 2)
            _, cost = safe_rl.optlayer_apply(state, prediction, CSET)
            G, h, A, b = assemble(CSET, state)
            assert cost == pytest.approx(independent_cost(G, h, A, b, prediction), abs=1e-10)

    def test_projection_satisfies_constraints(self, rng):
        for trial in range(100):
            state = reacher_state(trial % 5, steps=trial % 6)
            prediction = rng.normal(0.0, 0.4, 2)
            safe, _ = safe_rl.optlayer_apply(state, prediction, CSET)
            G, h, _, _ = assemble(CSET, state)
            assert (G @ safe - h).max() <= 1e-6

    def test_infeasible_configuration_detected(self):
        cset = cb.ConstraintSet(
            blocks=(cb.constant_block(np.array([[1.0, 0.0]]), np.array([-1.0])),), n_x=2
        )
        with pytest.raises(safe_rl.InfeasibleQp):
            safe_rl.optlayer_apply(np.zeros(4), np.zeros(2), cset)


def make_pool(count, seed):
    return safe_rl.make_env_pool(CFG, ReacherEnv(CFG).robot, count, seed)


def params_for_env(seed=0):
    return pol.init_params(LAYOUT.dim, rng=np.random.default_rng(seed))


class TestBuildTraj:
    def test_constrained_rollout_is_safe(self):
        env = make_pool(1, 3)[0]
        params = params_for_env(1)
        records = safe_rl.build_traj(env, params, CSET, True, np.random.default_rng(5))
        assert len(records) > 0
        for rec in records:
            G, h, _, _ = assemble(CSET, rec.observation)
            assert (G @ rec.safe_action - h).max() <= 1e-6
        assert not records[-1].terminated  # no collisions when constrained

    def test_unconstrained_branch_executes_predictions(self):
        envs = make_pool(2, 9)
        params = params_for_env(2)
        records = safe_rl.build_traj(envs[0], params, CSET, False, np.random.default_rng(11))
        # Replay the recorded predictions in an identically seeded env.
        replay_env = safe_rl.make_env_pool(CFG, envs[0].robot, 2, 9)[0]
        replay_env.reset()
        rewards = []
        for rec in records:
            result = replay_env.step(rec.predicted_action)
            rewards.append(result.reward)
        assert rewards == pytest.approx([rec.reward for rec in records])

    def test_cost_and_action_agree_on_records(self):
        env = make_pool(1, 4)[0]
        params = params_for_env(3)
        records = safe_rl.build_traj(env, params, CSET, True, np.random.default_rng(6))
        for rec in records:
            if rec.violation_cost == 0.0:
                assert np.abs(rec.predicted_action - rec.safe_action).max() < 1e-6
            else:
                assert np.abs(rec.predicted_action - rec.safe_action).max() > 1e-9

    def test_records_all_fields(self):
        env = make_pool(1, 5)[0]
        params = params_for_env(4)
        records = safe_rl.build_traj(env, params, CSET, True, np.random.default_rng(7))
        rec = records[0]
        assert rec.observation.shape == (LAYOUT.dim,)
        assert rec.predicted_action.shape == (2,)
        assert rec.safe_action.shape == (2,)
        assert rec.violation_cost >= 0.0
        assert isinstance(rec.reward, float)


class RecordingUpdater:
    def __init__(self):
        self.calls = []

    def __call__(self, params, batch, cfg):
        self.calls.append(batch)
        return params, trpo.UpdateStats(False, 0.0, 0.0, 0.0, 0)


def run_with_stub(tag, seed=0, episodes=4, n_envs=2):
    envs = make_pool(n_envs, seed)
    params = params_for_env(seed)
    updater = RecordingUpdater()
    safe_rl.run_strategy(
        tag, envs, params, CSET, trpo.TrpoConfig(), episodes,
        batch_steps=200, sample_seed=seed, updater=updater,
    )
    return updater


class TestRunStrategy:
    def test_unknown_tag_rejected(self):
        with pytest.raises(ValueError, match="strategy"):
            run_with_stub("XX")

    def test_cp_and_cc_differ_only_in_actions(self):
        cp = run_with_stub("CP", seed=21)
        cc = run_with_stub("CC", seed=21)
        assert len(cp.calls) == len(cc.calls)
        for b_cp, b_cc in zip(cp.calls, cc.calls):
            assert np.array_equal(b_cp.observations, b_cc.observations)
            assert np.array_equal(b_cp.rewards, b_cc.rewards)
            assert np.array_equal(b_cp.values, b_cc.values)
            assert np.array_equal(b_cp.episode_ends, b_cc.episode_ends)
            # CP feeds predictions, CC feeds corrected actions.
            assert not np.array_equal(b_cp.actions, b_cc.actions)

    def test_cpc_runs_two_updates_per_batch(self):
        cpc = run_with_stub("CPC", seed=22)
        cp = run_with_stub("CP", seed=22)
        assert len(cpc.calls) == 2 * len(cp.calls)
        first, second = cpc.calls[0], cpc.calls[1]
        assert np.array_equal(first.observations, second.observations)
        # First update uses predictions with violation-discounted rewards,
        # second uses corrected actions with the raw rewards and the same
        # sampled values.
        costs = second.rewards - first.rewards
        assert costs.min() >= -1e-12
        changed = np.abs(first.actions - second.actions).max(axis=1) > 1e-6
        assert np.array_equal(costs > 1e-9, changed)
        assert np.array_equal(first.values, second.values)

    def test_cpc_degenerates_to_cp_when_predictions_feasible(self):
        # Tiny log_std keeps predictions inside the velocity box, so costs are
        # zero and the CPC first update equals CP's batch.
        envs = make_pool(2, 23)
        params = params_for_env(23)
        params.log_std[:] = -6.0
        updater = RecordingUpdater()
        safe_rl.run_strategy("CPC", envs, params, CSET, trpo.TrpoConfig(), 2,
                             batch_steps=100, sample_seed=23, updater=updater)
        first, second = updater.calls[0], updater.calls[1]
        assert np.array_equal(first.rewards, second.rewards)
        assert np.abs(first.actions - second.actions).max() < 1e-6

    def test_up_uses_predictions_and_can_collide(self):
        envs = make_pool(4, 24)
        params = params_for_env(24)
        updater = RecordingUpdater()
        _, episode_log, _ = safe_rl.run_strategy(
            "UP", envs, params, CSET, trpo.TrpoConfig(), 40,
            batch_steps=400, sample_seed=24, updater=updater,
        )
        assert len(episode_log) == 40
        assert any(row.collision for row in episode_log)

    def test_constrained_strategies_never_collide(self):
        for tag in ("CP", "CC", "CPC"):
            envs = make_pool(2, 25)
            params = params_for_env(25)
            updater = RecordingUpdater()
            _, episode_log, _ = safe_rl.run_strategy(
                tag, envs, params, CSET, trpo.TrpoConfig(), 6,
                batch_steps=300, sample_seed=25, updater=updater,
            )
            assert all(not row.collision for row in episode_log)
            assert episode_log[-1].cum_collisions == 0

    def test_episode_budget_met_exactly(self):
        updater = run_with_stub("CP", seed=26, episodes=5, n_envs=3)
        total_eps = sum(len(b.episode_ends) for b in updater.calls)
        assert total_eps == 5

    def test_real_update_round_runs(self):
        envs = make_pool(2, 27)
        params = params_for_env(27)
        new_params, episode_log, update_log = safe_rl.run_strategy(
            "CP", envs, params, CSET, trpo.TrpoConfig(), 4,
            batch_steps=256, sample_seed=27,
        )
        assert len(update_log) >= 1
        assert all(np.isfinite(row.value_loss) for row in update_log)
