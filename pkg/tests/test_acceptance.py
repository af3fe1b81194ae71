"""Acceptance suite: every criterion runs at its stated tolerance and prints
one PASS/FAIL line (run pytest with -s to see the lines for passing tests).

The two training grids are heavy (about 15 cells of 2000 episodes); cells run
in up to two worker processes and are shared between the criteria that read
them. The safety criterion additionally relies on the per-step executed-action
check inside the rollout loop, which raises on any violation above 1e-6.
"""

import csv
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from _oracles import active_set_solve, random_projection_qp, torque_by_momentum_difference
from safelayer import cli, config, qp, safe_rl
from safelayer import robot as rm
from safelayer.constraints import assemble
from safelayer.reacher import EnvConfig, ReacherEnv, make_constraint_set, make_layout


def verdict(number, name, ok, detail):
    line = f"ACCEPTANCE {number} {name}: {'PASS' if ok else 'FAIL'} — {detail}"
    print(line, flush=True)
    assert ok, line


def read_episodes(cell_dir):
    with open(Path(cell_dir) / "episodes.csv") as fh:
        return list(csv.DictReader(fh))


def run_grid(cells, out_root):
    """Train the given (strategy, beta, seed, episodes) cells, two at a time."""
    jobs = []
    for strategy, beta, seed, episodes in cells:
        cfg = replace(
            config.default_config(),
            strategies=(strategy,),
            beta_colls=(beta,),
            seeds=(seed,),
            episodes=episodes,
            parallel=4,
            out_dir=str(out_root),
        )
        jobs.append((cfg, strategy, beta, seed))
    workers = min(2, os.cpu_count() or 1, len(jobs))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        list(pool.map(cli._cell_job, jobs))
    return {
        (strategy, beta, seed): out_root / cli.cell_name(strategy, beta, seed)
        for _, strategy, beta, seed in jobs
    }


@pytest.fixture(scope="module")
def constrained_runs(tmp_path_factory):
    out = tmp_path_factory.mktemp("constrained_grid")
    cells = [(tag, 10.0, seed, 2000) for tag in ("CP", "CC", "CPC") for seed in (0, 1, 2)]
    return run_grid(cells, out)


@pytest.fixture(scope="module")
def unconstrained_runs(tmp_path_factory):
    out = tmp_path_factory.mktemp("beta_grid")
    cells = [("UP", beta, seed, 2000) for beta in (1.0, 50.0) for seed in (0, 1, 2)]
    return run_grid(cells, out)


def test_criterion_1_qp_oracle_equivalence():
    rng = np.random.default_rng(1001)
    start = time.perf_counter()
    worst_rel = 0.0
    converged = 0
    trials = 1000
    for _ in range(trials):
        P, q, G, h, A, b = random_projection_qp(rng, n_x_max=10, n_in_max=20, n_eq_max=3)
        solution = qp.solve(qp.QpProblem(P=P, q=q, G=G, h=h, A=A, b=b), k_max=10)
        expected = active_set_solve(P, q, G, h, A, b)
        rel = float(np.linalg.norm(solution.x_star - expected)) / max(
            1.0, float(np.linalg.norm(expected))
        )
        worst_rel = max(worst_rel, rel)
        converged += solution.kkt_residual <= 1e-6
    elapsed = time.perf_counter() - start
    ok = worst_rel < 1e-5 and converged >= 0.99 * trials and elapsed < 60.0
    verdict(
        1, "qp-oracle-equivalence", ok,
        f"worst relative error {worst_rel:.2e} (tol 1e-5), residual<=1e-6 on "
        f"{converged}/{trials} (need >=990), {elapsed:.1f}s (limit 60s)",
    )


def test_criterion_2_projection_properties():
    start = time.perf_counter()
    env_cfg = EnvConfig()
    layout = make_layout(env_cfg.pairs)
    cset = make_constraint_set(env_cfg, layout)
    envs = safe_rl.make_env_pool(env_cfg, ReacherEnv(env_cfg).robot, 4, seed=2002)
    rng = np.random.default_rng(2002)
    states = []
    obs = [env.reset() for env in envs]
    while len(states) < 10_000:
        for i, env in enumerate(envs):
            states.append(obs[i])
            result = env.step(rng.uniform(-0.08, 0.08, 2))
            if result.terminated or result.truncated:
                obs[i] = env.reset()
            else:
                obs[i] = result.observation
    states = states[:10_000]
    scales = np.array([0.02, 0.1, 0.5])
    predictions = [
        scales[i % 3] * rng.standard_normal(2) for i in range(len(states))
    ]

    identity_worst = 0.0
    soundness_failures = 0
    feasible_count = 0
    for chunk in range(0, len(states), 500):
        batch_states = states[chunk : chunk + 500]
        batch_preds = predictions[chunk : chunk + 500]
        safe, costs, mats = safe_rl._project_batch(batch_states, batch_preds, cset, 10)
        for j, (G, h, A, b) in enumerate(mats):
            norms = np.linalg.norm(G, axis=1)
            norms = np.where(norms > 1e-12, norms, 1.0)
            feasible = float(((G @ batch_preds[j] - h) / norms).max()) <= 1e-8
            if feasible:
                feasible_count += 1
                identity_worst = max(
                    identity_worst, float(np.abs(safe[j] - batch_preds[j]).max())
                )
            if (costs[j] == 0.0) != feasible:
                soundness_failures += 1
    elapsed = time.perf_counter() - start
    ok = (
        identity_worst < 1e-6
        and soundness_failures == 0
        and feasible_count > 100
        and elapsed < 60.0
    )
    verdict(
        2, "projection-properties", ok,
        f"feasible-identity worst {identity_worst:.2e} (tol 1e-6) over "
        f"{feasible_count} feasible predictions, cost-soundness failures "
        f"{soundness_failures}/10000, {elapsed:.1f}s (limit 60s)",
    )


def test_criterion_3_differentiability():
    rng = np.random.default_rng(3003)
    checked = 0
    worst = 0.0
    while checked < 200:
        P, q, G, h, A, b = random_projection_qp(rng, n_x_max=6, n_in_max=12, n_eq_max=2)
        problem = qp.QpProblem(P=P, q=q, G=G, h=h, A=A, b=b)
        solution = qp.solve(problem)
        if solution.s.size and float(np.maximum(solution.s, solution.z).min()) < 1e-3:
            continue  # near an activity switch: not a non-degenerate instance
        try:
            jac = qp.solution_gradient(problem, solution)
        except qp.DegenerateActiveSet:
            continue
        step = 1e-6
        fd = np.zeros_like(jac)
        for j in range(problem.n_x):
            dq = np.zeros(problem.n_x)
            dq[j] = step
            plus = qp.solve(qp.QpProblem(P=P, q=q + dq, G=G, h=h, A=A, b=b))
            minus = qp.solve(qp.QpProblem(P=P, q=q - dq, G=G, h=h, A=A, b=b))
            fd[:, j] = (plus.x_star - minus.x_star) / (2 * step)
        rel = float(np.abs(jac - fd).max()) / max(1.0, float(np.abs(fd).max()))
        worst = max(worst, rel)
        checked += 1
    ok = worst < 1e-4
    verdict(
        3, "implicit-kkt-gradient", ok,
        f"worst relative deviation from central differences {worst:.2e} "
        f"(tol 1e-4) over {checked} instances",
    )


def test_criterion_4_safety_invariant(constrained_runs):
    # The executed-action constraint check (tolerance 1e-6) runs inside the
    # rollout loop and raises on violation, so completing these runs already
    # certifies every executed action; here the logs are checked for the
    # stated 500-episode scope (the runs continue to 2000 with the same
    # seeds, which subsumes the 500-episode training of the criterion).
    details = []
    total_500 = 0
    total_all = 0
    for (tag, beta, seed), cell in sorted(constrained_runs.items()):
        rows = read_episodes(cell)
        collisions_500 = sum(int(r["collision"]) for r in rows[:500])
        collisions_all = sum(int(r["collision"]) for r in rows)
        total_500 += collisions_500
        total_all += collisions_all
        details.append(f"{tag}/seed{seed}:{collisions_500}")
    ok = total_500 == 0 and total_all == 0
    verdict(
        4, "zero-violation-training", ok,
        f"collisions in 500-episode scope {total_500} (full 2000-episode runs "
        f"{total_all}); per-cell [{', '.join(details)}]; executed-action "
        "constraint check at 1e-6 active throughout",
    )


def test_criterion_5_beta_sensitivity(unconstrained_runs):
    wins = 0
    low_counts = []
    high_counts = []
    for seed in (0, 1, 2):
        low = sum(int(r["collision"]) for r in read_episodes(unconstrained_runs[("UP", 1.0, seed)]))
        high = sum(int(r["collision"]) for r in read_episodes(unconstrained_runs[("UP", 50.0, seed)]))
        low_counts.append(low)
        high_counts.append(high)
        wins += low > high
    ok = wins >= 2 and min(low_counts) > 0 and min(high_counts) > 0
    verdict(
        5, "collision-penalty-sensitivity", ok,
        f"cumulative collisions beta=1 {low_counts} vs beta=50 {high_counts}; "
        f"beta=1 exceeds beta=50 in {wins}/3 seed pairings (need >=2), both "
        "positive in every cell",
    )


def test_criterion_6_strategy_behavior(constrained_runs):
    improvements = {}
    for (tag, beta, seed), cell in sorted(constrained_runs.items()):
        rewards = np.array([float(r["reward"]) for r in read_episodes(cell)])
        improvements[(tag, seed)] = float(rewards[-200:].mean() - rewards[:200].mean())
    cp = np.mean([improvements[("CP", s)] for s in (0, 1, 2)])
    cpc = np.mean([improvements[("CPC", s)] for s in (0, 1, 2)])
    cc_smallest = sum(
        improvements[("CC", s)] < min(improvements[("CP", s)], improvements[("CPC", s)])
        for s in (0, 1, 2)
    )
    ok = cp > 0.0 and cpc > 0.0 and cc_smallest >= 2
    per_seed = {
        tag: [round(improvements[(tag, s)], 1) for s in (0, 1, 2)]
        for tag in ("CP", "CC", "CPC")
    }
    verdict(
        6, "strategy-behavior", ok,
        f"mean reward improvement CP {cp:.1f} and CPC {cpc:.1f} (both must be "
        f"positive); CC smallest in {cc_smallest}/3 seeds (need >=2); per-seed "
        f"improvements {per_seed}",
    )


def test_criterion_7_dynamics_oracle():
    robot = rm.PlanarRobot()
    rng = np.random.default_rng(7007)
    worst_tau = 0.0
    for _ in range(1000):
        theta = rng.uniform(-np.pi, np.pi, 2)
        theta_dot = rng.uniform(-2 * np.pi, 2 * np.pi, 2)
        theta_ddot = rng.uniform(-100.0, 100.0, 2)
        H, C = rm.joint_space_matrices(robot, theta, theta_dot)
        tau = H[:, 6:8] @ theta_ddot + C
        oracle = torque_by_momentum_difference(robot, theta, theta_dot, theta_ddot)
        worst_tau = max(worst_tau, float(np.abs(tau - oracle).max()))

    worst_row = 0.0
    checked = 0
    step = 1e-6
    while checked < 1000:
        theta = rng.uniform(-np.pi, np.pi, 2)
        obstacle = rm.Circle(rng.uniform(-0.3, 0.3, 2), 0.02)
        for pair in rm.ALL_PAIRS:
            cp = rm.closest_pair(robot, theta, obstacle, pair)
            if cp.distance < 1e-3:
                continue
            row = rm.distance_jacobian_row(robot, theta, pair, cp)
            fd = np.zeros(2)
            for j in range(2):
                d = np.zeros(2)
                d[j] = step
                fd[j] = (
                    rm.closest_pair(robot, theta + d, obstacle, pair).distance
                    - rm.closest_pair(robot, theta - d, obstacle, pair).distance
                ) / (2 * step)
            worst_row = max(worst_row, float(np.abs(row - fd).max()))
            checked += 1
    ok = worst_tau < 1e-4 and worst_row < 1e-4
    verdict(
        7, "dynamics-oracle", ok,
        f"torque worst deviation {worst_tau:.2e} over 1000 states, distance-"
        f"Jacobian worst deviation {worst_row:.2e} over {checked} rows (tol 1e-4)",
    )


def test_criterion_8_determinism(tmp_path):
    cfg = replace(
        config.default_config(),
        strategies=("CP", "UP"),
        beta_colls=(10.0,),
        seeds=(3,),
        episodes=16,
        parallel=4,
        batch_steps=1024,
    )
    cli.run(replace(cfg, out_dir=str(tmp_path / "first")))
    cli.run(replace(cfg, out_dir=str(tmp_path / "second")))
    mismatches = []
    for tag in ("cp", "up"):
        for name in ("episodes.csv", "updates.csv"):
            a = (tmp_path / "first" / f"{tag}_beta10_seed3" / name).read_bytes()
            b = (tmp_path / "second" / f"{tag}_beta10_seed3" / name).read_bytes()
            if a != b:
                mismatches.append(f"{tag}/{name}")
    ok = not mismatches
    verdict(
        8, "byte-identical-logs", ok,
        "episode and update CSVs identical across reruns for CP and UP cells"
        if ok else f"mismatched files: {mismatches}",
    )
