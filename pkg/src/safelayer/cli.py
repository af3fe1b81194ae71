"""Experiment runner and reporting.

Subcommands: ``train`` runs the (strategy x beta x seed) grid from a config
file, streaming one episode CSV and one update CSV per cell plus a summary
table; ``report`` turns episode CSVs into moving-average reward series,
cumulative collision series and an episodes-to-threshold summary;
``print-config`` emits the canonical config file; ``solve-qp`` solves one
dumped QP record for oracle debugging.

Every cell is deterministic given the config file and seed. The environment
variable SAFELAYER_THREADS caps how many grid cells run concurrently (results
never depend on it).
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import policy as policy_mod
from . import qp, safe_rl, trpo
from .config import ConfigError, ExperimentConfig, default_config, load, to_ini, validate
from .reacher import make_constraint_set


class MissingData(Exception):
    pass


EPISODE_COLUMNS = (
    "strategy", "seed", "beta_coll", "episode", "reward", "steps",
    "collision", "cum_collisions", "mean_violation",
)
UPDATE_COLUMNS = (
    "update", "phase", "episodes", "steps", "mean_reward", "mean_kl",
    "surrogate_improvement", "value_loss",
)
SUMMARY_COLUMNS = (
    "strategy", "beta_coll", "seed", "episodes", "total_steps", "steps_per_episode",
    "mean_reward_last", "total_collisions", "ep_to_threshold", "wall_time_s",
    "time_per_step_ms",
)


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, float):
        return repr(value)
    return str(value)


def cell_name(strategy: str, beta: float, seed: int) -> str:
    return f"{strategy.lower()}_beta{beta:g}_seed{seed}"


def moving_average(values, window: int) -> np.ndarray:
    """Trailing mean over up to ``window`` points (expanding at the head)."""
    values = np.asarray(values, dtype=float)
    sums = np.cumsum(values)
    out = np.empty_like(sums)
    out[:window] = sums[:window] / np.arange(1, min(window, len(values)) + 1)
    if len(values) > window:
        out[window:] = (sums[window:] - sums[:-window]) / window
    return out


def episodes_to_threshold(rewards, window: int, threshold: float):
    """1-based episode count at which the moving average first reaches the
    threshold, or None."""
    ma = moving_average(rewards, window)
    hits = np.nonzero(ma >= threshold)[0]
    return int(hits[0]) + 1 if hits.size else None


def run_cell(config: ExperimentConfig, strategy: str, beta: float, seed: int) -> dict:
    """Train one grid cell, writing its artifacts; returns the summary row."""
    out = Path(config.out_dir) / cell_name(strategy, beta, seed)
    out.mkdir(parents=True, exist_ok=True)
    env_cfg = replace(config.env, beta_coll=beta, seed=seed)
    envs = safe_rl.make_env_pool(env_cfg, config.robot, config.parallel, seed)
    layout = envs[0].layout
    cset = make_constraint_set(env_cfg, layout)
    params = policy_mod.init_params(
        layout.dim,
        act_dim=2,
        hidden=config.policy.hidden,
        log_std_init=config.policy.log_std_init,
        rng=np.random.default_rng(np.random.SeedSequence((seed, 9000))),
    )

    start = time.perf_counter()
    with open(out / "episodes.csv", "w", newline="") as ep_fh, \
            open(out / "updates.csv", "w", newline="") as up_fh:
        ep_writer = csv.writer(ep_fh)
        ep_writer.writerow(EPISODE_COLUMNS)
        up_writer = csv.writer(up_fh)
        up_writer.writerow(UPDATE_COLUMNS)
        rewards = []
        collisions = []
        total_steps = 0
        params_box = [params]

        def on_episode(row: safe_rl.EpisodeRow):
            nonlocal total_steps
            rewards.append(row.reward)
            collisions.append(row.collision)
            total_steps += row.steps
            ep_writer.writerow([
                strategy, seed, _fmt(float(beta)), row.episode, _fmt(row.reward),
                row.steps, _fmt(row.collision), row.cum_collisions,
                _fmt(row.mean_violation),
            ])
            ep_fh.flush()

        def on_update(row: safe_rl.UpdateRow):
            up_writer.writerow([
                row.update, row.phase, row.episodes, row.steps, _fmt(row.mean_reward),
                _fmt(row.mean_kl), _fmt(row.surrogate_improvement), _fmt(row.value_loss),
            ])
            up_fh.flush()
            if config.checkpoint_every and (row.update + 1) % config.checkpoint_every == 0:
                policy_mod.save_params(params_box[0], out / f"checkpoint_upd{row.update}.txt")

        def updater(p, batch, cfg):
            new_p, stats = trpo.update(p, batch, cfg)
            params_box[0] = new_p
            return new_p, stats

        final_params, _, _ = safe_rl.run_strategy(
            strategy, envs, params, cset, config.trpo, config.episodes,
            batch_steps=config.batch_steps, sample_seed=seed,
            on_episode=on_episode, on_update=on_update, updater=updater,
        )
    wall = time.perf_counter() - start
    policy_mod.save_params(final_params, out / "checkpoint.txt")

    window = config.summary_window
    ep_to = episodes_to_threshold(rewards, window, config.reward_threshold)
    return {
        "strategy": strategy,
        "beta_coll": _fmt(float(beta)),
        "seed": seed,
        "episodes": len(rewards),
        "total_steps": total_steps,
        "steps_per_episode": _fmt(total_steps / max(len(rewards), 1)),
        "mean_reward_last": _fmt(float(np.mean(rewards[-window:]))),
        "total_collisions": int(np.sum(collisions)),
        "ep_to_threshold": ep_to if ep_to is not None else "N/A",
        "wall_time_s": _fmt(wall),
        "time_per_step_ms": _fmt(1000.0 * wall / max(total_steps, 1)),
    }


def _cell_job(args):
    return run_cell(*args)


def worker_cap() -> int:
    raw = os.environ.get("SAFELAYER_THREADS", "")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def run(config: ExperimentConfig) -> Path:
    """Train every grid cell and write the summary table; returns the run dir."""
    validate(config)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(to_ini(config))
    cells = [
        (config, strategy, beta, seed)
        for strategy in config.strategies
        for beta in config.beta_colls
        for seed in config.seeds
    ]
    jobs = min(len(cells), worker_cap())
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_cell_job, cells))
    else:
        rows = [run_cell(*cell) for cell in cells]
    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    return out


def _read_episode_csv(path: Path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
    if not rows:
        raise MissingData(f"{path} has no episode rows")
    return rows


def report(run_dir) -> Path:
    """Emit plot-ready series and a recomputed summary from raw episode CSVs."""
    run_dir = Path(run_dir)
    cell_files = sorted(run_dir.glob("*/episodes.csv"))
    if not cell_files:
        raise MissingData(f"no episode CSVs under {run_dir}")
    config_path = run_dir / "config.ini"
    if config_path.exists():
        cfg = load(config_path)
        smoothing, window, threshold = cfg.smoothing_window, cfg.summary_window, cfg.reward_threshold
    else:
        defaults = default_config()
        smoothing, window, threshold = (
            defaults.smoothing_window, defaults.summary_window, defaults.reward_threshold
        )
    report_dir = run_dir / "report"
    report_dir.mkdir(exist_ok=True)
    summary_rows = []
    for path in cell_files:
        cell = path.parent.name
        rows = _read_episode_csv(path)
        rewards = np.array([float(r["reward"]) for r in rows])
        cum_coll = np.array([int(r["cum_collisions"]) for r in rows])
        ma = moving_average(rewards, smoothing)
        with open(report_dir / f"{cell}_reward_ma.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["episode", "reward", "reward_ma"])
            for i, (r, m) in enumerate(zip(rewards, ma)):
                writer.writerow([i, _fmt(float(r)), _fmt(float(m))])
        with open(report_dir / f"{cell}_collisions.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["episode", "cum_collisions"])
            for i, c in enumerate(cum_coll):
                writer.writerow([i, int(c)])
        ep_to = episodes_to_threshold(rewards, window, threshold)
        summary_rows.append({
            "cell": cell,
            "episodes": len(rewards),
            "mean_reward_last": _fmt(float(np.mean(rewards[-window:]))),
            "total_collisions": int(cum_coll[-1]),
            "ep_to_threshold": ep_to if ep_to is not None else "N/A",
        })
    with open(report_dir / "summary.csv", "w", newline="") as fh:
        writer = csv.DictWriter(
            fh,
            fieldnames=("cell", "episodes", "mean_reward_last", "total_collisions",
                        "ep_to_threshold"),
        )
        writer.writeheader()
        writer.writerows(summary_rows)
    return report_dir


def _build_config(args) -> ExperimentConfig:
    cfg = load(args.config) if args.config else default_config()
    overrides = {}
    if args.seed is not None:
        overrides["seeds"] = (args.seed,)
    if args.strategy is not None:
        overrides["strategies"] = (args.strategy.upper(),)
    if args.beta_coll is not None:
        overrides["beta_colls"] = (args.beta_coll,)
    if args.episodes is not None:
        overrides["episodes"] = args.episodes
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.parallel is not None:
        overrides["parallel"] = args.parallel
    cfg = replace(cfg, **overrides) if overrides else cfg
    validate(cfg)
    return cfg


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="safelayer")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="run the experiment grid")
    train.add_argument("--config", type=Path, default=None)
    train.add_argument("--seed", type=int, default=None)
    train.add_argument("--strategy", choices=["up", "cp", "cc", "cpc"], default=None)
    train.add_argument("--beta-coll", type=float, default=None)
    train.add_argument("--episodes", type=int, default=None)
    train.add_argument("--out", type=str, default=None)
    train.add_argument("--parallel", type=int, default=None)

    rep = sub.add_parser("report", help="summarize a finished run directory")
    rep.add_argument("run_dir", type=Path)

    sub.add_parser("print-config", help="print the default config file")

    sqp = sub.add_parser("solve-qp", help="solve one dumped QP record")
    sqp.add_argument("input", type=Path)
    sqp.add_argument("--k-max", type=int, default=qp.DEFAULT_K_MAX)
    sqp.add_argument("--out", type=Path, default=None)

    args = parser.parse_args(argv)
    try:
        if args.command == "train":
            out = run(_build_config(args))
            print(f"run complete: {out}")
        elif args.command == "report":
            out = report(args.run_dir)
            print(f"report written: {out}")
        elif args.command == "print-config":
            sys.stdout.write(to_ini(default_config()))
        elif args.command == "solve-qp":
            problem = qp.parse_problem(args.input.read_text())
            solution = qp.solve(problem, k_max=args.k_max)
            record = qp.format_problem(problem) + qp.format_solution(solution)
            if args.out:
                args.out.write_text(record)
            else:
                sys.stdout.write(record)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except MissingData as exc:
        print(f"missing data: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
