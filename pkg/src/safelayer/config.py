"""Experiment configuration: one INI-style file (key/value under sections)
declares the environment, robot, constraint thresholds, policy and update
hyperparameters, and the experiment grid. Every field has a default so
``print-config`` can emit a complete, editable file.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace

from .reacher import EnvConfig
from .robot import PlanarRobot
from .safe_rl import STRATEGIES
from .trpo import TrpoConfig


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class PolicyConfig:
    hidden: int = 32
    log_std_init: float = -1.0


@dataclass(frozen=True)
class ExperimentConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    robot: PlanarRobot = field(default_factory=PlanarRobot)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    trpo: TrpoConfig = field(default_factory=TrpoConfig)
    strategies: tuple[str, ...] = ("CP",)
    beta_colls: tuple[float, ...] = (10.0,)
    seeds: tuple[int, ...] = (0,)
    episodes: int = 500
    parallel: int = 4
    batch_steps: int = 2048
    out_dir: str = "runs/default"
    reward_threshold: float = 250.0
    summary_window: int = 200
    smoothing_window: int = 40
    checkpoint_every: int = 0


def default_config() -> ExperimentConfig:
    return ExperimentConfig()


def validate(cfg: ExperimentConfig) -> None:
    if not cfg.seeds:
        raise ConfigError("[experiment] seeds: at least one seed is required")
    if cfg.episodes < 1:
        raise ConfigError("[experiment] episodes: budget must be at least 1")
    if cfg.parallel < 1:
        raise ConfigError("[experiment] parallel: environment count must be at least 1")
    if cfg.batch_steps < 1:
        raise ConfigError("[experiment] batch_steps: must be at least 1")
    if not cfg.strategies:
        raise ConfigError("[experiment] strategies: at least one strategy is required")
    for tag in cfg.strategies:
        if tag not in STRATEGIES:
            raise ConfigError(
                f"[experiment] strategies: unknown strategy {tag!r} "
                f"(expected one of {', '.join(STRATEGIES)})"
            )
    for beta in cfg.beta_colls:
        if beta <= 0:
            raise ConfigError("[experiment] beta_coll: values must be positive")
    if cfg.summary_window < 1 or cfg.smoothing_window < 1:
        raise ConfigError("[experiment] summary/smoothing windows must be at least 1")
    if cfg.checkpoint_every < 0:
        raise ConfigError("[experiment] checkpoint_every: must be nonnegative")


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _fmt_pairs(pairs) -> str:
    return ",".join(f"{a}:{b}" for a, b in pairs)


def to_ini(cfg: ExperimentConfig) -> str:
    buf = io.StringIO()
    buf.write("[experiment]\n")
    buf.write(f"strategies = {','.join(s.lower() for s in cfg.strategies)}\n")
    buf.write(f"beta_coll = {','.join(_fmt(b) for b in cfg.beta_colls)}\n")
    buf.write(f"seeds = {','.join(str(s) for s in cfg.seeds)}\n")
    for key in ("episodes", "parallel", "batch_steps"):
        buf.write(f"{key} = {getattr(cfg, key)}\n")
    buf.write(f"out = {cfg.out_dir}\n")
    for key in ("reward_threshold", "summary_window", "smoothing_window", "checkpoint_every"):
        buf.write(f"{key} = {_fmt(getattr(cfg, key))}\n")
    buf.write("\n[env]\n")
    env = cfg.env
    for key in (
        "dt", "max_steps", "sample_range", "proximity_threshold", "proximity_bonus",
        "obstacle_radius", "qd_max", "tau_max", "xi", "d_security", "d_influence",
        "elbow_min", "elbow_max",
    ):
        buf.write(f"{key} = {_fmt(getattr(env, key))}\n")
    buf.write(f"pairs = {_fmt_pairs(env.pairs)}\n")
    buf.write("\n[robot]\n")
    for key in ("l1", "l2", "m1", "m2", "link_radius", "base_radius"):
        buf.write(f"{key} = {_fmt(getattr(cfg.robot, key))}\n")
    buf.write("\n[policy]\n")
    buf.write(f"hidden = {cfg.policy.hidden}\n")
    buf.write(f"log_std_init = {_fmt(cfg.policy.log_std_init)}\n")
    buf.write("\n[trpo]\n")
    for f in fields(TrpoConfig):
        buf.write(f"{f.name} = {_fmt(getattr(cfg.trpo, f.name))}\n")
    return buf.getvalue()


def _convert(section: str, key: str, raw: str, kind):
    try:
        if kind is bool:
            lowered = raw.strip().lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: {exc}") from None


def _parse_pairs(section: str, raw: str):
    pairs = []
    for item in raw.split(","):
        item = item.strip()
        if not item:
            continue
        parts = item.split(":")
        if len(parts) != 2:
            raise ConfigError(f"[{section}] pairs: expected 'body:body', got {item!r}")
        pairs.append((parts[0].strip(), parts[1].strip()))
    return tuple(pairs)


def _parse_list(section: str, key: str, raw: str, kind):
    return tuple(
        _convert(section, key, item.strip(), kind) for item in raw.split(",") if item.strip()
    )


_ENV_FIELDS = {
    "dt": float, "max_steps": int, "sample_range": float, "proximity_threshold": float,
    "proximity_bonus": float, "obstacle_radius": float, "qd_max": float, "tau_max": float,
    "xi": float, "d_security": float, "d_influence": float, "elbow_min": float,
    "elbow_max": float,
}
_ROBOT_FIELDS = {"l1": float, "l2": float, "m1": float, "m2": float,
                 "link_radius": float, "base_radius": float}
_TRPO_KINDS = {
    "gamma": float, "lam": float, "delta_kl": float, "cg_iters": int, "cg_damping": float,
    "backtrack_coef": float, "backtrack_steps": int, "vf_epochs": int, "vf_step": float,
    "vf_minibatch": int, "advantage_norm": bool,
}


def from_ini(text: str) -> ExperimentConfig:
    """Parse a config file; unknown sections or keys are errors."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config file: {exc}") from None
    known_sections = {"experiment", "env", "robot", "policy", "trpo"}
    for section in parser.sections():
        if section not in known_sections:
            raise ConfigError(f"unknown section [{section}]")
    cfg = default_config()

    env_kwargs = {}
    if parser.has_section("env"):
        for key, raw in parser.items("env"):
            if key == "pairs":
                env_kwargs["pairs"] = _parse_pairs("env", raw)
            elif key in _ENV_FIELDS:
                env_kwargs[key] = _convert("env", key, raw, _ENV_FIELDS[key])
            else:
                raise ConfigError(f"[env] unknown key {key!r}")
    robot_kwargs = {}
    if parser.has_section("robot"):
        for key, raw in parser.items("robot"):
            if key not in _ROBOT_FIELDS:
                raise ConfigError(f"[robot] unknown key {key!r}")
            robot_kwargs[key] = _convert("robot", key, raw, _ROBOT_FIELDS[key])
    policy_kwargs = {}
    if parser.has_section("policy"):
        for key, raw in parser.items("policy"):
            if key == "hidden":
                policy_kwargs["hidden"] = _convert("policy", key, raw, int)
            elif key == "log_std_init":
                policy_kwargs["log_std_init"] = _convert("policy", key, raw, float)
            else:
                raise ConfigError(f"[policy] unknown key {key!r}")
    trpo_kwargs = {}
    if parser.has_section("trpo"):
        for key, raw in parser.items("trpo"):
            if key not in _TRPO_KINDS:
                raise ConfigError(f"[trpo] unknown key {key!r}")
            trpo_kwargs[key] = _convert("trpo", key, raw, _TRPO_KINDS[key])

    exp_kwargs = {}
    if parser.has_section("experiment"):
        for key, raw in parser.items("experiment"):
            if key == "strategies":
                exp_kwargs["strategies"] = tuple(
                    item.strip().upper() for item in raw.split(",") if item.strip()
                )
            elif key == "beta_coll":
                exp_kwargs["beta_colls"] = _parse_list("experiment", key, raw, float)
            elif key == "seeds":
                exp_kwargs["seeds"] = _parse_list("experiment", key, raw, int)
            elif key in ("episodes", "parallel", "batch_steps", "summary_window",
                         "smoothing_window", "checkpoint_every"):
                exp_kwargs[key] = _convert("experiment", key, raw, int)
            elif key == "reward_threshold":
                exp_kwargs[key] = _convert("experiment", key, raw, float)
            elif key == "out":
                exp_kwargs["out_dir"] = raw.strip()
            else:
                raise ConfigError(f"[experiment] unknown key {key!r}")

    try:
        env = replace(cfg.env, **env_kwargs) if env_kwargs else cfg.env
    except ValueError as exc:
        raise ConfigError(f"[env] {exc}") from None
    try:
        robot = replace(cfg.robot, **robot_kwargs) if robot_kwargs else cfg.robot
    except ValueError as exc:
        raise ConfigError(f"[robot] {exc}") from None
    policy = replace(cfg.policy, **policy_kwargs) if policy_kwargs else cfg.policy
    trpo_cfg = replace(cfg.trpo, **trpo_kwargs) if trpo_kwargs else cfg.trpo
    out = replace(cfg, env=env, robot=robot, policy=policy, trpo=trpo_cfg, **exp_kwargs)
    validate(out)
    return out


def load(path) -> ExperimentConfig:
    with open(path) as fh:
        return from_ini(fh.read())
