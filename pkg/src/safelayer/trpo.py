"""KL-constrained policy updates: generalized advantage estimation, a
conjugate-gradient natural step on the surrogate objective with backtracking
line search, and value-head regression.

The Fisher-vector products use the Gauss-Newton form of the KL Hessian for a
diagonal Gaussian policy: J' diag(1/sigma^2) J on the mean-network parameters
and the constant 2 per log-stddev entry, both exact at the old parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import policy as policy_mod
from .policy import PolicyParams, _mlp_backward, _mlp_forward, _mlp_rop, _unflatten_like


class NonFiniteGradient(Exception):
    pass


@dataclass(frozen=True)
class TrpoConfig:
    gamma: float = 0.99
    lam: float = 0.97
    delta_kl: float = 0.01
    cg_iters: int = 10
    cg_damping: float = 0.1
    backtrack_coef: float = 0.8
    backtrack_steps: int = 10
    vf_epochs: int = 5
    vf_step: float = 1e-3
    vf_minibatch: int = 256
    advantage_norm: bool = True


@dataclass
class Batch:
    """Flattened rollout data with episode boundaries.

    ``episode_ends`` holds exclusive end indices; per episode, ``terminated``
    distinguishes environment termination (no bootstrap) from truncation,
    where ``final_values`` supplies the value of the state after the last
    step.
    """

    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    episode_ends: np.ndarray
    terminated: np.ndarray
    final_values: np.ndarray
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    def __post_init__(self):
        n = self.rewards.shape[0]
        if self.observations.shape[0] != n or self.actions.shape[0] != n or self.values.shape[0] != n:
            raise ValueError("batch arrays disagree on step count")
        if len(self.episode_ends) == 0 or self.episode_ends[-1] != n:
            raise ValueError("episode_ends must cover the batch")

    def __len__(self) -> int:
        return self.rewards.shape[0]


def compute_advantages(batch: Batch, gamma: float, lam: float):
    """Generalized advantage estimates and return targets, written back into
    the batch. Truncated episodes bootstrap with the recorded final value."""
    adv = np.zeros(len(batch))
    start = 0
    for e, end in enumerate(batch.episode_ends):
        next_value = 0.0 if batch.terminated[e] else float(batch.final_values[e])
        gae = 0.0
        for t in range(end - 1, start - 1, -1):
            delta = batch.rewards[t] + gamma * next_value - batch.values[t]
            gae = delta + gamma * lam * gae
            adv[t] = gae
            next_value = batch.values[t]
        start = end
    batch.advantages = adv
    batch.returns = adv + batch.values
    return adv, batch.returns


def surrogate_loss(params: PolicyParams, params_old: PolicyParams, batch: Batch) -> float:
    """Importance-ratio-weighted mean advantage (the quantity the update
    maximizes)."""
    if batch.advantages is None:
        raise ValueError("compute_advantages first")
    lp_new = policy_mod.log_prob_batch(params, batch.observations, batch.actions)
    lp_old = policy_mod.log_prob_batch(params_old, batch.observations, batch.actions)
    return float(np.mean(np.exp(lp_new - lp_old) * batch.advantages))


def _surrogate_gradient(params: PolicyParams, batch: Batch) -> np.ndarray:
    """Gradient of the surrogate at the sampling parameters (unit ratios)."""
    obs, actions, adv = batch.observations, batch.actions, batch.advantages
    n = len(batch)
    means, acts = _mlp_forward(params.mean_layers, obs)
    inv_var = np.exp(-2.0 * params.log_std)
    delta = actions - means
    d_mean = (adv[:, None] / n) * delta * inv_var
    grads = _mlp_backward(params.mean_layers, acts, d_mean)
    d_log_std = ((adv[:, None] / n) * (delta**2 * inv_var - 1.0)).sum(axis=0)
    return np.concatenate([np.concatenate([g.ravel() for pair in grads for g in pair]), d_log_std])


def _fisher_vector_product(params: PolicyParams, obs: np.ndarray, vec: np.ndarray,
                           damping: float) -> np.ndarray:
    n = obs.shape[0]
    v_layers, v_log_std = _unflatten_like(params.mean_layers, vec, params.act_dim)
    _, acts = _mlp_forward(params.mean_layers, obs)
    jv = _mlp_rop(params.mean_layers, acts, v_layers)
    inv_var = np.exp(-2.0 * params.log_std)
    grads = _mlp_backward(params.mean_layers, acts, jv * inv_var / n)
    flat = np.concatenate(
        [np.concatenate([g.ravel() for pair in grads for g in pair]), 2.0 * v_log_std]
    )
    return flat + damping * vec


def kl_gradient(params_old: PolicyParams, params: PolicyParams, obs) -> np.ndarray:
    """Gradient of mean KL(old || new) w.r.t. the new policy parameters."""
    obs = np.atleast_2d(obs)
    n = obs.shape[0]
    mean_old, _ = _mlp_forward(params_old.mean_layers, obs)
    mean_new, acts = _mlp_forward(params.mean_layers, obs)
    var_old = np.exp(2.0 * params_old.log_std)
    var_new = np.exp(2.0 * params.log_std)
    delta = mean_new - mean_old
    grads = _mlp_backward(params.mean_layers, acts, delta / var_new / n)
    d_log_std = (1.0 - (var_old + delta**2) / var_new).mean(axis=0)
    return np.concatenate(
        [np.concatenate([g.ravel() for pair in grads for g in pair]), d_log_std]
    )


def conjugate_gradient(mat_vec, b: np.ndarray, iters: int, residual_tol: float = 1e-10) -> np.ndarray:
    x = np.zeros_like(b)
    r = b.copy()
    p = b.copy()
    r_dot = float(r @ r)
    for _ in range(iters):
        z = mat_vec(p)
        alpha = r_dot / (float(p @ z) + 1e-12)
        x += alpha * p
        r -= alpha * z
        new_r_dot = float(r @ r)
        if new_r_dot < residual_tol:
            break
        p = r + (new_r_dot / r_dot) * p
        r_dot = new_r_dot
    return x


@dataclass
class UpdateStats:
    accepted: bool
    mean_kl: float
    surrogate_improvement: float
    value_loss: float
    backtracks: int


def _fit_value(params: PolicyParams, obs: np.ndarray, targets: np.ndarray,
               cfg: TrpoConfig) -> tuple[PolicyParams, float]:
    """A few epochs of Adam on the squared return error, in fixed minibatch
    order so the update stays rng-free."""
    vec = policy_mod.value_flat(params)
    m = np.zeros_like(vec)
    v = np.zeros_like(vec)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    t = 0
    n = obs.shape[0]
    work = params
    for _ in range(cfg.vf_epochs):
        for start in range(0, n, cfg.vf_minibatch):
            sl = slice(start, min(start + cfg.vf_minibatch, n))
            pred, acts = _mlp_forward(work.value_layers, obs[sl])
            err = pred[:, 0] - targets[sl]
            grads = _mlp_backward(work.value_layers, acts, (2.0 * err / err.shape[0])[:, None])
            g = np.concatenate([x.ravel() for pair in grads for x in pair])
            t += 1
            m = beta1 * m + (1 - beta1) * g
            v = beta2 * v + (1 - beta2) * g * g
            m_hat = m / (1 - beta1**t)
            v_hat = v / (1 - beta2**t)
            vec = vec - cfg.vf_step * m_hat / (np.sqrt(v_hat) + eps)
            work = policy_mod.with_value_flat(work, vec)
    pred, _ = _mlp_forward(work.value_layers, obs)
    loss = float(np.mean((pred[:, 0] - targets) ** 2))
    return work, loss


def update(params: PolicyParams, batch: Batch, cfg: TrpoConfig) -> tuple[PolicyParams, UpdateStats]:
    """One trust-region policy update plus a value-head fit.

    Returns the new parameters; the policy part is unchanged whenever the
    line search cannot find a point that improves the surrogate within the KL
    bound.
    """
    if batch.advantages is None:
        compute_advantages(batch, cfg.gamma, cfg.lam)
    adv = batch.advantages
    if cfg.advantage_norm:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    work = replace(batch, advantages=adv, returns=batch.returns)

    g = _surrogate_gradient(params, work)
    if not np.isfinite(g).all():
        raise NonFiniteGradient("surrogate gradient is not finite")

    new_params = params
    stats = UpdateStats(False, 0.0, 0.0, 0.0, 0)
    if float(np.linalg.norm(g)) > 1e-12:
        obs = batch.observations

        def fvp(vec):
            return _fisher_vector_product(params, obs, vec, cfg.cg_damping)

        direction = conjugate_gradient(fvp, g, cfg.cg_iters)
        shs = float(direction @ fvp(direction))
        if shs > 1e-16:
            full_step = np.sqrt(2.0 * cfg.delta_kl / shs) * direction
            base = policy_mod.policy_flat(params)
            surrogate_old = surrogate_loss(params, params, work)
            for j in range(cfg.backtrack_steps):
                candidate = policy_mod.with_policy_flat(
                    params, base + cfg.backtrack_coef**j * full_step
                )
                kl_val = policy_mod.kl(params, candidate, obs)
                sur = surrogate_loss(candidate, params, work)
                if (
                    np.isfinite(kl_val)
                    and np.isfinite(sur)
                    and kl_val <= cfg.delta_kl
                    and sur > surrogate_old
                ):
                    new_params = candidate
                    stats = UpdateStats(True, kl_val, sur - surrogate_old, 0.0, j)
                    break

    new_params, value_loss = _fit_value(new_params, batch.observations, batch.returns, cfg)
    stats.value_loss = value_loss
    return new_params, stats
