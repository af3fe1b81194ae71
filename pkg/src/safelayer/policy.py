"""Gaussian MLP policy with a separate value head.

Both heads are two-hidden-layer tanh networks of width 32. The action
distribution is a diagonal Gaussian whose log standard deviation is a free,
state-independent parameter. Gradient machinery (reverse- and forward-mode
passes through the mean network) lives here so the trust-region updater can
stay free of network internals.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .qp import ShapeMismatch

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
_LOG_2PI = float(np.log(2.0 * np.pi))

Layers = list[tuple[np.ndarray, np.ndarray]]


@dataclass
class PolicyParams:
    """Mean-network and value-network layers, plus the log-stddev vector.

    Layers are (W, b) pairs with W of shape (fan_in, fan_out); the two heads
    share no parameters.
    """

    mean_layers: Layers
    value_layers: Layers
    log_std: np.ndarray

    @property
    def obs_dim(self) -> int:
        return self.mean_layers[0][0].shape[0]

    @property
    def act_dim(self) -> int:
        return self.mean_layers[-1][0].shape[1]

    def copy(self) -> "PolicyParams":
        return PolicyParams(
            mean_layers=[(W.copy(), b.copy()) for W, b in self.mean_layers],
            value_layers=[(W.copy(), b.copy()) for W, b in self.value_layers],
            log_std=self.log_std.copy(),
        )


def _orthogonal(rng, n_in: int, n_out: int, gain: float) -> np.ndarray:
    a = rng.standard_normal((max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if n_in < n_out:
        q = q.T
    return gain * q


def init_params(obs_dim: int, act_dim: int = 2, hidden: int = 32,
                log_std_init: float = -1.0, rng=None) -> PolicyParams:
    """Orthogonal-initialized networks; the mean output layer gets a small
    gain so initial actions stay near zero."""
    rng = rng if rng is not None else np.random.default_rng(0)

    def make(sizes, out_gain):
        layers = []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            gain = out_gain if i == len(sizes) - 2 else 1.0
            layers.append((_orthogonal(rng, n_in, n_out, gain), np.zeros(n_out)))
        return layers

    return PolicyParams(
        mean_layers=make([obs_dim, hidden, hidden, act_dim], 0.01),
        value_layers=make([obs_dim, hidden, hidden, 1], 1.0),
        log_std=np.full(act_dim, float(np.clip(log_std_init, LOG_STD_MIN, LOG_STD_MAX))),
    )


def _mlp_forward(layers: Layers, X: np.ndarray):
    """Forward pass; returns output and per-layer activations (inputs first)."""
    acts = [X]
    h = X
    for W, b in layers[:-1]:
        h = np.tanh(h @ W + b)
        acts.append(h)
    W, b = layers[-1]
    return h @ W + b, acts


def _mlp_backward(layers: Layers, acts, d_out: np.ndarray):
    """Parameter gradients (summed over the batch) for cotangent ``d_out``."""
    grads = [None] * len(layers)
    d = d_out
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        grads[i] = (acts[i].T @ d, d.sum(axis=0))
        if i > 0:
            d = (d @ W.T) * (1.0 - acts[i] ** 2)
    return grads


def _mlp_rop(layers: Layers, acts, v_layers):
    """Directional derivative of the output along parameter direction v."""
    dh = np.zeros_like(acts[0])
    for i, ((W, _), (vW, vb)) in enumerate(zip(layers[:-1], v_layers[:-1])):
        dpre = dh @ W + acts[i] @ vW + vb
        dh = (1.0 - acts[i + 1] ** 2) * dpre
    W, _ = layers[-1]
    vW, vb = v_layers[-1]
    return dh @ W + acts[-1] @ vW + vb


def _check_obs(params: PolicyParams, obs: np.ndarray) -> np.ndarray:
    obs = np.asarray(obs, dtype=float)
    if obs.shape[-1] != params.obs_dim:
        raise ShapeMismatch(
            f"observation has {obs.shape[-1]} entries, policy expects {params.obs_dim}"
        )
    return obs


def forward(params: PolicyParams, obs):
    """Deterministic evaluation on one observation: (mean, std, value)."""
    obs = _check_obs(params, obs).ravel()
    mean, _ = _mlp_forward(params.mean_layers, obs[None, :])
    value, _ = _mlp_forward(params.value_layers, obs[None, :])
    std = np.exp(params.log_std)
    return mean[0], std, float(value[0, 0])


def forward_batch(params: PolicyParams, obs):
    obs = _check_obs(params, np.atleast_2d(obs))
    means, _ = _mlp_forward(params.mean_layers, obs)
    values, _ = _mlp_forward(params.value_layers, obs)
    return means, np.exp(params.log_std), values[:, 0]


def values_batch(params: PolicyParams, obs) -> np.ndarray:
    obs = _check_obs(params, np.atleast_2d(obs))
    values, _ = _mlp_forward(params.value_layers, obs)
    return values[:, 0]


def sample(params: PolicyParams, obs, rng):
    """Draw one action from the diagonal Gaussian; returns (action, log_prob)."""
    mean, std, _ = forward(params, obs)
    action = mean + std * rng.standard_normal(params.act_dim)
    return action, float(log_prob_batch(params, np.asarray(obs)[None, :], action[None, :])[0])


def log_prob_batch(params: PolicyParams, obs, actions) -> np.ndarray:
    obs = _check_obs(params, np.atleast_2d(obs))
    actions = np.atleast_2d(actions)
    means, _ = _mlp_forward(params.mean_layers, obs)
    log_std = params.log_std
    zs = (actions - means) / np.exp(log_std)
    return -0.5 * (zs**2).sum(axis=1) - log_std.sum() - 0.5 * params.act_dim * _LOG_2PI


def kl(params_old: PolicyParams, params_new: PolicyParams, obs) -> float:
    """Mean over observations of KL(old || new), closed form for diagonal
    Gaussians."""
    obs = _check_obs(params_old, np.atleast_2d(obs))
    mean_old, _ = _mlp_forward(params_old.mean_layers, obs)
    mean_new, _ = _mlp_forward(params_new.mean_layers, obs)
    var_old = np.exp(2.0 * params_old.log_std)
    var_new = np.exp(2.0 * params_new.log_std)
    per_dim = (
        params_new.log_std
        - params_old.log_std
        + (var_old + (mean_new - mean_old) ** 2) / (2.0 * var_new)
        - 0.5
    )
    return float(per_dim.sum(axis=1).mean())


# --- flat parameter views -------------------------------------------------

def _flatten(layers: Layers, extra=None) -> np.ndarray:
    parts = [arr.ravel() for W, b in layers for arr in (W, b)]
    if extra is not None:
        parts.append(extra.ravel())
    return np.concatenate(parts)


def _unflatten_like(layers: Layers, vec: np.ndarray, extra_dim: int = 0):
    out = []
    pos = 0
    for W, b in layers:
        out.append(
            (
                vec[pos : pos + W.size].reshape(W.shape),
                vec[pos + W.size : pos + W.size + b.size].copy(),
            )
        )
        pos += W.size + b.size
    extra = vec[pos : pos + extra_dim].copy() if extra_dim else None
    return out, extra


def policy_flat(params: PolicyParams) -> np.ndarray:
    """Flat vector of the parameters the trust-region step moves: mean
    network plus log_std."""
    return _flatten(params.mean_layers, params.log_std)


def with_policy_flat(params: PolicyParams, vec: np.ndarray) -> PolicyParams:
    layers, log_std = _unflatten_like(params.mean_layers, vec, params.act_dim)
    return PolicyParams(
        mean_layers=layers,
        value_layers=params.value_layers,
        log_std=np.clip(log_std, LOG_STD_MIN, LOG_STD_MAX),
    )


def value_flat(params: PolicyParams) -> np.ndarray:
    return _flatten(params.value_layers)


def with_value_flat(params: PolicyParams, vec: np.ndarray) -> PolicyParams:
    layers, _ = _unflatten_like(params.value_layers, vec)
    return PolicyParams(
        mean_layers=params.mean_layers, value_layers=layers, log_std=params.log_std
    )


# --- checkpointing --------------------------------------------------------

CHECKPOINT_HEADER = "safelayer-policy v1"


def save_params(params: PolicyParams, path) -> None:
    buf = io.StringIO()
    hidden = params.mean_layers[0][0].shape[1]
    buf.write(f"{CHECKPOINT_HEADER}\n")
    buf.write(f"obs_dim={params.obs_dim} act_dim={params.act_dim} hidden={hidden}\n")

    def dump(prefix, layers):
        for i, (W, b) in enumerate(layers):
            buf.write(f"{prefix}_W{i}=" + " ".join(repr(float(v)) for v in W.ravel()) + "\n")
            buf.write(f"{prefix}_b{i}=" + " ".join(repr(float(v)) for v in b.ravel()) + "\n")

    dump("mean", params.mean_layers)
    dump("value", params.value_layers)
    buf.write("log_std=" + " ".join(repr(float(v)) for v in params.log_std) + "\n")
    with open(path, "w") as fh:
        fh.write(buf.getvalue())


def load_params(path) -> PolicyParams:
    with open(path) as fh:
        lines = [line.rstrip("\n") for line in fh]
    if not lines or lines[0] != CHECKPOINT_HEADER:
        raise ValueError(f"not a {CHECKPOINT_HEADER!r} checkpoint")
    dims = dict(kv.split("=") for kv in lines[1].split())
    obs_dim, act_dim, hidden = (int(dims[k]) for k in ("obs_dim", "act_dim", "hidden"))
    fields = {}
    for line in lines[2:]:
        if not line:
            continue
        name, _, value = line.partition("=")
        fields[name] = np.array([float(v) for v in value.split()]) if value else np.zeros(0)

    def gather(prefix, sizes):
        layers = []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            W = fields[f"{prefix}_W{i}"].reshape(n_in, n_out)
            b = fields[f"{prefix}_b{i}"]
            if b.shape != (n_out,):
                raise ValueError(f"bad bias shape for {prefix}_b{i}")
            layers.append((W, b))
        return layers

    return PolicyParams(
        mean_layers=gather("mean", [obs_dim, hidden, hidden, act_dim]),
        value_layers=gather("value", [obs_dim, hidden, hidden, 1]),
        log_std=np.clip(fields["log_std"], LOG_STD_MIN, LOG_STD_MAX),
    )
