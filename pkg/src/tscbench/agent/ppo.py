"""Clipped-surrogate PPO: advantage estimation, loss/gradients and the training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from ..errors import ConfigError, TrainingError
from .nets import (
    Architecture,
    NetworkWeights,
    _n_layers,
    _prep,
    init_weights,
    log_softmax,
    mlp_backward,
    mlp_forward,
    softmax,
)

log = logging.getLogger(__name__)

MAX_LOG_RATIO = 20.0


@dataclass
class PpoConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.9
    clip_eps: float = 0.2
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    learning_rate: float = 3e-4
    rollout_slots: int = 1024
    epochs_per_rollout: int = 4
    minibatch: int = 64
    total_slots: int = 100_000
    seed: int = 0
    # rewards are multiplied by this before advantage estimation
    reward_scale: float = 0.1
    max_grad_norm: float = 0.5
    normalize_advantages: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError("gamma", f"must lie in (0, 1), got {self.gamma}")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ConfigError("gae_lambda", f"must lie in [0, 1], got {self.gae_lambda}")
        if not self.clip_eps > 0:
            raise ConfigError("clip_eps", "must be positive")
        if self.total_slots < 0:
            raise ConfigError("total_slots", "must be non-negative")
        for name in ("rollout_slots", "epochs_per_rollout", "minibatch"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate", "must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> PpoConfig:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown PpoConfig field")
        return cls(**d)


@dataclass
class RolloutBuffer:
    obs: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    log_probs: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    values: list = field(default_factory=list)
    # v(s_{t+1}); at an episode boundary this is the bootstrap value of the final state
    next_values: list = field(default_factory=list)
    episode_ends: list = field(default_factory=list)
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.rewards)

    def add(self, obs, action, log_prob, reward, value, next_value, episode_end):
        self.obs.append(obs)
        self.actions.append(action)
        self.log_probs.append(log_prob)
        self.rewards.append(reward)
        self.values.append(value)
        self.next_values.append(next_value)
        self.episode_ends.append(episode_end)


def td_advantage(r_next: float, v_s: float, v_s_next: float, gamma: float) -> float:
    return r_next + gamma * v_s_next - v_s


def compute_gae(buffer: RolloutBuffer, gamma: float, gae_lambda: float) -> tuple[np.ndarray, np.ndarray]:
    """Exponentially weighted TD errors, reset at episode boundaries.

    With ``gae_lambda == 0`` each advantage is the one-step TD error.
    """
    n = len(buffer)
    if n == 0:
        raise ValueError("cannot compute advantages of an empty buffer")
    rewards = np.asarray(buffer.rewards, dtype=float)
    values = np.asarray(buffer.values, dtype=float)
    next_values = np.asarray(buffer.next_values, dtype=float)
    ends = np.asarray(buffer.episode_ends, dtype=bool)
    adv = np.zeros(n)
    running = 0.0
    for t in range(n - 1, -1, -1):
        if ends[t]:
            running = 0.0
        delta = td_advantage(rewards[t], values[t], next_values[t], gamma)
        running = delta + gamma * gae_lambda * running
        adv[t] = running
    buffer.advantages = adv
    buffer.returns = adv + values
    return adv, adv + values


@dataclass
class Batch:
    obs: np.ndarray
    actions: np.ndarray
    old_log_probs: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray


@dataclass
class LossInfo:
    loss: float
    policy_term: float
    value_loss: float
    entropy: float
    clip_fraction: float
    approx_kl: float


def clipped_surrogate(ratio: np.ndarray, adv: np.ndarray, eps: float) -> np.ndarray:
    return np.minimum(ratio * adv, np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv)


def ppo_objective(batch: Batch, weights: NetworkWeights, cfg: PpoConfig) -> tuple[float, dict, LossInfo]:
    """F = -L_clip + value_coef * L_v - entropy_coef * H and its gradient w.r.t. every parameter."""
    arch = weights.arch
    nl = _n_layers(arch)
    params = weights.params
    x = _prep(arch, batch.obs)
    b = x.shape[0]
    if b == 0:
        raise ValueError("empty batch")
    idx = np.arange(b)
    actions = np.asarray(batch.actions, dtype=int)
    adv = np.asarray(batch.advantages, dtype=float)

    logits, pi_acts = mlp_forward(params, "pi", nl, x)
    logp = log_softmax(logits)
    p = np.exp(logp)
    log_ratio = logp[idx, actions] - batch.old_log_probs
    if np.any(np.abs(log_ratio) > MAX_LOG_RATIO):
        log.warning("PPO log-ratio magnitude exceeded %s; clamping", MAX_LOG_RATIO)
        log_ratio = np.clip(log_ratio, -MAX_LOG_RATIO, MAX_LOG_RATIO)
    ratio = np.exp(log_ratio)
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * adv
    policy_term = float(np.mean(np.minimum(unclipped, clipped)))
    entropy_i = -(p * logp).sum(axis=1)
    entropy = float(entropy_i.mean())

    values, v_acts = mlp_forward(params, "v", nl, x)
    values = values[:, 0]
    resid = values - batch.returns
    value_loss = float(np.mean(resid ** 2))

    loss = -policy_term + cfg.value_coef * value_loss - cfg.entropy_coef * entropy

    # d(-L_clip)/d ratio: only samples where the unclipped branch is the minimum carry gradient
    active = unclipped <= clipped
    d_ratio = -np.where(active, adv, 0.0) / b
    onehot = np.zeros_like(p)
    onehot[idx, actions] = 1.0
    d_logits = (d_ratio * ratio)[:, None] * (onehot - p)
    # entropy gradient: dH_i/dz_j = -p_j (log p_j + H_i)
    d_logits += cfg.entropy_coef / b * p * (logp + entropy_i[:, None])
    grads = mlp_backward(params, "pi", nl, pi_acts, d_logits)

    d_values = (cfg.value_coef * 2.0 / b * resid)[:, None]
    grads.update(mlp_backward(params, "v", nl, v_acts, d_values))

    info = LossInfo(
        loss=float(loss),
        policy_term=policy_term,
        value_loss=value_loss,
        entropy=entropy,
        clip_fraction=float(np.mean(np.abs(ratio - 1.0) > cfg.clip_eps)),
        approx_kl=float(np.mean(-log_ratio)),
    )
    return float(loss), grads, info


def adam_step(weights: NetworkWeights, grads: dict, lr: float, max_grad_norm: float | None = None,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    if max_grad_norm:
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if norm > max_grad_norm:
            scale = max_grad_norm / norm
            grads = {k: g * scale for k, g in grads.items()}
    weights.step += 1
    t = weights.step
    for k, g in grads.items():
        m = weights.adam_m.setdefault(k, np.zeros_like(g))
        v = weights.adam_v.setdefault(k, np.zeros_like(g))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        weights.params[k] -= lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class RolloutStats:
    slots: int
    mean_reward: float
    episode_returns: list[float]
    loss: float


def _sample(rng: np.random.Generator, probs: np.ndarray) -> int:
    u = rng.random()
    c = np.cumsum(probs)
    return int(min(np.searchsorted(c, u * c[-1], side="right"), len(probs) - 1))


def train(
    env_factory: Callable,
    cfg: PpoConfig,
    arch: Architecture | None = None,
    weights: NetworkWeights | None = None,
    callback: Callable[[int, RolloutStats], None] | None = None,
) -> tuple[NetworkWeights, list[float]]:
    """Train a PPO agent; returns the weights and the mean slot reward of every rollout.

    ``env_factory(seed)`` must return an object with ``reset() -> obs`` and
    ``step(action) -> (obs, reward, done)``.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    if weights is None:
        weights = init_weights(arch or Architecture(), rng)
    curve: list[float] = []
    if cfg.total_slots == 0:
        return weights, curve

    nl = _n_layers(weights.arch)
    episode = 0

    def new_episode():
        nonlocal episode
        env = env_factory(cfg.seed * 1_000_003 + episode)
        episode += 1
        return env, env.reset()

    env, obs = new_episode()
    ep_return = 0.0
    collected = 0
    n_rollout = 0
    while collected < cfg.total_slots:
        n_steps = min(cfg.rollout_slots, cfg.total_slots - collected)
        buf = RolloutBuffer()
        raw_rewards = []
        finished: list[float] = []
        for _ in range(n_steps):
            x = _prep(weights.arch, obs)
            logits, _ = mlp_forward(weights.params, "pi", nl, x)
            probs = softmax(logits)
            a = _sample(rng, probs)
            value = float(mlp_forward(weights.params, "v", nl, x)[0][0])
            next_obs, reward, done = env.step(a)
            next_value = float(mlp_forward(weights.params, "v", nl, _prep(weights.arch, next_obs))[0][0])
            buf.add(obs, a, float(np.log(probs[a])), reward * cfg.reward_scale, value, next_value, done)
            raw_rewards.append(reward)
            ep_return += reward
            if done:
                finished.append(ep_return)
                ep_return = 0.0
                env, obs = new_episode()
            else:
                obs = next_obs
        collected += n_steps
        # the last slot of a rollout is a boundary for the advantage recursion
        buf.episode_ends[-1] = True
        compute_gae(buf, cfg.gamma, cfg.gae_lambda)

        obs_arr = np.asarray(buf.obs)
        act_arr = np.asarray(buf.actions)
        lp_arr = np.asarray(buf.log_probs)
        adv_arr = buf.advantages.copy()
        ret_arr = buf.returns.copy()
        last_loss = float("nan")
        for _epoch in range(cfg.epochs_per_rollout):
            perm = rng.permutation(n_steps)
            for start in range(0, n_steps, cfg.minibatch):
                mb = perm[start:start + cfg.minibatch]
                a_mb = adv_arr[mb]
                if cfg.normalize_advantages and len(mb) > 1:
                    a_mb = (a_mb - a_mb.mean()) / (a_mb.std() + 1e-8)
                batch = Batch(obs_arr[mb], act_arr[mb], lp_arr[mb], a_mb, ret_arr[mb])
                loss, grads, info = ppo_objective(batch, weights, cfg)
                if not math.isfinite(loss):
                    raise TrainingError(
                        f"non-finite loss at rollout {n_rollout}",
                        diagnostics={"rollout": n_rollout, "loss_info": asdict(info),
                                     "collected_slots": collected},
                    )
                adam_step(weights, grads, cfg.learning_rate, cfg.max_grad_norm)
                last_loss = loss
        mean_r = float(np.mean(raw_rewards))
        curve.append(mean_r)
        if callback is not None:
            callback(n_rollout, RolloutStats(n_steps, mean_r, finished, last_loss))
        log.debug("rollout %d: mean reward %.4f loss %.4f", n_rollout, mean_r, last_loss)
        n_rollout += 1
    return weights, curve
