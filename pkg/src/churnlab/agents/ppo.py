"""Discrete-action PPO with a shared-trunk actor-critic MLP."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..baselines import BaselineConfig, l2_init_penalty, weight_clip
from ..churn import ChainState, ChurnConfig, chain_step, transform_outputs
from ..errors import ConfigurationError, DimensionError, NumericError
from ..nn import Network, backward, forward, log_softmax


@dataclass
class PPOConfig:
    lr: float = 1e-3
    gamma: float = 0.99
    gae_lambda: float = 0.95
    interval: int = 800
    minibatch: int = 32
    epochs: int = 5
    clip_eps: float = 0.2
    entropy_coef: float = 0.0
    value_coef: float = 0.5
    normalize_advantages: bool = True

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigurationError("gamma must lie in (0, 1]")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ConfigurationError("gae_lambda must lie in [0, 1]")
        if self.clip_eps <= 0:
            raise ConfigurationError("clip_eps must be positive")
        if self.interval < 1 or self.minibatch < 1 or self.epochs < 0:
            raise ConfigurationError("interval and minibatch must be >= 1, epochs >= 0")
        if self.minibatch > self.interval:
            raise ConfigurationError("minibatch cannot exceed the training interval")


@dataclass
class RolloutBuffer:
    observations: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    truncations: np.ndarray
    values: np.ndarray
    truncation_values: np.ndarray
    bootstrap_value: float = 0.0
    episode_returns: list = field(default_factory=list)

    def __len__(self):
        return len(self.actions)


def sample_action(logits: np.ndarray, rng: np.random.Generator) -> int:
    z = logits - logits.max()
    p = np.exp(z)
    cdf = np.cumsum(p)
    a = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return min(a, len(logits) - 1)


def _value(net: Network, value_net: Optional[Network], obs) -> float:
    if value_net is not None:
        return float(forward(value_net, obs).outputs[0, 0])
    return float(forward(net, obs).values[0])


def collect_rollout(net: Network, runner, interval: int, rng: np.random.Generator,
                    value_net: Optional[Network] = None) -> RolloutBuffer:
    """Run the current policy for exactly ``interval`` steps of ``runner``'s task.

    Values come from ``net``'s value head, or from ``value_net`` when the
    critic is a separate network. Returns of episodes finishing inside the
    rollout are kept on the buffer.
    """
    obs_dim = runner.task.env.obs_dim
    obs_buf = np.empty((interval, obs_dim))
    actions = np.empty(interval, dtype=np.int64)
    log_probs = np.empty(interval)
    rewards = np.empty(interval)
    dones = np.zeros(interval, dtype=bool)
    truncs = np.zeros(interval, dtype=bool)
    values = np.empty(interval)
    trunc_values = np.zeros(interval)
    episode_returns = []
    for t in range(interval):
        obs = runner.obs
        out = forward(net, obs)
        logits = out.outputs[0]
        a = sample_action(logits, rng)
        obs_buf[t] = obs
        actions[t] = a
        log_probs[t] = log_softmax(logits)[a]
        values[t] = out.values[0] if value_net is None else _value(net, value_net, obs)
        _, reward, terminated, truncated = runner.step(a)
        rewards[t] = reward
        dones[t] = terminated
        truncs[t] = truncated
        if truncated:
            trunc_values[t] = _value(net, value_net, runner.obs)
        if terminated or truncated:
            episode_returns.append(runner.episode_return)
            runner.start_episode()
    ended = dones[-1] or truncs[-1]
    bootstrap = 0.0 if ended else _value(net, value_net, runner.obs)
    return RolloutBuffer(obs_buf, actions, log_probs, rewards, dones, truncs, values,
                         trunc_values, bootstrap, episode_returns)


def compute_gae(rewards, values, dones, truncations, gamma: float, lam: float,
                bootstrap_value: float = 0.0, truncation_values=None):
    """Generalized advantage estimates and value targets.

    ``dones`` flags true terminations and ``truncations`` flags step-cap
    cut-offs; both end the recursion, but a truncated step still bootstraps
    from ``truncation_values[t]``, the value of the observation it reached.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    truncations = np.asarray(truncations, dtype=bool)
    n = len(rewards)
    if not (len(values) == len(dones) == len(truncations) == n):
        raise DimensionError("rollout arrays must have equal length")
    if truncation_values is None:
        truncation_values = np.zeros(n)
    truncation_values = np.asarray(truncation_values, dtype=np.float64)
    if len(truncation_values) != n:
        raise DimensionError("truncation_values must match the rollout length")
    advantages = np.zeros(n)
    ended = dones | truncations
    next_adv = 0.0
    for t in range(n - 1, -1, -1):
        next_value = bootstrap_value if t == n - 1 else values[t + 1]
        cont = 0.0 if ended[t] else 1.0
        delta = rewards[t] + gamma * next_value * cont - values[t]
        if truncations[t] and not dones[t]:
            delta += gamma * truncation_values[t]
        next_adv = delta + gamma * lam * cont * next_adv
        advantages[t] = next_adv
    return advantages, advantages + values


def ppo_loss(net: Network, obs, actions, old_log_probs, advantages, returns, config: PPOConfig,
             value_coef: Optional[float] = None, entropy_coef: Optional[float] = None):
    """Clipped-surrogate PPO loss and its parameter gradient.

    Returns ``(loss, grad, info)``; ``info["policy_loss"]`` is the clipped
    surrogate term alone.
    """
    vc = config.value_coef if value_coef is None else value_coef
    ec = config.entropy_coef if entropy_coef is None else entropy_coef
    out = forward(net, obs)
    logp_all = log_softmax(out.outputs)
    B = logp_all.shape[0]
    rows = np.arange(B)
    actions = np.asarray(actions)
    logp = logp_all[rows, actions]
    with np.errstate(over="ignore"):
        ratio = np.exp(logp - old_log_probs)
    if not np.all(np.isfinite(ratio)):
        raise NumericError(f"non-finite PPO ratio (max log-ratio {np.max(logp - old_log_probs):.3g})")
    adv = np.asarray(advantages, dtype=np.float64)
    surr1 = ratio * adv
    clipped = np.clip(ratio, 1.0 - config.clip_eps, 1.0 + config.clip_eps)
    surr2 = clipped * adv
    unclipped = surr1 <= surr2
    policy_loss = -float(np.mean(np.minimum(surr1, surr2)))

    probs = np.exp(logp_all)
    d_logp = np.where(unclipped, -ratio * adv, 0.0)
    d_logits = -d_logp[:, None] * probs
    d_logits[rows, actions] += d_logp

    entropy_each = -np.sum(probs * logp_all, axis=1)
    entropy = float(np.mean(entropy_each))
    if ec:
        d_logits += ec * probs * (logp_all + entropy_each[:, None])

    d_value = None
    value_loss = 0.0
    if out.values is not None:
        verr = out.values - np.asarray(returns, dtype=np.float64)
        value_loss = float(np.mean(verr ** 2))
        if vc:
            d_value = 2.0 * vc * verr
    grad = backward(net, out, d_logits, d_value)
    loss = policy_loss + vc * value_loss - ec * entropy
    info = {
        "policy_loss": policy_loss,
        "value_loss": value_loss,
        "entropy": entropy,
        "clip_fraction": float(np.mean(~unclipped)),
        "approx_kl": float(np.mean(old_log_probs - logp)),
    }
    return loss, grad, info


def value_loss_and_grad(value_net: Network, obs, returns, value_coef: float):
    """``value_coef * mean (V - returns)^2`` for a separate critic network."""
    out = forward(value_net, obs)
    verr = out.outputs[:, 0] - np.asarray(returns, dtype=np.float64)
    loss = float(np.mean(verr ** 2))
    grad = backward(value_net, out, (2.0 * value_coef * verr)[:, None])
    return value_coef * loss, grad, loss


def normalize(adv: np.ndarray) -> np.ndarray:
    return (adv - adv.mean()) / max(float(adv.std()), 1e-8)


def _complement_sample(n: int, exclude: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    mask = np.ones(n, dtype=bool)
    mask[exclude] = False
    pool = np.flatnonzero(mask)
    size = min(size, pool.size)
    return np.sort(pool[rng.permutation(pool.size)[:size]])


@dataclass
class PreparedBatch:
    observations: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray

    def __len__(self):
        return len(self.actions)


def prepare(buffer: RolloutBuffer, config: PPOConfig) -> PreparedBatch:
    adv, ret = compute_gae(buffer.rewards, buffer.values, buffer.dones, buffer.truncations,
                           config.gamma, config.gae_lambda, buffer.bootstrap_value,
                           buffer.truncation_values)
    if config.normalize_advantages:
        adv = normalize(adv)
    return PreparedBatch(buffer.observations, buffer.actions, buffer.log_probs, adv, ret)


def policy_gradient_fn(batch: PreparedBatch, config: PPOConfig, include_value: bool = False):
    """Gradient probe of the PPO objective on a subset of rows (for NTK collection)."""
    def grad(net: Network, idx: np.ndarray) -> np.ndarray:
        _, g, _ = ppo_loss(
            net, batch.observations[idx], batch.actions[idx], batch.log_probs[idx],
            batch.advantages[idx], batch.returns[idx], config,
            value_coef=config.value_coef if include_value else 0.0,
            entropy_coef=config.entropy_coef if include_value else 0.0,
        )
        return g
    return grad


def ppo_update(net: Network, optimizer, batch: PreparedBatch, config: PPOConfig, rng: np.random.Generator,
               churn: Optional[ChurnConfig] = None, chain_state: Optional[ChainState] = None,
               baseline: Optional[BaselineConfig] = None, probe_rng: Optional[np.random.Generator] = None,
               critic: Optional[tuple] = None) -> dict:
    """Epochs of shuffled minibatch updates on one iteration's data.

    ``critic`` is an optional ``(value_net, value_optimizer)`` pair for a
    separate value network; it takes a plain step on every minibatch and is
    never churn-regularized.

    ``probe_rng`` switches on churn measurement on a random disjoint probe
    batch for every minibatch step; it draws from its own generator so the
    parameter trajectory does not depend on it.
    """
    n = len(batch)
    mechanism = baseline.mechanism if baseline is not None else "none"
    ref_size = config.minibatch if churn is None or churn.ref_batch_size is None else churn.ref_batch_size
    sums = {"L_main": 0.0, "L_churn": 0.0, "lambda": 0.0, "value_loss": 0.0, "entropy": 0.0}
    churn_values = []
    steps = 0
    clip_sat = float("nan")

    if churn is not None and churn.reference == "iteration_start":
        chain_state.prev_params = net.params.copy()
    for _ in range(config.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, config.minibatch):
            idx = np.sort(perm[start:start + config.minibatch])
            info_holder = {}

            def main_loss_fn(net_, idx=idx, holder=info_holder):
                _, g, info = ppo_loss(net_, batch.observations[idx], batch.actions[idx],
                                      batch.log_probs[idx], batch.advantages[idx], batch.returns[idx], config)
                if mechanism == "l2_init":
                    _, g_l2 = l2_init_penalty(net_.params, net_.init_params, baseline.l2_coeff)
                    g = g + g_l2
                holder.update(info)
                return info["policy_loss"], g

            probe_idx = probe_before = None
            if probe_rng is not None:
                probe_idx = _complement_sample(n, idx, ref_size, probe_rng)
                probe_before = transform_outputs(forward(net, batch.observations[probe_idx]).outputs,
                                                 "policy_logprobs")

            if churn is not None:
                ref_idx = _complement_sample(n, idx, ref_size, rng)
                st = chain_step(net, optimizer, idx, ref_idx, batch.observations[ref_idx],
                                main_loss_fn, churn, chain_state)
                sums["L_churn"] += st["L_churn"]
                sums["lambda"] += st["lambda"]
                sums["L_main"] += st["L_main"]
            else:
                loss, g = main_loss_fn(net)
                new_params = optimizer.step(net.params, g)
                if mechanism == "weight_clip":
                    new_params = weight_clip(new_params, baseline.clip_kappa)
                net.set_params(new_params)
                sums["L_main"] += loss
            if mechanism == "weight_clip":
                clip_sat = float(np.mean(np.abs(net.params) >= baseline.clip_kappa))

            if probe_idx is not None:
                after = transform_outputs(forward(net, batch.observations[probe_idx]).outputs, "policy_logprobs")
                churn_values.append(float(np.mean(np.sum((after - probe_before) ** 2, axis=1))))
            if critic is not None:
                vnet, vopt = critic
                _, gv, vloss = value_loss_and_grad(vnet, batch.observations[idx], batch.returns[idx],
                                                   config.value_coef)
                vnet.set_params(vopt.step(vnet.params, gv))
                info_holder["value_loss"] = vloss
            sums["value_loss"] += info_holder["value_loss"]
            sums["entropy"] += info_holder["entropy"]
            steps += 1

    stats = {k: (v / steps if steps else float("nan")) for k, v in sums.items()}
    stats["measured_churn"] = float(np.mean(churn_values)) if churn_values else float("nan")
    stats["updates"] = steps
    stats["clip_saturation"] = clip_sat
    return stats
