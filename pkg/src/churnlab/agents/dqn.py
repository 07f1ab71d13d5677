"""Double DQN with a ring replay buffer and hard target copies."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..baselines import BaselineConfig, l2_init_penalty, weight_clip
from ..churn import ChainState, ChurnConfig, chain_step
from ..errors import ConfigurationError, DimensionError
from ..nn import Network, backward, forward


@dataclass
class DQNConfig:
    lr: float = 3e-4
    gamma: float = 0.99
    batch: int = 32
    target_replace: int = 1000
    eps_start: float = 1.0
    eps_end: float = 0.1
    eps_decay_steps: Optional[int] = None  # None: the first task's budget
    warmup: int = 1000
    buffer_capacity: int = 100_000
    train_interval: int = 1
    log_interval: int = 1000

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigurationError("gamma must lie in (0, 1]")
        if self.eps_end > self.eps_start:
            raise ConfigurationError("epsilon schedule must be non-increasing")
        if self.batch < 1 or self.target_replace < 1 or self.buffer_capacity < self.batch:
            raise ConfigurationError("batch, target_replace and capacity must be consistent")
        if self.train_interval < 1 or self.log_interval < 1 or self.warmup < 0:
            raise ConfigurationError("train_interval/log_interval must be >= 1, warmup >= 0")


def epsilon_at(step: int, config: DQNConfig, decay_steps: int) -> float:
    frac = min(1.0, step / max(decay_steps, 1))
    return config.eps_start + frac * (config.eps_end - config.eps_start)


class ReplayBuffer:
    """FIFO ring of ``(s, a, r, s', done)`` transitions."""

    def __init__(self, capacity: int, obs_dim: int):
        self.capacity = int(capacity)
        self.obs = np.zeros((capacity, obs_dim))
        self.next_obs = np.zeros((capacity, obs_dim))
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.dones = np.zeros(capacity)
        self.insertions = np.zeros(capacity, dtype=np.int64)
        self.cursor = 0
        self.size = 0
        self.total = 0

    def __len__(self):
        return self.size

    def add(self, obs, action, reward, next_obs, done):
        i = self.cursor
        self.obs[i] = obs
        self.actions[i] = action
        self.rewards[i] = reward
        self.next_obs[i] = next_obs
        self.dones[i] = float(done)
        self.insertions[i] = self.total
        self.total += 1
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, rng: np.random.Generator, batch: int, exclude=None) -> np.ndarray:
        if exclude is None:
            if self.size < batch:
                raise DimensionError("not enough transitions to sample a batch")
            return np.sort(rng.choice(self.size, size=batch, replace=False))
        mask = np.ones(self.size, dtype=bool)
        mask[np.asarray(exclude)] = False
        pool = np.flatnonzero(mask)
        return np.sort(rng.choice(pool, size=min(batch, pool.size), replace=False))

    def clear(self):
        self.cursor = 0
        self.size = 0


def double_dqn_target(q_net: Network, target_net: Network, rewards, next_obs, dones, gamma: float) -> np.ndarray:
    """``r + gamma * (1 - done) * Q_target(s', argmax_a Q_online(s', a))``."""
    rewards = np.asarray(rewards, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    if len(rewards) == 0:
        raise DimensionError("empty batch")
    online = forward(q_net, next_obs).outputs
    greedy = np.argmax(online, axis=1)
    target_q = forward(target_net, next_obs).outputs[np.arange(len(rewards)), greedy]
    return rewards + gamma * (1.0 - dones) * target_q


def td_loss_and_grad(q_net: Network, obs, actions, targets):
    """``0.5 * mean (y - Q(s, a))^2`` with targets held fixed."""
    out = forward(q_net, obs)
    rows = np.arange(len(actions))
    q = out.outputs[rows, actions]
    err = q - targets
    loss = 0.5 * float(np.mean(err ** 2))
    d_out = np.zeros_like(out.outputs)
    d_out[rows, actions] = err
    return loss, backward(q_net, out, d_out)


class DQNLearner:
    """Owns the online/target networks, optimizer and replay for one run."""

    def __init__(self, q_net: Network, optimizer, config: DQNConfig, obs_dim: int,
                 churn: Optional[ChurnConfig] = None, baseline: Optional[BaselineConfig] = None):
        self.q_net = q_net
        self.target_net = q_net.copy()
        self.optimizer = optimizer
        self.config = config
        self.replay = ReplayBuffer(config.buffer_capacity, obs_dim)
        self.churn = churn
        self.chain_state = ChainState() if churn is not None else None
        self.baseline = baseline or BaselineConfig()
        self.updates = 0

    def act(self, obs, epsilon: float, rng: np.random.Generator) -> int:
        n_actions = self.q_net.config.output_dim
        if rng.random() < epsilon:
            return int(rng.integers(n_actions))
        return int(np.argmax(forward(self.q_net, obs).outputs[0]))

    def sync_target(self):
        self.target_net.set_params(self.q_net.params)

    def update(self, rng: np.random.Generator, probe_rng: Optional[np.random.Generator] = None) -> Optional[dict]:
        return dqn_update(self, rng, probe_rng)


def dqn_update(learner: DQNLearner, rng: np.random.Generator,
               probe_rng: Optional[np.random.Generator] = None) -> Optional[dict]:
    """One TD step (or nothing before warmup); copies the target every ``target_replace`` updates."""
    cfg = learner.config
    replay = learner.replay
    if replay.total < cfg.warmup or len(replay) < cfg.batch:
        return None
    net = learner.q_net
    idx = replay.sample_indices(rng, cfg.batch)
    y = double_dqn_target(net, learner.target_net, replay.rewards[idx], replay.next_obs[idx],
                          replay.dones[idx], cfg.gamma)
    mechanism = learner.baseline.mechanism

    def main_loss_fn(net_):
        loss, g = td_loss_and_grad(net_, replay.obs[idx], replay.actions[idx], y)
        if mechanism == "l2_init":
            g = g + l2_init_penalty(net_.params, net_.init_params, learner.baseline.l2_coeff)[1]
        return loss, g

    probe_idx = before = None
    if probe_rng is not None and len(replay) > cfg.batch:
        probe_idx = replay.sample_indices(probe_rng, cfg.batch, exclude=idx)
        before = forward(net, replay.obs[probe_idx]).outputs

    stats = {"L_main": 0.0, "L_churn": 0.0, "lambda": 0.0, "measured_churn": float("nan")}
    if learner.churn is not None and len(replay) > cfg.batch:
        ref_size = learner.churn.ref_batch_size or cfg.batch
        ref_idx = replay.sample_indices(rng, ref_size, exclude=idx)
        st = chain_step(net, learner.optimizer, idx, ref_idx, replay.obs[ref_idx], main_loss_fn,
                        learner.churn, learner.chain_state)
        stats.update({k: st[k] for k in ("L_main", "L_churn", "lambda")})
    else:
        loss, g = main_loss_fn(net)
        new_params = learner.optimizer.step(net.params, g)
        if mechanism == "weight_clip":
            new_params = weight_clip(new_params, learner.baseline.clip_kappa)
        net.set_params(new_params)
        stats["L_main"] = loss
    if probe_idx is not None:
        after = forward(net, replay.obs[probe_idx]).outputs
        stats["measured_churn"] = float(np.mean(np.sum((after - before) ** 2, axis=1)))
    learner.updates += 1
    if learner.updates % cfg.target_replace == 0:
        learner.sync_target()
    return stats
