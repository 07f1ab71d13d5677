"""Published hyperparameters the defaults must carry (checked by hand against the source tables)."""
import numpy as np

from churnlab.agents import DQNConfig, PPOConfig
from churnlab.envs import make_task_sequence
from churnlab.ntk import DEFAULT_DELTA
from churnlab.sl import PAPER_PER_TASK_N


def test_ppo_gym_control_defaults():
    c = PPOConfig()
    assert (c.lr, c.gamma, c.gae_lambda, c.interval, c.minibatch, c.epochs, c.clip_eps, c.entropy_coef) == \
        (1e-3, 0.99, 0.95, 800, 32, 5, 0.2, 0.0)


def test_double_dqn_defaults():
    c = DQNConfig()
    assert (c.lr, c.gamma, c.target_replace, c.batch, c.eps_start, c.eps_end, c.train_interval) == \
        (3e-4, 0.99, 1000, 32, 1.0, 0.1, 1)


def test_task_sequence_defaults():
    for env_id in ("cartpole", "acrobot"):
        seq = make_task_sequence(env_id, seed=0)
        assert seq.k == 10 and seq[0].budget_N == 160_000
    mc = make_task_sequence("mountaincar", seed=0)
    assert mc.k == 5 and mc[0].budget_N == 320_000
    # offsets have the configured scale: sigma 2.0 vs 0.02
    cp = np.concatenate([t.noise_offset for t in make_task_sequence("cartpole", k=200, seed=1).tasks])
    small = np.concatenate([t.noise_offset for t in make_task_sequence("mountaincar", k=400, seed=1).tasks])
    assert abs(cp.std() - 2.0) < 0.15 and abs(small.std() - 0.02) < 0.0015


def test_srank_delta_and_sl_sizes():
    assert DEFAULT_DELTA == 0.01
    assert PAPER_PER_TASK_N == {"random_label": 1200, "permuted": 10000}

