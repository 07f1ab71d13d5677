from .dqn import DQNConfig, DQNLearner, ReplayBuffer, double_dqn_target, dqn_update, td_loss_and_grad
from .ppo import (
    PPOConfig,
    RolloutBuffer,
    collect_rollout,
    compute_gae,
    ppo_loss,
    ppo_update,
    prepare,
)
