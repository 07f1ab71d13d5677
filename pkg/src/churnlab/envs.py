"""CartPole, Acrobot and MountainCar dynamics plus the continual task schedule.

Physics follows the Gym classic-control tasks step for step (plain float64
``math`` arithmetic in a fixed order, so successors are reproducible).
Each task in a sequence differs only by a fixed additive observation offset.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .errors import ConfigurationError, EndOfSequence, InputError


@dataclass(frozen=True)
class EnvSpec:
    env_id: str
    max_episode_steps: int
    obs_dim: int
    action_count: int


ENV_SPECS = {
    "cartpole": EnvSpec("cartpole", 500, 4, 2),
    "acrobot": EnvSpec("acrobot", 500, 6, 3),
    "mountaincar": EnvSpec("mountaincar", 200, 2, 3),
}

# k, budget per task, sigma
SEQUENCE_DEFAULTS = {
    "cartpole": (10, 160_000, 2.0),
    "acrobot": (10, 160_000, 2.0),
    "mountaincar": (5, 320_000, 0.02),
}


def env_spec(env_id: str) -> EnvSpec:
    try:
        return ENV_SPECS[env_id]
    except KeyError:
        raise ConfigurationError(f"unknown environment {env_id!r}") from None


@dataclass(frozen=True)
class TaskSpec:
    env: EnvSpec
    noise_offset: np.ndarray
    budget_N: int
    # per-step noise replaces the fixed offset with a fresh draw per observation
    per_step_noise: bool = False
    sigma: float = 0.0

    def __post_init__(self):
        off = np.asarray(self.noise_offset, dtype=np.float64)
        off.flags.writeable = False
        object.__setattr__(self, "noise_offset", off)
        if self.budget_N <= 0:
            raise ConfigurationError("task budget must be positive")
        if off.shape != (self.env.obs_dim,) or not np.all(np.isfinite(off)):
            raise ConfigurationError("noise offset must be a finite vector of length obs_dim")


@dataclass(frozen=True)
class TaskSequence:
    tasks: tuple

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        if len(self.tasks) < 1:
            raise ConfigurationError("a task sequence needs at least one task")
        object.__setattr__(self, "_ends", np.cumsum([t.budget_N for t in self.tasks]))

    @property
    def k(self) -> int:
        return len(self.tasks)

    @property
    def total_budget(self) -> int:
        return int(self._ends[-1])

    def task_start(self, index: int) -> int:
        return 0 if index == 0 else int(self._ends[index - 1])

    def __len__(self):
        return len(self.tasks)

    def __getitem__(self, i):
        return self.tasks[i]

    def to_dict(self) -> dict:
        return {
            "env_id": self.tasks[0].env.env_id,
            "budgets": [t.budget_N for t in self.tasks],
            "noise_offsets": [t.noise_offset.tolist() for t in self.tasks],
            "per_step_noise": self.tasks[0].per_step_noise,
        }


def make_task_sequence(env_id: str, k: Optional[int] = None, sigma: Optional[float] = None,
                       budget_N: Optional[int] = None, seed=0, per_step_noise: bool = False) -> TaskSequence:
    spec = env_spec(env_id)
    dk, dn, ds = SEQUENCE_DEFAULTS[env_id]
    k = dk if k is None else int(k)
    budget_N = dn if budget_N is None else int(budget_N)
    sigma = ds if sigma is None else float(sigma)
    if k < 1:
        raise ConfigurationError(f"k must be >= 1, got {k}")
    if sigma < 0:
        raise ConfigurationError("sigma must be non-negative")
    rng = np.random.default_rng(seed)
    offsets = rng.normal(0.0, 1.0, size=(k, spec.obs_dim)) * sigma
    if per_step_noise:
        offsets = np.zeros_like(offsets)
    return TaskSequence(tuple(
        TaskSpec(spec, offsets[i], budget_N, per_step_noise, sigma) for i in range(k)
    ))


def advance_schedule(seq: TaskSequence, global_step: int):
    """Return ``(task_index, is_switch_step)`` for a 0-based global step."""
    if global_step < 0:
        raise InputError("global step must be non-negative")
    if global_step >= seq.total_budget:
        raise EndOfSequence(f"step {global_step} is past the budget {seq.total_budget}")
    index = int(np.searchsorted(seq._ends, global_step, side="right"))
    return index, global_step == seq.task_start(index)


class EnvState(NamedTuple):
    physics: tuple
    step_count: int


# --- cartpole -------------------------------------------------------------

CP_GRAVITY = 9.8
CP_MASSCART = 1.0
CP_MASSPOLE = 0.1
CP_TOTAL_MASS = CP_MASSPOLE + CP_MASSCART
CP_LENGTH = 0.5  # half the pole length
CP_POLEMASS_LENGTH = CP_MASSPOLE * CP_LENGTH
CP_FORCE_MAG = 10.0
CP_TAU = 0.02
CP_THETA_LIMIT = 12 * 2 * math.pi / 360
CP_X_LIMIT = 2.4


def cartpole_dynamics(physics: tuple, action: int) -> tuple:
    x, x_dot, theta, theta_dot = physics
    force = CP_FORCE_MAG if action == 1 else -CP_FORCE_MAG
    costheta = math.cos(theta)
    sintheta = math.sin(theta)
    temp = (force + CP_POLEMASS_LENGTH * theta_dot ** 2 * sintheta) / CP_TOTAL_MASS
    thetaacc = (CP_GRAVITY * sintheta - costheta * temp) / (
        CP_LENGTH * (4.0 / 3.0 - CP_MASSPOLE * costheta ** 2 / CP_TOTAL_MASS)
    )
    xacc = temp - CP_POLEMASS_LENGTH * thetaacc * costheta / CP_TOTAL_MASS
    x = x + CP_TAU * x_dot
    x_dot = x_dot + CP_TAU * xacc
    theta = theta + CP_TAU * theta_dot
    theta_dot = theta_dot + CP_TAU * thetaacc
    return (x, x_dot, theta, theta_dot)


def _cartpole_terminal(physics: tuple) -> bool:
    x, _, theta, _ = physics
    return x < -CP_X_LIMIT or x > CP_X_LIMIT or theta < -CP_THETA_LIMIT or theta > CP_THETA_LIMIT


# --- mountain car ---------------------------------------------------------

MC_MIN_POS = -1.2
MC_MAX_POS = 0.6
MC_MAX_SPEED = 0.07
MC_GOAL_POS = 0.5
MC_GOAL_VEL = 0.0
MC_FORCE = 0.001
MC_GRAVITY = 0.0025


def mountaincar_dynamics(physics: tuple, action: int) -> tuple:
    position, velocity = physics
    velocity += (action - 1) * MC_FORCE + math.cos(3 * position) * (-MC_GRAVITY)
    velocity = min(max(velocity, -MC_MAX_SPEED), MC_MAX_SPEED)
    position += velocity
    position = min(max(position, MC_MIN_POS), MC_MAX_POS)
    if position == MC_MIN_POS and velocity < 0:
        velocity = 0.0
    return (position, velocity)


def _mountaincar_terminal(physics: tuple) -> bool:
    return physics[0] >= MC_GOAL_POS and physics[1] >= MC_GOAL_VEL


# --- acrobot --------------------------------------------------------------

AB_DT = 0.2
AB_L1 = 1.0
AB_M1 = 1.0
AB_M2 = 1.0
AB_LC1 = 0.5
AB_LC2 = 0.5
AB_I1 = 1.0
AB_I2 = 1.0
AB_G = 9.8
AB_MAX_VEL_1 = 4 * math.pi
AB_MAX_VEL_2 = 9 * math.pi
AB_TORQUES = (-1.0, 0.0, 1.0)


def _acrobot_dsdt(s: tuple, torque: float) -> tuple:
    theta1, theta2, dtheta1, dtheta2 = s
    m1, m2, l1, lc1, lc2, i1, i2, g = AB_M1, AB_M2, AB_L1, AB_LC1, AB_LC2, AB_I1, AB_I2, AB_G
    d1 = m1 * lc1 ** 2 + m2 * (l1 ** 2 + lc2 ** 2 + 2 * l1 * lc2 * math.cos(theta2)) + i1 + i2
    d2 = m2 * (lc2 ** 2 + l1 * lc2 * math.cos(theta2)) + i2
    phi2 = m2 * lc2 * g * math.cos(theta1 + theta2 - math.pi / 2.0)
    phi1 = (
        -m2 * l1 * lc2 * dtheta2 ** 2 * math.sin(theta2)
        - 2 * m2 * l1 * lc2 * dtheta2 * dtheta1 * math.sin(theta2)
        + (m1 * lc1 + m2 * l1) * g * math.cos(theta1 - math.pi / 2)
        + phi2
    )
    ddtheta2 = (torque + d2 / d1 * phi1 - m2 * l1 * lc2 * dtheta1 ** 2 * math.sin(theta2) - phi2) / (
        m2 * lc2 ** 2 + i2 - d2 ** 2 / d1
    )
    ddtheta1 = -(d2 * ddtheta2 + phi1) / d1
    return (dtheta1, dtheta2, ddtheta1, ddtheta2)


def _wrap(x: float, lo: float, hi: float) -> float:
    diff = hi - lo
    while x > hi:
        x -= diff
    while x < lo:
        x += diff
    return x


def acrobot_dynamics(physics: tuple, action: int) -> tuple:
    torque = AB_TORQUES[action]
    h = AB_DT
    k1 = _acrobot_dsdt(physics, torque)
    k2 = _acrobot_dsdt(tuple(s + h / 2 * k for s, k in zip(physics, k1)), torque)
    k3 = _acrobot_dsdt(tuple(s + h / 2 * k for s, k in zip(physics, k2)), torque)
    k4 = _acrobot_dsdt(tuple(s + h * k for s, k in zip(physics, k3)), torque)
    ns = [s + h / 6.0 * (a + 2 * b + 2 * c + d) for s, a, b, c, d in zip(physics, k1, k2, k3, k4)]
    return (
        _wrap(ns[0], -math.pi, math.pi),
        _wrap(ns[1], -math.pi, math.pi),
        min(max(ns[2], -AB_MAX_VEL_1), AB_MAX_VEL_1),
        min(max(ns[3], -AB_MAX_VEL_2), AB_MAX_VEL_2),
    )


def _acrobot_terminal(physics: tuple) -> bool:
    return -math.cos(physics[0]) - math.cos(physics[1] + physics[0]) > 1.0


def raw_observation(env_id: str, physics: tuple) -> np.ndarray:
    if env_id == "acrobot":
        t1, t2, d1, d2 = physics
        return np.array([math.cos(t1), math.sin(t1), math.cos(t2), math.sin(t2), d1, d2])
    return np.array(physics, dtype=np.float64)


_DYNAMICS = {"cartpole": cartpole_dynamics, "mountaincar": mountaincar_dynamics, "acrobot": acrobot_dynamics}
_TERMINAL = {"cartpole": _cartpole_terminal, "mountaincar": _mountaincar_terminal, "acrobot": _acrobot_terminal}
_REWARD = {"cartpole": 1.0, "mountaincar": -1.0, "acrobot": -1.0}


def _observe(task: TaskSpec, physics: tuple, noise_rng) -> np.ndarray:
    obs = raw_observation(task.env.env_id, physics)
    if task.per_step_noise:
        if noise_rng is None:
            raise InputError("per-step observation noise needs a noise generator")
        return obs + noise_rng.normal(0.0, task.sigma, size=obs.shape)
    return obs + task.noise_offset


def reset(task: TaskSpec, rng, noise_rng=None):
    """Sample a start state. ``rng`` is a ``numpy.random.Generator`` or a seed."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    env_id = task.env.env_id
    if env_id == "cartpole":
        physics = tuple(float(v) for v in rng.uniform(-0.05, 0.05, size=4))
    elif env_id == "mountaincar":
        physics = (float(rng.uniform(-0.6, -0.4)), 0.0)
    else:
        physics = tuple(float(v) for v in rng.uniform(-0.1, 0.1, size=4))
    state = EnvState(physics, 0)
    return state, _observe(task, physics, noise_rng)


def step(task: TaskSpec, state: EnvState, action: int, noise_rng=None):
    """Advance one step.

    Returns ``(state, observation, reward, terminated, truncated)``; the
    episode is over when either flag is set. Truncation marks the step cap.
    """
    env_id = task.env.env_id
    if not 0 <= action < task.env.action_count:
        raise InputError(f"action {action} out of range for {env_id}")
    physics = _DYNAMICS[env_id](state.physics, action)
    terminated = _TERMINAL[env_id](physics)
    reward = _REWARD[env_id]
    if env_id == "acrobot" and terminated:
        reward = 0.0
    count = state.step_count + 1
    truncated = (not terminated) and count >= task.env.max_episode_steps
    new_state = EnvState(physics, count)
    return new_state, _observe(task, physics, noise_rng), reward, terminated, truncated


@dataclass
class TaskRunner:
    """Single-owner environment cursor that tracks episodes across steps."""

    task: TaskSpec
    rng: np.random.Generator
    noise_rng: Optional[np.random.Generator] = None
    state: Optional[EnvState] = field(default=None, init=False)
    obs: Optional[np.ndarray] = field(default=None, init=False)
    episode_return: float = field(default=0.0, init=False)
    episode_length: int = field(default=0, init=False)

    def __post_init__(self):
        self.start_episode()

    def start_episode(self):
        self.state, self.obs = reset(self.task, self.rng, self.noise_rng)
        self.episode_return = 0.0
        self.episode_length = 0

    def switch_task(self, task: TaskSpec):
        """Move to a new task; the running episode is abandoned."""
        self.task = task
        self.start_episode()

    def step(self, action: int):
        self.state, obs, reward, terminated, truncated = step(self.task, self.state, action, self.noise_rng)
        self.episode_return += reward
        self.episode_length += 1
        self.obs = obs
        return obs, reward, terminated, truncated
