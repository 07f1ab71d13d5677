"""Run configuration, the continual training loop, metrics files and aggregation."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.stats import trim_mean

from . import __version__
from .agents.dqn import DQNConfig, DQNLearner, epsilon_at, td_loss_and_grad, double_dqn_target
from .agents.ppo import PPOConfig, collect_rollout, policy_gradient_fn, ppo_update, prepare
from .baselines import BaselineConfig, oracle_reset, redo_recycle
from .churn import ChainState, ChurnConfig
from .envs import TaskRunner, TaskSequence, env_spec, make_task_sequence
from .errors import ConfigurationError, InputError, LengthError
from .nn import MLPConfig, forward, init_network
from .ntk import collect_minibatch_grads, make_report
from .optim import Optimizer
from .sl import (DESK_TASKS, SLConfig, SLTaskSpec, cross_entropy_and_grad, load_fixture, load_idx,
                 make_sl_sequence, task_data, train_sl)

log = logging.getLogger(__name__)

METHODS = ("vanilla", "oracle", "c_chain", "l2_init", "weight_clip", "redo", "layer_norm",
           "adam_rel", "proj_only", "orth_only")
AGENTS = ("ppo", "dqn", "sl")
CHURN_METHODS = {"c_chain": "full", "proj_only": "proj_only", "orth_only": "orth_only"}
SL_METHODS = ("vanilla", "oracle", "c_chain", "l2_init", "weight_clip", "layer_norm", "adam_rel",
              "proj_only", "orth_only")
DEFAULT_OUTPUT_MODE = {"ppo": "policy_logprobs", "dqn": "q_values", "sl": "raw"}
# target relative loss for auto-lambda when the config leaves churn.beta unset;
# larger values freeze the policy in this formulation (see README)
DEFAULT_BETA = {"ppo": 1e-3, "dqn": 0.01, "sl": 0.003}

METRICS_COLUMNS = ["global_step", "task_index", "episode_return", "episode_count", "L_main", "L_churn",
                   "lambda", "measured_churn", "srank", "offdiag_abs_sum", "diag_abs_sum", "wall_time"]
SUMMARY_COLUMNS = ["method", "runs", "mean", "median", "iqm", "optimality_gap"]


# ---------------------------------------------------------------- configuration

@dataclass
class EnvSection:
    env_id: str = "cartpole"
    k: Optional[int] = None
    sigma: Optional[float] = None
    budget_N: Optional[int] = None
    per_step_noise: bool = False


@dataclass
class NetworkSection:
    hidden: tuple = (64, 64)
    activation: str = "tanh"
    init_scheme: str = "orthogonal_scaled"
    use_layer_norm: bool = False
    critic: str = "shared"  # shared trunk with a value head, or a separate value network

    def __post_init__(self):
        if self.critic not in ("shared", "separate"):
            raise ConfigurationError(f"unknown critic layout {self.critic!r}")


@dataclass
class SLSection:
    kind: str = "random_label"
    num_tasks: Optional[int] = None
    per_task_n: Optional[int] = None
    epochs_per_task: Optional[int] = None
    images_path: Optional[str] = None
    labels_path: Optional[str] = None
    hidden: tuple = (256, 256)
    activation: str = "relu"
    lr: float = 1e-3
    batch: int = 32


@dataclass
class DiagnosticsSection:
    ntk_every: int = 0           # iterations between NTK collections; 0 disables
    ntk_minibatches: int = 32
    dump_ntk: bool = False
    churn_probe_every: int = 1   # iterations between churn probes; 0 disables
    record_wall_time: bool = False
    ntk_full_objective: bool = False  # PPO: include value and entropy terms in the NTK gradients

    def __post_init__(self):
        if self.ntk_every < 0 or self.churn_probe_every < 0:
            raise ConfigurationError("diagnostic intervals must be >= 0")
        if self.ntk_minibatches < 1:
            raise ConfigurationError("ntk_minibatches must be >= 1")


@dataclass
class RunConfig:
    method: str = "vanilla"
    agent: str = "ppo"
    seed: int = 0
    env: EnvSection = field(default_factory=EnvSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    dqn: DQNConfig = field(default_factory=DQNConfig)
    churn: ChurnConfig = field(default_factory=ChurnConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    sl: SLSection = field(default_factory=SLSection)
    diagnostics: DiagnosticsSection = field(default_factory=DiagnosticsSection)
    task_slice: Optional[tuple] = None  # [start, stop) task indices to run

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(data)
        agent = data.get("agent", "ppo")
        churn = dict(data.get("churn") or {})
        if agent in DEFAULT_OUTPUT_MODE:
            churn.setdefault("output_mode", DEFAULT_OUTPUT_MODE[agent])
            churn.setdefault("beta", DEFAULT_BETA[agent])
        data["churn"] = churn
        config = _build(cls, data, "config")
        validate(config)
        return config

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigurationError("config file must hold a JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{where} must be a JSON object")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigurationError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        hint = hints[name]
        if dataclasses.is_dataclass(hint):
            kwargs[name] = _build(hint, value, f"{where}.{name}")
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigurationError(f"{where}: {exc}") from None


def validate(config: RunConfig) -> None:
    """Reject invalid method/agent combinations before any compute."""
    if config.method not in METHODS:
        raise ConfigurationError(f"unknown method {config.method!r}")
    if config.agent not in AGENTS:
        raise ConfigurationError(f"unknown agent {config.agent!r}")
    if not isinstance(config.seed, int) or config.seed < 0:
        raise ConfigurationError("seed must be a non-negative integer")
    if config.baseline.mechanism != "none":
        raise ConfigurationError("baseline.mechanism is derived from method; leave it unset")
    if config.agent == "sl":
        if config.method not in SL_METHODS:
            raise ConfigurationError(f"method {config.method!r} is not available for supervised tasks")
        if config.churn.output_mode != "raw":
            raise ConfigurationError("supervised churn uses raw outputs")
    else:
        env_spec(config.env.env_id)
        if config.agent == "ppo" and config.churn.output_mode != "policy_logprobs":
            raise ConfigurationError("PPO churn is measured on policy log-probabilities")
        if config.agent == "dqn":
            if config.churn.output_mode != "q_values":
                raise ConfigurationError("DQN churn is measured on Q-values")
            if config.network.critic != "shared":
                raise ConfigurationError("a separate critic only applies to PPO")
        budget = resolve_sequence(config).tasks[0].budget_N
        step = config.ppo.interval if config.agent == "ppo" else config.dqn.log_interval
        if budget % step:
            raise ConfigurationError(f"task budget {budget} is not a multiple of the iteration length {step}")
    if config.task_slice is not None:
        k = n_tasks(config)
        s = config.task_slice
        if len(s) != 2 or not 0 <= s[0] < s[1] <= k:
            raise ConfigurationError(f"task_slice must be [start, stop) within 0..{k}")


def resolve_sequence(config: RunConfig) -> TaskSequence:
    e = config.env
    return make_task_sequence(e.env_id, e.k, e.sigma, e.budget_N,
                              seed=np.random.SeedSequence([config.seed, 0xC0FFEE]),
                              per_step_noise=e.per_step_noise)


def n_tasks(config: RunConfig) -> int:
    if config.agent == "sl":
        return config.sl.num_tasks or DESK_TASKS[config.sl.kind]
    return resolve_sequence(config).k


def mechanism_for(method: str) -> str:
    return {"l2_init": "l2_init", "weight_clip": "weight_clip", "redo": "redo",
            "oracle": "oracle_reset", "layer_norm": "layer_norm"}.get(method, "none")


def churn_for(config: RunConfig) -> Optional[ChurnConfig]:
    if config.method not in CHURN_METHODS:
        return None
    return dataclasses.replace(config.churn, ablation_mode=CHURN_METHODS[config.method])


def _segments(config: RunConfig, k: int):
    """Task index ranges that start from a fresh initialization."""
    start, stop = config.task_slice if config.task_slice is not None else (0, k)
    if config.method == "oracle":
        return [(j, j + 1) for j in range(start, stop)]
    return [(start, stop)]


def _streams(seed: int, segment_start: int) -> dict:
    names = ("net", "action", "update", "env", "probe", "ntk", "critic")
    seqs = np.random.SeedSequence([seed, segment_start]).spawn(len(names))
    return dict(zip(names, seqs))


def _rng(seq) -> np.random.Generator:
    return np.random.default_rng(seq)


# ---------------------------------------------------------------- metrics rows

def _row(global_step, task_index, ret, count, stats=None, report=None, wall=None) -> dict:
    stats = stats or {}
    return {
        "global_step": int(global_step),
        "task_index": int(task_index),
        "episode_return": ret,
        "episode_count": int(count),
        "L_main": stats.get("L_main"),
        "L_churn": stats.get("L_churn"),
        "lambda": stats.get("lambda"),
        "measured_churn": stats.get("measured_churn"),
        "srank": None if report is None else report.srank,
        "offdiag_abs_sum": None if report is None else report.offdiag_abs_sum,
        "diag_abs_sum": None if report is None else report.diag_abs_sum,
        "wall_time": wall,
    }


class _Recorder:
    def __init__(self, out_dir: Optional[Path], config: RunConfig):
        self.out_dir = out_dir
        self.diag = config.diagnostics
        self.rows = []
        self.t0 = time.perf_counter()

    def wall(self):
        return time.perf_counter() - self.t0 if self.diag.record_wall_time else None

    def wants_ntk(self, iteration: int) -> bool:
        return self.diag.ntk_every > 0 and iteration % self.diag.ntk_every == 0

    def wants_probe(self, iteration: int) -> bool:
        return self.diag.churn_probe_every > 0 and iteration % self.diag.churn_probe_every == 0

    def ntk(self, grads, iteration: int, task: int):
        report = make_report(grads, iteration, task)
        if self.diag.dump_ntk and self.out_dir is not None:
            np.savetxt(self.out_dir / f"ntk_iter{iteration}.csv", report.matrix, fmt="%.17g", delimiter=",")
        return report


# ---------------------------------------------------------------- PPO loop

def _policy_config(config: RunConfig, obs_dim: int, n_actions: int) -> MLPConfig:
    n = config.network
    use_ln = n.use_layer_norm or config.method == "layer_norm"
    value_head = 1 if n.critic == "shared" else None
    return MLPConfig((obs_dim, *n.hidden, n_actions), activation=n.activation, use_layer_norm=use_ln,
                     init_scheme=n.init_scheme, value_head=value_head)


def _run_ppo(config: RunConfig, seq: TaskSequence, rec: _Recorder):
    cfg = config.ppo
    spec = seq[0].env
    net_config = _policy_config(config, spec.obs_dim, spec.action_count)
    critic_config = None
    if config.network.critic == "separate":
        critic_config = dataclasses.replace(net_config, layer_sizes=(*net_config.layer_sizes[:-1], 1),
                                            value_head=None, output_gain=1.0)
    churn = churn_for(config)
    baseline = dataclasses.replace(config.baseline, mechanism=mechanism_for(config.method))
    iters_per_task = seq[0].budget_N // cfg.interval
    net = opt = None
    for seg_start, seg_stop in _segments(config, seq.k):
        s = _streams(config.seed, seg_start)
        if config.method == "oracle" and net is not None:
            net = oracle_reset(net, opt, s["net"], is_switch_step=True)
        else:
            net = init_network(net_config, s["net"])
            opt = Optimizer(net_config.n_params, "adam", cfg.lr)
        critic = None
        if critic_config is not None:
            critic = (init_network(critic_config, s["critic"]), Optimizer(critic_config.n_params, "adam", cfg.lr))
        rng_act, rng_upd, rng_env, rng_probe, rng_ntk = (_rng(s[n]) for n in ("action", "update", "env", "probe", "ntk"))
        runner = TaskRunner(seq[seg_start], rng_env)
        chain_state = ChainState() if churn is not None else None
        for j in range(seg_start, seg_stop):
            if j != seg_start:
                runner.switch_task(seq[j])
                if config.method == "adam_rel":
                    opt.on_task_switch("adam_rel")
                    if critic is not None:
                        critic[1].on_task_switch("adam_rel")
            for it in range(iters_per_task):
                iteration = j * iters_per_task + it
                buf = collect_rollout(net, runner, cfg.interval, rng_act,
                                      value_net=None if critic is None else critic[0])
                batch = prepare(buf, cfg)
                report = None
                if rec.wants_ntk(iteration):
                    m = min(config.diagnostics.ntk_minibatches, len(batch))
                    probe = policy_gradient_fn(batch, cfg, config.diagnostics.ntk_full_objective)
                    grads = collect_minibatch_grads(net, len(batch), m, probe, rng_ntk)
                    report = rec.ntk(grads, iteration, j)
                stats = ppo_update(net, opt, batch, cfg, rng_upd, churn=churn, chain_state=chain_state,
                                   baseline=baseline, probe_rng=rng_probe if rec.wants_probe(iteration) else None,
                                   critic=critic)
                if baseline.mechanism == "redo" and (iteration + 1) % baseline.redo_interval == 0:
                    new_net, count, touched = redo_recycle(net, batch.observations, baseline.redo_tau,
                                                           np.random.SeedSequence([config.seed, 0x5EED, iteration]))
                    net.set_params(new_net.params)
                    opt.zero_moments(touched)
                    log.info("recycled %d dormant units at iteration %d", count, iteration)
                rets = buf.episode_returns
                if not rec.wants_probe(iteration):
                    stats["measured_churn"] = None
                if churn is None:
                    stats["L_churn"] = stats["lambda"] = None
                rec.rows.append(_row(seq.task_start(j) + (it + 1) * cfg.interval, j,
                                     float(np.mean(rets)) if rets else None, len(rets), stats, report, rec.wall()))


# ---------------------------------------------------------------- DQN loop

def _run_dqn(config: RunConfig, seq: TaskSequence, rec: _Recorder):
    cfg = config.dqn
    spec = seq[0].env
    n = config.network
    net_config = MLPConfig((spec.obs_dim, *n.hidden, spec.action_count), activation=n.activation,
                           use_layer_norm=n.use_layer_norm or config.method == "layer_norm",
                           init_scheme=n.init_scheme, output_gain=1.0)
    churn = churn_for(config)
    baseline = dataclasses.replace(config.baseline, mechanism=mechanism_for(config.method))
    budget = seq[0].budget_N
    decay = cfg.eps_decay_steps or budget
    learner = None
    for seg_start, seg_stop in _segments(config, seq.k):
        s = _streams(config.seed, seg_start)
        if learner is not None and config.method == "oracle":
            net = oracle_reset(learner.q_net, learner.optimizer, s["net"], is_switch_step=True)
        else:
            net = init_network(net_config, s["net"])
        learner = DQNLearner(net, Optimizer(net_config.n_params, "adam", cfg.lr), cfg, spec.obs_dim,
                             churn=churn, baseline=baseline)
        rng_act, rng_upd, rng_env, rng_probe, rng_ntk = (_rng(s[k]) for k in ("action", "update", "env", "probe", "ntk"))
        runner = TaskRunner(seq[seg_start], rng_env)
        seg_step = 0
        for j in range(seg_start, seg_stop):
            if j != seg_start:
                runner.switch_task(seq[j])
                if config.method == "adam_rel":
                    learner.optimizer.on_task_switch("adam_rel")
            window = {"rets": [], "stats": []}
            for t in range(budget):
                iteration = (seq.task_start(j) + t) // cfg.log_interval
                obs = runner.obs
                a = learner.act(obs, epsilon_at(seg_step, cfg, decay), rng_act)
                next_obs, r, term, trunc = runner.step(a)
                learner.replay.add(obs, a, r, next_obs, term)
                if term or trunc:
                    window["rets"].append(runner.episode_return)
                    runner.start_episode()
                seg_step += 1
                if seg_step % cfg.train_interval == 0:
                    st = learner.update(rng_upd, rng_probe if rec.wants_probe(iteration) else None)
                    if st is not None:
                        window["stats"].append(st)
                if (t + 1) % cfg.log_interval == 0:
                    if baseline.mechanism == "redo" and (iteration + 1) % baseline.redo_interval == 0 \
                            and len(learner.replay) > 0:
                        X = learner.replay.obs[:min(len(learner.replay), 1024)]
                        new_net, count, touched = redo_recycle(learner.q_net, X, baseline.redo_tau,
                                                               np.random.SeedSequence([config.seed, 0x5EED, iteration]))
                        learner.q_net.set_params(new_net.params)
                        learner.optimizer.zero_moments(touched)
                    report = None
                    if rec.wants_ntk(iteration) and len(learner.replay) >= cfg.batch * config.diagnostics.ntk_minibatches:
                        report = rec.ntk(_dqn_ntk_grads(learner, config, rng_ntk), iteration, j)
                    rec.rows.append(_dqn_row(seq.task_start(j) + t + 1, j, window, churn, report, rec))
                    window = {"rets": [], "stats": []}


def _dqn_ntk_grads(learner: DQNLearner, config: RunConfig, rng):
    m = config.diagnostics.ntk_minibatches
    replay = learner.replay
    rows = replay.sample_indices(rng, learner.config.batch * m)
    y = double_dqn_target(learner.q_net, learner.target_net, replay.rewards[rows], replay.next_obs[rows],
                          replay.dones[rows], learner.config.gamma)

    def grad(net, idx):
        return td_loss_and_grad(net, replay.obs[rows[idx]], replay.actions[rows[idx]], y[idx])[1]
    return collect_minibatch_grads(learner.q_net, len(rows), m, grad, rng)


def _dqn_row(step, task, window, churn, report, rec):
    sts = window["stats"]

    def mean(key):
        vals = [s[key] for s in sts if s[key] is not None and not math.isnan(s[key])]
        return float(np.mean(vals)) if vals else None
    stats = {"L_main": mean("L_main"), "measured_churn": mean("measured_churn")}
    if churn is not None:
        stats.update(L_churn=mean("L_churn"), **{"lambda": mean("lambda")})
    rets = window["rets"]
    return _row(step, task, float(np.mean(rets)) if rets else None, len(rets), stats, report, rec.wall())


# ---------------------------------------------------------------- supervised loop

def _load_sl_data(config: RunConfig):
    s = config.sl
    if (s.images_path is None) != (s.labels_path is None):
        raise ConfigurationError("images_path and labels_path must be given together")
    if s.images_path is not None:
        return load_idx(s.images_path, s.labels_path)
    return load_fixture()


def _run_sl(config: RunConfig, rec: _Recorder):
    s = config.sl
    dataset = _load_sl_data(config)
    sequence = make_sl_sequence(dataset, s.kind, s.num_tasks, s.per_task_n,
                                np.random.SeedSequence([config.seed, 0xC0FFEE]), s.epochs_per_task)
    plugin = {"c_chain": "chain", "proj_only": "chain", "orth_only": "chain",
              "l2_init": "l2_init", "weight_clip": "weight_clip"}.get(config.method, "none")
    churn = churn_for(config) or config.churn
    sl_config = SLConfig(hidden=s.hidden, activation=s.activation, lr=s.lr, batch=s.batch, plugin=plugin,
                         churn=churn, baseline=config.baseline)
    net_config = MLPConfig((dataset.images.shape[1], *s.hidden, dataset.classes), activation=s.activation,
                           use_layer_norm=config.network.use_layer_norm or config.method == "layer_norm",
                           init_scheme=config.network.init_scheme)
    per_task = [len(t.subset_indices) * t.epochs_per_task for t in sequence]
    starts = np.concatenate([[0], np.cumsum(per_task)])
    net = opt = None
    for seg_start, seg_stop in _segments(config, len(sequence)):
        st = _streams(config.seed, seg_start)
        if config.method == "oracle" and net is not None:
            net = oracle_reset(net, opt, st["net"], is_switch_step=True)
        else:
            net = init_network(net_config, st["net"])
            opt = Optimizer(net_config.n_params, "adam", s.lr)
        rng_upd, rng_ntk = _rng(st["update"]), _rng(st["ntk"])
        chain_state = ChainState()
        for j in range(seg_start, seg_stop):
            if j != seg_start and config.method == "adam_rel":
                opt.on_task_switch("adam_rel")
            task = sequence[j]
            X, y = task_data(dataset, task)
            n = len(y)

            def on_epoch(epoch, acc, loss, lam, j=j, X=X, y=y, n=n, task=task):
                iteration = j * task.epochs_per_task + epoch
                report = None
                if rec.wants_ntk(iteration):
                    m = min(config.diagnostics.ntk_minibatches, n)
                    grads = collect_minibatch_grads(
                        net, n, m, lambda net_, idx: cross_entropy_and_grad(net_, X[idx], y[idx])[1], rng_ntk)
                    report = rec.ntk(grads, iteration, j)
                stats = {"L_main": loss}
                if plugin == "chain":
                    stats.update(L_churn=None, **{"lambda": lam})
                row = _row(starts[j] + (epoch + 1) * n, j, acc, 1, stats, report, rec.wall())
                rec.rows.append(row)

            train_sl(net, [task], opt, plugin, sl_config, dataset, rng_upd, chain_state=chain_state,
                     on_epoch=on_epoch)


# ---------------------------------------------------------------- entry point

def run_experiment(config: RunConfig, out_dir=None) -> list:
    """Run the whole task sequence; writes ``manifest.json`` and ``metrics.csv`` when ``out_dir`` is given."""
    validate(config)
    out = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
    rec = _Recorder(out, config)
    if config.agent == "sl":
        sequence_info = {"kind": config.sl.kind}
        _run_sl(config, rec)
    else:
        seq = resolve_sequence(config)
        sequence_info = seq.to_dict()
        if config.agent == "ppo":
            _run_ppo(config, seq, rec)
        else:
            _run_dqn(config, seq, rec)
    if out is not None:
        columns = _columns(config)
        manifest = {"config": config.to_dict(), "seed": config.seed, "code_version": __version__,
                    "task_sequence": sequence_info, "columns": columns}
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        emit_csv(_rename(rec.rows, columns), out / "metrics.csv", columns)
    return rec.rows


def _columns(config: RunConfig) -> list:
    if config.agent == "sl":
        return ["accuracy" if c == "episode_return" else c for c in METRICS_COLUMNS]
    return list(METRICS_COLUMNS)


def _rename(rows, columns):
    if "accuracy" not in columns:
        return rows
    return [{("accuracy" if k == "episode_return" else k): v for k, v in r.items()} for r in rows]


# ---------------------------------------------------------------- CSV

def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return "%.10g" % float(value)
    return str(value)


def emit_csv(rows, path, columns=None) -> None:
    """RFC 4180 CSV with a header row; floats carry 10 significant digits, ``None`` is empty."""
    columns = list(columns or METRICS_COLUMNS)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\r\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row.get(c)) for c in columns])


def _parse(text: str):
    if text == "":
        return None
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def read_csv(path) -> list:
    with open(path, newline="") as fh:
        return [{k: _parse(v) for k, v in row.items()} for row in csv.DictReader(fh)]


# ---------------------------------------------------------------- performance and aggregation

def avg_performance(rows, k: int, N: Optional[int] = None):
    """Per-task mean episode return and their mean over tasks.

    Each row is a batch of ``episode_count`` episodes (1 when the column is
    absent) whose mean return is ``episode_return``; episodes count toward the
    task in which they end, read from ``global_step`` when the per-task budget
    ``N`` is given and from ``task_index`` otherwise.
    """
    if k < 1:
        raise InputError("k must be >= 1")
    totals = np.zeros(k)
    counts = np.zeros(k)
    for row in rows:
        ret = row.get("episode_return", row.get("accuracy"))
        count = row.get("episode_count", 1)
        if ret is None or not count:
            continue
        if N is not None:
            task = (int(row["global_step"]) - 1) // N
        else:
            task = int(row["task_index"])
        if not 0 <= task < k:
            raise InputError(f"row at step {row.get('global_step')} lies outside the {k}-task sequence")
        totals[task] += float(ret) * count
        counts[task] += count
    per_task = np.full(k, np.nan)
    ok = counts > 0
    per_task[ok] = totals[ok] / counts[ok]
    if not ok.all():
        log.warning("no completed episodes in task(s) %s; their J is undefined",
                    np.flatnonzero(~ok).tolist())
    overall = float(np.mean(per_task[ok])) if ok.any() else float("nan")
    return overall, per_task


def plasticity_gaps(per_task_J_method, per_task_J_oracle) -> np.ndarray:
    m = np.asarray(per_task_J_method, dtype=np.float64)
    o = np.asarray(per_task_J_oracle, dtype=np.float64)
    if m.shape != o.shape or m.ndim != 1:
        raise LengthError("method and oracle series must have equal length")
    return o - m


def detect_plasticity_loss(per_task_J_method, per_task_J_oracle) -> np.ndarray:
    """Flag tasks whose gap to the oracle is wider than the first task's gap."""
    gaps = plasticity_gaps(per_task_J_method, per_task_J_oracle)
    flags = gaps > gaps[0] if gaps.size else np.zeros(0, dtype=bool)
    return np.asarray(flags, dtype=bool)


def iqm(scores) -> float:
    return float(trim_mean(np.asarray(scores, dtype=np.float64), 0.25))


def optimality_gap(scores, target: float = 1.0) -> float:
    return float(np.mean(np.maximum(0.0, target - np.asarray(scores, dtype=np.float64))))


def summary_stats(scores) -> dict:
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise InputError("no scores to aggregate")
    return {"mean": float(np.mean(s)), "median": float(np.median(s)), "iqm": iqm(s),
            "optimality_gap": optimality_gap(s)}


@dataclass
class RunResult:
    method: str
    setting: str
    seed: int
    J: float
    per_task: np.ndarray
    path: Optional[Path] = None


def load_run(run_dir) -> RunResult:
    run_dir = Path(run_dir)
    manifest = json.loads((run_dir / "manifest.json").read_text())
    config = RunConfig.from_dict(manifest["config"])
    rows = read_csv(run_dir / "metrics.csv")
    if config.agent == "sl":
        k = n_tasks(config)
        setting = f"sl:{config.sl.kind}"
        J, per_task = avg_performance(rows, k)
    else:
        seq = resolve_sequence(config)
        setting = f"{config.agent}:{config.env.env_id}"
        J, per_task = avg_performance(rows, seq.k, seq[0].budget_N)
    return RunResult(config.method, setting, config.seed, J, per_task, run_dir)


def find_runs(paths) -> list:
    found = []
    for p in paths:
        p = Path(p)
        if (p / "manifest.json").exists():
            found.append(p)
        else:
            found.extend(sorted(m.parent for m in p.rglob("manifest.json")))
    return found


def aggregate(run_dirs, normalization_bounds: Optional[dict] = None) -> list:
    """Normalized-score statistics per method over seeds and settings.

    Scores are normalized per setting by ``(J - lo) / (hi - lo)`` with
    ``(lo, hi)`` from ``normalization_bounds[setting]`` or, by default, the
    mean J of the vanilla and oracle runs of that setting.
    """
    results = [load_run(d) for d in run_dirs]
    if not results:
        raise InputError("no runs to aggregate")
    bounds = dict(normalization_bounds or {})
    by_setting = {}
    for r in results:
        by_setting.setdefault(r.setting, []).append(r)
    scores = {}
    for setting, runs in sorted(by_setting.items()):
        if setting in bounds:
            lo, hi = bounds[setting]
        else:
            van = [r.J for r in runs if r.method == "vanilla"]
            orc = [r.J for r in runs if r.method == "oracle"]
            if not van or not orc:
                log.warning("%s: vanilla or oracle runs missing; scores left unnormalized", setting)
                lo, hi = 0.0, 1.0
            else:
                lo, hi = float(np.mean(van)), float(np.mean(orc))
        if hi == lo:
            log.warning("%s: degenerate normalization bounds; scores left unnormalized", setting)
            lo, hi = 0.0, 1.0
        for r in runs:
            scores.setdefault(r.method, []).append((r.J - lo) / (hi - lo))
    out = []
    for method in sorted(scores):
        vals = [v for v in scores[method] if not math.isnan(v)]
        if len(vals) < len(scores[method]):
            log.warning("%s: %d run(s) with undefined J skipped", method, len(scores[method]) - len(vals))
        if not vals:
            continue
        out.append({"method": method, "runs": len(vals), **summary_stats(vals)})
    return out
