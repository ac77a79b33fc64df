"""Seeded experiment loop.

Rollouts feed whole episodes into the trainer, one training step runs per
finished episode, and a metrics row is appended every log_interval
environment steps.  Output directory layout:

    resolved_config.json   config with every default materialized
    metrics.csv            versioned header, one row per logging interval
    summary.json           final greedy action, adaptation step, counters
    checkpoint.npz         parameter vectors keyed by (module, k, role)

Reruns with an identical config and seed produce byte-identical CSVs.
"""

import dataclasses
import json
import os
from dataclasses import dataclass

import numpy as np

from s2qlab.backend import backend_name
from s2qlab.config import RunConfig
from s2qlab.envs import (DecPomdpSpec, EpisodeRunner, MatrixGameSpec,
                         coord_reach_spec, flat_action, load_spec,
                         matrix_game_fig1, matrix_to_dec_pomdp)
from s2qlab.errors import LoadError
from s2qlab.learner import Episode, EnvMeta, NeuralTrainer, TabularTrainer
from s2qlab.valuenets import build_window

CSV_HEADER_PREFIX = "step,episode,epsilon,episode_return,critic_loss,successive_loss"


def metrics_header(K: int) -> str:
    cols = [CSV_HEADER_PREFIX]
    cols += [f"greedy_k{k}" for k in range(K + 1)]
    cols += [f"qstar_k{k}" for k in range(K + 1)]
    cols += [f"count_k{k}" for k in range(K + 1)]
    cols += ["ce", "mse", "agreement"]
    return ",".join(cols)


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


@dataclass
class EnvBundle:
    """Environment plus the payoff-shift bookkeeping for the matrix game."""

    kind: str                       # "matrix" | "spec"
    spec_pre: DecPomdpSpec
    spec_post: DecPomdpSpec = None
    matrix: MatrixGameSpec = None
    shift_at_step: int = 0

    def spec_at(self, env_step: int) -> DecPomdpSpec:
        if self.kind == "matrix" and env_step >= self.shift_at_step:
            return self.spec_post
        return self.spec_pre

    @property
    def post_shift_optimum(self) -> int:
        q = self.matrix.payoff_post
        flat = np.array([q[a0, a1] for a1 in range(self.matrix.n_actions)
                         for a0 in range(self.matrix.n_actions)])
        # flat index a0 + n*a1 iterates a0 fastest, matching the contract
        order = np.lexsort((np.arange(len(flat)), -flat))
        return int(order[0])


def build_env(cfg: RunConfig) -> EnvBundle:
    if cfg.env == "matrix_fig1":
        game = matrix_game_fig1(cfg.preset, cfg.off_diagonal,
                                shift_at_step=cfg.steps_pre_shift)
        return EnvBundle(kind="matrix",
                         spec_pre=matrix_to_dec_pomdp(game.payoff_pre, "matrix_pre"),
                         spec_post=matrix_to_dec_pomdp(game.payoff_post, "matrix_post"),
                         matrix=game, shift_at_step=game.shift_at_step)
    if cfg.env == "coord_reach":
        return EnvBundle(kind="spec", spec_pre=coord_reach_spec())
    if not os.path.exists(cfg.env):
        raise LoadError(f"config.env: no such spec file {cfg.env!r}")
    return EnvBundle(kind="spec", spec_pre=load_spec(cfg.env))


def resolve_config(cfg: RunConfig, bundle: EnvBundle) -> RunConfig:
    """Materialize env-dependent defaults (gamma, history window, step count)."""
    updates = {}
    if cfg.gamma is None:
        updates["gamma"] = float(bundle.spec_pre.gamma)
    if cfg.history_window is None:
        updates["history_window"] = 1 if bundle.kind == "matrix" else 4
    return dataclasses.replace(cfg, **updates) if updates else cfg


def total_steps_of(cfg: RunConfig, bundle: EnvBundle) -> int:
    if bundle.kind == "matrix":
        return cfg.steps_pre_shift + cfg.steps_post_shift
    return cfg.total_steps


@dataclass
class RunResult:
    summary: dict
    trainer: object
    bundle: EnvBundle
    cfg: RunConfig
    out_dir: str = None


class _RolloutState:
    """Per-episode buffers from which Episode arrays are assembled."""

    def __init__(self, spec: DecPomdpSpec, history_window: int):
        self.spec = spec
        self.H = history_window
        self.states = []
        self.obs_seqs = [[] for _ in range(spec.n_agents)]
        self.act_seqs = [[] for _ in range(spec.n_agents)]
        self.rew_seqs = [[] for _ in range(spec.n_agents)]
        self.windows = []
        self.actions = []
        self.rewards = []
        self.bootstrap = []

    def begin(self, state, obs):
        self.states.append(state)
        for i in range(self.spec.n_agents):
            self.obs_seqs[i].append(obs[i])
        self.windows.append(self.current_windows())

    def current_windows(self) -> np.ndarray:
        return np.stack([
            build_window(self.obs_seqs[i], self.act_seqs[i], self.rew_seqs[i],
                         self.H, self.spec.n_actions)
            for i in range(self.spec.n_agents)])

    def record(self, transition):
        self.actions.append(transition.joint_action)
        self.rewards.append(transition.reward)
        self.bootstrap.append(0.0 if self.spec.absorbing[transition.next_state_index]
                              else 1.0)
        self.states.append(transition.next_state_index)
        for i in range(self.spec.n_agents):
            self.obs_seqs[i].append(transition.next_observations[i])
            self.act_seqs[i].append(transition.joint_action[i])
            self.rew_seqs[i].append(transition.reward)
        self.windows.append(self.current_windows())

    def to_episode(self) -> Episode:
        states = np.array(self.states, dtype=np.int64)
        actions = np.array(self.actions, dtype=np.int64)
        flats = np.array([flat_action(a, self.spec.n_actions) for a in self.actions],
                         dtype=np.int64)
        feats = np.stack([self.spec.state_features(s) for s in self.states])
        return Episode(states=states, state_feats=feats,
                       windows=np.stack(self.windows), actions=actions,
                       flats=flats, rewards=np.array(self.rewards),
                       bootstrap=np.array(self.bootstrap),
                       episode_return=float(np.sum(self.rewards)))


def build_trainer(cfg: RunConfig, bundle: EnvBundle, rng: np.random.Generator):
    spec = bundle.spec_pre
    meta = EnvMeta(n_agents=spec.n_agents, n_actions=spec.n_actions,
                   obs_len=spec.obs_len, state_len=spec.state_feature_len)
    if cfg.mode == "tabular":
        return TabularTrainer(cfg, meta, spec.n_states, rng)
    return NeuralTrainer(cfg, meta, rng)


def state_probe_windows(spec: DecPomdpSpec, s: int, history_window: int):
    """Zero-history windows at state s (first-step observation, no past)."""
    return np.stack([
        build_window([spec.observation[s, i]], [], [], history_window,
                     spec.n_actions)
        for i in range(spec.n_agents)])


def _probe_inputs(spec: DecPomdpSpec, history_window: int):
    """Canonical probe: the lowest-index initial state with zero history."""
    s = int(np.argmax(spec.initial_state_dist > 0))
    return s, state_probe_windows(spec, s, history_window), spec.state_features(s)


def run(cfg: RunConfig, out_dir: str = None, write_outputs: bool = True) -> RunResult:
    bundle = build_env(cfg)
    cfg = resolve_config(cfg, bundle)
    cfg.validate()
    out_dir = out_dir or cfg.out_dir

    ss = np.random.SeedSequence(cfg.seed)
    init_ss, env_ss, behavior_ss, buffer_ss = ss.spawn(4)
    rng_init = np.random.default_rng(init_ss)
    rng_env = np.random.default_rng(env_ss)
    rng_behavior = np.random.default_rng(behavior_ss)
    rng_buffer = np.random.default_rng(buffer_ss)

    trainer = build_trainer(cfg, bundle, rng_init)
    tabular = isinstance(trainer, TabularTrainer)
    total = total_steps_of(cfg, bundle)
    probe_state, probe_windows, probe_feat = _probe_inputs(
        bundle.spec_pre, cfg.history_window)

    target_flat = bundle.post_shift_optimum if bundle.kind == "matrix" else None
    adapted_streak = 0
    adaptation_step = None
    pre_shift_tracked = None

    header = metrics_header(trainer.K)
    rows = []
    window_returns = []
    window_k_counts = np.zeros(trainer.K + 1, dtype=np.int64)
    window_train = {"critic_loss": [], "successive_loss": [], "ce": [],
                    "mse": [], "agreement": []}
    episodes_done = 0
    env_step = 0
    runner = None
    rollout = None
    ep_state = None
    stop = False

    def probe_tracked():
        if tabular:
            tracked, qvals = trainer.tracked_probe_state(probe_state)
        else:
            tracked, qvals = trainer.tracked_probe(probe_windows, probe_feat)
        return tracked, qvals

    def window_mean(values) -> float:
        arr = np.array(values, dtype=np.float64)
        finite = arr[np.isfinite(arr)]
        return float(finite.mean()) if finite.size else np.nan

    def flush_row():
        tracked, qvals = probe_tracked()
        ret = float(np.mean(window_returns)) if window_returns else np.nan
        agg = {key: window_mean(vals) for key, vals in window_train.items()}
        cells = [env_step, episodes_done, trainer_epsilon, ret,
                 agg["critic_loss"], agg["successive_loss"]]
        cells += [int(f) for f in tracked.flats]
        cells += [float(q) for q in qvals]
        cells += [int(c) for c in window_k_counts]
        cells += [agg["ce"], agg["mse"], agg["agreement"]]
        rows.append(",".join(_fmt(c) for c in cells))
        window_returns.clear()
        window_k_counts[:] = 0
        for v in window_train.values():
            v.clear()

    trainer_epsilon = cfg.epsilon_start
    while env_step < total and not stop:
        spec = bundle.spec_at(env_step)
        runner = EpisodeRunner(spec)
        state, obs = runner.reset(rng_env)
        rollout = _RolloutState(spec, cfg.history_window)
        rollout.begin(state, obs)
        ep_state = trainer.begin_episode(rng_behavior)
        while not runner.done and env_step < total and not stop:
            if tabular:
                action, info = trainer.act_training(runner.state, env_step,
                                                    ep_state, rng_behavior)
            else:
                windows = rollout.current_windows()
                action, info = trainer.act_training(
                    windows, spec.state_features(runner.state), env_step,
                    ep_state, rng_behavior)
            trainer_epsilon = info["epsilon"]
            k = info.get("k", 0)
            for kk in (k if isinstance(k, tuple) else (k,)):
                window_k_counts[kk] += 1
            tr = runner.step(action, rng_env)
            rollout.record(tr)

            if target_flat is not None:
                greedy0 = info["greedy0_flat"]
                if env_step >= bundle.shift_at_step:
                    if greedy0 == target_flat:
                        adapted_streak += 1
                        if adapted_streak == cfg.adaptation_sustain and \
                                adaptation_step is None:
                            adaptation_step = env_step - bundle.shift_at_step \
                                - cfg.adaptation_sustain + 1
                            if cfg.stop_when_adapted:
                                stop = True
                    else:
                        adapted_streak = 0
                elif env_step == bundle.shift_at_step - 1:
                    tracked, _ = probe_tracked()
                    pre_shift_tracked = [int(f) for f in tracked.flats]

            env_step += 1
            if env_step % cfg.log_interval == 0:
                flush_row()
        episode = rollout.to_episode()
        window_returns.append(episode.episode_return)
        episodes_done += 1
        trainer.observe(episode)
        metrics = trainer.train(rng_buffer)
        for key in window_train:
            window_train[key].append(metrics[key])

    if tabular:
        final_greedy = trainer.act_eval(probe_state)
    else:
        final_greedy = trainer.act_eval(probe_windows)
    summary = {
        "algorithm": cfg.algorithm,
        "variant": cfg.variant,
        "mode": cfg.mode,
        "seed": cfg.seed,
        "env": cfg.env,
        "backend": backend_name(),
        "env_steps": env_step,
        "episodes": episodes_done,
        "train_steps": trainer.train_steps,
        "incidents": trainer.incidents,
        "final_greedy_k0": list(final_greedy),
        "final_greedy_k0_flat": flat_action(final_greedy, bundle.spec_pre.n_actions),
        "pre_shift_tracked": pre_shift_tracked,
        "post_shift_optimum": target_flat,
        "adapted": adaptation_step is not None,
        "adaptation_step": adaptation_step,
    }

    if write_outputs:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "resolved_config.json"), "w",
                  encoding="utf-8") as fh:
            json.dump(cfg.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")
        with open(os.path.join(out_dir, "metrics.csv"), "w", encoding="utf-8",
                  newline="") as fh:
            fh.write(header + "\n")
            for row in rows:
                fh.write(row + "\n")
        with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=1, sort_keys=True)
            fh.write("\n")
        save_checkpoint(os.path.join(out_dir, "checkpoint.npz"), cfg, trainer)
    return RunResult(summary=summary, trainer=trainer, bundle=bundle, cfg=cfg,
                     out_dir=out_dir if write_outputs else None)


def save_checkpoint(path: str, cfg: RunConfig, trainer):
    arrays = {f"param:{key}": store.values
              for key, store in trainer.param_stores().items()}
    if isinstance(trainer, TabularTrainer):
        tables = trainer.tables()
        arrays["table:q_star"] = tables["q_star"]
        arrays["table:q_sub"] = tables["q_sub"]
    meta = json.dumps({"config": cfg.to_dict()}, sort_keys=True)
    np.savez(path, __meta__=np.frombuffer(meta.encode("utf-8"), dtype=np.uint8),
             **arrays)


def load_checkpoint(path: str):
    """Rebuild a trainer (evaluation-ready) from a checkpoint file."""
    from s2qlab.config import config_from_dict
    data = np.load(path)
    meta = json.loads(bytes(data["__meta__"]).decode("utf-8"))
    cfg = config_from_dict(meta["config"])
    bundle = build_env(cfg)
    cfg = resolve_config(cfg, bundle)
    trainer = build_trainer(cfg, bundle, np.random.default_rng(0))
    if isinstance(trainer, TabularTrainer):
        trainer.q_star[:] = data["table:q_star"]
        trainer.q_sub[:] = data["table:q_sub"]
        trainer.q_star_targ[:] = trainer.q_star
    else:
        for key, store in trainer.param_stores().items():
            store.values[:] = data[f"param:{key}"]
    return cfg, trainer, bundle
