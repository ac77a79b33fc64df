"""Replay and training: critic TD loss, the successive suppressed-target
loss with its two-case weighting, target maintenance, ablation switches,
and an exact-table mode used for oracle comparisons.

The successive target for sub-value k is y - alpha * [a in tracked set
up to k-1] * max(Q_targ, C) (the floor is optional); tracked sets are
recomputed from the current online nets at train time, never replayed
from storage, so the learned fixed point matches the closed-form one the
oracle module verifies.
"""

import logging
from dataclasses import dataclass

import numpy as np

from s2qlab import comm as comm_mod
from s2qlab import diffcore
from s2qlab.behavior import (BehaviorConfig, begin_episode, epsilon_at,
                             select_k, softmax_p)
from s2qlab.diffcore import AdamConfig, ApproximatorSpec
from s2qlab.envs import unflatten_action
from s2qlab.errors import ConfigError, UsageError
from s2qlab.valuenets import (AgentUtility, JointCritic, MonotonicMixer,
                              SubValueEnsemble, SumMixer, TrackedActionSet,
                              window_length)

log = logging.getLogger(__name__)

ALGORITHMS = ("s2q", "qmix", "wqmix", "s2q_comm")
# variants whose behavior policy samples k from the estimated distribution
ESTIMATED_SELECTION = ("full", "independent", "no_wTD")


@dataclass(frozen=True)
class SuppressionConfig:
    alpha: float = 1.0
    floor_c: float = 0.1
    use_floor: bool = False

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError("alpha must be nonnegative")
        if self.floor_c <= 0:
            raise ConfigError("floor_c must be positive")


@dataclass(frozen=True)
class WeightingConfig:
    w_c: float = 0.9

    def __post_init__(self):
        if not (0.0 < self.w_c <= 1.0):
            raise ConfigError("w_c must lie in (0, 1]")


def suppressed_target(y: float, a_flat: int, tracked_flats, q_targ_at_a: float,
                      cfg: SuppressionConfig) -> float:
    """Target for sub-value k given the tracked set up to k-1."""
    if a_flat not in tracked_flats:
        return y
    base = max(q_targ_at_a, cfg.floor_c) if cfg.use_floor else q_targ_at_a
    return y - cfg.alpha * base


def weight_wk(k: int, q_star_at_a: float, q_sub_at_a: float, y: float,
              q_targ_at_a: float, a_flat: int, tracked_all_flats,
              max_tracked_q_star: float, supp: SuppressionConfig,
              cfg: WeightingConfig) -> float:
    """Two-case weighting: full weight when the update pushes toward the
    consistent optimum (k=0) or the sub-value underestimates the
    suppressed comparator (k>=1); w_c otherwise."""
    if k == 0:
        return 1.0 if q_star_at_a >= max_tracked_q_star else cfg.w_c
    indicator = 1.0 if a_flat in tracked_all_flats[:k] else 0.0
    comparator = y - supp.alpha * indicator * q_targ_at_a
    return 1.0 if q_sub_at_a < comparator else cfg.w_c


@dataclass
class Episode:
    """One finished rollout; windows include the post-terminal slot L."""

    states: np.ndarray        # (L+1,) int
    state_feats: np.ndarray   # (L+1, state_len)
    windows: np.ndarray       # (L+1, n_agents, window_len)
    actions: np.ndarray       # (L, n_agents) int
    flats: np.ndarray         # (L,) int
    rewards: np.ndarray       # (L,)
    bootstrap: np.ndarray     # (L,) float: 0 when the next state is absorbing
    episode_return: float

    @property
    def length(self):
        return len(self.rewards)


@dataclass
class TransitionBatch:
    states: np.ndarray
    state_feats: np.ndarray
    next_states: np.ndarray
    next_state_feats: np.ndarray
    windows: np.ndarray
    next_windows: np.ndarray
    actions: np.ndarray
    flats: np.ndarray
    rewards: np.ndarray
    bootstrap: np.ndarray

    @property
    def size(self):
        return len(self.rewards)


class ReplayBuffer:
    """Ring of whole episodes in fixed-width slot arrays.

    Sampling is uniform over stored episodes (with replacement) and
    flattens the chosen episodes' transitions into one TransitionBatch.
    """

    def __init__(self, capacity: int, batch_size: int):
        if capacity <= 0 or batch_size <= 0:
            raise ConfigError("capacity and batch_size must be positive")
        self.capacity = capacity
        self.batch_size = batch_size
        self._n = 0
        self._next = 0
        self._slot = 0
        self._fields = None
        self._lengths = None

    def __len__(self):
        return self._n

    def _alloc(self, episode: Episode, slot: int):
        cap = self.capacity
        n_agents = episode.actions.shape[1]
        wl = episode.windows.shape[2]
        sl = episode.state_feats.shape[1]
        self._slot = slot
        self._fields = {
            "states": np.zeros((cap, slot), dtype=np.int64),
            "state_feats": np.zeros((cap, slot, sl)),
            "next_states": np.zeros((cap, slot), dtype=np.int64),
            "next_state_feats": np.zeros((cap, slot, sl)),
            "windows": np.zeros((cap, slot, n_agents, wl)),
            "next_windows": np.zeros((cap, slot, n_agents, wl)),
            "actions": np.zeros((cap, slot, n_agents), dtype=np.int64),
            "flats": np.zeros((cap, slot), dtype=np.int64),
            "rewards": np.zeros((cap, slot)),
            "bootstrap": np.zeros((cap, slot)),
        }
        self._lengths = np.zeros(cap, dtype=np.int64)

    def _grow(self, episode: Episode, slot: int):
        old_fields, old_slot = self._fields, self._slot
        self._alloc(episode, slot)
        for name, arr in self._fields.items():
            arr[:, :old_slot] = old_fields[name]

    def add(self, episode: Episode):
        L = episode.length
        if L == 0:
            return
        if self._fields is None:
            self._alloc(episode, L)
        elif L > self._slot:
            self._grow(episode, L)
        i = self._next
        f = self._fields
        f["states"][i, :L] = episode.states[:-1]
        f["state_feats"][i, :L] = episode.state_feats[:-1]
        f["next_states"][i, :L] = episode.states[1:]
        f["next_state_feats"][i, :L] = episode.state_feats[1:]
        f["windows"][i, :L] = episode.windows[:-1]
        f["next_windows"][i, :L] = episode.windows[1:]
        f["actions"][i, :L] = episode.actions
        f["flats"][i, :L] = episode.flats
        f["rewards"][i, :L] = episode.rewards
        f["bootstrap"][i, :L] = episode.bootstrap
        self._lengths[i] = L
        self._next = (self._next + 1) % self.capacity
        self._n = min(self._n + 1, self.capacity)

    def sample_batch(self, rng: np.random.Generator) -> TransitionBatch:
        if self._n == 0:
            raise UsageError("replay buffer is empty")
        idx = rng.integers(0, self._n, size=self.batch_size)
        mask = np.arange(self._slot)[None, :] < self._lengths[idx][:, None]
        f = self._fields
        return TransitionBatch(**{name: f[name][idx][mask] for name in f})


def _row_softmax(Q: np.ndarray, temperature: float) -> np.ndarray:
    z = Q / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _flats_to_actions(flats: np.ndarray, n_agents: int, n_actions: int) -> np.ndarray:
    out = np.empty((len(flats), n_agents), dtype=np.int64)
    rem = np.asarray(flats, dtype=np.int64).copy()
    for i in range(n_agents):
        out[:, i] = rem % n_actions
        rem //= n_actions
    return out


def _actions_to_flats(actions: np.ndarray, n_actions: int) -> np.ndarray:
    flats = np.zeros(actions.shape[0], dtype=np.int64)
    for i in range(actions.shape[1]):
        flats += actions[:, i] * n_actions ** i
    return flats


@dataclass
class EnvMeta:
    n_agents: int
    n_actions: int
    obs_len: int
    state_len: int


class NeuralTrainer:
    """Function-approximation learner for s2q / s2q_comm / qmix / wqmix."""

    def __init__(self, cfg, meta: EnvMeta, rng: np.random.Generator):
        if cfg.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {cfg.algorithm!r}")
        self.cfg = cfg
        self.meta = meta
        self.algorithm = cfg.algorithm
        self.is_s2q = self.algorithm in ("s2q", "s2q_comm")
        self.variant = cfg.variant if self.is_s2q else "no_soft"
        self.K = cfg.K if self.is_s2q else 0
        self.comm_augmented = self.algorithm == "s2q_comm"
        self.no_wtd = self.is_s2q and cfg.variant == "no_wTD"
        self.supp = SuppressionConfig(cfg.alpha, cfg.floor_c, cfg.use_floor)
        self.weighting = WeightingConfig(cfg.w_c)
        self.behavior_cfg = BehaviorConfig(cfg.temperature, cfg.epsilon_start,
                                           cfg.epsilon_end, cfg.epsilon_anneal_steps,
                                           cfg.fix_prob)
        self.adam = AdamConfig(cfg.learning_rate, cfg.beta1, cfg.beta2,
                               cfg.adam_eps, cfg.grad_clip_norm)
        latent_extra = cfg.latent_dim if self.comm_augmented else 0
        self.window_len_raw = window_length(meta.obs_len, meta.n_actions,
                                            cfg.history_window)
        wl = self.window_len_raw + latent_extra
        self.util_spec = ApproximatorSpec((wl, cfg.utility_hidden, meta.n_actions))
        utilities, mixers = [], []
        for _ in range(self.K + 1):
            utilities.append(AgentUtility(self.util_spec,
                                          diffcore.init_params(self.util_spec, rng),
                                          cfg.history_window, meta.n_actions))
            if cfg.mixer == "sum":
                mixers.append(SumMixer())
            else:
                mixers.append(MonotonicMixer(meta.state_len, meta.n_agents,
                                             cfg.mixer_embed, cfg.hyper_hidden, rng))
        self.ensemble = SubValueEnsemble(self.K, utilities, mixers)

        self.critic = None
        if self.algorithm == "wqmix" or (self.is_s2q and not self.no_wtd):
            self.critic = JointCritic(meta.state_len, meta.n_agents, meta.n_actions,
                                      cfg.critic_hidden, rng,
                                      cfg.target_update_interval)

        # target copy of sub-value 0, used where the TD source is Q_tot itself
        self.sub0_target = None
        if self.algorithm == "qmix" or self.no_wtd:
            self.sub0_target = self._snapshot_sub0()

        self.coder = None
        self.uses_estimate = self.is_s2q and self.variant in ESTIMATED_SELECTION
        if self.uses_estimate or self.comm_augmented:
            self.coder = comm_mod.LatentCoder(
                meta.n_agents * self.window_len_raw, cfg.latent_dim,
                meta.state_len, self.K + 1, cfg.coder_hidden, rng)

        self.buffer = ReplayBuffer(cfg.buffer_capacity, cfg.batch_size)
        self.train_steps = 0
        self.incidents = 0

    # -- construction helpers --------------------------------------------------

    def _snapshot_sub0(self):
        snap = {"utility": self.ensemble.utilities[0].params.copy()}
        for name, store in self.ensemble.mixers[0].param_stores().items():
            snap[f"mixer.{name}"] = store.copy()
        return snap

    def _refresh_targets(self):
        if self.critic is not None:
            self.critic.refresh_target()
        if self.sub0_target is not None:
            self.sub0_target["utility"].values[:] = self.ensemble.utilities[0].params.values
            for name, store in self.ensemble.mixers[0].param_stores().items():
                self.sub0_target[f"mixer.{name}"].values[:] = store.values

    def enable_comm_augmentation(self):
        if self.comm_augmented:
            return
        raise ConfigError("comm augmentation cannot be enabled mid-run; "
                          "construct the trainer with algorithm='s2q_comm'")

    @property
    def window_len(self):
        return self.util_spec.in_dim

    # -- evaluation primitives -------------------------------------------------

    def _augment(self, windows):
        """Append the shared latent when running comm-augmented."""
        if not self.comm_augmented:
            return windows
        if windows.ndim == 2:
            z = comm_mod.encode(self.coder, windows)
            return comm_mod.comm_augment(windows, z)
        B = windows.shape[0]
        Z, _ = comm_mod.encode_batch(self.coder, windows.reshape(B, -1))
        return np.concatenate(
            [windows, np.repeat(Z[:, None, :], windows.shape[1], axis=1)], axis=2)

    def _utilities_forward(self, k, windows3):
        B, N, _ = windows3.shape
        vals, cache = diffcore.forward_batch(
            self.util_spec, self.ensemble.utilities[k].params,
            windows3.reshape(B * N, -1))
        return vals.reshape(B, N, self.meta.n_actions), cache

    def _sub_values_at(self, k, vals, state_feats, flats, with_cache=False):
        B, N, A = vals.shape
        acts = _flats_to_actions(flats, N, A)
        U = vals[np.arange(B)[:, None], np.arange(N)[None, :], acts]
        Y, cache = self.ensemble.mixers[k].forward_batch(U, state_feats)
        if with_cache:
            return Y, U, acts, cache
        return Y

    def _sub0_target_values_at(self, windows3, state_feats, flats):
        B, N, _ = windows3.shape
        vals, _ = diffcore.forward_batch(self.util_spec,
                                         self.sub0_target["utility"],
                                         windows3.reshape(B * N, -1))
        vals = vals.reshape(B, N, self.meta.n_actions)
        acts = _flats_to_actions(flats, N, self.meta.n_actions)
        U = vals[np.arange(B)[:, None], np.arange(N)[None, :], acts]
        mixer = self.ensemble.mixers[0]
        if not mixer.has_params:
            return U.sum(axis=1)
        saved = mixer.params
        mixer.params = {name: self.sub0_target[f"mixer.{name}"] for name in saved}
        try:
            Y, _ = mixer.forward_batch(U, state_feats)
        finally:
            mixer.params = saved
        return Y

    def _td_source_online_at(self, vals0, state_feats, flats):
        """Online Q* (or sub-value 0 under no_wTD / qmix) at given actions."""
        if self.critic is not None:
            return self.critic.value_batch(state_feats, flats, use_target=False)
        return self._sub_values_at(0, vals0, state_feats, flats)

    def _td_source_target_at(self, windows3, state_feats, flats):
        if self.critic is not None:
            return self.critic.value_batch(state_feats, flats, use_target=True)
        return self._sub0_target_values_at(windows3, state_feats, flats)

    # -- acting ----------------------------------------------------------------

    def begin_episode(self, rng):
        return begin_episode(self.variant, self.behavior_cfg.fix_prob, rng)

    def tracked_probe(self, windows_raw, state_feat):
        """Tracked actions and TD-source values at one timestep (diagnostics)."""
        windows = self._augment(np.asarray(windows_raw, dtype=np.float64))
        W3 = windows[None, :, :]
        flats = []
        actions = []
        vals0 = None
        for k in range(self.K + 1):
            vals, _ = self._utilities_forward(k, W3)
            if k == 0:
                vals0 = vals
            a = tuple(int(x) for x in np.argmax(vals[0], axis=1))
            actions.append(a)
            flats.append(int(_actions_to_flats(
                np.array([a], dtype=np.int64), self.meta.n_actions)[0]))
        tracked = TrackedActionSet(actions=actions, flats=flats)
        feat = np.asarray(state_feat, dtype=np.float64)
        if self.critic is not None:
            S = np.tile(feat, (self.K + 1, 1))
            qvals = np.asarray(self.critic.value_batch(
                S, np.array(flats, dtype=np.int64), use_target=False))
        else:
            S1 = feat[None, :]
            qvals = np.array([
                float(self._sub_values_at(0, vals0, S1,
                                          np.array([f], dtype=np.int64))[0])
                for f in flats])
        return tracked, qvals

    def act_training(self, windows_raw, state_feat, env_step, ep_state, rng):
        """Behavior-policy action plus diagnostics for one rollout step."""
        windows_raw = np.asarray(windows_raw, dtype=np.float64)
        epsilon = epsilon_at(env_step, self.behavior_cfg)
        N, A = self.meta.n_agents, self.meta.n_actions
        k = 0
        if self.is_s2q:
            dist = None
            sample_needed = not (self.variant in ("full", "oracle")
                                 and ep_state.fixed_to_zero)
            if sample_needed and self.uses_estimate:
                z = comm_mod.encode(self.coder, windows_raw)
                _, dist = comm_mod.decode(self.coder, z)
            elif sample_needed and self.variant == "oracle":
                _, qvals = self.tracked_probe(windows_raw, state_feat)
                dist = softmax_p(qvals, self.behavior_cfg.temperature)
            k = select_k(dist, self.variant, ep_state, rng, self.K, N)
        windows = self._augment(windows_raw)
        ks = (k,) * N if np.ndim(k) == 0 else tuple(k)
        vals = {}
        for kk in set(ks) | {0}:
            v, _ = self._utilities_forward(kk, windows[None, :, :])
            vals[kk] = v[0]
        greedy0 = np.argmax(vals[0], axis=1)
        action = []
        for i in range(N):
            if rng.random() < epsilon:
                action.append(int(rng.integers(0, A)))
            else:
                action.append(int(np.argmax(vals[ks[i]][i])))
        greedy0_flat = int(_actions_to_flats(greedy0[None, :], A)[0])
        return tuple(action), {"k": k, "epsilon": epsilon,
                               "greedy0_flat": greedy0_flat}

    def act_eval(self, windows_raw):
        """Greedy on sub-value 0; touches the coder only when comm-augmented."""
        windows = self._augment(np.asarray(windows_raw, dtype=np.float64))
        vals, _ = self._utilities_forward(0, windows[None, :, :])
        return tuple(int(x) for x in np.argmax(vals[0], axis=1))

    # -- training --------------------------------------------------------------

    def observe(self, episode: Episode):
        self.buffer.add(episode)

    def train(self, rng) -> dict:
        if len(self.buffer) == 0:
            raise UsageError("train_step requires at least one stored episode")
        batch = self.buffer.sample_batch(rng)
        metrics = {"critic_loss": np.nan, "successive_loss": np.nan,
                   "ce": np.nan, "mse": np.nan, "agreement": np.nan,
                   "skipped": 0}
        if self.algorithm == "qmix":
            self._train_qmix(batch, metrics)
        else:
            self._train_weighted(batch, metrics)
        self.train_steps += 1
        if self.train_steps % self.cfg.target_update_interval == 0:
            self._refresh_targets()
        return metrics

    def _skip(self, metrics, what):
        self.incidents += 1
        metrics["skipped"] = 1
        log.warning("non-finite %s; training step skipped (incident %d)",
                    what, self.incidents)

    def _train_qmix(self, batch, metrics):
        W = self._augment(batch.windows)
        NW = self._augment(batch.next_windows)
        vals0, cache0 = self._utilities_forward(0, W)
        next_vals0, _ = self._utilities_forward(0, NW)
        a_next = np.argmax(next_vals0, axis=2)
        flat_next = _actions_to_flats(a_next, self.meta.n_actions)
        q_next = self._sub0_target_values_at(NW, batch.next_state_feats, flat_next)
        y = batch.rewards + self.cfg.gamma * batch.bootstrap * q_next
        qtot, U, acts, mixcache = self._sub_values_at(
            0, vals0, batch.state_feats, batch.flats, with_cache=True)
        diff = qtot - y
        loss = float(np.mean(diff * diff))
        if not np.isfinite(loss):
            self._skip(metrics, "TD loss")
            return
        metrics["successive_loss"] = loss
        self._apply_sub_update(0, diff * (2.0 / batch.size), U, acts, cache0,
                               mixcache, W.shape[0])

    def _apply_sub_update(self, k, dq, U, acts, util_cache, mixcache, B):
        dU, mgrads = self.ensemble.mixers[k].backward_batch(mixcache, dq)
        dvals = np.zeros((B, self.meta.n_agents, self.meta.n_actions))
        dvals[np.arange(B)[:, None], np.arange(self.meta.n_agents)[None, :], acts] = dU
        ugrad, _ = diffcore.backward_batch(
            self.util_spec, self.ensemble.utilities[k].params, util_cache,
            dvals.reshape(B * self.meta.n_agents, -1))
        diffcore.adam_step(self.ensemble.utilities[k].params, ugrad, self.adam)
        stores = self.ensemble.mixers[k].param_stores()
        for name, grad in mgrads.items():
            diffcore.adam_step(stores[name], grad, self.adam)

    def _train_weighted(self, batch, metrics):
        """s2q / s2q_comm (all variants) and the wqmix baseline."""
        B = batch.size
        W = self._augment(batch.windows)
        NW = self._augment(batch.next_windows)
        vals = []
        caches = []
        for k in range(self.K + 1):
            v, c = self._utilities_forward(k, W)
            vals.append(v)
            caches.append(c)
        next_vals0, _ = self._utilities_forward(0, NW)
        a_next = np.argmax(next_vals0, axis=2)
        flat_next = _actions_to_flats(a_next, self.meta.n_actions)

        # one batched target-network pass covers both the bootstrap value at
        # the next step and the suppression value at the taken action
        targ = self._td_source_target_at(
            np.concatenate([NW, W]),
            np.concatenate([batch.next_state_feats, batch.state_feats]),
            np.concatenate([flat_next, batch.flats]))
        q_next, q_targ_at_a = targ[:B], targ[B:]
        y = batch.rewards + self.cfg.gamma * batch.bootstrap * q_next

        if self.critic is not None:
            q_pred, ccache = self.critic.value_batch(
                batch.state_feats, batch.flats, use_target=False, with_cache=True)
            cerr = q_pred - y
            closs = float(np.mean(cerr * cerr))
            if not np.isfinite(closs):
                self._skip(metrics, "critic loss")
                return
            cgrad = self.critic.backward_batch(ccache, cerr * (2.0 / B))
            diffcore.adam_step(self.critic.online, cgrad, self.adam)
            metrics["critic_loss"] = closs

        # fresh tracked sets from the current online ensemble
        tracked = np.empty((B, self.K + 1), dtype=np.int64)
        for k in range(self.K + 1):
            tracked[:, k] = _actions_to_flats(np.argmax(vals[k], axis=2),
                                              self.meta.n_actions)
        if self.critic is not None:
            flats_all = np.concatenate([batch.flats] +
                                       [tracked[:, k] for k in range(self.K + 1)])
            S_all = np.tile(batch.state_feats, (self.K + 2, 1))
            q_all = self.critic.value_batch(S_all, flats_all, use_target=False)
            q_star_at_a = q_all[:B]
            q_star_tracked = q_all[B:].reshape(self.K + 1, B).T
        else:
            q_star_at_a = self._sub_values_at(0, vals[0], batch.state_feats,
                                              batch.flats)
            q_star_tracked = np.empty((B, self.K + 1))
            for k in range(self.K + 1):
                q_star_tracked[:, k] = self._sub_values_at(
                    0, vals[0], batch.state_feats, tracked[:, k])
        max_tracked = q_star_tracked.max(axis=1)

        if self.algorithm == "wqmix":
            qtot, U, acts, mixcache = self._sub_values_at(
                0, vals[0], batch.state_feats, batch.flats, with_cache=True)
            w = np.where(qtot < y, 1.0, self.weighting.w_c)
            diff = qtot - y
            loss = float(np.mean(w * diff * diff))
            if not np.isfinite(loss):
                self._skip(metrics, "weighted projection loss")
                return
            metrics["successive_loss"] = loss
            self._apply_sub_update(0, w * diff * (2.0 / B), U, acts, caches[0],
                                   mixcache, B)
            return

        total = 0.0
        updates = []
        base = np.maximum(q_targ_at_a, self.supp.floor_c) if self.supp.use_floor \
            else q_targ_at_a
        for k in range(self.K + 1):
            if k == 0:
                indicator = np.zeros(B)
            else:
                indicator = (tracked[:, :k] == batch.flats[:, None]).any(axis=1) \
                    .astype(np.float64)
            target_k = y - self.supp.alpha * indicator * base
            qsub, U, acts, mixcache = self._sub_values_at(
                k, vals[k], batch.state_feats, batch.flats, with_cache=True)
            if k == 0:
                w = np.where(q_star_at_a >= max_tracked, 1.0, self.weighting.w_c)
            else:
                comparator = y - self.supp.alpha * indicator * q_targ_at_a
                w = np.where(qsub < comparator, 1.0, self.weighting.w_c)
            diff = qsub - target_k
            loss_k = float(np.mean(w * diff * diff))
            if not np.isfinite(loss_k):
                self._skip(metrics, f"successive loss (k={k})")
                return
            total += loss_k
            updates.append((k, w * diff * (2.0 / B), U, acts, mixcache))
        metrics["successive_loss"] = total
        for k, dq, U, acts, mixcache in updates:
            self._apply_sub_update(k, dq, U, acts, caches[k], mixcache, B)

        if self.coder is not None:
            p_exact = _row_softmax(q_star_tracked, self.behavior_cfg.temperature)
            parts, egrad, dgrad, p_hat = comm_mod.latent_loss(
                self.coder, batch.windows.reshape(B, -1), p_exact,
                batch.state_feats)
            if np.isfinite(parts.total):
                diffcore.adam_step(self.coder.encoder, egrad, self.adam)
                diffcore.adam_step(self.coder.decoder, dgrad, self.adam)
                metrics["ce"] = parts.ce
                metrics["mse"] = parts.mse
                metrics["agreement"] = float(np.mean(
                    np.argmax(p_hat, axis=1) == np.argmax(p_exact, axis=1)))
            else:
                self._skip(metrics, "latent loss")

    # -- checkpointing ---------------------------------------------------------

    def param_stores(self):
        """Every ParamStore keyed for checkpointing."""
        out = {}
        for k in range(self.K + 1):
            out[f"sub{k}.utility"] = self.ensemble.utilities[k].params
            for name, store in self.ensemble.mixers[k].param_stores().items():
                out[f"sub{k}.mixer.{name}"] = store
        if self.critic is not None:
            out["critic.online"] = self.critic.online
            out["critic.target"] = self.critic.target
        if self.sub0_target is not None:
            for name, store in self.sub0_target.items():
                out[f"sub0_target.{name}"] = store
        if self.coder is not None:
            out["coder.encoder"] = self.coder.encoder
            out["coder.decoder"] = self.coder.decoder
        return out


class TabularTrainer:
    """Exact-table twin of the s2q learner, for fixed-point verification.

    Tables are indexed by true state (full observability), the selection
    distribution is always the exact one, and episode fixing still applies
    to the full/oracle variants.
    """

    def __init__(self, cfg, meta: EnvMeta, n_states: int,
                 rng: np.random.Generator):
        if cfg.algorithm != "s2q":
            raise ConfigError("tabular mode supports algorithm='s2q' only")
        self.cfg = cfg
        self.meta = meta
        self.K = cfg.K
        self.variant = cfg.variant
        self.no_wtd = cfg.variant == "no_wTD"
        n_joint = meta.n_actions ** meta.n_agents
        self.q_star = np.zeros((n_states, n_joint))
        self.q_star_targ = np.zeros((n_states, n_joint))
        self.q_sub = np.zeros((self.K + 1, n_states, n_joint))
        self.q_sub0_targ = np.zeros((n_states, n_joint))
        self.supp = SuppressionConfig(cfg.alpha, cfg.floor_c, cfg.use_floor)
        self.weighting = WeightingConfig(cfg.w_c)
        self.behavior_cfg = BehaviorConfig(cfg.temperature, cfg.epsilon_start,
                                           cfg.epsilon_end, cfg.epsilon_anneal_steps,
                                           cfg.fix_prob)
        self.lr = cfg.tabular_lr
        self.buffer = ReplayBuffer(cfg.buffer_capacity, cfg.batch_size)
        self.train_steps = 0
        self.incidents = 0
        self.comm_augmented = False
        self.coder = None
        self.critic = None

    def _td_online(self):
        return self.q_sub[0] if self.no_wtd else self.q_star

    def _td_target(self):
        return self.q_sub0_targ if self.no_wtd else self.q_star_targ

    def _tracked(self, s: int):
        return [int(np.argmax(self.q_sub[k, s])) for k in range(self.K + 1)]

    def begin_episode(self, rng):
        return begin_episode(self.variant, self.behavior_cfg.fix_prob, rng)

    def tracked_probe_state(self, s: int):
        flats = self._tracked(s)
        actions = [unflatten_action(f, self.meta.n_actions, self.meta.n_agents)
                   for f in flats]
        qvals = self._td_online()[s, flats]
        return TrackedActionSet(actions=actions, flats=flats), qvals

    def act_training(self, state: int, env_step: int, ep_state, rng):
        tracked, qvals = self.tracked_probe_state(state)
        exact = softmax_p(qvals, self.behavior_cfg.temperature)
        # there is no estimator in tabular mode: estimated selection falls
        # back to the exact distribution, keeping each variant's sampling rule
        variant = "oracle" if self.variant == "full" else self.variant
        k = select_k(exact, variant, ep_state, rng, self.K, self.meta.n_agents)
        epsilon = epsilon_at(env_step, self.behavior_cfg)
        ks = (k,) * self.meta.n_agents if np.ndim(k) == 0 else tuple(k)
        out = []
        for i in range(self.meta.n_agents):
            if rng.random() < epsilon:
                out.append(int(rng.integers(0, self.meta.n_actions)))
            else:
                out.append(tracked.actions[ks[i]][i])
        flats0 = tracked.flats[0]
        return tuple(out), {"k": k, "epsilon": epsilon, "greedy0_flat": flats0}

    def act_eval(self, state: int):
        return unflatten_action(int(np.argmax(self.q_sub[0, state])),
                                self.meta.n_actions, self.meta.n_agents)

    def observe(self, episode: Episode):
        self.buffer.add(episode)

    def train(self, rng) -> dict:
        if len(self.buffer) == 0:
            raise UsageError("train_step requires at least one stored episode")
        batch = self.buffer.sample_batch(rng)
        gamma = self.cfg.gamma
        closs = 0.0
        sloss = 0.0
        for idx in range(batch.size):
            s = int(batch.states[idx])
            sn = int(batch.next_states[idx])
            a = int(batch.flats[idx])
            a0n = int(np.argmax(self.q_sub[0, sn]))
            y = batch.rewards[idx] + gamma * batch.bootstrap[idx] * \
                self._td_target()[sn, a0n]
            closs += (y - self.q_star[s, a]) ** 2
            self.q_star[s, a] += self.lr * (y - self.q_star[s, a])
            tracked = self._tracked(s)
            q_online = self._td_online()
            q_targ_sa = self._td_target()[s, a]
            base = max(q_targ_sa, self.supp.floor_c) if self.supp.use_floor \
                else q_targ_sa
            max_tracked = max(q_online[s, f] for f in tracked)
            for k in range(self.K + 1):
                hit = a in tracked[:k]
                target_k = y - self.supp.alpha * base if hit else y
                q_sub_sa = self.q_sub[k, s, a]
                if k == 0:
                    w = 1.0 if q_online[s, a] >= max_tracked else self.weighting.w_c
                else:
                    comparator = y - self.supp.alpha * q_targ_sa if hit else y
                    w = 1.0 if q_sub_sa < comparator else self.weighting.w_c
                sloss += w * (target_k - q_sub_sa) ** 2
                self.q_sub[k, s, a] += self.lr * w * (target_k - q_sub_sa)
        self.train_steps += 1
        if self.train_steps % self.cfg.target_update_interval == 0:
            self.q_star_targ[:] = self.q_star
            self.q_sub0_targ[:] = self.q_sub[0]
        return {"critic_loss": closs / batch.size,
                "successive_loss": sloss / batch.size,
                "ce": np.nan, "mse": np.nan, "agreement": np.nan, "skipped": 0}

    def param_stores(self):
        return {}

    def tables(self):
        return {"q_star": self.q_star.copy(), "q_sub": self.q_sub.copy()}
