"""Agent utilities, monotone mixers, the unrestricted joint critic, and
greedy joint-action extraction.

A sub-value function k is (one shared utility net over per-agent history
windows) + (a mixer combining the chosen-action utilities conditioned on
state features).  Per-agent argmax of the utilities is the greedy joint
action; the mixer's monotone weights keep that argmax equal to the joint
argmax of the mixed value (the IGM property, checked exhaustively in
tests).  The critic is an ordinary MLP over (state features, joint action
one-hots) with a periodically refreshed target copy.
"""

from dataclasses import dataclass

import numpy as np

from s2qlab import diffcore
from s2qlab.backend import kernels
from s2qlab.diffcore import ApproximatorSpec, ParamStore
from s2qlab.envs import flat_action, unflatten_action
from s2qlab.errors import UsageError


def window_length(obs_len: int, n_actions: int, history_window: int,
                  latent_dim: int = 0) -> int:
    """Utility input width: H x (obs, prev-action one-hot, prev reward) [+ latent]."""
    return history_window * (obs_len + n_actions + 1) + latent_dim


def build_window(obs_seq, act_seq, rew_seq, history_window: int,
                 n_actions: int) -> np.ndarray:
    """Assemble one agent's window at time t = len(obs_seq) - 1.

    obs_seq holds o_0..o_t, act_seq a_0..a_{t-1}, rew_seq r_0..r_{t-1}.
    Each slot j packs (o_j, one-hot a_{j-1}, r_{j-1}); slots before the
    episode start are zero.
    """
    t = len(obs_seq) - 1
    obs_len = len(obs_seq[-1])
    entry = obs_len + n_actions + 1
    window = np.zeros(history_window * entry)
    for h in range(history_window):
        j = t - (history_window - 1 - h)
        if j < 0:
            continue
        base = h * entry
        window[base:base + obs_len] = obs_seq[j]
        if j >= 1:
            window[base + obs_len + act_seq[j - 1]] = 1.0
            window[base + obs_len + n_actions] = rew_seq[j - 1]
    return window


@dataclass
class AgentUtility:
    """Shared per-agent action-value head for one sub-value index."""

    spec: ApproximatorSpec
    params: ParamStore
    history_window: int
    n_actions: int


def utility_values(utility: AgentUtility, window: np.ndarray) -> np.ndarray:
    """One value per action for a single assembled window."""
    window = np.asarray(window, dtype=np.float64)
    if window.shape != (utility.spec.in_dim,):
        raise UsageError(
            f"window length {window.shape} does not match utility input "
            f"({utility.spec.in_dim},)")
    return diffcore.forward(utility.spec, utility.params, window)


def utility_values_batch(utility: AgentUtility, windows: np.ndarray):
    """Batched values; windows (M, window_len) -> ((M, A), cache)."""
    return diffcore.forward_batch(utility.spec, utility.params, windows)


class SumMixer:
    """Parameter-free additive mixer (the VDN degenerate case)."""

    has_params = False

    def forward_batch(self, U: np.ndarray, S: np.ndarray):
        return U.sum(axis=1), U.shape

    def backward_batch(self, cache, dY: np.ndarray):
        B, N = cache
        dU = np.repeat(dY[:, None], N, axis=1)
        return dU, {}

    def param_stores(self):
        return {}


class MonotonicMixer:
    """State-conditioned monotone mixer with absolute-value hypernet weights.

    One generator MLP (single hidden layer) emits all per-state mixing
    parameters: first-layer weights W1 (n_agents x embed), bias B1, second
    layer weights W2 and the state-value bias.  W1/W2 pass through |.|
    inside the mix kernel, which keeps the mixed value nondecreasing in
    every agent utility.
    """

    has_params = True

    def __init__(self, state_len: int, n_agents: int, embed_dim: int,
                 hyper_hidden: int, rng: np.random.Generator):
        self.n_agents = n_agents
        self.embed_dim = embed_dim
        out = n_agents * embed_dim + 2 * embed_dim + 1
        self.spec = ApproximatorSpec((state_len, hyper_hidden, out))
        self.params = {"hyper": diffcore.init_params(self.spec, rng)}

    def _split(self, raw: np.ndarray):
        B = raw.shape[0]
        N, E = self.n_agents, self.embed_dim
        W1 = np.ascontiguousarray(raw[:, :N * E].reshape(B, N, E))
        B1 = np.ascontiguousarray(raw[:, N * E:N * E + E])
        W2 = np.ascontiguousarray(raw[:, N * E + E:N * E + 2 * E])
        B2 = np.ascontiguousarray(raw[:, -1])
        return W1, B1, W2, B2

    def forward_batch(self, U: np.ndarray, S: np.ndarray):
        raw, hcache = diffcore.forward_batch(self.spec, self.params["hyper"], S)
        W1, B1, W2, B2 = self._split(raw)
        U = np.ascontiguousarray(U, dtype=np.float64)
        Y, ZH = kernels().mix_forward(U, W1, B1, W2, B2)
        return Y, (U, W1, ZH, W2, hcache)

    def backward_batch(self, cache, dY: np.ndarray):
        U, W1, ZH, W2, hcache = cache
        dY = np.ascontiguousarray(dY, dtype=np.float64)
        dU, dW1, dB1, dW2, dB2 = kernels().mix_backward(U, W1, ZH, W2, dY)
        B = U.shape[0]
        d_raw = np.concatenate(
            [dW1.reshape(B, -1), dB1, dW2, dB2[:, None]], axis=1)
        grad, _ = diffcore.backward_batch(self.spec, self.params["hyper"],
                                          hcache, d_raw)
        return dU, {"hyper": grad}

    def param_stores(self):
        return dict(self.params)


def mix(mixer, utilities: np.ndarray, state_features: np.ndarray) -> float:
    """Scalar mixed value for one (per-agent utilities, state) pair."""
    U = np.asarray(utilities, dtype=np.float64)[None, :]
    S = np.asarray(state_features, dtype=np.float64)[None, :]
    Y, _ = mixer.forward_batch(U, S)
    return float(Y[0])


def joint_action_onehot(flat: int, n_agents: int, n_actions: int) -> np.ndarray:
    enc = np.zeros(n_agents * n_actions)
    for i, a in enumerate(unflatten_action(flat, n_actions, n_agents)):
        enc[i * n_actions + a] = 1.0
    return enc


class JointCritic:
    """Unrestricted Q over (state features, joint action), online + target."""

    def __init__(self, state_len: int, n_agents: int, n_actions: int,
                 hidden, rng: np.random.Generator,
                 target_update_interval: int = 200):
        self.n_agents = n_agents
        self.n_actions = n_actions
        self.state_len = state_len
        widths = (state_len + n_agents * n_actions, *hidden, 1)
        self.spec = ApproximatorSpec(widths)
        self.online = diffcore.init_params(self.spec, rng)
        self.target = self.online.copy()
        self.target_update_interval = target_update_interval

    def refresh_target(self):
        self.target.values[:] = self.online.values

    def _inputs(self, S: np.ndarray, flats: np.ndarray) -> np.ndarray:
        B = S.shape[0]
        X = np.zeros((B, self.spec.in_dim))
        X[:, :self.state_len] = S
        acts = np.asarray(flats, dtype=np.int64)
        rem = acts.copy()
        for i in range(self.n_agents):
            a_i = rem % self.n_actions
            rem //= self.n_actions
            X[np.arange(B), self.state_len + i * self.n_actions + a_i] = 1.0
        return X

    def value_batch(self, S: np.ndarray, flats: np.ndarray, use_target: bool,
                    with_cache: bool = False):
        params = self.target if use_target else self.online
        Y, cache = diffcore.forward_batch(self.spec, params, self._inputs(S, flats))
        if with_cache:
            return Y[:, 0], cache
        return Y[:, 0]

    def backward_batch(self, cache, dY: np.ndarray) -> np.ndarray:
        grad, _ = diffcore.backward_batch(self.spec, self.online, cache,
                                          dY[:, None])
        return grad


def critic_value(critic: JointCritic, state_features, joint_action,
                 use_target: bool = False) -> float:
    """Scalar critic value; accepts a flat index or a per-agent tuple."""
    if np.ndim(joint_action) > 0:
        joint_action = flat_action(joint_action, critic.n_actions)
    S = np.asarray(state_features, dtype=np.float64)[None, :]
    return float(critic.value_batch(S, np.array([joint_action]), use_target)[0])


@dataclass
class TrackedActionSet:
    """Greedy joint actions of sub-values 0..K at one timestep, in order."""

    actions: list   # list of per-agent tuples
    flats: list     # same actions as flat indices

    def __len__(self):
        return len(self.actions)


class SubValueEnsemble:
    """The K+1 sub-value functions (shared-utility nets + mixers)."""

    def __init__(self, K: int, utilities, mixers):
        if len(utilities) != K + 1 or len(mixers) != K + 1:
            raise UsageError("need exactly K+1 utilities and mixers")
        self.K = K
        self.utilities = list(utilities)
        self.mixers = list(mixers)

    @property
    def n_actions(self):
        return self.utilities[0].n_actions


def greedy_joint_action(ensemble: SubValueEnsemble, k: int, histories) -> tuple:
    """Per-agent argmax of Q_k^i; ties resolve to the lowest action index."""
    if k > ensemble.K:
        raise UsageError(f"k={k} exceeds K={ensemble.K}")
    util = ensemble.utilities[k]
    W = np.asarray(histories, dtype=np.float64)
    vals, _ = utility_values_batch(util, W)
    return tuple(int(a) for a in np.argmax(vals, axis=1))


def tracked_action_set(ensemble: SubValueEnsemble, histories) -> TrackedActionSet:
    actions = [greedy_joint_action(ensemble, k, histories)
               for k in range(ensemble.K + 1)]
    flats = [flat_action(a, ensemble.n_actions) for a in actions]
    return TrackedActionSet(actions=actions, flats=flats)


def sub_value_table(ensemble: SubValueEnsemble, k: int, histories,
                    state_features) -> np.ndarray:
    """Q_k^sub over every joint action at one timestep (exhaustive)."""
    util = ensemble.utilities[k]
    n_agents = len(histories)
    A = util.n_actions
    J = A ** n_agents
    vals, _ = utility_values_batch(util, np.asarray(histories, dtype=np.float64))
    U = np.empty((J, n_agents))
    for j in range(J):
        for i, a in enumerate(unflatten_action(j, A, n_agents)):
            U[j, i] = vals[i, a]
    S = np.tile(np.asarray(state_features, dtype=np.float64), (J, 1))
    Y, _ = ensemble.mixers[k].forward_batch(U, S)
    return Y


def critic_table(critic: JointCritic, state_features,
                 use_target: bool = False) -> np.ndarray:
    """Critic value for every joint action at one state."""
    J = critic.n_actions ** critic.n_agents
    S = np.tile(np.asarray(state_features, dtype=np.float64), (J, 1))
    return critic.value_batch(S, np.arange(J), use_target)
