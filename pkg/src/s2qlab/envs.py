"""Desk-scale tabular Dec-POMDP environments.

Two sources: the payoff-shift matrix game built in code, and arbitrary
tabular specs loaded from JSON.  Everything is small enough to enumerate
all (state, joint action) pairs, which the oracle module relies on.

Joint actions are flattened as sum_i a_i * n_actions**i with agent 0
least significant; that index is the contract shared by every module
and by the spec-file schema.

States whose every action self-loops with zero reward are "absorbing":
entering one ends the episode and contributes no further value, so the
discounted fixed point of the full table equals the episodic one.
Episodes are also cut at episode_limit; that truncation is not absorbing
and learners keep bootstrapping through it.
"""

import json
from dataclasses import dataclass
from importlib import resources

import numpy as np

from s2qlab.errors import LoadError, UsageError

_ROW_SUM_TOL = 1e-9


def flat_action(actions, n_actions: int) -> int:
    idx = 0
    for i, a in enumerate(actions):
        idx += int(a) * n_actions ** i
    return idx


def unflatten_action(idx: int, n_actions: int, n_agents: int):
    out = []
    for _ in range(n_agents):
        out.append(idx % n_actions)
        idx //= n_actions
    return tuple(out)


@dataclass
class DecPomdpSpec:
    """Tabular spec: transition P[s][flat_a][s'], reward r[s][flat_a],
    observation O[s][agent] -> vector."""

    n_states: int
    n_agents: int
    n_actions: int
    gamma: float
    episode_limit: int
    initial_state_dist: np.ndarray
    transition: np.ndarray
    reward: np.ndarray
    observation: np.ndarray
    name: str = "dec_pomdp"

    def __post_init__(self):
        self.initial_state_dist = np.asarray(self.initial_state_dist, dtype=np.float64)
        self.transition = np.asarray(self.transition, dtype=np.float64)
        self.reward = np.asarray(self.reward, dtype=np.float64)
        self.observation = np.asarray(self.observation, dtype=np.float64)
        self._validate()
        # absorbing = every action self-loops with zero reward
        eye = np.arange(self.n_states)
        self.absorbing = np.array([
            bool(np.all(self.transition[s, :, s] == 1.0) and np.all(self.reward[s] == 0.0))
            for s in eye
        ])

    @property
    def n_joint_actions(self) -> int:
        return self.n_actions ** self.n_agents

    @property
    def obs_len(self) -> int:
        return self.observation.shape[2]

    def state_features(self, s: int) -> np.ndarray:
        feat = np.zeros(self.n_states)
        feat[s] = 1.0
        return feat

    @property
    def state_feature_len(self) -> int:
        return self.n_states

    def _validate(self):
        S, N, A = self.n_states, self.n_agents, self.n_actions
        if min(S, N, A) <= 0:
            raise LoadError("n_states/n_agents/n_actions must be positive")
        if not (0.0 <= self.gamma < 1.0):
            raise LoadError(f"gamma: must be in [0, 1), got {self.gamma}")
        if self.episode_limit <= 0:
            raise LoadError("episode_limit: must be positive")
        J = A ** N
        if self.transition.shape != (S, J, S):
            raise LoadError(
                f"transition: expected shape {(S, J, S)}, got {self.transition.shape}")
        if self.reward.shape != (S, J):
            raise LoadError(f"reward: expected shape {(S, J)}, got {self.reward.shape}")
        if self.observation.ndim != 3 or self.observation.shape[:2] != (S, N):
            raise LoadError(
                f"observation: expected shape ({S}, {N}, obs_len), got {self.observation.shape}")
        if self.initial_state_dist.shape != (S,):
            raise LoadError(f"initial_state_dist: expected length {S}")
        if abs(self.initial_state_dist.sum() - 1.0) > _ROW_SUM_TOL or np.any(self.initial_state_dist < 0):
            raise LoadError("initial_state_dist: not a probability vector")
        if not np.all(np.isfinite(self.reward)):
            raise LoadError("reward: table must be finite")
        if np.any(self.transition < 0):
            raise LoadError("transition: negative probability entry")
        sums = self.transition.sum(axis=2)
        bad = np.argwhere(np.abs(sums - 1.0) > _ROW_SUM_TOL)
        if bad.size:
            s, a = bad[0]
            raise LoadError(
                f"transition[{s}][{a}]: row sums to {sums[s, a]:.12g}, expected 1")


@dataclass
class MatrixGameSpec:
    """Single-state two-agent game whose payoff matrix is swapped once.

    Episodes whose first environment-step index is >= shift_at_step use
    payoff_post; all earlier episodes use payoff_pre.
    """

    n_actions: int
    payoff_pre: np.ndarray
    payoff_post: np.ndarray
    shift_at_step: int

    def __post_init__(self):
        self.payoff_pre = np.asarray(self.payoff_pre, dtype=np.float64)
        self.payoff_post = np.asarray(self.payoff_post, dtype=np.float64)
        shape = (self.n_actions, self.n_actions)
        if self.payoff_pre.shape != shape or self.payoff_post.shape != shape:
            raise LoadError(f"payoff matrices must have shape {shape}")
        if self.shift_at_step < 0:
            raise LoadError("shift_at_step must be nonnegative")

    def payoff_at(self, env_step: int) -> np.ndarray:
        return self.payoff_post if env_step >= self.shift_at_step else self.payoff_pre


OFF_DIAGONAL_PRESETS = {"easy": 0.0, "hard": -12.0}


def matrix_game_fig1(preset: str = "easy", off_diagonal: float = None,
                     shift_at_step: int = 0) -> MatrixGameSpec:
    """The 3x3 payoff-shift game: diagonal (8,7,6) swaps to (6,7,8).

    The hard preset's -12 off-diagonal defeats monotone mixers outright;
    the easy preset's 0 still makes the post-shift optimum non-monotone.
    """
    if off_diagonal is None:
        try:
            off_diagonal = OFF_DIAGONAL_PRESETS[preset]
        except KeyError:
            raise LoadError(f"unknown matrix game preset {preset!r}")
    pre = np.full((3, 3), float(off_diagonal))
    post = np.full((3, 3), float(off_diagonal))
    np.fill_diagonal(pre, (8.0, 7.0, 6.0))
    np.fill_diagonal(post, (6.0, 7.0, 8.0))
    return MatrixGameSpec(3, pre, post, shift_at_step)


def matrix_to_dec_pomdp(payoff: np.ndarray, name: str = "matrix") -> DecPomdpSpec:
    """Embed a payoff matrix as a 2-state spec (play state, absorbing done)."""
    payoff = np.asarray(payoff, dtype=np.float64)
    A = payoff.shape[0]
    J = A * A
    transition = np.zeros((2, J, 2))
    transition[0, :, 1] = 1.0
    transition[1, :, 1] = 1.0
    reward = np.zeros((2, J))
    for j in range(J):
        a0, a1 = unflatten_action(j, A, 2)
        reward[0, j] = payoff[a0, a1]
    # obs: agent one-hot plus a done flag
    observation = np.zeros((2, 2, 3))
    for agent in range(2):
        observation[:, agent, agent] = 1.0
    observation[1, :, 2] = 1.0
    return DecPomdpSpec(
        n_states=2, n_agents=2, n_actions=A, gamma=0.99, episode_limit=1,
        initial_state_dist=np.array([1.0, 0.0]), transition=transition,
        reward=reward, observation=observation, name=name)


@dataclass
class Transition:
    state_index: int
    observations: np.ndarray
    joint_action: tuple
    reward: float
    next_state_index: int
    next_observations: np.ndarray
    terminal: bool


def step(spec: DecPomdpSpec, state: int, joint_action, rng: np.random.Generator) -> Transition:
    """One environment step; terminal marks entry into an absorbing state."""
    for a in joint_action:
        if not (0 <= a < spec.n_actions):
            raise UsageError(f"action index {a} out of range [0, {spec.n_actions})")
    j = flat_action(joint_action, spec.n_actions)
    row = spec.transition[state, j]
    nxt = int(rng.choice(spec.n_states, p=row))
    return Transition(
        state_index=state,
        observations=spec.observation[state].copy(),
        joint_action=tuple(int(a) for a in joint_action),
        reward=float(spec.reward[state, j]),
        next_state_index=nxt,
        next_observations=spec.observation[nxt].copy(),
        terminal=bool(spec.absorbing[nxt]),
    )


class EpisodeRunner:
    """Stateful wrapper enforcing episode_limit truncation on top of step()."""

    def __init__(self, spec: DecPomdpSpec):
        self.spec = spec
        self.state = None
        self.t = 0
        self.done = True

    def reset(self, rng: np.random.Generator):
        self.state = int(rng.choice(self.spec.n_states, p=self.spec.initial_state_dist))
        self.t = 0
        self.done = False
        return self.state, self.spec.observation[self.state].copy()

    def step(self, joint_action, rng: np.random.Generator) -> Transition:
        if self.done:
            raise UsageError("episode is over; call reset()")
        tr = step(self.spec, self.state, joint_action, rng)
        self.state = tr.next_state_index
        self.t += 1
        if self.t >= self.spec.episode_limit:
            tr.terminal = True
        self.done = tr.terminal
        return tr


def spec_from_dict(raw: dict, name: str = "dec_pomdp") -> DecPomdpSpec:
    required = ("n_states", "n_agents", "n_actions", "gamma", "episode_limit",
                "initial_state_dist", "transition", "reward", "observation")
    for key in required:
        if key not in raw:
            raise LoadError(f"{key}: missing required key")
    try:
        return DecPomdpSpec(
            n_states=int(raw["n_states"]), n_agents=int(raw["n_agents"]),
            n_actions=int(raw["n_actions"]), gamma=float(raw["gamma"]),
            episode_limit=int(raw["episode_limit"]),
            initial_state_dist=raw["initial_state_dist"],
            transition=raw["transition"], reward=raw["reward"],
            observation=raw["observation"], name=name)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, LoadError):
            raise
        raise LoadError(f"malformed spec tables: {exc}") from exc


def load_spec(path) -> DecPomdpSpec:
    """Load and validate a JSON Dec-POMDP spec; errors name the offending field."""
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    if not text.strip():
        raise LoadError(f"{path}: empty spec file")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise LoadError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise LoadError(f"{path}: top level must be an object")
    return spec_from_dict(raw, name=str(raw.get("name", "dec_pomdp")))


def coord_reach_spec() -> DecPomdpSpec:
    """Bundled 4-state, 2-agent, 3-action spec where only agent 0 sees the goal."""
    ref = resources.files("s2qlab").joinpath("data/coord_reach.json")
    with resources.as_file(ref) as path:
        return load_spec(path)
