"""Action selection for training rollouts and evaluation.

Training behavior picks a sub-value index k (softmax over critic values
at the tracked joint actions, estimated or exact depending on variant),
then runs per-agent epsilon-greedy inside that sub-policy.  Evaluation
is plain greedy on sub-value 0 and never touches any of this.  All
functions are pure over a supplied Generator.
"""

from dataclasses import dataclass

import numpy as np

from s2qlab.envs import flat_action, unflatten_action
from s2qlab.errors import ConfigError, NumericalError, UsageError
from s2qlab.valuenets import SubValueEnsemble, utility_values_batch

VARIANTS = ("full", "oracle", "independent", "no_wTD", "no_soft", "random")


@dataclass
class SoftmaxDistribution:
    probs: np.ndarray
    source: str  # "exact" | "estimated"

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if abs(self.probs.sum() - 1.0) > 1e-12 or np.any(self.probs < 0):
            raise ConfigError("probs must be a distribution summing to 1")


@dataclass(frozen=True)
class BehaviorConfig:
    temperature: float = 0.1
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_anneal_steps: int = 10_000
    fix_prob: float = 0.5

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.epsilon_start < self.epsilon_end:
            raise ConfigError("epsilon_start must be >= epsilon_end")
        if self.epsilon_anneal_steps <= 0:
            raise ConfigError("epsilon_anneal_steps must be positive")
        if not (0.0 <= self.fix_prob <= 1.0):
            raise ConfigError("fix_prob must lie in [0, 1]")


def softmax_p(q_star_values, temperature: float) -> SoftmaxDistribution:
    """probs[k] proportional to exp(q[k]/T), max-subtracted for stability."""
    q = np.asarray(q_star_values, dtype=np.float64)
    if temperature <= 0:
        raise UsageError("temperature must be positive")
    if not np.all(np.isfinite(q)):
        raise NumericalError("softmax inputs must be finite")
    z = q / temperature
    z -= z.max()
    e = np.exp(z)
    return SoftmaxDistribution(probs=e / e.sum(), source="exact")


def epsilon_at(step: int, cfg: BehaviorConfig) -> float:
    """Linear anneal from epsilon_start to epsilon_end, then constant."""
    if step < 0:
        raise UsageError("step must be nonnegative")
    frac = min(step / cfg.epsilon_anneal_steps, 1.0)
    return cfg.epsilon_start + frac * (cfg.epsilon_end - cfg.epsilon_start)


@dataclass
class EpisodeSelectionState:
    """Per-episode draw: whether k is pinned to 0 for the whole episode."""

    fixed_to_zero: bool = False


def begin_episode(variant: str, fix_prob: float,
                  rng: np.random.Generator) -> EpisodeSelectionState:
    fixed = variant in ("full", "oracle") and rng.random() < fix_prob
    return EpisodeSelectionState(fixed_to_zero=fixed)


def select_k(dist, variant: str, episode_state: EpisodeSelectionState,
             rng: np.random.Generator, K: int, n_agents: int):
    """Pick the sub-value index (or per-agent indices for 'independent')."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")
    if variant == "no_soft":
        return 0
    if variant == "random":
        return int(rng.integers(0, K + 1))
    if variant == "independent":
        return tuple(int(rng.choice(K + 1, p=dist.probs)) for _ in range(n_agents))
    if episode_state.fixed_to_zero:
        return 0
    return int(rng.choice(K + 1, p=dist.probs))


def act(histories, ensemble: SubValueEnsemble, k, epsilon: float,
        rng: np.random.Generator) -> tuple:
    """Per-agent epsilon-greedy within sub-policy k (int, or tuple per agent)."""
    W = np.asarray(histories, dtype=np.float64)
    n_agents = W.shape[0]
    ks = (k,) * n_agents if np.ndim(k) == 0 else tuple(k)
    if max(ks) > ensemble.K:
        raise UsageError(f"k={max(ks)} exceeds K={ensemble.K}")
    vals = {}
    for kk in set(ks):
        v, _ = utility_values_batch(ensemble.utilities[kk], W)
        vals[kk] = v
    A = ensemble.n_actions
    out = []
    for i in range(n_agents):
        if rng.random() < epsilon:
            out.append(int(rng.integers(0, A)))
        else:
            out.append(int(np.argmax(vals[ks[i]][i])))
    return tuple(out)


def per_agent_eps_greedy_table(greedy_flat: int, epsilon: float, n_agents: int,
                               n_actions: int) -> np.ndarray:
    """Exact joint distribution of independent epsilon-greedy around one action."""
    greedy = unflatten_action(greedy_flat, n_actions, n_agents)
    J = n_actions ** n_agents
    table = np.empty(J)
    for j in range(J):
        p = 1.0
        for i, a in enumerate(unflatten_action(j, n_actions, n_agents)):
            p *= (1.0 - epsilon) + epsilon / n_actions if a == greedy[i] \
                else epsilon / n_actions
        table[j] = p
    return table


def behavior_mixture_table(probs, tracked_flats, epsilon: float, n_agents: int,
                           n_actions: int) -> np.ndarray:
    """Exact joint-action distribution of the softmax-coordinated policy.

    Mixture over k of (epsilon-greedy around tracked action k); this is
    what an infinitely long rollout would realize with frozen values.
    """
    probs = np.asarray(probs, dtype=np.float64)
    J = n_actions ** n_agents
    table = np.zeros(J)
    for k, flat in enumerate(tracked_flats):
        table += probs[k] * per_agent_eps_greedy_table(
            flat, epsilon, n_agents, n_actions)
    return table


def greedy_evaluation_action(ensemble: SubValueEnsemble, histories) -> tuple:
    """Decentralized evaluation: per-agent argmax of sub-value 0, nothing else."""
    W = np.asarray(histories, dtype=np.float64)
    vals, _ = utility_values_batch(ensemble.utilities[0], W)
    return tuple(int(a) for a in np.argmax(vals, axis=1))


def tracked_flats_of(actions, n_actions: int):
    return [flat_action(a, n_actions) for a in actions]
