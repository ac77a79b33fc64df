import numpy as np
import pytest

from s2qlab import envs, oracle
from s2qlab.errors import UsageError


def _fig1_easy_row():
    game = envs.matrix_game_fig1("easy")
    spec = envs.matrix_to_dec_pomdp(game.payoff_pre)
    return spec, spec.reward[0]


def test_value_iteration_matrix_game_exact():
    spec, payoff_row = _fig1_easy_row()
    Q = oracle.value_iteration(spec)
    assert np.array_equal(Q[0], payoff_row)
    assert np.all(Q[1] == 0.0)


def test_value_iteration_two_step_chain():
    # nonterminal chain s0 -> s1 -> done with rewards 0 then 1
    transition = np.zeros((3, 1, 3))
    transition[0, 0, 1] = 1.0
    transition[1, 0, 2] = 1.0
    transition[2, 0, 2] = 1.0
    reward = np.array([[0.0], [1.0], [0.0]])
    spec = envs.DecPomdpSpec(
        n_states=3, n_agents=1, n_actions=1, gamma=0.9, episode_limit=10,
        initial_state_dist=[1.0, 0.0, 0.0], transition=transition,
        reward=reward, observation=np.zeros((3, 1, 1)))
    Q = oracle.value_iteration(spec)
    assert Q[1, 0] == pytest.approx(1.0)
    assert Q[0, 0] == pytest.approx(0.9)


def _random_spec(rng, n_states=4, n_agents=2, n_actions=2):
    J = n_actions ** n_agents
    transition = rng.uniform(0.0, 1.0, (n_states, J, n_states))
    transition /= transition.sum(axis=2, keepdims=True)
    reward = rng.uniform(-1.0, 1.0, (n_states, J))
    dist = np.full(n_states, 1.0 / n_states)
    return envs.DecPomdpSpec(
        n_states=n_states, n_agents=n_agents, n_actions=n_actions, gamma=0.9,
        episode_limit=50, initial_state_dist=dist, transition=transition,
        reward=reward, observation=np.zeros((n_states, n_agents, 1)))


def test_value_iteration_residual(rng):
    spec = _random_spec(rng)
    Q = oracle.value_iteration(spec, tol=1e-10)
    V = Q.max(axis=1)
    residual = np.abs(spec.reward + spec.gamma * spec.transition @ V - Q).max()
    assert residual <= 1e-10


def test_value_iteration_state_permutation_invariant(rng):
    spec = _random_spec(rng)
    Q = oracle.value_iteration(spec)
    perm = np.array([2, 0, 3, 1])
    spec_p = envs.DecPomdpSpec(
        n_states=4, n_agents=2, n_actions=2, gamma=0.9, episode_limit=50,
        initial_state_dist=spec.initial_state_dist[perm],
        transition=spec.transition[perm][:, :, perm],
        reward=spec.reward[perm],
        observation=spec.observation[perm])
    Q_p = oracle.value_iteration(spec_p)
    assert np.allclose(Q_p, Q[perm], atol=1e-9)


def test_top_k_fig1_ranking():
    _, row = _fig1_easy_row()
    ranked = oracle.top_k_actions(row, 2)
    assert ranked.actions == [0, 4, 8]
    assert ranked.values == [8.0, 7.0, 6.0]


def test_top_k_tie_break_and_prefix(rng):
    ranked = oracle.top_k_actions(np.zeros(6), 3)
    assert ranked.actions == [0, 1, 2, 3]
    row = rng.normal(size=16)
    full = oracle.top_k_actions(row, 15)
    order = np.argsort(-row, kind="stable")
    assert full.actions == [int(a) for a in order]
    for K in range(15):
        assert oracle.top_k_actions(row, K).actions == full.actions[:K + 1]
    with pytest.raises(UsageError):
        oracle.top_k_actions(row, 16)


def test_alpha_bound_fig1_values():
    _, row = _fig1_easy_row()
    bound = oracle.alpha_bound(row, 2, floor_c=0.1)
    per = bound.per_state_k[0]
    assert per[0] == 0.0
    assert per[1] == pytest.approx((8 - 7) / 8)
    assert per[2] == pytest.approx(max((8 - 6) / 8, (7 - 6) / 7))
    assert bound.overall == pytest.approx(0.25)


def test_alpha_bound_constant_and_floor():
    bound = oracle.alpha_bound(np.full(9, 3.0), 2, floor_c=0.1)
    assert bound.overall == 0.0
    # negative values force the floor into the denominator
    row = np.array([-1.0, -2.0, -3.0, -4.0])
    bound = oracle.alpha_bound(row, 1, floor_c=0.5)
    assert bound.per_state_k[0, 1] == pytest.approx(((-1) - (-2)) / 0.5)


def test_verify_theorem_random_instances():
    rng = np.random.default_rng(3)
    for _ in range(100):
        row = rng.uniform(-10, 10, 16)
        bound = oracle.alpha_bound(row, 2, 0.1)
        report = oracle.verify_theorem(row, 2, bound.overall + 0.01, 0.1)
        assert report.passed, report.witness


def test_verify_theorem_alpha_zero_fails_with_witness():
    _, row = _fig1_easy_row()
    report = oracle.verify_theorem(row, 2, 0.0, 0.1)
    assert not report.passed
    assert report.per_k[0]
    assert not report.per_k[1]
    assert report.witness[1]["argmax_action"] == 0  # stuck on the top action


def test_verify_theorem_just_below_bound_fails():
    rng = np.random.default_rng(11)
    row = rng.uniform(-10, 10, 16)
    bound = oracle.alpha_bound(row, 2, 0.1).overall
    assert bound > 0
    report = oracle.verify_theorem(row, 2, bound - 1e-6, 0.1)
    assert not report.passed


def test_verify_theorem_passes_at_exact_bound():
    rng = np.random.default_rng(5)
    for _ in range(1000):
        row = rng.uniform(-5, 5, 9)
        bound = oracle.alpha_bound(row, 2, 0.1).overall
        report = oracle.verify_theorem(row, 2, bound, 0.1)
        assert report.passed, (row, report.witness)


def test_verify_theorem_accepts_tied_rank_values():
    # two joint actions share the second-best value; either is a valid argmax
    row = np.array([5.0, 4.0, 4.0, 1.0])
    bound = oracle.alpha_bound(row, 1, 0.1).overall
    report = oracle.verify_theorem(row, 1, bound + 0.01, 0.1)
    assert report.passed


def test_suppressed_tables_closed_form():
    row = np.array([5.0, 4.0, 3.0, 1.0])
    tables = oracle.suppressed_tables(row, 2, alpha=1.0, floor_c=0.1)
    assert np.array_equal(tables[0], row)
    assert tables[1][0] == pytest.approx(5.0 - 1.0 * 5.0)
    assert tables[2][1] == pytest.approx(4.0 - 1.0 * 4.0)
    # floor path with negative values
    neg = np.array([-1.0, -2.0])
    t = oracle.suppressed_tables(neg, 1, alpha=1.0, floor_c=0.1)
    assert t[1][0] == pytest.approx(-1.0 - 0.1)
