import numpy as np
import pytest

from s2qlab import diffcore, valuenets as vn
from s2qlab.errors import UsageError


def test_window_assembly_and_length():
    obs = [np.array([1.0, 0.0]), np.array([0.0, 1.0])]
    acts = [2]
    rews = [0.5]
    w = vn.build_window(obs, acts, rews, history_window=2, n_actions=3)
    assert len(w) == vn.window_length(2, 3, 2)
    # slot 0 = t-1: obs, no previous action or reward before episode start
    assert np.array_equal(w[:2], [1.0, 0.0])
    assert np.array_equal(w[2:6], [0.0, 0.0, 0.0, 0.0])
    # slot 1 = t: obs, one-hot of a_{t-1}=2, r_{t-1}=0.5
    assert np.array_equal(w[6:8], [0.0, 1.0])
    assert np.array_equal(w[8:11], [0.0, 0.0, 1.0])
    assert w[11] == 0.5


def test_window_zero_padding_before_start():
    w = vn.build_window([np.array([1.0])], [], [], history_window=3, n_actions=2)
    assert np.array_equal(w[:8], np.zeros(8))
    assert w[8] == 1.0


def _utility(values_rows, rng=None):
    A = len(values_rows[0])
    spec = diffcore.ApproximatorSpec((A, A), activation="identity")
    params = diffcore.zeros_params(spec)
    params.values[:A * A] = np.eye(A).ravel()
    return vn.AgentUtility(spec, params, 1, A)


def test_utility_values_shape_and_zero_params(rng):
    spec = diffcore.ApproximatorSpec((6, 8, 3))
    util = vn.AgentUtility(spec, diffcore.zeros_params(spec), 1, 3)
    vals = vn.utility_values(util, np.ones(6))
    assert vals.shape == (3,)
    assert np.all(vals == 0.0)
    with pytest.raises(UsageError):
        vn.utility_values(util, np.ones(5))


def test_utility_values_match_reimplementation():
    spec = diffcore.ApproximatorSpec((4, 5, 2), activation="relu")
    rng = np.random.default_rng(11)
    util = vn.AgentUtility(spec, diffcore.init_params(spec, rng), 1, 2)
    x = rng.normal(size=4)
    v = util.params.values
    w1, b1 = v[:20].reshape(4, 5), v[20:25]
    w2, b2 = v[25:35].reshape(5, 2), v[35:37]
    expected = np.maximum(x @ w1 + b1, 0.0) @ w2 + b2
    assert np.allclose(vn.utility_values(util, x), expected, atol=1e-12)


def test_greedy_joint_action_componentwise_and_ties():
    util = _utility([[1.0, 5.0, 2.0]])
    ens = vn.SubValueEnsemble(0, [util], [vn.SumMixer()])
    hist = np.array([[1.0, 5.0, 2.0], [0.0, 0.0, 9.0]])
    assert vn.greedy_joint_action(ens, 0, hist) == (1, 2)
    tie = np.array([[3.0, 3.0, 1.0], [3.0, 3.0, 1.0]])
    assert vn.greedy_joint_action(ens, 0, tie) == (0, 0)
    with pytest.raises(UsageError):
        vn.greedy_joint_action(ens, 1, hist)


def test_tracked_action_set_order():
    u0 = _utility([[9.0, 0.0, 0.0]])
    u1 = _utility([[0.0, 9.0, 0.0]])
    ens = vn.SubValueEnsemble(1, [u0, u1], [vn.SumMixer(), vn.SumMixer()])
    hist = np.eye(3)[:2] * 9.0
    hist0 = np.array([[9.0, 0.0, 0.0], [9.0, 0.0, 0.0]])
    tracked = vn.tracked_action_set(ens, hist0)
    assert len(tracked) == 2
    assert tracked.actions[0] == (0, 0)
    assert tracked.flats[0] == 0


def test_sum_mixer_adds_utilities(rng):
    assert vn.mix(vn.SumMixer(), [2.0, 3.0], [1.0]) == pytest.approx(5.0)


def test_monotonic_mixer_probe_and_zero_params(rng):
    mixer = vn.MonotonicMixer(state_len=3, n_agents=2, embed_dim=4,
                              hyper_hidden=8, rng=rng)
    s = rng.normal(size=3)
    for _ in range(100):
        u = rng.normal(size=2)
        base = vn.mix(mixer, u, s)
        i = rng.integers(0, 2)
        bumped = u.copy()
        bumped[i] += 0.1
        assert vn.mix(mixer, bumped, s) >= base - 1e-12
    zero = vn.MonotonicMixer(3, 2, 4, 8, rng)
    for store in zero.param_stores().values():
        store.values[:] = 0.0
    assert vn.mix(zero, [5.0, -7.0], s) == vn.mix(zero, [0.0, 3.0], s) == 0.0


def test_monotonic_mixer_derivative_nonnegative(rng):
    mixer = vn.MonotonicMixer(state_len=2, n_agents=3, embed_dim=5,
                              hyper_hidden=8, rng=rng)
    delta = 1e-3
    for _ in range(100):
        u = rng.normal(size=3)
        s = rng.normal(size=2)
        base = vn.mix(mixer, u, s)
        for i in range(3):
            bumped = u.copy()
            bumped[i] += delta
            deriv = (vn.mix(mixer, bumped, s) - base) / delta
            assert deriv >= -1e-9


def test_igm_argmax_consistency(rng):
    """Exhaustive joint argmax of the mixed value equals per-agent greedy."""
    spec = diffcore.ApproximatorSpec((4, 6, 3))
    utilities = [vn.AgentUtility(spec, diffcore.init_params(spec, rng), 1, 3)]
    mixer = vn.MonotonicMixer(state_len=2, n_agents=2, embed_dim=4,
                              hyper_hidden=8, rng=rng)
    ens = vn.SubValueEnsemble(0, utilities, [mixer])
    for _ in range(20):
        hist = rng.normal(size=(2, 4))
        feat = rng.normal(size=2)
        table = vn.sub_value_table(ens, 0, hist, feat)
        greedy = vn.greedy_joint_action(ens, 0, hist)
        flat = greedy[0] + 3 * greedy[1]
        assert table[flat] == pytest.approx(table.max(), abs=1e-12)


def test_critic_target_semantics(rng):
    critic = vn.JointCritic(state_len=2, n_agents=2, n_actions=3,
                            hidden=(8,), rng=rng, target_update_interval=10)
    s = np.array([1.0, 0.0])
    online0 = vn.critic_value(critic, s, (1, 2), use_target=False)
    target0 = vn.critic_value(critic, s, (1, 2), use_target=True)
    assert online0 == pytest.approx(target0)
    # online drifts, target stays until refresh
    diffcore.adam_step(critic.online, np.ones_like(critic.online.values),
                       diffcore.AdamConfig())
    assert vn.critic_value(critic, s, (1, 2), use_target=True) == pytest.approx(target0)
    assert vn.critic_value(critic, s, (1, 2), use_target=False) != pytest.approx(online0)
    critic.refresh_target()
    assert vn.critic_value(critic, s, (1, 2), use_target=True) == \
        pytest.approx(vn.critic_value(critic, s, (1, 2), use_target=False))


def test_critic_action_encoding_distinct(rng):
    critic = vn.JointCritic(2, 2, 3, (8,), rng)
    X = critic._inputs(np.zeros((9, 2)), np.arange(9))
    assert len(np.unique(X, axis=0)) == 9


def test_critic_value_matches_reimplementation():
    rng = np.random.default_rng(11)
    critic = vn.JointCritic(state_len=2, n_agents=2, n_actions=2,
                            hidden=(5,), rng=rng)
    s = np.array([0.3, -0.2])
    x = np.concatenate([s, [0.0, 1.0], [1.0, 0.0]])  # joint action (1, 0)
    v = critic.online.values
    w1, b1 = v[:30].reshape(6, 5), v[30:35]
    w2, b2 = v[35:40].reshape(5, 1), v[40:41]
    expected = float(np.maximum(x @ w1 + b1, 0.0) @ w2 + b2)
    assert vn.critic_value(critic, s, (1, 0)) == pytest.approx(expected, abs=1e-12)


def test_critic_table_enumerates_all_actions(rng):
    critic = vn.JointCritic(2, 2, 3, (8,), rng)
    table = vn.critic_table(critic, np.array([1.0, 0.0]))
    assert table.shape == (9,)
    singles = [vn.critic_value(critic, [1.0, 0.0], j) for j in range(9)]
    assert np.allclose(table, singles, atol=1e-12)
