import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hal import features as F
from hal import nn
from hal import policy as P
from tests.helpers import fd_gradients, max_rel_error

L = 10
D = F.observation_size(L)


class ScoreComparator:
    """Deterministic comparator preferring the larger value at ``column``."""

    def __init__(self, column=0):
        self.column = column
        self.calls = 0

    def probs(self, left, right):
        self.calls += len(left)
        right_wins = right[:, self.column] > left[:, self.column]
        return np.stack([np.where(right_wins, 0.1, 0.9), np.where(right_wins, 0.9, 0.1)], axis=1)


def obs_with_scores(scores, seed=0):
    obs = np.random.default_rng(seed).random((len(scores), D))
    obs[:, 0] = scores
    return obs


def test_zero_final_layer_gives_even_odds():
    pol = P.PolicyNet.create(L, seed=3)
    rng = np.random.default_rng(0)
    p = P.policy_prob(pol, rng.random(D), rng.random(D))
    np.testing.assert_array_equal(p, [0.5, 0.5])


def test_probabilities_sum_to_one():
    pol = P.PolicyNet.create(L, seed=3, zero_last=False)
    rng = np.random.default_rng(1)
    p = pol.probs(rng.random((20, D)) * 5, rng.random((20, D)))
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)


def test_policy_prob_matches_hand_affine_chain():
    pol = P.PolicyNet.create(L, seed=5, zero_last=False)
    rng = np.random.default_rng(2)
    left, right = rng.random(D), rng.random(D)
    x = np.concatenate([left, right])
    x[1:1 + L] = np.log1p(x[1:1 + L])
    x[D + 1:D + 1 + L] = np.log1p(x[D + 1:D + 1 + L])
    W1, b1, W2, b2, W3, b3 = pol.params
    h = np.maximum(x @ W1 + b1, 0)
    h = np.maximum(h @ W2 + b2, 0)
    z = h @ W3 + b3
    expected = np.exp(z - z.max()) / np.exp(z - z.max()).sum()
    np.testing.assert_allclose(P.policy_prob(pol, left, right), expected, rtol=1e-12)
    with pytest.raises(ValueError):
        P.policy_prob(pol, left[:-1], right[:-1])


def test_single_candidate():
    traj = P.run_tournament(ScoreComparator(), [42], obs_with_scores([0.3]), seed=0, mode="greedy")
    assert traj.winner == 42 and traj.comparisons == 0 and traj.transitions == []
    with pytest.raises(ValueError):
        P.run_tournament(ScoreComparator(), [], np.zeros((0, D)), seed=0)


def test_four_candidates_greedy():
    scores = [0.2, 0.9, 0.4, 0.1]
    traj = P.run_tournament(ScoreComparator(), [10, 11, 12, 13], obs_with_scores(scores), seed=7, mode="greedy")
    assert traj.winner == 11 and traj.comparisons == 3 and len(traj.transitions) == 2
    assert [t.depth for t in traj.transitions] == [0, 1]


def brute_argmax(indices, scores):
    return indices[int(np.argmax(scores))]


@pytest.mark.parametrize("seed", range(20))
def test_five_candidates_bye_matches_brute_force(seed):
    scores = np.random.default_rng(seed).permutation(5) / 5.0
    idx = np.arange(100, 105)
    traj = P.run_tournament(ScoreComparator(), idx, obs_with_scores(scores), seed=seed, mode="greedy")
    assert traj.winner == brute_argmax(idx, scores)
    assert traj.comparisons == 4
    assert len(traj.transitions) <= 3


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 64), st.integers(0, 2**32 - 1))
def test_tournament_structure(m, seed):
    scores = np.random.default_rng(seed).permutation(m).astype(float)
    comp = ScoreComparator()
    traj = P.run_tournament(comp, np.arange(m), obs_with_scores(scores, seed), seed=seed, mode="greedy")
    assert traj.winner == int(np.argmax(scores))
    assert traj.comparisons == m - 1 == comp.calls
    bound = math.ceil(math.log2(m)) if m > 1 else 0
    if m & (m - 1) == 0:
        assert len(traj.transitions) == bound
    else:
        assert len(traj.transitions) <= bound
    for t in traj.transitions:
        assert 0 < t.behavior_prob <= 1


def test_sample_mode_is_seeded():
    pol = P.PolicyNet.create(L, seed=0, zero_last=False)
    obs = np.random.default_rng(0).random((9, D))
    a = P.run_tournament(pol, np.arange(9), obs, seed=4)
    b = P.run_tournament(pol, np.arange(9), obs, seed=4)
    assert a.winner == b.winner
    assert [t.action for t in a.transitions] == [t.action for t in b.transitions]


def test_select_batch_whole_pool_and_distinct():
    obs = obs_with_scores(np.random.default_rng(3).random(6))
    idx = np.arange(20, 26)
    chosen, trajs = P.select_batch(P.PolicyNet.create(L), idx, obs, 6, seed=1)
    assert sorted(chosen) == list(idx) and len(trajs) == 6
    with pytest.raises(ValueError):
        P.select_batch(P.PolicyNet.create(L), idx, obs, 7, seed=1)


def test_select_batch_greedy_top2_by_uncertainty():
    scores = np.array([0.3, 0.8, 0.1, 0.95, 0.5])
    idx = np.arange(5) * 3
    chosen, _ = P.select_batch(ScoreComparator(), idx, obs_with_scores(scores), 2, seed=0, mode="greedy")
    order = np.argsort(-scores)
    assert chosen == [idx[order[0]], idx[order[1]]]


def one_transition_buffer(pol, action=0, reward=1.0, behavior=None, seed=0):
    rng = np.random.default_rng(seed)
    left, right = rng.random(D), rng.random(D)
    if behavior is None:
        behavior = P.clamp_prob(P.policy_prob(pol, left, right)[action])
    tr = P.Transition(left, right, action, behavior, 0)
    buf = P.ReplayBuffer()
    buf.add(0, 0, [P.Trajectory([tr], 0, 1, 2)], reward)
    return buf


def test_zero_rewards_leave_policy_unchanged():
    pol = P.PolicyNet.create(L, seed=1, zero_last=False)
    buf = one_transition_buffer(pol, reward=0.0)
    new, loss = P.pg_update(pol, buf, lr=0.01, gamma=0.9)
    assert loss == 0.0
    for a, b in zip(pol.params, new.params):
        np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("seed", range(3))
def test_single_transition_gradient_is_grad_log_pi(seed):
    pol = P.PolicyNet.create(L, seed=seed, zero_last=False, hidden=6)
    buf = one_transition_buffer(pol, action=seed % 2, seed=seed)
    batch = P.collect(pol, buf, gamma=1.0)
    corr = P.importance_weights(pol, batch)
    np.testing.assert_allclose(corr, 1.0, rtol=1e-9)
    value, grads = P.weighted_logprob(pol.spec, pol.params, batch.x, batch.actions, batch.returns * corr)

    def log_pi(ps):
        p = nn.forward(pol.spec, ps, batch.x)[0]
        return float(np.log(p[0, batch.actions[0]]))

    assert value == pytest.approx(log_pi(pol.params), rel=1e-9)
    assert max_rel_error(grads, fd_gradients(log_pi, pol.params)) < 1e-4


def test_corr_clamps_at_upper_bound():
    pol = P.PolicyNet.create(L, seed=0)  # current prob 0.5
    buf = one_transition_buffer(pol, behavior=1e-6)
    corr = P.importance_weights(pol, P.collect(pol, buf, 0.9998), clip=(0.1, 10))
    assert corr[0] == 10.0


def test_discount_counts_from_root():
    pol = P.PolicyNet.create(L)
    trs = [P.Transition(np.zeros(D), np.zeros(D), 0, 0.5, d) for d in range(3)]
    buf = P.ReplayBuffer()
    buf.add(0, 0, [P.Trajectory(trs, 0, 7, 8)], 2.0)
    batch = P.collect(pol, buf, gamma=0.5)
    np.testing.assert_allclose(batch.returns, [0.5, 1.0, 2.0])


def test_repeated_updates_increase_rewarded_action_probability():
    pol = P.PolicyNet.create(L, seed=2, zero_last=False)
    rng = np.random.default_rng(0)
    left, right = rng.random(D), rng.random(D)
    tr = P.Transition(left, right, 1, 0.5, 0)
    buf = P.ReplayBuffer()
    buf.add(0, 0, [P.Trajectory([tr], 0, 1, 2)], 1.0)
    probs = [P.policy_prob(pol, left, right)[1]]
    for _ in range(30):
        # behavior prob tracks the current policy so corr stays 1 (on-policy)
        tr.behavior_prob = P.clamp_prob(P.policy_prob(pol, left, right)[1])
        pol, _ = P.pg_update(pol, buf, lr=0.01, gamma=1.0)
        probs.append(P.policy_prob(pol, left, right)[1])
    assert all(b > a for a, b in zip(probs, probs[1:]) if a < 1 - 1e-6)


def test_replay_determinism():
    pol = P.PolicyNet.create(L, seed=2, zero_last=False)
    obs = np.random.default_rng(1).random((16, D))
    buf = P.ReplayBuffer()
    _, trajs = P.select_batch(pol, np.arange(16), obs, 3, seed=5)
    buf.add(0, 0, trajs, 0.25)
    a, la = P.pg_update(pol, buf)
    b, lb = P.pg_update(pol, buf)
    assert la == lb
    for x, y in zip(a.params, b.params):
        assert x.tobytes() == y.tobytes()


def test_buffer_eviction_validation_and_csv(tmp_path):
    pol = P.PolicyNet.create(L)
    buf = P.ReplayBuffer(capacity=3)
    obs = np.random.default_rng(0).random((4, D))
    for ep in range(3):
        _, trajs = P.select_batch(pol, np.arange(4), obs, 2, seed=ep)
        buf.add(ep, 0, trajs, 0.1 * ep)
    assert len(buf) == 3 and [r.episode for r in buf.records] == [1, 2, 2]
    with pytest.raises(ValueError):
        buf.add(9, 0, trajs, float("nan"))
    path = tmp_path / "replay.csv"
    buf.to_csv(path)
    rows = list(csv.DictReader(open(path)))
    assert len(rows) == sum(1 for _ in buf.rows())
    back = [(int(r["episode"]), int(r["step"]), int(r["depth"]), int(r["action"]),
             float(r["behavior_prob"]), float(r["reward"])) for r in rows]
    assert back == list(buf.rows())
    with pytest.raises(ValueError):
        P.pg_update(pol, P.ReplayBuffer())
