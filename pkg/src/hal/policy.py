"""Heapified query policy: a learned pairwise comparator run as a
single-elimination tournament over the unlabeled pool, the winner-path
trajectories it leaves behind, and the off-policy gradient update."""

import csv
from collections import deque
from dataclasses import dataclass, replace

import numpy as np

from . import features as F
from . import nn

PROB_FLOOR = 1e-6


@dataclass
class PolicyNet:
    """Comparator pi(a | left, right); a = 0 means the left candidate wins."""

    spec: nn.ModelSpec
    params: list
    adam: nn.AdamState
    n_classes: int

    @classmethod
    def create(cls, n_classes, seed=0, hidden=64, zero_last=True):
        d = F.observation_size(n_classes)
        spec = nn.ModelSpec(
            (2 * d,),
            (nn.dense(2 * d, hidden), nn.relu(), nn.dense(hidden, hidden), nn.relu(),
             nn.dense(hidden, 2), nn.softmax_layer()),
            embedding=2,
        )
        params = nn.init_params(spec, seed)
        if zero_last:
            # untrained comparator is an unbiased coin
            params[-2] = np.zeros_like(params[-2])
        return cls(spec, params, nn.AdamState.zeros_like(params), n_classes)

    @property
    def obs_size(self):
        return F.observation_size(self.n_classes)

    def encode(self, left, right):
        left = np.atleast_2d(np.asarray(left, dtype=np.float64))
        right = np.atleast_2d(np.asarray(right, dtype=np.float64))
        d = self.obs_size
        if left.shape[1] != d or right.shape != left.shape:
            raise ValueError(f"observations must both have length {d}")
        L = self.n_classes
        x = np.concatenate([left, right], axis=1)
        # diversity distances are unbounded; compress them
        for off in (1, d + 1):
            x[:, off:off + L] = np.log1p(np.maximum(x[:, off:off + L], 0.0))
        return x

    def probs(self, left, right):
        return nn.forward(self.spec, self.params, self.encode(left, right))[0]


def policy_prob(policy, left, right):
    """Two-way action distribution for one pair of observations."""
    left = left.vector() if isinstance(left, F.Observation) else left
    right = right.vector() if isinstance(right, F.Observation) else right
    return policy.probs(left, right)[0]


def clamp_prob(p):
    return float(np.clip(p, PROB_FLOOR, 1 - PROB_FLOOR))


@dataclass
class Transition:
    left: np.ndarray
    right: np.ndarray
    action: int
    behavior_prob: float
    depth: int


@dataclass
class Trajectory:
    transitions: list
    winner: int
    comparisons: int
    n_candidates: int


def run_tournament(policy, indices, observations, seed, mode="sample"):
    """Single-elimination tournament; returns the winner's root-ward trajectory.

    Candidates are shuffled by ``seed`` and paired in order; an odd one out
    (the trailing candidate) gets a bye. ``policy`` is anything with a
    batched ``probs(left, right) -> (n, 2)`` method.
    """
    if mode not in ("sample", "greedy"):
        raise ValueError(f"unknown mode {mode!r}")
    indices = np.asarray(indices)
    obs = np.asarray(observations, dtype=np.float64)
    m = len(indices)
    if m == 0:
        raise ValueError("no candidates")
    if obs.shape[0] != m:
        raise ValueError("one observation per candidate required")
    rng = np.random.default_rng(seed)
    alive = list(rng.permutation(m))
    paths = {i: [] for i in alive}
    comparisons = 0
    depth = 0
    while len(alive) > 1:
        k = len(alive) // 2
        left = np.array(alive[0:2 * k:2])
        right = np.array(alive[1:2 * k:2])
        p = policy.probs(obs[left], obs[right])
        if mode == "sample":
            actions = (rng.random(k) < p[:, 1]).astype(int)
        else:
            actions = (p[:, 1] > p[:, 0]).astype(int)
        chosen_p = np.clip(p[np.arange(k), actions], PROB_FLOOR, 1 - PROB_FLOOR)
        winners = np.where(actions == 1, right, left)
        nxt = winners.tolist()
        for j, win in enumerate(nxt):
            # only the final winner's rows get copied, at the end
            paths[win].append((int(left[j]), int(right[j]), int(actions[j]), float(chosen_p[j]), depth))
        if len(alive) % 2:
            nxt.append(alive[-1])
        comparisons += k
        alive = nxt
        depth += 1
    w = alive[0]
    trs = [Transition(obs[li].copy(), obs[ri].copy(), a, bp, d) for li, ri, a, bp, d in paths[w]]
    return Trajectory(trs, int(indices[w]), comparisons, m)


def select_batch(policy, indices, observations, b, seed, mode="sample"):
    """``b`` sequential tournaments over a fixed observation matrix, removing
    each winner before the next. Returns (pool indices, trajectories)."""
    indices = np.asarray(indices)
    if len(indices) < b:
        raise ValueError(f"pool has {len(indices)} items, need {b}")
    remaining = np.ones(len(indices), dtype=bool)
    chosen, trajs = [], []
    pos = {int(v): i for i, v in enumerate(indices)}
    for k in range(b):
        live = np.flatnonzero(remaining)
        traj = run_tournament(policy, indices[live], observations[live], nn.derive_seed(seed, "match", k), mode)
        remaining[pos[traj.winner]] = False
        chosen.append(traj.winner)
        trajs.append(traj)
    return chosen, trajs


def select_from_pool(policy, pool, store, clf, stats, b, n_mc, seed, mode="sample",
                     toggles=F.FeatureToggles()):
    """Observe the whole unlabeled pool once, then run ``select_batch``."""
    obs = F.observe_pool(pool.unlabeled, store, clf, stats, n_mc, nn.derive_seed(seed, "observe"), toggles)
    return select_batch(policy, pool.unlabeled, obs, b, nn.derive_seed(seed, "tournament"), mode)


# -- replay -----------------------------------------------------------------------

@dataclass
class ReplayRecord:
    episode: int
    step: int
    trajectory: Trajectory
    reward: float


class ReplayBuffer:
    """Bounded FIFO of (trajectory, reward) records; oldest evicted first."""

    def __init__(self, capacity=5000):
        self.capacity = int(capacity)
        self.records = deque(maxlen=self.capacity)

    def __len__(self):
        return len(self.records)

    def add(self, episode, step, trajectories, reward):
        if not np.isfinite(reward):
            raise ValueError("reward must be finite")
        for t in trajectories:
            for tr in t.transitions:
                if not 0 < tr.behavior_prob <= 1:
                    raise ValueError("behavior probability must be in (0, 1]")
            self.records.append(ReplayRecord(int(episode), int(step), t, float(reward)))

    def n_episodes(self):
        return len({r.episode for r in self.records})

    def rows(self):
        for r in self.records:
            for tr in r.trajectory.transitions:
                yield r.episode, r.step, tr.depth, tr.action, tr.behavior_prob, r.reward

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["episode", "step", "depth", "action", "behavior_prob", "reward"])
            for row in self.rows():
                w.writerow([row[0], row[1], row[2], row[3], repr(row[4]), repr(row[5])])


# -- off-policy gradient ----------------------------------------------------------

@dataclass
class PGBatch:
    x: np.ndarray         # encoded states (T, 2d)
    actions: np.ndarray   # (T,)
    returns: np.ndarray   # discounted reward per transition (T,)
    behavior: np.ndarray  # (T,)
    n_episodes: int


def collect(policy, buffer, gamma, baseline=False):
    """Flatten the buffer; transition at path position t of a length-T path
    gets gamma**(T-1-t) * r (the final match is undiscounted)."""
    lefts, rights, actions, returns, behavior = [], [], [], [], []
    mean_r = np.mean([r.reward for r in buffer.records]) if baseline and len(buffer) else 0.0
    for rec in buffer.records:
        trs = rec.trajectory.transitions
        n = len(trs)
        for t, tr in enumerate(trs):
            lefts.append(tr.left)
            rights.append(tr.right)
            actions.append(tr.action)
            behavior.append(tr.behavior_prob)
            returns.append(gamma ** (n - 1 - t) * (rec.reward - mean_r))
    if not actions:
        d = policy.obs_size
        return PGBatch(np.zeros((0, 2 * d)), np.zeros(0, int), np.zeros(0), np.zeros(0), buffer.n_episodes())
    return PGBatch(policy.encode(np.array(lefts), np.array(rights)), np.array(actions),
                   np.array(returns), np.array(behavior), buffer.n_episodes())


def weighted_logprob(spec, params, x, actions, weights):
    """sum_i w_i log pi(a_i | s_i) and its gradient (weights held constant)."""
    p, _, cache = nn.forward(spec, params, x, mode="train")
    rows = np.arange(len(actions))
    value = float(np.sum(weights * np.log(np.maximum(p[rows, actions], np.finfo(float).tiny))))
    onehot = np.zeros_like(p)
    onehot[rows, actions] = 1.0
    grads = nn.backward(spec, params, cache, weights[:, None] * (onehot - p), skip_softmax=True)
    return value, grads


def importance_weights(policy, batch, clip=(0.1, 10.0)):
    p = nn.forward(policy.spec, policy.params, batch.x)[0]
    current = p[np.arange(len(batch.actions)), batch.actions]
    return np.clip(current / batch.behavior, clip[0], clip[1])


def pg_update(policy, buffer, lr=0.001, gamma=0.9998, clip=(0.1, 10.0), baseline=False):
    """One Adam ascent step on (1/N) sum log pi(a|s) * G * corr.

    corr = clip(pi(a|s) / pi_behavior(a|s)) is computed once from the current
    parameters and treated as a constant. Returns (new policy, pre-step loss)
    where loss is the negated objective.
    """
    if len(buffer) == 0:
        raise ValueError("replay buffer is empty")
    batch = collect(policy, buffer, gamma, baseline)
    if np.any(batch.behavior <= 0):
        raise ValueError("stored behavior probability is zero")
    if len(batch.actions) == 0:
        return policy, 0.0
    corr = importance_weights(policy, batch, clip)
    weights = batch.returns * corr / max(batch.n_episodes, 1)
    value, grads = weighted_logprob(policy.spec, policy.params, batch.x, batch.actions, weights)
    neg = [-g for g in grads]
    params, adam = nn.adam_step(policy.params, neg, policy.adam, lr)
    return replace(policy, params=params, adam=adam), 0.0 - value
