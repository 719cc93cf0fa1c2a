"""
Choosing one image by tournament
================================

The query policy never scores images on an absolute scale. It compares two
observations at a time, and a knockout bracket over the pool leaves one
winner after M - 1 comparisons.
"""

import numpy as np

from hal import features as F
from hal import policy as P

# a made-up pool of 12 observations for a 10-class problem
L = 10
rng = np.random.default_rng(0)
obs = rng.random((12, F.observation_size(L)))
print("observation length:", obs.shape[1], "= 1 uncertainty + L diversity + 144 HOG + L bias-aware")

# %%
# An untrained comparator is a fair coin, so the winner is arbitrary.
pol = P.PolicyNet.create(L, seed=0)
print("untrained p(right wins):", P.policy_prob(pol, obs[0], obs[1])[1])

traj = P.run_tournament(pol, np.arange(100, 112), obs, seed=3)
print("winner", traj.winner, "after", traj.comparisons, "comparisons")
for t in traj.transitions:
    print(f"  round {t.depth}: action {t.action}, behaviour prob {t.behavior_prob:.3f}")

# %%
# Only the winner's path is kept for learning: about log2(M) matches.
# A batch of b images is b tournaments, each on what the last one left.
chosen, trajs = P.select_batch(pol, np.arange(100, 112), obs, 4, seed=9)
print("batch:", chosen, "path lengths:", [len(t.transitions) for t in trajs])
