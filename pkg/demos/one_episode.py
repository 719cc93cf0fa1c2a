"""
One active-learning episode
===========================

Start from a small balanced labeled set, query ten images per step, retrain,
and use the change in validation accuracy as the step's reward.
"""

from dataclasses import replace

from hal import data
from hal import harness as H

cfg = H.EpisodeConfig(classifier="mlp", pool_size=300, n_labeled=30, n_val=200, steps=5, epochs=8, n_mc=4)
ds = H.Datasets(data.load_digits_store(800, seed=0))

# %%
# A random baseline, then an untrained policy on the same seed: both start
# from the same labeled set and the same initial classifier.
rand = H.run_episode(cfg, ds, seed=1, method="random")
pol = H.new_policy(cfg, ds.n_classes)
hal = H.run_episode(cfg, ds, seed=1, policy=pol)

for name, res in (("random", rand), ("policy", hal)):
    print(name)
    for n, a in zip(res.curve.labels, res.curve.accuracy):
        print(f"  {n:4d} labels  accuracy {a:.3f}")
    print("  rewards", [round(r, 3) for r in res.rewards])

# %%
# The rewards telescope: their sum is the net accuracy gain.
print("sum of rewards", round(sum(hal.rewards), 6),
      "net gain", round(hal.curve.accuracy[-1] - hal.curve.accuracy[0], 6))

# %%
# Training a policy is a loop of sampled episodes and off-policy updates.
cfg = replace(cfg, episodes=3)
pol, log, buffer = H.train_policy(cfg, ds)
print("mean reward per episode", [round(r, 4) for r in log.mean_rewards], "replay size", len(buffer))
