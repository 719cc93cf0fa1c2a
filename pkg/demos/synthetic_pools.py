"""
Duplicated pools and colour-shifted targets
===========================================

Two stress tests for a query strategy: a pool that is mostly noisy copies
of a few images, and a target domain that is a colourised version of the
source digits.
"""

import numpy as np

from hal import data

store = data.load_digits_store(400, seed=0)

# %%
# 80% of the slots become noisy copies of one source image per class.
dup = data.make_duplicated_pool(store, 0.8, noise_sigma=0.05, seed=1)
tags = np.bincount(dup.provenance, minlength=3)
print("original", tags[data.ORIGINAL], "duplicate", tags[data.DUPLICATE])
sources = dup._cache["duplicate_sources"]
print("distinct sources behind", len(sources), "copies:", len(set(sources.values())))

# %%
# Colour shift: out = (1 - b) * gray + b * |gray - field| per channel.
# At b = 0 the grayscale view is the source, bit for bit.
for b in (0.0, 0.5, 1.0):
    shifted = data.make_domain_shift(store, b, seed=2)
    gap = np.abs(shifted.gray() - store.gray()).mean()
    print(f"blend {b:.1f}: shape {shifted.shape}, mean gray difference {gap:.4f}")
