#!/usr/bin/env python3
# Simulate a handful of Lorenz trajectories and look at the two PCA embedders.
import numpy as np

from koopman_transfer.dataset import DatasetSpec, generate_splits
from koopman_transfer.pca_embed import fit_pi_pipeline, fit_standard

spec = DatasetSpec(n_train=16, len_train=256, n_val=1, len_val=64, n_test=2, len_test=256, master_seed=3)
ds = generate_splits(spec)
states = np.concatenate([t.states for t in ds.train])
print("states", states.shape, "mean", states.mean(0).round(2), "std", states.std(0).round(2))

std = fit_standard(ds.train)
print("\nplain PCA explained variance ratio", std.pca.explained_variance_ratio.round(4))

pi = fit_pi_pipeline(ds.train)
print("physics-informed PCA ratios", pi.pca2.explained_variance_ratio.round(5))
# the last ratio is ~0: sigma*(y - x) is a linear function of the state coordinates
print("smallest ratio %.2e" % pi.pca2.explained_variance_ratio[-1])

s = ds.test[0].states[:5]
e = pi.embed(s)
print("\n9-d embedding of 5 test states\n", e.round(3))
print("decode round trip error %.2e" % np.abs(pi.decode(e) - s).max())
