#!/usr/bin/env python3
# Compute the ground-truth safety field on a coarse grid and label a trajectory with it.
import sys
import time

import numpy as np

from koopman_transfer.chaos_sim import integrate
from koopman_transfer.safety import NoiseModel, SculptConfig, build_grid, compute_safety, label_states, save_field_csv

res = int(sys.argv[1]) if len(sys.argv) > 1 else 12
grid = build_grid(res=(res, res, res))

t = time.perf_counter()
result = compute_safety(grid, NoiseModel((0.0, 0.0, 0.0)), SculptConfig())
print(f"{res}^3 grid converged in {result.iterations} iterations, {time.perf_counter() - t:.1f}s")
print("sup-norm deltas", np.round(result.deltas, 3))
print("U range %.3f .. %.3f, median %.3f" % (result.U.min(), result.U.max(), np.median(result.U)))

traj = integrate([1.0, 1.0, 25.0], 512)
labels = label_states(traj, grid)
print("\n%d of %d states inside the region" % (labels.in_region.sum(), len(traj)))
print("first labelled values", np.round(labels.u[labels.in_region][:8], 3))

save_field_csv(f"u_field_{res}.csv", grid)
print(f"wrote u_field_{res}.csv")
