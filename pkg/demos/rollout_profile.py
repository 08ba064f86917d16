#!/usr/bin/env python3
# Per-window rollout error of a finished run, with the growth ratios that matter for Task A.
# usage: python rollout_profile.py runs/desk-seed0
import csv
import sys
from pathlib import Path

import numpy as np

root = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/desk-seed0")
with open(root / "results" / "report" / "rollout.csv") as fh:
    rows = list(csv.DictReader(fh))

for r in rows:
    w = np.array([float(v) for k, v in r.items() if k != "model"])
    print(f"{r['model']:10s} windows {np.round(w, 1)}  max/min {w.max() / w.min():.2f}  w2/w1 {w[1] / w[0]:.2f}")

# spread across test trajectories for the Koopman backbone
with open(root / "results" / "rollout_koopman.csv") as fh:
    per = np.array([[int(r["traj_id"]), int(r["window"]), float(r["state_mse"])] for r in csv.DictReader(fh)])
for w in range(4):
    v = per[per[:, 1] == w, 2]
    print(f"koopman window {w}: median {np.median(v):.1f}  iqr {np.percentile(v, 25):.1f}-{np.percentile(v, 75):.1f}")
