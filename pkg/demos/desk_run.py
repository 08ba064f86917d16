#!/usr/bin/env python3
# Whole desk-scale study for one seed: data, three backbones, four safety heads, report.
# usage: python desk_run.py [seed] [out_dir]
import logging
import sys
import time
from dataclasses import replace

from koopman_transfer.config import desk_config
from koopman_transfer.pipeline import run_all

logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
out = sys.argv[2] if len(sys.argv) > 2 else "runs"
cfg = replace(desk_config(), master_seed=seed, out_dir=out, name=f"desk-seed{seed}")

t = time.perf_counter()
run = run_all(cfg)
print(f"\nfinished in {time.perf_counter() - t:.0f}s -> {run.root}")
for name in ("summary.csv", "rollout.csv", "pairwise.csv"):
    print(f"\n== {name}")
    print(run.path("results", "report", name).read_text())
