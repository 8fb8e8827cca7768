"""
Does memory help on unfamiliar robots?
======================================

Loads the committed multi-morphology run and compares survival with and
without an adaptation budget on held-out robots under doubled dynamics
randomization, then traces how the second layer's mean activation separates
robots with different dynamics over time.

    python demos/04_adaptation.py [artifacts/small] [n_episodes]
"""

import os
import sys

from icloco.cli import load_checkpoint
from icloco.evaluation import adaptation_sweep, dynamics_variants, representation_trace

path = sys.argv[1] if len(sys.argv) > 1 else os.path.join(os.path.dirname(__file__), "..", "artifacts", "small")
n = int(sys.argv[2]) if len(sys.argv) > 2 else 100
policy, run = load_checkpoint(path)

res = adaptation_sweep(policy, [0.0, 1.0, 2.0, 5.0], n_episodes=n, multiplier=2.0, seed=1, env_cfg=run.env)
print(res.report().to_table())
print(f"one-sided paired p-value, survival at 5 s budget > 0 s: {res.p_value(5.0):.3g}")

variants = dynamics_variants(4, seed=3)
tr = representation_trace(policy, variants, n_rollouts=min(n, 64), seconds=5.5, seed=3, env_cfg=run.env)
inter = tr.inter_mean()
for t in (0.5, 1.0, 2.0, 3.0, 4.0, 5.0):
    k = tr.at(t)
    if tr.counts[:, k].min() == 0:
        print(f"t = {t:.1f} s  some variant has no rollouts left standing")
    else:
        print(f"t = {t:.1f} s  inter-variant distance {inter[k]:.4f}  (fewest standing: {tr.counts[:, k].min()})")
