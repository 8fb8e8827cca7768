"""
Segment recurrence and the rolling KV window
============================================

During training the transformer reads a segment of L steps at a time plus a
cached copy of the previous segment. At deployment it steps once per control
tick against a window of the last 2L - 1 entries. Both give the same actions.
"""

import numpy as np

from icloco import tensor as T
from icloco.kvcache import init_from_segment, rollout_incremental
from icloco.policy import PolicyConfig, SegmentCache, TXLPolicy, effective_context_length

cfg = PolicyConfig(obs_dim=6, action_dim=3, n_layers=3, segment_len=8, d_model=32, n_heads=4,
                   d_ff=64, enc_hidden=32, head_hidden=32)
print("effective context (N + 1) * L =", effective_context_length(cfg), "steps")

rng = np.random.default_rng(0)
obs = rng.normal(size=(2, 100, 6))
starts = np.zeros((2, 100), dtype=bool)
starts[:, 0] = True
starts[1, 57] = True  # the second stream begins a new episode half way

with T.precision(64):
    policy = TXLPolicy(cfg, seed=0)
    # segment mode: chain forward passes, carrying the cache
    cache = SegmentCache.empty(cfg, 2)
    means = []
    for s in range(0, 100, cfg.segment_len):
        out = policy.forward(obs[:, s:s + cfg.segment_len], cache, starts[:, s:s + cfg.segment_len])
        means.append(out.mean.data)
        cache = out.cache
    seg = np.concatenate(means, axis=1)
    # incremental mode: one step at a time
    inc, _ = rollout_incremental(policy, obs, starts)

err = np.abs(seg - inc).max() / np.abs(seg).max()
print(f"largest difference between the two modes: {err:.1e} (relative)")

# the window has a fixed size no matter how long the stream runs
win = init_from_segment(policy, SegmentCache.empty(cfg, 1))
print("KV window capacity:", win.capacity, "entries,", win.nbytes(), "bytes")
