"""Single-step inference with a rolling key/value window.

The window keeps the keys and values of the last ``2L - 1`` steps per layer.
To reproduce segment-mode outputs exactly it also tracks the phase inside the
virtual segment: a step at in-segment position j attends to the previous
``L + j`` steps (fewer after an episode start), never to the whole window.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .policy import MASK_VALUE, SegmentCache


class KVWindow:
    def __init__(self, policy, batch: int):
        cfg = policy.cfg
        self.segment_len = cfg.segment_len
        self.capacity = 2 * cfg.segment_len - 1
        dt = T.get_dtype()
        shape = (cfg.n_layers, batch, cfg.n_heads, self.capacity, cfg.head_dim)
        self.keys = np.zeros(shape, dtype=dt)
        self.values = np.zeros(shape, dtype=dt)
        self.starts = np.zeros((batch, self.capacity), dtype=bool)
        self.head = 0  # physical slot of the oldest entry
        self.length = 0
        self.phase = 0  # position of the next step inside its segment
        self.last_output = None

    @property
    def batch(self) -> int:
        return self.starts.shape[0]

    def nbytes(self) -> int:
        return self.keys.nbytes + self.values.nbytes + self.starts.nbytes

    def _slots(self, m: int) -> np.ndarray:
        return (self.head + self.length - m + np.arange(m)) % self.capacity

    def _append(self, k: np.ndarray, v: np.ndarray, start: np.ndarray) -> None:
        # k, v: (N, B, H, dh)
        if self.length < self.capacity:
            slot = (self.head + self.length) % self.capacity
            self.length += 1
        else:
            slot = self.head
            self.head = (self.head + 1) % self.capacity
        self.keys[:, :, :, slot] = k
        self.values[:, :, :, slot] = v
        self.starts[:, slot] = start


def _split(x: np.ndarray, n_heads: int) -> np.ndarray:
    # (..., d) -> (..., H, dh)
    return x.reshape(*x.shape[:-1], n_heads, x.shape[-1] // n_heads)


def init_from_segment(policy, cache: SegmentCache) -> KVWindow:
    """Window seeded with keys/values computed from a segment's layer inputs."""
    cfg = policy.cfg
    if cache.length > cfg.segment_len:
        raise ValueError(f"segment of {cache.length} steps exceeds segment_len {cfg.segment_len}")
    win = KVWindow(policy, cache.batch)
    Lc = cache.length
    for n, blk in enumerate(policy.blocks):
        if Lc == 0:
            continue
        a = blk.ln1.apply(cache.hidden[n])  # (B, Lc, d)
        k = _split(blk.wk.apply(a), cfg.n_heads)  # (B, Lc, H, dh)
        v = _split(blk.wv.apply(a), cfg.n_heads)
        win.keys[n, :, :, :Lc] = k.transpose(0, 2, 1, 3)
        win.values[n, :, :, :Lc] = v.transpose(0, 2, 1, 3)
    win.starts[:, :Lc] = cache.starts
    win.length = Lc
    win.phase = 0
    return win


def _visible_past(win: KVWindow, m: int, episode_start: np.ndarray) -> np.ndarray:
    """(B, m) mask over the m most recent entries, oldest first."""
    if m == 0:
        return np.zeros((win.batch, 0), dtype=bool)
    flags = win.starts[:, win._slots(m)]
    idx = np.arange(m)
    last = np.where(flags, idx[None, :], -1).max(axis=1)
    vis = idx[None, :] >= np.maximum(last, 0)[:, None]
    vis &= ~episode_start[:, None]
    return vis


def infer_step(policy, win: KVWindow, obs: np.ndarray, episode_start: np.ndarray):
    """Advance every stream in ``win`` by one step (mutates ``win``).

    Returns ``(mean, log_std, value, layer_inputs)``; ``layer_inputs`` is
    ``(N, B, d)`` and is what a segment cache stores for this step.
    """
    cfg = policy.cfg
    H, dh = cfg.n_heads, cfg.head_dim
    obs = np.asarray(obs, dtype=T.get_dtype())
    episode_start = np.asarray(episode_start, dtype=bool).reshape(win.batch)
    if obs.shape[-1] != cfg.obs_dim:
        raise ValueError(f"observation width {obs.shape[-1]} != obs_dim {cfg.obs_dim}")

    m = min(win.length, win.segment_len + win.phase)
    slots = win._slots(m)
    base = np.concatenate([_visible_past(win, m, episode_start), np.ones((win.batch, 1), dtype=bool)], axis=1)
    dist = np.arange(m, -1, -1)

    h = policy.encoder.apply(obs)  # (B, d)
    records, new_k, new_v = [], [], []
    for n, blk in enumerate(policy.blocks):
        records.append(h)
        a = blk.ln1.apply(h)
        q = _split(blk.wq.apply(a), H)[:, :, None, :]  # (B, H, 1, dh)
        k_now = _split(blk.wk.apply(a), H)  # (B, H, dh)
        v_now = _split(blk.wv.apply(a), H)
        keys = np.concatenate([win.keys[n][:, :, slots], k_now[:, :, None]], axis=2)  # (B, H, m+1, dh)
        vals = np.concatenate([win.values[n][:, :, slots], v_now[:, :, None]], axis=2)
        vis = base
        if cfg.max_attn_distance is not None:
            vis = base & (dist <= cfg.max_attn_distance[n])[None]
        scores = (q @ np.swapaxes(keys, -1, -2)) * (1.0 / np.sqrt(dh))  # (B, H, 1, m+1)
        scores = scores + blk.rel_bias.data[:, dist][None, :, None, :]
        scores = scores + np.where(vis, 0.0, MASK_VALUE)[:, None, None, :]
        scores = scores - scores.max(axis=-1, keepdims=True)
        p = np.exp(scores)
        p /= p.sum(axis=-1, keepdims=True)
        o = (p @ vals).reshape(win.batch, cfg.d_model)
        h1 = h + blk.wo.apply(o)
        h = h1 + blk.ff.apply(blk.ln2.apply(h1))
        new_k.append(k_now)
        new_v.append(v_now)

    win._append(np.stack(new_k), np.stack(new_v), episode_start)
    win.phase = (win.phase + 1) % win.segment_len
    win.last_output = h  # output of the final block, for activation traces

    z = policy.ln_f.apply(h)
    mean = policy.actor.apply(z)
    value = policy.critic.apply(z)[:, 0]
    log_std = np.clip(policy.log_std.data, -5.0, 1.0)
    return mean, log_std, value, np.stack(records)


def rollout_incremental(policy, obs: np.ndarray, starts: np.ndarray):
    """Run a ``(B, T, obs_dim)`` stream step by step from an empty window."""
    B, Tn, _ = obs.shape
    win = init_from_segment(policy, SegmentCache.empty(policy.cfg, B))
    means, values = [], []
    for t in range(Tn):
        mu, _, v, _ = infer_step(policy, win, obs[:, t], starts[:, t])
        means.append(mu)
        values.append(v)
    return np.stack(means, axis=1), np.stack(values, axis=1)
