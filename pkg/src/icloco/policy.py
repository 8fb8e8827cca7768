"""Segment-recurrent transformer actor-critic.

Tokens are processed in segments of ``segment_len`` steps. Each layer's keys
and values come from the concatenation of the previous segment's layer input
(held constant) and the current segment, so the reach of the policy grows by
one segment per layer: (n_layers + 1) * segment_len steps in total.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .nn import MLP, LayerNorm, Linear, Module, param
from .tensor import Tensor

LOG_STD_MIN = -5.0
LOG_STD_MAX = 1.0
MASK_VALUE = -1e30
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass
class PolicyConfig:
    obs_dim: int
    action_dim: int = 8
    n_layers: int = 4
    segment_len: int = 32
    d_model: int = 128
    n_heads: int = 4
    d_ff: int = 256
    enc_hidden: int = 128
    head_hidden: int = 128
    init_log_std: float = -0.7
    # per-layer cap on attention distance; None means the full 2L-1 window
    max_attn_distance: tuple | None = None
    kind: str = "txl"

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.segment_len < 1:
            raise ValueError("segment_len must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.max_attn_distance is not None:
            self.max_attn_distance = tuple(int(w) for w in self.max_attn_distance)
            if len(self.max_attn_distance) != self.n_layers:
                raise ValueError("max_attn_distance needs one entry per layer")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["max_attn_distance"] is not None:
            d["max_attn_distance"] = list(d["max_attn_distance"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyConfig":
        return cls(**d)


def effective_context_length(cfg: PolicyConfig) -> int:
    """Furthest past step that can influence the current output, plus one."""
    full = (cfg.n_layers + 1) * cfg.segment_len
    if cfg.max_attn_distance is None:
        return full
    return min(full, sum(cfg.max_attn_distance) + 1)


@dataclass
class SegmentCache:
    """Per-layer inputs of the previous segment, each ``(B, Lc, d)``."""

    hidden: list
    starts: np.ndarray  # (B, Lc) episode-start flags

    @classmethod
    def empty(cls, cfg: PolicyConfig, batch: int) -> "SegmentCache":
        dt = T.get_dtype()
        return cls(
            [np.zeros((batch, 0, cfg.d_model), dtype=dt) for _ in range(cfg.n_layers)],
            np.zeros((batch, 0), dtype=bool),
        )

    @property
    def length(self) -> int:
        return self.starts.shape[1]

    @property
    def batch(self) -> int:
        return self.starts.shape[0]

    def select(self, idx) -> "SegmentCache":
        return SegmentCache([h[idx] for h in self.hidden], self.starts[idx])


@dataclass
class SegmentOutput:
    mean: Tensor  # (B, T, A)
    log_std: Tensor  # (A,)
    value: Tensor  # (B, T)
    layer_inputs: list = field(default_factory=list)  # h^0..h^{N-1}
    layer_outputs: list = field(default_factory=list)  # h^1..h^N
    cache: SegmentCache | None = None


def episode_visibility(key_starts: np.ndarray, n_query: int) -> np.ndarray:
    """``(B, Tq, S)`` mask: key j shares the episode of query i.

    The queries are the last ``n_query`` keys. A start flag at position p begins
    a new episode at p.
    """
    ep = np.cumsum(key_starts, axis=1)
    return ep[:, -n_query:, None] == ep[:, None, :]


class Block(Module):
    def __init__(self, cfg: PolicyConfig, rng: np.random.Generator):
        d = cfg.d_model
        self.ln1 = LayerNorm(d)
        self.wq = Linear(d, d, rng)
        self.wk = Linear(d, d, rng)
        self.wv = Linear(d, d, rng)
        self.wo = Linear(d, d, rng, gain=0.5)
        self.ln2 = LayerNorm(d)
        self.ff = MLP([d, cfg.d_ff, d], rng, out_gain=0.5)
        self.rel_bias = param(np.zeros((cfg.n_heads, 2 * cfg.segment_len)))


class TXLPolicy(Module):
    def __init__(self, cfg: PolicyConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        d = cfg.d_model
        self.encoder = MLP([cfg.obs_dim, cfg.enc_hidden, d], rng)
        self.blocks = [Block(cfg, rng) for _ in range(cfg.n_layers)]
        self.ln_f = LayerNorm(d)
        self.actor = MLP([d, cfg.head_hidden, cfg.action_dim], rng, out_gain=0.01)
        self.critic = MLP([d, cfg.head_hidden, 1], rng)
        self.log_std = param(np.full(cfg.action_dim, cfg.init_log_std))

    # -- pieces -----------------------------------------------------------
    def encode(self, obs) -> Tensor:
        obs = T.as_tensor(obs)
        if obs.shape[-1] != self.cfg.obs_dim:
            raise ValueError(f"observation width {obs.shape[-1]} != obs_dim {self.cfg.obs_dim}")
        return self.encoder(obs)

    def clamped_log_std(self) -> Tensor:
        return T.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX)

    def heads(self, h: Tensor):
        z = self.ln_f(h)
        mean = self.actor(z)
        value = self.critic(z)
        return mean, T.reshape(value, value.shape[:-1])

    def _attention(self, blk: Block, h: Tensor, mem: Tensor | None, visible: np.ndarray, dist: np.ndarray) -> Tensor:
        cfg = self.cfg
        B, Tq, d = h.shape
        H, dh = cfg.n_heads, cfg.head_dim
        a = blk.ln1(h)
        a_kv = a if mem is None else T.concat([blk.ln1(mem), a], axis=1)
        S = a_kv.shape[1]
        q = T.transpose(T.reshape(blk.wq(a), (B, Tq, H, dh)), (0, 2, 1, 3))
        k = T.transpose(T.reshape(blk.wk(a_kv), (B, S, H, dh)), (0, 2, 3, 1))
        v = T.transpose(T.reshape(blk.wv(a_kv), (B, S, H, dh)), (0, 2, 1, 3))
        scores = T.matmul(q, k) * (1.0 / np.sqrt(dh))
        bias = T.getitem(blk.rel_bias, (slice(None), np.clip(dist, 0, 2 * cfg.segment_len - 1)))
        mask = np.where(visible, 0.0, MASK_VALUE)[:, None, :, :]
        p = T.softmax(scores + bias + mask)
        o = T.reshape(T.transpose(T.matmul(p, v), (0, 2, 1, 3)), (B, Tq, d))
        return blk.wo(o)

    def run_layers(self, x: Tensor, mems: list | None, visible_fn, dist: np.ndarray):
        """Apply every block. ``mems[n]`` is the constant key/value prefix for block n."""
        inputs, outputs = [], []
        h = x
        for n, blk in enumerate(self.blocks):
            inputs.append(h)
            mem = None if mems is None or mems[n].shape[1] == 0 else mems[n]
            h1 = h + self._attention(blk, h, mem, visible_fn(n), dist)
            h = h1 + blk.ff(blk.ln2(h1))
            outputs.append(h)
        return inputs, outputs

    def layer_visibility(self, base: np.ndarray, dist: np.ndarray, n: int) -> np.ndarray:
        if self.cfg.max_attn_distance is None:
            return base
        return base & (dist <= self.cfg.max_attn_distance[n])[None]

    # -- segment mode -------------------------------------------------------
    def forward_tokens(self, x: Tensor, cache: SegmentCache, starts: np.ndarray) -> SegmentOutput:
        cfg = self.cfg
        B, Tq, d = x.shape
        if Tq > cfg.segment_len:
            raise ValueError(f"segment of {Tq} steps exceeds segment_len {cfg.segment_len}")
        if cache.batch != B or len(cache.hidden) != cfg.n_layers or cache.length > cfg.segment_len:
            raise ValueError(
                f"cache incompatible with config: batch {cache.batch} vs {B}, layers "
                f"{len(cache.hidden)} vs {cfg.n_layers}, length {cache.length} vs max {cfg.segment_len}"
            )
        for hmem in cache.hidden:
            if hmem.shape != (B, cache.length, d):
                raise ValueError(f"cache layer shape {hmem.shape} != {(B, cache.length, d)}")
        starts = np.asarray(starts, dtype=bool).reshape(B, Tq)
        Lc = cache.length
        kpos = np.concatenate([np.arange(-Lc, 0), np.arange(Tq)])
        dist = np.arange(Tq)[:, None] - kpos[None, :]
        base = episode_visibility(np.concatenate([cache.starts, starts], axis=1), Tq) & (dist >= 0)[None]
        # entries may be arrays or live tensors; either way they are consumed under stop-gradient
        mems = [T.stop_gradient(T.as_tensor(hm)) for hm in cache.hidden]
        inputs, outputs = self.run_layers(x, mems, lambda n: self.layer_visibility(base, dist, n), dist)
        mean, value = self.heads(outputs[-1])
        new_cache = SegmentCache([h.data.copy() for h in inputs], starts.copy())
        return SegmentOutput(mean, self.clamped_log_std(), value, inputs, outputs, new_cache)

    def forward(self, obs, cache: SegmentCache, starts: np.ndarray) -> SegmentOutput:
        return self.forward_tokens(self.encode(obs), cache, starts)

    def forward_window(self, x: Tensor, starts: np.ndarray) -> SegmentOutput:
        """Process a whole stream at once with the segment-mode visibility pattern.

        Query at step t sees steps from the start of the previous segment up to
        t. Equivalent to chained :meth:`forward_tokens` calls.
        """
        B, Tn, _ = x.shape
        L = self.cfg.segment_len
        pos = np.arange(Tn)
        dist = pos[:, None] - pos[None, :]
        lo = (pos // L - 1) * L
        window = (dist >= 0) & (pos[None, :] >= lo[:, None])
        base = episode_visibility(np.asarray(starts, dtype=bool), Tn) & window[None]
        inputs, outputs = self.run_layers(x, None, lambda n: self.layer_visibility(base, dist, n), dist)
        mean, value = self.heads(outputs[-1])
        return SegmentOutput(mean, self.clamped_log_std(), value, inputs, outputs, None)

    # -- trainer protocol -------------------------------------------------------
    def initial_memory(self, batch: int) -> SegmentCache:
        return SegmentCache.empty(self.cfg, batch)

    def start_stream(self, memory: SegmentCache):
        from .kvcache import init_from_segment

        return init_from_segment(self, memory)

    def step(self, stream, obs: np.ndarray, episode_start: np.ndarray):
        from .kvcache import infer_step

        return infer_step(self, stream, obs, episode_start)

    def memory_from_records(self, records: list, starts: np.ndarray) -> SegmentCache:
        # records[t] is (N, B, d) of layer inputs at step t
        stacked = np.stack(records, axis=2)  # (N, B, T, d)
        return SegmentCache([stacked[n] for n in range(self.cfg.n_layers)], np.asarray(starts, dtype=bool).copy())

    def forward_sequence(self, obs: np.ndarray, memory: SegmentCache, starts: np.ndarray):
        out = self.forward(obs, memory, starts)
        return out.mean, out.log_std, out.value


# ---------------------------------------------------------------------------
# Gaussian action head


def gaussian_log_prob(action: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    z = (action - mean) * np.exp(-log_std)
    return np.sum(-0.5 * z * z - log_std - _HALF_LOG_2PI, axis=-1)


def gaussian_log_prob_t(action: np.ndarray, mean: Tensor, log_std: Tensor) -> Tensor:
    z = (T.as_tensor(action) - mean) * T.exp(-log_std)
    return T.sum_(T.square(z) * -0.5 - log_std - _HALF_LOG_2PI, axis=-1)


def gaussian_entropy_t(log_std: Tensor) -> Tensor:
    return T.sum_(log_std + (0.5 + _HALF_LOG_2PI))


def act(mean: np.ndarray, log_std: np.ndarray, rng: np.random.Generator | None, deterministic: bool = False):
    """Sample from the diagonal Gaussian; returns (action, log_prob)."""
    mean = np.asarray(mean)
    log_std = np.clip(np.asarray(log_std), LOG_STD_MIN, LOG_STD_MAX)
    if deterministic:
        action = mean.copy()
    else:
        action = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
    return action, gaussian_log_prob(action, mean, log_std)
