"""Comparison policies: a GRU actor-critic and the kinematics-conditioned windowed transformer.

Both speak the same trainer protocol as :class:`~icloco.policy.TXLPolicy`
(``initial_memory``, ``start_stream``, ``step``, ``memory_from_records``,
``forward_sequence``).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .env import OBS_DIM
from .morph import KIN_DIM
from .nn import MLP, LayerNorm, Linear, Module, param
from .policy import LOG_STD_MAX, LOG_STD_MIN, PolicyConfig, TXLPolicy
from .tensor import Tensor

CONDITIONING_CONTEXT = 64


@dataclass
class GRUConfig:
    obs_dim: int
    action_dim: int = 8
    hidden: int = 128
    enc_hidden: int = 128
    head_hidden: int = 128
    init_log_std: float = -0.7
    segment_len: int = 32  # rollout length per collection round / truncation length
    kind: str = "gru"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GRUConfig":
        return cls(**d)


@dataclass
class GRUMemory:
    h: np.ndarray  # (B, H) hidden state before the segment

    def select(self, idx) -> "GRUMemory":
        return GRUMemory(self.h[idx])

    @property
    def batch(self) -> int:
        return self.h.shape[0]


class GRUStream:
    def __init__(self, h: np.ndarray):
        self.h = h.copy()


def _sig(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class GRUPolicy(Module):
    """obs -> MLP encoder -> GRU cell -> LayerNorm -> actor / critic heads.

    The hidden state is zeroed at episode starts and carried across trials.
    """

    def __init__(self, cfg: GRUConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        H = cfg.hidden
        self.encoder = MLP([cfg.obs_dim, cfg.enc_hidden, H], rng)
        self.wx = Linear(H, 3 * H, rng)  # input to update / reset / candidate
        self.wh = Linear(H, 2 * H, rng)  # hidden to update / reset
        self.wn = Linear(H, H, rng)  # gated hidden to candidate
        self.ln_f = LayerNorm(H)
        self.actor = MLP([H, cfg.head_hidden, cfg.action_dim], rng, out_gain=0.01)
        self.critic = MLP([H, cfg.head_hidden, 1], rng)
        self.log_std = param(np.full(cfg.action_dim, cfg.init_log_std))

    # numpy path, used for rollouts
    def _cell_np(self, x, h):
        H = self.cfg.hidden
        gx = self.wx.apply(x)
        gh = self.wh.apply(h)
        z = _sig(gx[:, :H] + gh[:, :H])
        r = _sig(gx[:, H:2 * H] + gh[:, H:])
        n = np.tanh(gx[:, 2 * H:] + self.wn.apply(r * h))
        return (1.0 - z) * n + z * h

    # tensor path, used for updates
    def _cell(self, x: Tensor, h: Tensor) -> Tensor:
        H = self.cfg.hidden
        gx = self.wx(x)
        gh = self.wh(h)
        z = T.sigmoid(T.getitem(gx, (slice(None), slice(0, H))) + T.getitem(gh, (slice(None), slice(0, H))))
        r = T.sigmoid(T.getitem(gx, (slice(None), slice(H, 2 * H))) + T.getitem(gh, (slice(None), slice(H, 2 * H))))
        n = T.tanh(T.getitem(gx, (slice(None), slice(2 * H, 3 * H))) + self.wn(r * h))
        return (1.0 - z) * n + z * h

    def initial_memory(self, batch: int) -> GRUMemory:
        return GRUMemory(np.zeros((batch, self.cfg.hidden), dtype=T.get_dtype()))

    def start_stream(self, memory: GRUMemory) -> GRUStream:
        return GRUStream(memory.h)

    def step(self, stream: GRUStream, obs: np.ndarray, episode_start: np.ndarray):
        obs = np.asarray(obs, dtype=T.get_dtype())
        if obs.shape[-1] != self.cfg.obs_dim:
            raise ValueError(f"observation width {obs.shape[-1]} != obs_dim {self.cfg.obs_dim}")
        keep = ~np.asarray(episode_start, dtype=bool)
        h = stream.h * keep[:, None]
        h = self._cell_np(self.encoder.apply(obs), h)
        stream.h = h
        z = self.ln_f.apply(h)
        log_std = np.clip(self.log_std.data, LOG_STD_MIN, LOG_STD_MAX)
        return self.actor.apply(z), log_std, self.critic.apply(z)[:, 0], h

    def memory_from_records(self, records: list, starts: np.ndarray) -> GRUMemory:
        return GRUMemory(np.array(records[-1], copy=True))

    def forward_sequence(self, obs: np.ndarray, memory: GRUMemory, starts: np.ndarray):
        B, Tn, _ = obs.shape
        x = self.encoder(T.as_tensor(obs))
        h = T.stop_gradient(Tensor(memory.h))
        keep = (~np.asarray(starts, dtype=bool)).astype(T.get_dtype())
        hs = []
        for t in range(Tn):
            h = h * keep[:, t, None]
            h = self._cell(T.getitem(x, (slice(None), t)), h)
            hs.append(T.reshape(h, (B, 1, self.cfg.hidden)))
        z = self.ln_f(T.concat(hs, axis=1))
        mean = self.actor(z)
        value = self.critic(z)
        return mean, T.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX), T.reshape(value, (B, Tn))


def conditioning_config(base: PolicyConfig, context: int = CONDITIONING_CONTEXT) -> PolicyConfig:
    """Transformer whose total reach is ``context`` steps, observing kinematics too."""
    n = base.n_layers
    reach = context - 1
    caps = [reach // n + (1 if i < reach % n else 0) for i in range(n)]
    d = base.to_dict()
    d.update(obs_dim=OBS_DIM + KIN_DIM, max_attn_distance=caps, kind="conditioning")
    return PolicyConfig.from_dict(d)


def build_baseline(kind: str, base: PolicyConfig | None = None, seed: int = 0):
    """``gru`` or ``conditioning``; ``base`` supplies sizes (defaults otherwise)."""
    base = base or PolicyConfig(obs_dim=OBS_DIM)
    if kind == "gru":
        cfg = GRUConfig(obs_dim=OBS_DIM, action_dim=base.action_dim, hidden=base.d_model,
                        enc_hidden=base.enc_hidden, head_hidden=base.head_hidden,
                        init_log_std=base.init_log_std, segment_len=base.segment_len)
        return GRUPolicy(cfg, seed)
    if kind == "conditioning":
        return TXLPolicy(conditioning_config(base), seed)
    raise ValueError(f"unknown baseline kind {kind!r}; expected 'gru' or 'conditioning'")
