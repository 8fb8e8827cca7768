"""Independent reference computations shared by the test modules."""
import math

import numpy as np

from icloco import physics as P
from icloco.env import RobotState
from icloco.morph import N_SLOTS, sample_morphology

PENDULUM_SEED = 106  # a biped with two-joint chains


def double_pendulum(amplitude, gravity=9.81):
    """Robots row whose trunk is pinned and whose chain 0 swings freely (no limits, no contact)."""
    spec = sample_morphology(PENDULUM_SEED, "biped")
    assert spec.chains[0].n_joints == 2
    rb = P.build_robots([spec])
    rb.active[:, :3] = False  # pin the trunk
    rb.active[:, 3 + P.MAX_JOINTS:] = False  # freeze the other chain
    rb.q_lo[:] = -np.inf
    rb.q_hi[:] = np.inf
    rb.gravity[:] = gravity
    q = np.zeros((1, P.N_COORD))
    q[0, 3] = amplitude
    st = P.make_state(rb, q, np.zeros((1, P.N_COORD)))
    return rb, st


def gae_direct(rewards, values, dones, last_value, gamma, lam):
    """Advantages by explicit double summation over the TD residuals.

    ``dones[t]`` cuts the return after step t.
    """
    T = len(rewards)
    nxt = np.append(values[1:], last_value)
    delta = [rewards[t] + gamma * nxt[t] * (1.0 - dones[t]) - values[t] for t in range(T)]
    adv = np.zeros(T)
    for t in range(T):
        total, w = 0.0, 1.0
        for k in range(t, T):
            total += w * delta[k]
            if dones[k]:
                break
            w *= gamma * lam
        adv[t] = total
    return adv


def reward_by_hand(xd, zd, thd, z, nominal, qd_prev, qd, torque, cmd, alive, w, s1, s2, dt):
    """Scalar reward for one state tuple, written out term by term in plain floats."""
    acc2 = sum(((b - a) / dt) ** 2 for a, b in zip(qd_prev, qd))
    tau2 = sum(t * t for t in torque)
    return (w[0] * math.exp(-((xd - cmd) ** 2) / s1)
            + w[1] * math.exp(-(thd ** 2) / s2)
            - w[2] * zd * zd
            - w[3] * thd * thd
            - w[4] * (z - nominal) ** 2
            - w[5] * acc2
            - w[6] * tau2
            + w[7] * (1.0 if alive else 0.0))


def random_policy(n_layers, segment_len, seed=0, obs_dim=6, d_model=16, n_heads=2, **kw):
    """TXL policy with non-trivial relative biases and a non-negligible actor output."""
    from icloco.policy import PolicyConfig, TXLPolicy

    cfg = PolicyConfig(obs_dim=obs_dim, action_dim=3, n_layers=n_layers, segment_len=segment_len,
                       d_model=d_model, n_heads=n_heads, d_ff=2 * d_model, enc_hidden=d_model,
                       head_hidden=d_model, **kw)
    pol = TXLPolicy(cfg, seed)
    rng = np.random.default_rng(seed + 1)
    for name, p in pol.named_parameters():
        if "rel_bias" in name:
            p.data[...] = rng.normal(size=p.shape)
        elif name.startswith("actor"):
            p.data[...] = p.data * 50.0
    return pol


def segment_mode(policy, obs, starts):
    """Chain forward passes over consecutive segments, carrying the cache."""
    from icloco.policy import SegmentCache

    B, Tn, _ = obs.shape
    L = policy.cfg.segment_len
    cache = SegmentCache.empty(policy.cfg, B)
    means, values = [], []
    for s in range(0, Tn, L):
        out = policy.forward(obs[:, s:s + L], cache, starts[:, s:s + L])
        means.append(out.mean.data)
        values.append(out.value.data)
        cache = out.cache
    return np.concatenate(means, axis=1), np.concatenate(values, axis=1)


def rel_err(a, b):
    """Per-step relative error ||a - b|| / ||b|| over the last axis."""
    return np.linalg.norm(a - b, axis=-1) / np.maximum(np.linalg.norm(b, axis=-1), 1e-30)


def pinned_states(n=20, seed=1234):
    """State tuples drawn once from a fixed generator: (prev, cur, command, nominal, alive)."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        def rs():
            return RobotState(
                base=np.array([[rng.normal(), rng.uniform(0.2, 1.0), rng.uniform(-1.2, 1.2)]]),
                base_vel=rng.normal(size=(1, 3)),
                q=rng.normal(size=(1, N_SLOTS)),
                qd=rng.normal(size=(1, N_SLOTS)) * 3,
                prev_action=rng.uniform(-1, 1, size=(1, N_SLOTS)),
                prev_qd=rng.normal(size=(1, N_SLOTS)),
                torque=rng.normal(size=(1, N_SLOTS)) * 10,
                trunk_z=rng.uniform(0.1, 1.0, size=(1, 2)),
            )
        out.append((rs(), rs(), rng.uniform(-1, 1), rng.uniform(0.3, 0.9), bool(i % 5)))
    return out
