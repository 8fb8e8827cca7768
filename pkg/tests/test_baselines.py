import json

import numpy as np
import pytest

from icloco import tensor as T
from icloco.baselines import CONDITIONING_CONTEXT, GRUConfig, GRUPolicy, build_baseline, conditioning_config
from icloco.env import OBS_DIM
from icloco.morph import KIN_DIM
from icloco.policy import PolicyConfig
from icloco.ppo import train
from icloco.tensor import Tensor
from oracles import rel_err, segment_mode
from icloco.kvcache import rollout_incremental
from test_ppo import tiny_run


def small_gru(seed=0, obs_dim=6):
    return GRUPolicy(GRUConfig(obs_dim=obs_dim, action_dim=3, hidden=8, enc_hidden=8, head_hidden=8), seed)


# -- GRU ------------------------------------------------------------------------------

def test_gru_state_resets_at_episode_start():
    pol = small_gru()
    rng = np.random.default_rng(0)
    stream = pol.start_stream(pol.initial_memory(2))
    for _ in range(5):
        pol.step(stream, rng.normal(size=(2, 6)), np.zeros(2, bool))
    assert np.all(stream.h != 0)
    o = rng.normal(size=(2, 6))
    mu, _, v, h = pol.step(stream, o, np.array([True, False]))
    fresh = pol.start_stream(pol.initial_memory(2))
    mu0, _, v0, h0 = pol.step(fresh, o, np.ones(2, bool))
    assert np.array_equal(h[0], h0[0]) and np.array_equal(mu[0], mu0[0]) and v[0] == v0[0]
    assert not np.array_equal(h[1], h0[1])


def test_gru_state_persists_across_trials():
    # no start flag on a trial reset, so the hidden state carries over
    pol = small_gru()
    stream = pol.start_stream(pol.initial_memory(1))
    pol.step(stream, np.ones((1, 6)), np.ones(1, bool))
    h_before = stream.h.copy()
    _, _, _, h = pol.step(stream, np.zeros((1, 6)), np.zeros(1, bool))
    fresh = pol.start_stream(pol.initial_memory(1))
    _, _, _, h0 = pol.step(fresh, np.zeros((1, 6)), np.ones(1, bool))
    assert np.any(h_before != 0) and not np.allclose(h, h0)


def test_gru_rollout_and_update_paths_agree():
    with T.precision(64):
        pol = small_gru(seed=3)
        rng = np.random.default_rng(1)
        obs = rng.normal(size=(3, 10, 6))
        starts = rng.random((3, 10)) < 0.2
        mem = pol.initial_memory(3)
        mem.h = rng.normal(size=mem.h.shape)
        stream = pol.start_stream(mem)
        steps = [pol.step(stream, obs[:, t], starts[:, t]) for t in range(10)]
        mean, log_std, value = pol.forward_sequence(obs, mem, starts)
    assert np.allclose(np.stack([s[0] for s in steps], 1), mean.data, rtol=1e-12, atol=1e-14)
    assert np.allclose(np.stack([s[2] for s in steps], 1), value.data, rtol=1e-12, atol=1e-14)
    assert np.array_equal(log_std.data, steps[0][1])


def test_gru_gradient_cut_at_episode_start():
    with T.precision(64):
        pol = small_gru(seed=4)
        obs = Tensor(np.random.default_rng(2).normal(size=(1, 8, 6)), requires_grad=True)
        starts = np.zeros((1, 8), bool)
        starts[0, 5] = True
        mean, _, value = pol.forward_sequence(obs, pol.initial_memory(1), starts)
        y = T.sum_(T.getitem(mean, (0, 7))) + T.getitem(value, (0, 7))
        g = T.backward(y, [obs])[0]
    assert np.all(g[0, :5] == 0.0)
    assert np.all(np.linalg.norm(g[0, 5:], axis=-1) > 0)


def test_gru_memory_gets_no_gradient():
    with T.precision(64):
        pol = small_gru(seed=5)
        mem = pol.initial_memory(1)
        mem.h = np.ones_like(mem.h)
        mean, _, _ = pol.forward_sequence(np.ones((1, 3, 6)), mem, np.zeros((1, 3), bool))
        grads = T.backward(T.sum_(mean), pol.parameters())
    assert all(np.all(np.isfinite(g)) for g in grads.values())


# -- conditioning ----------------------------------------------------------------------

def test_conditioning_input_width():
    pol = build_baseline("conditioning")
    assert pol.cfg.obs_dim == OBS_DIM + KIN_DIM == 54
    with pytest.raises(ValueError, match="obs_dim"):
        pol.encode(np.zeros((1, OBS_DIM)))


def test_conditioning_caps_sum_to_context():
    for n in (1, 2, 3, 4, 6):
        cfg = conditioning_config(PolicyConfig(obs_dim=OBS_DIM, n_layers=n, segment_len=32))
        assert sum(cfg.max_attn_distance) + 1 == CONDITIONING_CONTEXT
        assert max(cfg.max_attn_distance) - min(cfg.max_attn_distance) <= 1


def _conditioning(seed=0, n_layers=4, segment_len=32):
    base = PolicyConfig(obs_dim=OBS_DIM, action_dim=3, n_layers=n_layers, segment_len=segment_len, d_model=16,
                        n_heads=2, d_ff=16, enc_hidden=16, head_hidden=16)
    pol = build_baseline("conditioning", base, seed)
    rng = np.random.default_rng(seed + 1)
    for name, p in pol.named_parameters():
        if "rel_bias" in name:
            p.data[...] = rng.normal(size=p.shape)
        elif name.startswith("actor"):
            p.data[...] = p.data * 50.0
    return pol


def test_conditioning_jacobian_vanishes_beyond_context():
    with T.precision(64):
        pol = _conditioning()
        Tn = 100
        t = Tn - 1
        x = Tensor(np.random.default_rng(0).normal(size=(1, Tn, 16)), requires_grad=True)
        out = pol.forward_window(x, np.zeros((1, Tn), bool))
        y = T.sum_(T.getitem(out.mean, (0, t))) + T.getitem(out.value, (0, t))
        jac = np.linalg.norm(T.backward(y, [x])[0][0], axis=-1)
    k = t - np.arange(Tn)
    assert np.all(jac[k >= CONDITIONING_CONTEXT] == 0.0)
    assert np.all(jac[k < CONDITIONING_CONTEXT] > 0.0)


def test_conditioning_incremental_matches_segments():
    with T.precision(64):
        pol = _conditioning(seed=2, n_layers=2, segment_len=8)
        rng = np.random.default_rng(3)
        obs = rng.normal(size=(2, 80, 54))
        starts = rng.random((2, 80)) < 0.02
        starts[:, 0] = True
        m_ref, v_ref = segment_mode(pol, obs, starts)
        m_inc, v_inc = rollout_incremental(pol, obs, starts)
    assert np.max(rel_err(m_inc, m_ref)) < 1e-10
    assert np.allclose(v_inc, v_ref, rtol=1e-10, atol=1e-12)


def test_unknown_kind():
    with pytest.raises(ValueError, match="gru"):
        build_baseline("lstm")


# -- through the trainer ------------------------------------------------------------------

@pytest.mark.parametrize("kind", ["gru", "conditioning"])
def test_baselines_train(tmp_path, kind):
    run = tiny_run(iterations=2)
    run.policy = dict(run.policy, kind=kind)
    train(run, str(tmp_path), log=lambda s: None)
    rows = [json.loads(x) for x in open(tmp_path / "metrics.jsonl")]
    assert len(rows) == 2 and all(np.isfinite(r["loss"]) for r in rows)
