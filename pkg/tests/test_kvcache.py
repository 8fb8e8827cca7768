import numpy as np
import pytest

from icloco import tensor as T
from icloco.kvcache import KVWindow, infer_step, init_from_segment, rollout_incremental
from icloco.policy import SegmentCache
from oracles import random_policy, rel_err, segment_mode


def _stream(rng, B, Tn, p_start=0.02):
    obs = rng.normal(size=(B, Tn, 6))
    starts = rng.random((B, Tn)) < p_start
    starts[:, 0] = True
    return obs, starts


# the two paths are algebraically identical; at 32 bits only float roundoff separates them
@pytest.mark.parametrize("bits,tol", [(64, 1e-5), (32, 1e-4)])
@pytest.mark.parametrize("N,L", [(1, 1), (1, 5), (2, 4), (3, 8), (3, 3)])
def test_incremental_matches_segment_mode(bits, tol, N, L):
    with T.precision(bits):
        pol = random_policy(N, L, seed=10 * N + L)
        obs, starts = _stream(np.random.default_rng(L), 3, 200)
        m_ref, v_ref = segment_mode(pol, obs, starts)
        m_inc, v_inc = rollout_incremental(pol, obs, starts)
    # relative error of each step's full output vector (action mean and value)
    inc = np.concatenate([m_inc, v_inc[..., None]], axis=-1)
    ref = np.concatenate([m_ref, v_ref[..., None]], axis=-1)
    assert np.max(rel_err(inc, ref)) < tol


def test_capacity():
    assert KVWindow(random_policy(1, 128, d_model=8), 1).capacity == 255
    assert KVWindow(random_policy(1, 4), 1).capacity == 7


def test_init_from_segment_lengths():
    pol = random_policy(2, 4)
    assert init_from_segment(pol, SegmentCache.empty(pol.cfg, 2)).length == 0
    out = pol.forward(np.ones((2, 4, 6)), pol.initial_memory(2), np.zeros((2, 4), bool))
    assert init_from_segment(pol, out.cache).length == 4
    big = SegmentCache([np.zeros((1, 5, 16))] * 2, np.zeros((1, 5), bool))
    with pytest.raises(ValueError, match="segment_len"):
        init_from_segment(pol, big)


def test_round_trip_from_cache():
    with T.precision(64):
        pol = random_policy(2, 4, seed=1)
        rng = np.random.default_rng(0)
        o1, o2 = rng.normal(size=(2, 4, 6)), rng.normal(size=(2, 1, 6))
        st = np.zeros((2, 4), bool)
        first = pol.forward(o1, pol.initial_memory(2), st)
        ref = pol.forward(o2, first.cache, np.zeros((2, 1), bool))
        win = init_from_segment(pol, first.cache)
        mu, _, v, _ = infer_step(pol, win, o2[:, 0], np.zeros(2, bool))
    assert np.max(rel_err(mu, ref.mean.data[:, 0])) < 1e-10
    assert np.allclose(v, ref.value.data[:, 0], rtol=1e-10)


def test_first_step_attends_to_itself():
    with T.precision(64):
        pol = random_policy(1, 4, seed=2)
        obs = np.random.default_rng(0).normal(size=(1, 6))
        win = init_from_segment(pol, SegmentCache.empty(pol.cfg, 1))
        mu, _, _, _ = infer_step(pol, win, obs, np.ones(1, bool))
        blk = pol.blocks[0]
        x = pol.encoder.apply(obs)
        h1 = x + blk.wo.apply(blk.wv.apply(blk.ln1.apply(x)))
        h = h1 + blk.ff.apply(blk.ln2.apply(h1))
        assert np.allclose(mu, pol.actor.apply(pol.ln_f.apply(h)), rtol=1e-12, atol=1e-14)


def test_three_segments_of_steps():
    with T.precision(64):
        pol = random_policy(2, 6, seed=4)
        obs = np.random.default_rng(1).normal(size=(1, 18, 6))
        starts = np.zeros((1, 18), bool)
        m_ref, _ = segment_mode(pol, obs, starts)
        m_inc, _ = rollout_incremental(pol, obs, starts)
    assert np.max(rel_err(m_inc, m_ref)) < 1e-5


def test_memory_is_constant():
    pol = random_policy(2, 4)
    win = init_from_segment(pol, SegmentCache.empty(pol.cfg, 2))
    size = win.nbytes()
    rng = np.random.default_rng(0)
    for t in range(50):
        infer_step(pol, win, rng.normal(size=(2, 6)), np.zeros(2, bool))
        assert win.nbytes() == size
        assert win.length <= win.capacity
    assert win.length == win.capacity


def test_restart_from_records_matches_continuing():
    # the trainer rebuilds the window from recorded layer inputs at every segment boundary
    with T.precision(64):
        pol = random_policy(3, 4, seed=5)
        obs, starts = _stream(np.random.default_rng(2), 2, 24, p_start=0.1)
        m_ref, _ = rollout_incremental(pol, obs, starts)
        mem = pol.initial_memory(2)
        means = []
        for s in range(0, 24, 4):
            stream = pol.start_stream(mem)
            recs = []
            for t in range(s, s + 4):
                mu, _, _, rec = pol.step(stream, obs[:, t], starts[:, t])
                means.append(mu)
                recs.append(rec)
            mem = pol.memory_from_records(recs, starts[:, s:s + 4])
    assert np.max(rel_err(np.stack(means, axis=1), m_ref)) < 1e-10


def test_batch_rows_independent():
    with T.precision(64):
        pol = random_policy(2, 3, seed=6)
        obs, starts = _stream(np.random.default_rng(3), 4, 20, p_start=0.1)
        m_all, _ = rollout_incremental(pol, obs, starts)
        m_one, _ = rollout_incremental(pol, obs[2:3], starts[2:3])
    assert np.allclose(m_all[2], m_one[0], rtol=1e-12, atol=1e-14)
