import dataclasses

import numpy as np
import pytest
from scipy import stats

from icloco.morph import (
    CATEGORIES,
    KIN_DIM,
    N_SLOTS,
    RandomizationRanges,
    from_json,
    from_unified,
    joint_map,
    kinematics_vector,
    load_spec,
    randomize_dynamics,
    sample_morphology,
    save_spec,
    to_json,
    to_unified,
    validate,
)


def test_same_seed_same_spec():
    for cat in CATEGORIES:
        assert sample_morphology(11, cat) == sample_morphology(11, cat)
    assert sample_morphology(11, "biped") != sample_morphology(12, "biped")


def test_quadruped_has_no_wheels():
    for seed in range(20):
        spec = sample_morphology(seed, "quadruped")
        assert all(c.wheel is None for c in spec.chains)
        assert len({c.attach_x for c in spec.chains}) == 2


def test_unknown_category_rejected():
    with pytest.raises(ValueError, match="category"):
        sample_morphology(0, "hexapod")


def test_ten_thousand_samples_hold_invariants():
    counts = set()
    for i in range(10_000):
        spec = sample_morphology(i, CATEGORIES[i % 4])
        assert validate(spec) == []
        counts.update(c.n_joints for c in spec.chains)
        assert spec.n_actuated <= N_SLOTS
    assert counts == {2, 3}


def test_json_roundtrip(tmp_path):
    spec = sample_morphology(5, "quadruped_wheeled")
    assert from_json(to_json(spec)) == spec
    save_spec(spec, tmp_path / "r.json")
    assert load_spec(tmp_path / "r.json") == spec


def test_randomize_keeps_kinematics():
    spec = sample_morphology(3, "biped_wheeled")
    out = randomize_dynamics(spec, RandomizationRanges(), seed=9)
    assert out == randomize_dynamics(spec, RandomizationRanges(), seed=9)
    assert out.trunk_length == spec.trunk_length and out.nominal_height == spec.nominal_height
    for a, b in zip(out.chains, spec.chains):
        assert a.link_lengths == b.link_lengths and a.attach_x == b.attach_x
        assert [(j.lower, j.upper) for j in a.joints] == [(j.lower, j.upper) for j in b.joints]
        assert a.wheel.radius == b.wheel.radius
    assert validate(out) == []


def test_degenerate_ranges_leave_spec_unchanged():
    spec = sample_morphology(3, "quadruped")
    unit = RandomizationRanges(
        link_mass=(1, 1), trunk_mass=(1, 1), com_offset=(0, 0), kp=(1, 1), kd=(1, 1),
        torque_limit=(1, 1), friction=(0.7, 0.7), gravity_scale=(1, 1), obs_noise_std=(0, 0), latency=(0, 0),
    )
    out = randomize_dynamics(spec, unit, seed=1)
    assert out.chains == spec.chains and out.trunk_mass == spec.trunk_mass
    assert out.dynamics.friction == 0.7 and out.dynamics.latency_steps == 0


def test_multiplier_doubles_every_interval():
    one, two = RandomizationRanges(), RandomizationRanges(multiplier=2.0)
    for name in RandomizationRanges.names():
        lo1, hi1 = one.interval(name)
        lo2, hi2 = two.interval(name)
        assert hi2 - lo2 == pytest.approx(2 * (hi1 - lo1), rel=1e-12)
        assert lo2 + hi2 == pytest.approx(lo1 + hi1, rel=1e-12)


def test_doubled_draws_stay_in_doubled_interval():
    spec = sample_morphology(2, "quadruped")
    r = RandomizationRanges(multiplier=2.0)
    lo, hi = r.interval("kp")
    for seed in range(300):
        out = randomize_dynamics(spec, r, seed)
        for a, b in zip(out.chains, spec.chains):
            for ja, jb in zip(a.joints, b.joints):
                assert lo <= ja.kp / jb.kp <= hi
        assert r.interval("gravity_scale")[0] <= out.dynamics.gravity_scale <= r.interval("gravity_scale")[1]


def test_invalid_ranges_rejected():
    with pytest.raises(ValueError):
        RandomizationRanges(multiplier=0.5)
    with pytest.raises(ValueError):
        RandomizationRanges(kp=(2.0, 1.0))


def test_kp_factor_is_uniform():
    spec = sample_morphology(2, "biped")
    r = RandomizationRanges()
    lo, hi = r.interval("kp")
    k0 = spec.chains[0].joints[0].kp
    draws = np.array([randomize_dynamics(spec, r, s).chains[0].joints[0].kp / k0 for s in range(100_000)])
    assert stats.kstest(draws, stats.uniform(loc=lo, scale=hi - lo).cdf).pvalue > 0.01


def test_unified_roundtrip_and_absent_slots():
    for seed in range(40):
        spec = sample_morphology(seed, CATEGORIES[seed % 4])
        m = joint_map(spec)
        vals = np.arange(1, spec.n_actuated + 1, dtype=float)
        u = to_unified(spec, vals)
        assert np.all(u[~m.present] == 0.0)
        assert np.array_equal(from_unified(spec, u), vals)
        # every present joint in exactly one slot
        present = [s for s in m.slots if s is not None]
        assert len(present) == len(set(present)) == spec.n_actuated


def test_wheels_take_the_last_slots():
    spec = sample_morphology(0, "biped_wheeled")
    assert joint_map(spec).slots[6:] == ((0, "wheel"), (1, "wheel"))
    assert joint_map(sample_morphology(0, "biped")).slots[6:] == (None, None)


def test_wrong_action_length_rejected():
    spec = sample_morphology(0, "quadruped")
    with pytest.raises(ValueError, match="8"):
        from_unified(spec, np.zeros(5))
    with pytest.raises(ValueError):
        to_unified(spec, np.zeros(spec.n_actuated + 1))


def test_kinematics_vector_width():
    assert kinematics_vector(sample_morphology(0, "quadruped")).shape == (KIN_DIM,)


def test_validate_flags_bad_specs():
    spec = sample_morphology(0, "biped")
    bad = dataclasses.replace(spec, trunk_mass=-1.0)
    assert any("trunk_mass" in e for e in validate(bad))
