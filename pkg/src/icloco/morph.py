"""Procedurally generated planar robots and the unified joint space.

Every robot has two leg chains of 2 or 3 revolute joints, optionally ending in
a wheel. Quadrupeds attach the chains at the front and rear of the trunk;
bipeds attach both at the trunk centre. Unified slots: chain 0 joints 0-2,
chain 1 joints 3-5, wheel of chain 0 is slot 6, wheel of chain 1 is slot 7.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1
CATEGORIES = ("biped", "quadruped", "biped_wheeled", "quadruped_wheeled")
N_SLOTS = 8
N_CHAINS = 2
MAX_JOINTS = 3
KIN_DIM = 24

# seeds below this value are reserved for training robots
TRAIN_SEED_LIMIT = 1_000_000


@dataclass
class KinematicRanges:
    trunk_length: tuple = (0.4, 1.0)
    link_length: tuple = (0.15, 0.45)
    trunk_mass: tuple = (3.0, 15.0)
    link_mass: tuple = (0.3, 1.5)
    kp: tuple = (20.0, 80.0)
    kd: tuple = (0.5, 2.0)
    torque_limit: tuple = (10.0, 40.0)
    friction: tuple = (0.4, 1.25)
    latency: tuple = (0, 2)  # integer control steps, inclusive
    knee_bend: tuple = (0.6, 1.2)  # rad
    joint_half_range: tuple = (0.6, 1.2)  # rad
    biped_spread: tuple = (0.15, 0.35)  # rad
    wheel_radius: tuple = (0.06, 0.14)
    wheel_mass: tuple = (0.3, 1.0)
    wheel_kd: tuple = (0.3, 1.0)


@dataclass
class RandomizationRanges:
    """Dynamics randomization intervals.

    Mass, gain, torque and gravity entries are multiplicative factors on the
    robot's nominal value; friction, observation noise and latency are absolute;
    ``com_offset`` is an absolute shift of the trunk centre of mass (m).
    """

    link_mass: tuple = (0.8, 1.2)
    trunk_mass: tuple = (0.8, 1.2)
    com_offset: tuple = (-0.05, 0.05)
    kp: tuple = (0.8, 1.2)
    kd: tuple = (0.8, 1.2)
    torque_limit: tuple = (0.85, 1.15)
    friction: tuple = (0.5, 1.1)
    gravity_scale: tuple = (0.95, 1.05)
    obs_noise_std: tuple = (0.01, 0.03)
    latency: tuple = (0, 1)  # integer steps, inclusive
    multiplier: float = 1.0

    def __post_init__(self):
        if self.multiplier < 1.0:
            raise ValueError("multiplier must be >= 1")
        for name in self.names():
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"range {name}: min {lo} > max {hi}")

    @staticmethod
    def names():
        return ("link_mass", "trunk_mass", "com_offset", "kp", "kd", "torque_limit",
                "friction", "gravity_scale", "obs_noise_std", "latency")

    def interval(self, name: str) -> tuple:
        """Interval after widening by ``multiplier`` about its midpoint."""
        lo, hi = getattr(self, name)
        if name == "latency":
            # integers k in [lo, hi] are drawn as floor(U(lo, hi + 1))
            hi = hi + 1
        mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo) * self.multiplier
        return mid - half, mid + half


@dataclass
class JointSpec:
    lower: float
    upper: float
    kp: float
    kd: float
    torque_limit: float

    @property
    def mid(self) -> float:
        return 0.5 * (self.lower + self.upper)


@dataclass
class WheelSpec:
    radius: float
    mass: float
    kd: float
    torque_limit: float


@dataclass
class ChainSpec:
    attach_x: float
    link_lengths: list
    link_masses: list
    joints: list
    knee_sign: float = 1.0
    wheel: WheelSpec | None = None

    @property
    def n_joints(self) -> int:
        return len(self.joints)


@dataclass
class DynamicsSpec:
    friction: float = 0.8
    gravity_scale: float = 1.0
    obs_noise_std: float = 0.0
    latency_steps: int = 0
    com_offset: float = 0.0


@dataclass
class MorphSpec:
    category: str
    seed: int
    trunk_length: float
    trunk_mass: float
    trunk_inertia: float
    chains: list
    nominal_height: float
    dynamics: DynamicsSpec = field(default_factory=DynamicsSpec)
    schema_version: int = SCHEMA_VERSION

    @property
    def n_actuated(self) -> int:
        return sum(c.n_joints + (c.wheel is not None) for c in self.chains)

    @property
    def wheeled(self) -> bool:
        return self.category.endswith("wheeled")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MorphSpec":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported MorphSpec schema_version {d.get('schema_version')}")
        chains = []
        for c in d["chains"]:
            c = dict(c)
            c["joints"] = [JointSpec(**j) for j in c["joints"]]
            c["wheel"] = WheelSpec(**c["wheel"]) if c.get("wheel") else None
            chains.append(ChainSpec(**c))
        d = dict(d)
        d["chains"] = chains
        d["dynamics"] = DynamicsSpec(**d["dynamics"])
        return cls(**d)


def to_json(spec: MorphSpec) -> str:
    return json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n"


def from_json(text: str) -> MorphSpec:
    return MorphSpec.from_dict(json.loads(text))


def save_spec(spec: MorphSpec, path) -> None:
    Path(path).write_text(to_json(spec))


def load_spec(path) -> MorphSpec:
    return from_json(Path(path).read_text())


def validate(spec: MorphSpec) -> list:
    """Return a list of invariant violations (empty when valid)."""
    errs = []
    if spec.category not in CATEGORIES:
        errs.append(f"unknown category {spec.category}")
    if len(spec.chains) != N_CHAINS:
        errs.append(f"expected {N_CHAINS} chains, got {len(spec.chains)}")
    if spec.category.startswith("biped") and len({c.attach_x for c in spec.chains}) != 1:
        errs.append("biped chains must share one attachment")
    if spec.category.startswith("quadruped") and len({c.attach_x for c in spec.chains}) != 2:
        errs.append("quadruped chains need distinct front/rear attachments")
    if spec.n_actuated > N_SLOTS:
        errs.append(f"{spec.n_actuated} actuated joints exceed {N_SLOTS} slots")
    for name in ("trunk_length", "trunk_mass", "trunk_inertia", "nominal_height"):
        if not getattr(spec, name) > 0:
            errs.append(f"{name} must be positive")
    for ci, c in enumerate(spec.chains):
        if c.n_joints not in (2, 3):
            errs.append(f"chain {ci}: joint count {c.n_joints} not in (2, 3)")
        if not (len(c.link_lengths) == len(c.link_masses) == c.n_joints):
            errs.append(f"chain {ci}: link arrays do not match joint count")
        if any(not v > 0 for v in list(c.link_lengths) + list(c.link_masses)):
            errs.append(f"chain {ci}: non-positive link length or mass")
        for ji, j in enumerate(c.joints):
            if not j.upper > j.lower:
                errs.append(f"chain {ci} joint {ji}: degenerate limits")
            if not (j.kp > 0 and j.kd > 0 and j.torque_limit > 0):
                errs.append(f"chain {ci} joint {ji}: non-positive gain or torque limit")
        if spec.wheeled != (c.wheel is not None):
            errs.append(f"chain {ci}: wheel presence does not match category")
        if c.wheel is not None and not (c.wheel.radius > 0 and c.wheel.mass > 0 and c.wheel.kd > 0
                                        and c.wheel.torque_limit > 0):
            errs.append(f"chain {ci}: non-positive wheel parameter")
    d = spec.dynamics
    if not (d.friction > 0 and d.gravity_scale > 0 and d.obs_noise_std >= 0 and d.latency_steps >= 0):
        errs.append("invalid dynamics parameters")
    return errs


# ---------------------------------------------------------------------------
# sampling


def _chain_tip(angles, lengths) -> tuple:
    """Tip offset (x, z) from the attachment with the trunk level."""
    phi = np.cumsum(angles)
    return float(np.sum(np.asarray(lengths) * np.sin(phi))), float(-np.sum(np.asarray(lengths) * np.cos(phi)))


def chain_height(chain: ChainSpec) -> float:
    _, z = _chain_tip([j.mid for j in chain.joints], chain.link_lengths)
    return -z + (chain.wheel.radius if chain.wheel else 0.0)


def sample_morphology(seed: int, category: str, ranges: KinematicRanges | None = None) -> MorphSpec:
    """Deterministic in ``(seed, category, ranges)``."""
    if category not in CATEGORIES:
        raise ValueError(f"unknown category {category!r}; expected one of {CATEGORIES}")
    r = ranges or KinematicRanges()
    rng = np.random.default_rng([seed, CATEGORIES.index(category)])
    u = lambda lo_hi: float(rng.uniform(*lo_hi))  # noqa: E731

    biped = category.startswith("biped")
    wheeled = category.endswith("wheeled")
    trunk_length = u(r.trunk_length)
    trunk_mass = u(r.trunk_mass)
    n_joints = int(rng.integers(2, 4))
    lengths = [u(r.link_length) for _ in range(n_joints)]
    masses = [u(r.link_mass) for _ in range(n_joints)]
    kneel = u(r.knee_bend)

    if biped:
        attach = [0.0, 0.0]
        sign = float(rng.choice([-1.0, 1.0]))
        signs = [sign, sign]
        spread = u(r.biped_spread)
        offsets = [spread, -spread]
    else:
        ax = 0.5 * trunk_length * u((0.8, 1.0))
        attach = [ax, -ax]
        signs = [float(s) for s in rng.choice([-1.0, 1.0], size=2)]
        offsets = [0.0, 0.0]

    wheel_proto = None
    if wheeled:
        wheel_proto = dict(radius=u(r.wheel_radius), mass=u(r.wheel_mass), kd=u(r.wheel_kd))

    chains = []
    for c in range(N_CHAINS):
        s = signs[c]
        raw = [s * kneel / 2, -s * kneel, s * kneel / 2][:n_joints]
        tip_x, tip_z = _chain_tip(raw, lengths)
        # rotate the chain so the tip sits under the attachment, then apply the stance offset
        raw[0] += -math.atan2(tip_x, -tip_z) + offsets[c]
        joints = []
        for j in range(n_joints):
            half = u(r.joint_half_range)
            joints.append(JointSpec(raw[j] - half, raw[j] + half, u(r.kp), u(r.kd), u(r.torque_limit)))
        wheel = None
        if wheel_proto is not None:
            wheel = WheelSpec(torque_limit=u(r.torque_limit) * 0.25, **wheel_proto)
        chains.append(ChainSpec(attach[c], list(lengths), list(masses), joints, s, wheel))

    spec = MorphSpec(
        category=category,
        seed=int(seed),
        trunk_length=trunk_length,
        trunk_mass=trunk_mass,
        trunk_inertia=trunk_mass * (trunk_length**2 + 0.1**2) / 12.0,
        chains=chains,
        nominal_height=max(chain_height(c) for c in chains),
        dynamics=DynamicsSpec(
            friction=u(r.friction),
            latency_steps=int(rng.integers(r.latency[0], r.latency[1] + 1)),
        ),
    )
    return spec


def randomize_dynamics(spec: MorphSpec, ranges: RandomizationRanges, seed: int) -> MorphSpec:
    """Redraw the dynamics fields; kinematic topology and geometry are untouched."""
    rng = np.random.default_rng([seed, 7919])
    draw = lambda name: float(rng.uniform(*ranges.interval(name)))  # noqa: E731

    chains = []
    for c in spec.chains:
        link_masses = [m * draw("link_mass") for m in c.link_masses]
        joints = [
            replace(j, kp=j.kp * draw("kp"), kd=j.kd * draw("kd"), torque_limit=j.torque_limit * draw("torque_limit"))
            for j in c.joints
        ]
        wheel = c.wheel
        if wheel is not None:
            wheel = replace(wheel, kd=wheel.kd * draw("kd"), torque_limit=wheel.torque_limit * draw("torque_limit"))
        chains.append(replace(c, link_masses=link_masses, joints=joints, wheel=wheel))
    trunk_scale = draw("trunk_mass")
    dyn = DynamicsSpec(
        friction=max(draw("friction"), 0.05),
        gravity_scale=draw("gravity_scale"),
        obs_noise_std=max(draw("obs_noise_std"), 0.0),
        latency_steps=max(int(math.floor(draw("latency"))), 0),
        com_offset=draw("com_offset"),
    )
    return replace(
        spec,
        trunk_mass=spec.trunk_mass * trunk_scale,
        trunk_inertia=spec.trunk_inertia * trunk_scale,
        chains=chains,
        dynamics=dyn,
    )


# ---------------------------------------------------------------------------
# unified joint space


@dataclass(frozen=True)
class UnifiedJointMap:
    """``slots[i]`` is ``(chain, joint)`` for revolute joints, ``(chain, "wheel")``, or None."""

    slots: tuple

    @property
    def present(self) -> np.ndarray:
        return np.array([s is not None for s in self.slots])

    @property
    def present_slots(self) -> np.ndarray:
        return np.flatnonzero(self.present)


def joint_map(spec: MorphSpec) -> UnifiedJointMap:
    slots = [None] * N_SLOTS
    for c, chain in enumerate(spec.chains):
        for j in range(chain.n_joints):
            slots[MAX_JOINTS * c + j] = (c, j)
        if chain.wheel is not None:
            slots[N_CHAINS * MAX_JOINTS + c] = (c, "wheel")
    return UnifiedJointMap(tuple(slots))


def to_unified(spec: MorphSpec, joint_values) -> np.ndarray:
    """Scatter per-present-joint values (canonical order) into the 8 slots; absent slots are 0."""
    idx = joint_map(spec).present_slots
    joint_values = np.asarray(joint_values, dtype=float)
    if joint_values.shape[-1] != idx.size:
        raise ValueError(f"expected {idx.size} joint values, got {joint_values.shape[-1]}")
    out = np.zeros(joint_values.shape[:-1] + (N_SLOTS,))
    out[..., idx] = joint_values
    return out


def from_unified(spec: MorphSpec, action) -> np.ndarray:
    """Gather the present joints from an 8-slot action; absent slots are discarded."""
    action = np.asarray(action, dtype=float)
    if action.shape[-1] != N_SLOTS:
        raise ValueError(f"unified action must have {N_SLOTS} entries, got {action.shape[-1]}")
    return action[..., joint_map(spec).present_slots]


def kinematics_vector(spec: MorphSpec) -> np.ndarray:
    """Flattened kinematic description (for the privileged-conditioning baseline)."""
    v = [spec.trunk_length, spec.nominal_height]
    for c in spec.chains:
        lengths = list(c.link_lengths) + [0.0] * (MAX_JOINTS - c.n_joints)
        v += [c.attach_x, c.n_joints / MAX_JOINTS, *lengths, c.knee_sign, c.wheel.radius if c.wheel else 0.0]
    mids = np.zeros(N_SLOTS)
    for i, s in enumerate(joint_map(spec).slots):
        if s is not None and s[1] != "wheel":
            mids[i] = spec.chains[s[0]].joints[s[1]].mid
    out = np.concatenate([np.asarray(v), mids])
    assert out.size == KIN_DIM
    return out
