"""Vectorized multi-trial locomotion environment.

An *episode* is one sampled robot with one dynamics draw and one command. It
consists of adaptation trials, run until the budget ``u`` is spent, followed by
a final trial. Trial resets put the robot back at its initial pose but keep the
policy memory; episode resets clear it (signalled through ``episode_start``).

Observation layout (``OBS_DIM`` = 30, plus ``KIN_DIM`` when kinematics are
appended for the conditioning baseline)::

    0-2   base velocity (xdot, zdot, pitch rate)
    3-4   sin / cos pitch
    5     commanded forward velocity
    6-13  joint position minus mid-range, unified slots (wheels read 0)
    14-21 0.1 * joint velocity, unified slots
    22-29 previous action
"""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import physics as P
from .morph import (
    CATEGORIES,
    KIN_DIM,
    N_SLOTS,
    TRAIN_SEED_LIMIT,
    KinematicRanges,
    MorphSpec,
    RandomizationRanges,
    kinematics_vector,
    randomize_dynamics,
    sample_morphology,
)

OBS_DIM = 30
TERMS = ("track_lin", "track_ang", "lin_vel_z", "ang_vel", "height", "joint_acc", "torque", "alive")
SLOT_COORD = np.arange(3, 3 + N_SLOTS)


@dataclass
class RewardConfig:
    # w1..w8 in the order of TERMS; penalties are subtracted
    weights: tuple = (1.0, 0.5, 2.0, 0.05, 1.0, 2.5e-7, 1e-4, 0.5)
    s1: float = 0.25
    s2: float = 0.25
    nominal_height_source: str = "spec"

    def __post_init__(self):
        self.weights = tuple(float(w) for w in self.weights)
        if len(self.weights) != len(TERMS):
            raise ValueError(f"need {len(TERMS)} reward weights, got {len(self.weights)}")
        if self.s1 <= 0 or self.s2 <= 0:
            raise ValueError("tracking temperatures must be positive")


@dataclass
class EnvConfig:
    dt: float = 0.004
    substeps: int = 5
    trial_seconds: float = 6.0
    budget_cap: float = 20.0  # u ~ U(0, budget_cap) per episode
    command_range: tuple = (-1.0, 1.0)
    action_scale: float = 0.5  # rad of joint target per unit action
    wheel_speed_scale: float = 10.0  # rad/s of wheel target per unit action
    init_height_noise: float = 0.02
    init_joint_noise: float = 0.1
    include_kinematics: bool = False
    categories: tuple = CATEGORIES
    kinematic_ranges: KinematicRanges = field(default_factory=KinematicRanges)
    randomization: RandomizationRanges = field(default_factory=RandomizationRanges)
    reward: RewardConfig = field(default_factory=RewardConfig)

    @property
    def control_dt(self) -> float:
        return self.dt * self.substeps

    @property
    def obs_dim(self) -> int:
        return OBS_DIM + (KIN_DIM if self.include_kinematics else 0)

    def trial_steps(self) -> int:
        return int(round(self.trial_seconds / self.control_dt))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["categories"] = list(self.categories)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EnvConfig":
        d = dict(d)
        nested = {"kinematic_ranges": KinematicRanges, "randomization": RandomizationRanges, "reward": RewardConfig}
        for k, typ in nested.items():
            if k in d and isinstance(d[k], dict):
                names = {f.name for f in fields(typ)}
                d[k] = typ(**{a: tuple(b) if isinstance(b, list) else b for a, b in d[k].items() if a in names})
        for k in ("command_range", "categories"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


# ---------------------------------------------------------------------------
# state, reward and termination


@dataclass
class RobotState:
    """Batched robot state summary at control resolution (joint arrays are unified slots)."""

    base: np.ndarray  # (B, 3) x, z, pitch
    base_vel: np.ndarray  # (B, 3)
    q: np.ndarray  # (B, 8)
    qd: np.ndarray  # (B, 8)
    prev_action: np.ndarray  # (B, 8)
    prev_qd: np.ndarray  # (B, 8)
    torque: np.ndarray  # (B, 8)
    trunk_z: np.ndarray  # (B, 2) heights of the trunk end points

    def copy(self) -> "RobotState":
        return RobotState(*(getattr(self, f.name).copy() for f in fields(self)))


def robot_state(st: P.PhysState, prev_action, prev_qd) -> RobotState:
    return RobotState(
        base=st.q[:, :3].copy(),
        base_vel=st.qd[:, :3].copy(),
        q=st.q[:, SLOT_COORD].copy(),
        qd=st.qd[:, SLOT_COORD].copy(),
        prev_action=np.array(prev_action, dtype=float),
        prev_qd=np.array(prev_qd, dtype=float),
        torque=st.torque[:, SLOT_COORD].copy(),
        trunk_z=st.kin.contact_pos[:, :2, 1].copy(),
    )


def compute_reward(prev: RobotState, cur: RobotState, action, command, cfg: RewardConfig,
                   nominal_height, control_dt: float, alive=None):
    """Per-step reward and its breakdown.

    Returns ``(total, terms)`` where ``terms[name]`` is the signed, weighted
    contribution of each term and ``total`` is their sum.
    """
    w = cfg.weights
    xd, zd, thd = cur.base_vel[:, 0], cur.base_vel[:, 1], cur.base_vel[:, 2]
    command = np.broadcast_to(np.asarray(command, dtype=float), xd.shape)
    alive = np.ones(xd.shape, dtype=bool) if alive is None else np.asarray(alive, dtype=bool)
    qacc = (cur.qd - prev.qd) / control_dt
    terms = {
        "track_lin": w[0] * np.exp(-((xd - command) ** 2) / cfg.s1),
        "track_ang": w[1] * np.exp(-(thd**2) / cfg.s2),
        "lin_vel_z": -w[2] * zd**2,
        "ang_vel": -w[3] * thd**2,
        "height": -w[4] * (cur.base[:, 1] - nominal_height) ** 2,
        "joint_acc": -w[5] * np.sum(qacc**2, axis=-1),
        "torque": -w[6] * np.sum(cur.torque**2, axis=-1),
        "alive": w[7] * alive.astype(float),
    }
    total = np.zeros_like(xd)
    for name in TERMS:
        total = total + terms[name]
    return total, terms


def check_termination(state: RobotState, nominal_height) -> np.ndarray:
    """Fallen iff base below 40% of nominal height, |pitch| > 1 rad, or a trunk end touches the ground."""
    low = state.base[:, 1] < 0.4 * np.asarray(nominal_height)
    tipped = np.abs(state.base[:, 2]) > 1.0
    touch = np.any(state.trunk_z < 0.0, axis=-1)
    return low | tipped | touch


# ---------------------------------------------------------------------------
# episode bookkeeping


@dataclass
class EpisodeState:
    """Per-env trial bookkeeping. Lengths are in control steps, budgets in seconds."""

    trial: np.ndarray  # trial index i
    steps: np.ndarray  # steps in the current trial
    history: np.ndarray  # H_{i-1}: total steps of earlier trials
    budget: np.ndarray  # u
    elapsed: np.ndarray  # seconds spent in finished trials
    is_final: np.ndarray
    episode_done: np.ndarray
    trial_done: np.ndarray

    @classmethod
    def new(cls, budget) -> "EpisodeState":
        budget = np.atleast_1d(np.asarray(budget, dtype=float))
        n = budget.size
        return cls(
            trial=np.zeros(n, dtype=int),
            steps=np.zeros(n, dtype=int),
            history=np.zeros(n, dtype=int),
            budget=budget.copy(),
            elapsed=np.zeros(n),
            is_final=budget <= 0.0,
            episode_done=np.zeros(n, dtype=bool),
            trial_done=np.zeros(n, dtype=bool),
        )

    def copy(self) -> "EpisodeState":
        return EpisodeState(*(getattr(self, f.name).copy() for f in fields(self)))

    def reset_rows(self, rows, budget) -> None:
        fresh = EpisodeState.new(np.broadcast_to(budget, np.shape(rows)))
        for f in fields(self):
            getattr(self, f.name)[rows] = getattr(fresh, f.name)


def advance_episode(ep: EpisodeState, trial_done, dt: float) -> EpisodeState:
    """Close finished trials and decide what comes next.

    ``ep.steps`` must already count the step that just ran. A finished
    adaptation trial is followed by another one while the budget lasts and by
    the final trial once it is spent; the episode ends with the final trial.
    """
    out = ep.copy()
    trial_done = np.asarray(trial_done, dtype=bool)
    out.trial_done = trial_done.copy()
    out.episode_done = trial_done & ep.is_final
    nxt = trial_done & ~ep.is_final
    out.elapsed = np.where(nxt, ep.elapsed + ep.steps * dt, ep.elapsed)
    out.history = np.where(nxt, ep.history + ep.steps, ep.history)
    out.trial = np.where(nxt, ep.trial + 1, ep.trial)
    out.steps = np.where(nxt, 0, ep.steps)
    out.is_final = np.where(nxt, out.elapsed >= ep.budget, ep.is_final)
    return out


# ---------------------------------------------------------------------------
# robot sources


class TrainingPool:
    """Fresh robot per episode from the training seed range, dynamics randomized."""

    def __init__(self, categories=CATEGORIES, kinematic=None, randomization=None):
        self.categories = tuple(categories)
        self.kinematic = kinematic or KinematicRanges()
        self.randomization = randomization or RandomizationRanges()

    def __call__(self, rng: np.random.Generator) -> MorphSpec:
        cat = self.categories[int(rng.integers(len(self.categories)))]
        seed = int(rng.integers(0, TRAIN_SEED_LIMIT))
        spec = sample_morphology(seed, cat, self.kinematic)
        return randomize_dynamics(spec, self.randomization, int(rng.integers(2**31)))


class FixedRobot:
    """Always the same robot; dynamics optionally redrawn per episode."""

    def __init__(self, spec: MorphSpec, randomization: RandomizationRanges | None = None):
        self.spec = spec
        self.randomization = randomization

    def __call__(self, rng: np.random.Generator) -> MorphSpec:
        if self.randomization is None:
            return self.spec
        return randomize_dynamics(self.spec, self.randomization, int(rng.integers(2**31)))


class HeldOutPool(TrainingPool):
    """Evaluation robots; seeds come from at or above ``TRAIN_SEED_LIMIT``."""

    def __call__(self, rng: np.random.Generator) -> MorphSpec:
        cat = self.categories[int(rng.integers(len(self.categories)))]
        seed = int(rng.integers(TRAIN_SEED_LIMIT, 2 * TRAIN_SEED_LIMIT))
        spec = sample_morphology(seed, cat, self.kinematic)
        return randomize_dynamics(spec, self.randomization, int(rng.integers(2**31)))


@dataclass
class EpisodePlan:
    """Explicit episode parameters, bypassing the samplers (used by evaluation)."""

    spec: MorphSpec
    budget: float
    command: float


# ---------------------------------------------------------------------------
# vectorized environment


@dataclass
class StepResult:
    obs: np.ndarray
    reward: np.ndarray
    terms: dict
    trial_done: np.ndarray
    episode_done: np.ndarray
    fallen: np.ndarray
    timeout: np.ndarray
    fault: np.ndarray
    episode_start: np.ndarray  # next observation opens a new episode
    final_trial: np.ndarray  # the trial that just ended was the final one
    trial_steps: np.ndarray  # length of the trial that just ended
    displacement: np.ndarray  # x at the end of the trial that just ended (trials start at x = 0)


class VecEnv:
    """``n`` independent environments stepped together.

    Every env owns its random generator, derived from ``(seed, stream id)``
    (the id defaults to the env index), so results do not depend on the batch
    composition or order.
    """

    def __init__(self, n: int, cfg: EnvConfig | None = None, robots=None, seed: int = 0,
                 budgets=None, commands=None, log_path=None, log_envs=(0,), stream_ids=None):
        self.cfg = copy.deepcopy(cfg) if cfg is not None else EnvConfig()
        self.n = n
        self.robots = robots or TrainingPool(self.cfg.categories, self.cfg.kinematic_ranges, self.cfg.randomization)
        # optional fixed per-episode budget / command overrides (callables of rng or constants)
        self.budgets = budgets
        self.commands = commands
        ids = range(n) if stream_ids is None else stream_ids
        self.rngs = [np.random.default_rng([seed, int(i)]) for i in ids]
        if len(self.rngs) != n:
            raise ValueError(f"{len(self.rngs)} stream ids for {n} envs")
        self.rb = P.empty_robots(n)
        self.specs = [None] * n
        self.command = np.zeros(n)
        self.nominal = np.zeros(n)
        self.kin_obs = np.zeros((n, KIN_DIM))
        self.ep = EpisodeState.new(np.zeros(n))
        self.max_latency = 8
        self.queue = np.zeros((n, self.max_latency + 1, N_SLOTS))
        self.prev_action = np.zeros((n, N_SLOTS))
        self.state: P.PhysState | None = None
        self.rstate: RobotState | None = None
        self.log_path = log_path
        self.log_envs = tuple(log_envs)
        self.t = 0
        self._pending: list = [None] * n

    # -- setup ---------------------------------------------------------------

    def plan(self, i: int, plan: EpisodePlan) -> None:
        """Use ``plan`` for env ``i``'s next episode instead of sampling one."""
        self._pending[i] = plan

    def reset(self) -> np.ndarray:
        self.state = P.make_state(self.rb, np.zeros((self.n, P.N_COORD)), np.zeros((self.n, P.N_COORD)))
        rows = np.arange(self.n)
        for i in rows:
            self._new_episode(i)
        self._reset_trials(rows)
        self.episode_start = np.ones(self.n, dtype=bool)
        return self.observe()

    def _new_episode(self, i: int) -> None:
        rng = self.rngs[i]
        plan, self._pending[i] = self._pending[i], None
        if plan is not None:
            spec, budget, command = plan.spec, plan.budget, plan.command
        else:
            spec = self.robots(rng)
            budget = self._draw(self.budgets, rng, lambda r: float(r.uniform(0.0, self.cfg.budget_cap)))
            command = self._draw(self.commands, rng, lambda r: float(r.uniform(*self.cfg.command_range)))
        if spec.dynamics.latency_steps > self.max_latency:
            raise ValueError(f"latency {spec.dynamics.latency_steps} exceeds queue length {self.max_latency}")
        self.specs[i] = spec
        P.set_robot(self.rb, i, spec)
        self.command[i] = command
        self.nominal[i] = spec.nominal_height
        self.kin_obs[i] = kinematics_vector(spec)
        self.ep.reset_rows(np.array([i]), budget)

    @staticmethod
    def _draw(src, rng, default):
        if src is None:
            return default(rng)
        if callable(src):
            return float(src(rng))
        return float(src)

    def _reset_trials(self, rows) -> None:
        """Initial-state distribution: nominal height and mid-range joints, jittered; at rest."""
        cfg = self.cfg
        st = self.state
        q = st.q.copy()
        for i in rows:
            rng = self.rngs[i]
            qi = self.rb.q_mid[i].copy()
            qi[0] = 0.0
            qi[1] = self.nominal[i] + rng.uniform(-cfg.init_height_noise, cfg.init_height_noise)
            qi[2] = 0.0
            noise = rng.uniform(-cfg.init_joint_noise, cfg.init_joint_noise, size=N_SLOTS)
            joint = ~self.rb.is_wheel[i, SLOT_COORD]
            qi[SLOT_COORD] += np.where(joint, noise, 0.0)
            qi[SLOT_COORD] = np.clip(qi[SLOT_COORD], self.rb.q_lo[i, SLOT_COORD], self.rb.q_hi[i, SLOT_COORD])
            q[i] = qi
        fresh = P.make_state(self.rb.select(rows), q[rows], np.zeros((len(rows), P.N_COORD)))
        new_q, new_p, new_qd = st.q.copy(), st.p.copy(), st.qd.copy()
        new_q[rows], new_p[rows], new_qd[rows] = fresh.q, fresh.p, fresh.qd
        torque = st.torque.copy()
        torque[rows] = 0.0
        fault = st.fault.copy()
        fault[rows] = False
        self.state = P.PhysState(new_q, new_p, new_qd, P.kinematics(self.rb, new_q), torque, fault)
        self.queue[rows] = 0.0
        self.prev_action[rows] = 0.0
        prev_qd = self.state.qd[:, SLOT_COORD]
        rs = robot_state(self.state, self.prev_action, prev_qd)
        if self.rstate is None:
            self.rstate = rs
        else:
            for f in fields(rs):
                getattr(self.rstate, f.name)[rows] = getattr(rs, f.name)[rows]

    # -- observation ------------------------------------------------------------

    def present(self) -> np.ndarray:
        return self.rb.active[:, SLOT_COORD]

    def observe(self) -> np.ndarray:
        rs = self.rstate
        n = self.n
        present = self.present()
        joint = present & ~self.rb.is_wheel[:, SLOT_COORD]
        pos = np.where(joint, rs.q - self.rb.q_mid[:, SLOT_COORD], 0.0)
        vel = np.where(present, 0.1 * rs.qd, 0.0)
        th = rs.base[:, 2]
        sensed = np.concatenate([rs.base_vel, np.sin(th)[:, None], np.cos(th)[:, None]], axis=1)
        # one noise draw per env and step, whatever the morphology
        noise = np.stack([r.normal(size=5 + 2 * N_SLOTS) for r in self.rngs]) * self.rb.obs_noise[:, None]
        sensed = sensed + noise[:, :5]
        pos = np.where(joint, pos + noise[:, 5:5 + N_SLOTS], 0.0)
        vel = np.where(present, vel + noise[:, 5 + N_SLOTS:], 0.0)
        parts = [sensed, self.command[:, None], pos, vel, self.prev_action]
        if self.cfg.include_kinematics:
            parts.append(self.kin_obs)
        obs = np.concatenate(parts, axis=1)
        assert obs.shape == (n, self.cfg.obs_dim)
        return obs

    # -- stepping ---------------------------------------------------------------

    def targets(self, action: np.ndarray) -> np.ndarray:
        """Unified actions in [-1, 1] to physics targets (coordinate order)."""
        tgt = np.zeros((self.n, P.N_COORD))
        mid = self.rb.q_mid[:, SLOT_COORD]
        wheel = self.rb.is_wheel[:, SLOT_COORD]
        tgt[:, SLOT_COORD] = np.where(wheel, self.cfg.wheel_speed_scale * action, mid + self.cfg.action_scale * action)
        return np.where(self.rb.active, tgt, 0.0)

    def step(self, action) -> StepResult:
        cfg = self.cfg
        action = np.asarray(action, dtype=float)
        if action.shape != (self.n, N_SLOTS):
            raise ValueError(f"actions must be ({self.n}, {N_SLOTS}), got {action.shape}")
        present = self.present()
        action = np.where(present, np.clip(action, -1.0, 1.0), 0.0)

        # latency queue: slot k holds the action issued k steps ago
        self.queue = np.roll(self.queue, 1, axis=1)
        self.queue[:, 0] = action
        applied = self.queue[np.arange(self.n), self.rb.latency]
        target = self.targets(applied)

        prev = self.rstate
        st = self.state
        for _ in range(cfg.substeps):
            st = P.step(self.rb, st, target, cfg.dt)
            over = np.abs(st.torque) > self.rb.torque_limit * (1.0 + 1e-12)
            if over.any():
                raise AssertionError("actuator torque exceeded its limit")
        self.state = st
        cur = robot_state(st, action, prev.qd)
        fault = st.fault.copy()
        fallen = check_termination(cur, self.nominal) | fault
        reward, terms = compute_reward(prev, cur, action, self.command, cfg.reward, self.nominal,
                                       cfg.control_dt, alive=~fallen)
        if fault.any():
            reward = np.where(fault, 0.0, reward)
            terms = {k: np.where(fault, 0.0, v) for k, v in terms.items()}
        self.prev_action = action
        self.rstate = cur

        ep = self.ep
        ep.steps = ep.steps + 1
        timeout = (ep.steps >= cfg.trial_steps()) & ~fallen
        trial_done = fallen | timeout
        final_trial = ep.is_final.copy()
        trial_steps = ep.steps.copy()
        displacement = cur.base[:, 0].copy()
        self.ep = advance_episode(ep, trial_done, cfg.control_dt)
        episode_done = self.ep.episode_done.copy()
        self._log(action, terms, trial_done)

        done = np.flatnonzero(episode_done)
        for i in done:
            self._new_episode(i)
        rows = np.flatnonzero(trial_done)
        if rows.size:
            self._reset_trials(rows)
        self.episode_start = episode_done
        self.t += 1
        return StepResult(
            obs=self.observe(),
            reward=reward,
            terms=terms,
            trial_done=trial_done,
            episode_done=episode_done.copy(),
            fallen=fallen,
            timeout=timeout,
            fault=fault,
            episode_start=self.episode_start.copy(),
            final_trial=final_trial,
            trial_steps=trial_steps,
            displacement=displacement,
        )

    def _log(self, action, terms, trial_done) -> None:
        if self.log_path is None:
            return
        with open(self.log_path, "a") as fh:
            for i in self.log_envs:
                if i >= self.n:
                    continue
                rs = self.rstate
                rec = {
                    "t": self.t,
                    "time": round(self.t * self.cfg.control_dt, 6),
                    "env": int(i),
                    "trial": int(self.ep.trial[i]),
                    "base": rs.base[i].tolist(),
                    "base_vel": rs.base_vel[i].tolist(),
                    "action": action[i].tolist(),
                    "terms": {k: float(v[i]) for k, v in terms.items()},
                    "trial_done": bool(trial_done[i]),
                    "episode_done": bool(self.ep.episode_done[i]),
                }
                fh.write(json.dumps(rec) + "\n")

    # -- persistence ------------------------------------------------------------

    def get_state(self) -> dict:
        """Everything needed to continue bit-identically (picklable)."""
        return {
            "rngs": [r.bit_generator.state for r in self.rngs],
            "rb": {k: getattr(self.rb, k).copy() for k in self.rb.fields()},
            "specs": [s.to_dict() for s in self.specs],
            "command": self.command.copy(),
            "nominal": self.nominal.copy(),
            "kin_obs": self.kin_obs.copy(),
            "ep": self.ep.copy(),
            "queue": self.queue.copy(),
            "prev_action": self.prev_action.copy(),
            "phys": (self.state.q.copy(), self.state.p.copy(), self.state.qd.copy(),
                     self.state.torque.copy(), self.state.fault.copy()),
            "rstate": self.rstate.copy(),
            "episode_start": self.episode_start.copy(),
            "t": self.t,
            "cfg": self.cfg.to_dict(),
        }

    def set_state(self, s: dict) -> None:
        for r, rs in zip(self.rngs, s["rngs"]):
            r.bit_generator.state = rs
        for k, v in s["rb"].items():
            setattr(self.rb, k, v.copy())
        self.specs = [MorphSpec.from_dict(d) for d in s["specs"]]
        self.command = s["command"].copy()
        self.nominal = s["nominal"].copy()
        self.kin_obs = s["kin_obs"].copy()
        self.ep = s["ep"].copy()
        self.queue = s["queue"].copy()
        self.prev_action = s["prev_action"].copy()
        q, p, qd, tau, fault = (a.copy() for a in s["phys"])
        self.state = P.PhysState(q, p, qd, P.kinematics(self.rb, q), tau, fault)
        self.rstate = s["rstate"].copy()
        self.episode_start = s["episode_start"].copy()
        self.t = s["t"]

    def apply_curriculum(self, trial_seconds: float, budget_cap: float) -> None:
        """Takes effect for trials/episodes that start afterwards."""
        self.cfg.trial_seconds = float(trial_seconds)
        self.cfg.budget_cap = float(budget_cap)
