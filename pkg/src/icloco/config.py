"""Run configuration, presets and the run manifest.

A run is described by one JSON file::

    {
      "schema_version": 1,
      "seed": 0,
      "precision": 32,
      "policy": {"kind": "txl", "n_layers": 4, "segment_len": 32, ...},
      "env": {... EnvConfig fields ...},
      "ppo": {... PPOConfig fields ...},
      "curriculum": [{"phase": 1, "trial_seconds": 4.0, "budget_cap": 10.0, "start_iteration": 0}, ...],
      "robots": {"source": "pool"} | {"source": "fixed", "category": "biped", "seed": 3, "randomize": false},
      "checkpoint_every": 10,
      "log_every": 1
    }

Missing keys take the defaults shown by ``icloco show-config``. ``obs_dim`` of
the policy is derived from the environment and need not be given.
"""
from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict, dataclass, field

from .baselines import GRUConfig, GRUPolicy, conditioning_config
from .env import EnvConfig, FixedRobot, TrainingPool, VecEnv
from .morph import sample_morphology
from .policy import PolicyConfig, TXLPolicy
from .ppo import CurriculumPhase, PPOConfig, default_curriculum

SCHEMA_VERSION = 1
VERSION = "0.1.0"
POLICY_KINDS = ("txl", "gru", "conditioning")


@dataclass
class RunConfig:
    seed: int = 0
    precision: int = 32
    policy: dict = field(default_factory=lambda: {"kind": "txl"})
    env: EnvConfig = field(default_factory=EnvConfig)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    curriculum: list = field(default_factory=lambda: default_curriculum(500))
    robots: dict = field(default_factory=lambda: {"source": "pool"})
    checkpoint_every: int = 10
    log_every: int = 1
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        kind = self.policy.get("kind", "txl")
        if kind not in POLICY_KINDS:
            raise ValueError(f"policy kind {kind!r} not in {POLICY_KINDS}")
        if kind == "conditioning":
            self.env.include_kinematics = True
        if self.precision not in (32, 64):
            raise ValueError("precision must be 32 or 64")

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "seed": self.seed,
            "precision": self.precision,
            "policy": dict(self.policy),
            "env": self.env.to_dict(),
            "ppo": asdict(self.ppo),
            "curriculum": [asdict(c) for c in self.curriculum],
            "robots": dict(self.robots),
            "checkpoint_every": self.checkpoint_every,
            "log_every": self.log_every,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        version = d.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported config schema_version {version} (expected {SCHEMA_VERSION})")
        known = {"seed", "precision", "policy", "env", "ppo", "curriculum", "robots", "checkpoint_every", "log_every"}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        kw = {k: v for k, v in d.items() if k in ("seed", "precision", "checkpoint_every", "log_every")}
        if "policy" in d:
            kw["policy"] = dict(d["policy"])
        if "env" in d:
            kw["env"] = EnvConfig.from_dict(d["env"])
        if "ppo" in d:
            kw["ppo"] = PPOConfig(**d["ppo"])
        if "curriculum" in d:
            kw["curriculum"] = [CurriculumPhase(**c) for c in d["curriculum"]]
        if "robots" in d:
            kw["robots"] = dict(d["robots"])
        return cls(**kw)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return RunConfig.from_dict(json.load(fh))


def save_config(run: RunConfig, path) -> None:
    with open(path, "w") as fh:
        fh.write(run.to_json())


def apply_overrides(run: RunConfig, overrides: list) -> RunConfig:
    """``key.sub=value`` strings (value parsed as JSON when possible)."""
    d = run.to_dict()
    for item in overrides or []:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        try:
            val = json.loads(raw)
        except json.JSONDecodeError:
            val = raw
        node = d
        parts = key.split(".")
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ValueError(f"override {key!r}: no section {p!r}")
            node = node[p]
        leaf = parts[-1]
        if parts[0] == "policy" and len(parts) == 2:
            known = set(PolicyConfig.__dataclass_fields__) | set(GRUConfig.__dataclass_fields__)
        elif parts[0] == "robots":
            known = {leaf}
        else:
            known = set(node)
        if leaf not in known:
            raise ValueError(f"override {key!r}: unknown key {leaf!r}")
        node[leaf] = val
    return RunConfig.from_dict(d)


# ---------------------------------------------------------------------------
# builders


def policy_config(run: RunConfig):
    p = dict(run.policy)
    kind = p.pop("kind", "txl")
    p["obs_dim"] = run.env.obs_dim
    if kind == "gru":
        names = set(GRUConfig.__dataclass_fields__)
        return GRUConfig(**{k: v for k, v in p.items() if k in names})
    if kind == "conditioning":
        p.pop("max_attn_distance", None)
    names = set(PolicyConfig.__dataclass_fields__)
    cfg = PolicyConfig(**{k: v for k, v in p.items() if k in names})
    if kind == "conditioning":
        cfg = conditioning_config(cfg)
    return cfg


def make_policy(cfg, seed: int = 0):
    if isinstance(cfg, GRUConfig):
        return GRUPolicy(cfg, seed)
    return TXLPolicy(cfg, seed)


def build_policy(run: RunConfig):
    return make_policy(policy_config(run), run.seed)


def policy_from_meta(meta: dict):
    """Rebuild an (uninitialised) policy from a checkpoint's stored config."""
    run = RunConfig.from_dict(meta["run"])
    return make_policy(policy_config(run), run.seed), run


def build_robots(run: RunConfig):
    src = run.robots.get("source", "pool")
    if src == "pool":
        return TrainingPool(run.env.categories, run.env.kinematic_ranges, run.env.randomization)
    if src == "fixed":
        spec = sample_morphology(int(run.robots["seed"]), run.robots["category"], run.env.kinematic_ranges)
        return FixedRobot(spec, run.env.randomization if run.robots.get("randomize", False) else None)
    raise ValueError(f"unknown robot source {src!r}")


def build_env(run: RunConfig, n: int | None = None) -> VecEnv:
    if run.policy.get("kind") == "conditioning":
        run.env.include_kinematics = True
    return VecEnv(run.ppo.n_envs if n is None else n, run.env, robots=build_robots(run), seed=run.seed)


# ---------------------------------------------------------------------------
# presets

SMOKE_BIPED_SEED = 106
SMOKE_ITERATIONS = 150  # the pinned smoke budget
PRESETS = ("desk", "small", "smoke")


def preset(name: str) -> RunConfig:
    """``desk``: the reference desk-scale recipe. ``small``: multi-morphology run sized for
    a single CPU core. ``smoke``: one fixed biped, fixed 0.5 m/s command."""
    if name == "desk":
        return RunConfig()
    if name == "small":
        run = RunConfig(
            ppo=PPOConfig(n_envs=64, minibatches=4, epochs=3, iterations=3000, lr=1e-3),
            curriculum=default_curriculum(1500),
            checkpoint_every=25,
        )
        run.policy = {"kind": "txl", "d_model": 64, "d_ff": 128, "enc_hidden": 64, "head_hidden": 64}
        return run
    if name == "smoke":
        run = RunConfig(
            ppo=PPOConfig(n_envs=64, minibatches=4, epochs=3, iterations=SMOKE_ITERATIONS, lr=1e-3),
            curriculum=[CurriculumPhase(1, 6.0, 0.0, 0)],
            robots={"source": "fixed", "category": "biped", "seed": SMOKE_BIPED_SEED, "randomize": False},
            checkpoint_every=25,
        )
        run.env.command_range = (0.5, 0.5)
        run.policy = {"kind": "txl", "n_layers": 4, "segment_len": 32, "d_model": 64, "d_ff": 128,
                      "enc_hidden": 64, "head_hidden": 64}
        return run
    raise ValueError(f"unknown preset {name!r}; expected desk, small or smoke")



# ---------------------------------------------------------------------------
# manifest


@dataclass
class RunManifest:
    config: dict
    seed: int
    code_version: str = VERSION
    phase_history: list = field(default_factory=list)  # [{"phase": p, "iteration": k}], append-only
    checkpoints: list = field(default_factory=list)  # iterations with a saved checkpoint

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def load(cls, path) -> "RunManifest":
        with open(path) as fh:
            return cls(**json.load(fh))

    def save(self, path) -> None:
        tmp = path + ".tmp"
        with open(tmp, "w") as fh:
            fh.write(self.to_json())
        os.replace(tmp, path)

    def record_phase(self, phase: int, iteration: int) -> bool:
        if self.phase_history and self.phase_history[-1]["phase"] == phase:
            return False
        self.phase_history.append({"phase": phase, "iteration": iteration})
        return True

    def record_checkpoint(self, iteration: int) -> None:
        if iteration not in self.checkpoints:
            self.checkpoints.append(iteration)


def new_manifest(run: RunConfig) -> RunManifest:
    return RunManifest(config=copy.deepcopy(run.to_dict()), seed=run.seed)
