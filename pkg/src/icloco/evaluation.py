"""Evaluation protocols: goal displacement (zero- and few-shot), survival versus
adaptation budget, and traces of mean hidden activations.

All episodes run with deterministic (mean) actions. Held-out robots come from
the seed range at or above ``TRAIN_SEED_LIMIT``.
"""
from __future__ import annotations

import copy
import csv
import io
import json
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats

from . import tensor as T
from .env import EnvConfig, EpisodePlan, FixedRobot, VecEnv
from .morph import CATEGORIES, TRAIN_SEED_LIMIT, RandomizationRanges, randomize_dynamics, sample_morphology

ROLLOUT_SECONDS = 6.0
EVAL_SPEED = 0.5
GOAL_DISTANCE = (1.0, 3.0)


def held_out_robots(n: int, seed: int, categories=CATEGORIES, multiplier: float = 1.0,
                    randomization: RandomizationRanges | None = None) -> list:
    """``n`` evaluation robots with dynamics drawn at ``multiplier`` times the training ranges."""
    base = randomization or RandomizationRanges()
    ranges = replace(base, multiplier=multiplier)
    out = []
    for i in range(n):
        rng = np.random.default_rng([seed, i, 31])
        cat = categories[i % len(categories)]
        mseed = int(rng.integers(TRAIN_SEED_LIMIT, 2 * TRAIN_SEED_LIMIT))
        spec = sample_morphology(mseed, cat)
        out.append(randomize_dynamics(spec, ranges, int(rng.integers(2**31))))
    for s in out:
        assert s.seed >= TRAIN_SEED_LIMIT, "evaluation robot drawn from the training seed range"
    return out


def eval_env_config(base: EnvConfig | None, rollout_seconds: float = ROLLOUT_SECONDS) -> EnvConfig:
    cfg = copy.deepcopy(base) if base is not None else EnvConfig()
    cfg.trial_seconds = rollout_seconds
    return cfg


@dataclass
class EpisodeOutcome:
    displacement: np.ndarray  # x at the end of the final trial
    final_steps: np.ndarray  # length of the final trial in control steps
    fell: np.ndarray  # the final trial ended in a fall (or fault)
    trials: np.ndarray  # number of trials including the final one
    activations: np.ndarray | None = None  # (steps, n, d) layer outputs during the first trial
    alive: np.ndarray | None = None  # (steps, n) still inside the first trial, not fallen


def run_episodes(policy, plans: list, env_cfg: EnvConfig, seed: int, stream_ids=None,
                 record_layer: int | None = None, record_steps: int = 0) -> EpisodeOutcome:
    """Run one episode per plan, in parallel, with deterministic actions.

    ``record_layer`` n >= 1 stores the output of transformer block n for the
    first ``record_steps`` steps.
    """
    n = len(plans)
    env = VecEnv(n, env_cfg, robots=FixedRobot(plans[0].spec), seed=seed, stream_ids=stream_ids)
    for i, p in enumerate(plans):
        env.plan(i, p)
    obs = env.reset()
    starts = np.ones(n, dtype=bool)
    stream = policy.start_stream(policy.initial_memory(n))
    steps_cap = int(np.ceil((max(p.budget for p in plans) + 2 * env_cfg.trial_seconds) / env_cfg.control_dt)) + 2
    finished = np.zeros(n, dtype=bool)
    disp = np.zeros(n)
    final_steps = np.zeros(n, dtype=int)
    fell = np.zeros(n, dtype=bool)
    trials = np.zeros(n, dtype=int)
    acts, alive_rec = [], []
    first_trial = np.ones(n, dtype=bool)
    with T.no_grad():
        for t in range(steps_cap):
            mean, _, _, hid = policy.step(stream, obs, starts)
            if record_layer is not None and t < record_steps:
                acts.append(_layer_output(policy, stream, hid, record_layer))
                alive_rec.append(first_trial & ~finished)
            trial_before = env.ep.trial.copy()
            res = env.step(mean)
            ended = res.episode_done & ~finished
            disp[ended] = res.displacement[ended]
            final_steps[ended] = res.trial_steps[ended]
            fell[ended] = (res.fallen | res.fault)[ended]
            trials[ended] = trial_before[ended] + 1
            first_trial &= ~res.trial_done
            finished |= ended
            for i in np.flatnonzero(ended):
                env.plan(i, plans[i])
            obs, starts = res.obs, res.episode_start
            if finished.all() and t + 1 >= record_steps:
                break
    if not finished.all():
        raise RuntimeError("episodes did not finish within the step cap")
    out = EpisodeOutcome(disp, final_steps, fell, trials)
    if record_layer is not None:
        out.activations = np.stack(acts)
        out.alive = np.stack(alive_rec)
    return out


def _layer_output(policy, stream, hid, layer: int) -> np.ndarray:
    n_layers = policy.cfg.n_layers
    if not 1 <= layer <= n_layers:
        raise ValueError(f"layer {layer} outside 1..{n_layers}")
    if layer < n_layers:
        return np.array(hid[layer], dtype=float)
    return np.array(stream.last_output, dtype=float)


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)  # dicts: robot_id, mode, score_mean, score_std, n
    survival: list = field(default_factory=list)  # dicts: budget, survival_mean, survival_std, n
    metadata: dict = field(default_factory=dict)
    scores: dict = field(default_factory=dict)  # mode -> per-episode scores (for paired tests)

    CSV_COLUMNS = ("robot_id", "mode", "score_mean", "score_std", "n")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_COLUMNS)
        for r in self.rows:
            w.writerow([r["robot_id"], r["mode"], f"{r['score_mean']:.6f}", f"{r['score_std']:.6f}", r["n"]])
        return buf.getvalue()

    def survival_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("budget", "survival_mean", "survival_std", "n"))
        for r in self.survival:
            w.writerow([f"{r['budget']:g}", f"{r['survival_mean']:.6f}", f"{r['survival_std']:.6f}", r["n"]])
        return buf.getvalue()

    def to_table(self) -> str:
        lines = []
        if self.rows:
            lines.append(f"{'robot_id':<28}{'mode':<14}{'score':>18}{'n':>6}")
            for r in self.rows:
                score = f"{r['score_mean']:.3f} +/- {r['score_std']:.3f}"
                lines.append(f"{r['robot_id']:<28}{r['mode']:<14}{score:>18}{r['n']:>6}")
        if self.survival:
            lines.append(f"{'budget_s':<10}{'survival_s':>22}{'n':>6}")
            for r in self.survival:
                s = f"{r['survival_mean']:.3f} +/- {r['survival_std']:.3f}"
                lines.append(f"{r['budget']:<10g}{s:>22}{r['n']:>6}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        d = {
            "rows": self.rows,
            "survival": self.survival,
            "metadata": self.metadata,
            "scores": {k: [float(x) for x in v] for k, v in self.scores.items()},
        }
        return json.dumps(d, indent=2, sort_keys=True) + "\n"


def mode_name(budget: float) -> str:
    return "zero_shot" if budget <= 0 else f"few_shot_{budget:g}s"


def displacement_score(displacement, goal) -> np.ndarray:
    """Progress toward the goal as a fraction of the initial distance, clipped to [0, 1]."""
    goal = np.asarray(goal, dtype=float)
    return np.clip(np.asarray(displacement) * np.sign(goal) / np.abs(goal), 0.0, 1.0)


def sample_goals(n_robots: int, n_envs: int, seed: int) -> np.ndarray:
    g = np.zeros((n_robots, n_envs))
    for r in range(n_robots):
        rng = np.random.default_rng([seed, r, 17])
        dist = rng.uniform(*GOAL_DISTANCE, size=n_envs)
        sign = rng.choice([-1.0, 1.0], size=n_envs)
        g[r] = dist * sign
    return g


def eval_displacement(policy, robots: list, budget: float = 0.0, n_envs: int = 16, seed: int = 0,
                      env_cfg: EnvConfig | None = None, speed: float = EVAL_SPEED,
                      report: EvalReport | None = None) -> EvalReport:
    """Zero-shot (``budget`` 0) or few-shot goal-displacement evaluation.

    Each env gets a goal at a random signed distance and a command of
    ``speed`` toward it. The score is computed over the final 6 s trial.
    Goals and env random streams depend only on ``seed`` and the env's
    position, so runs with different budgets are paired.
    """
    cfg = eval_env_config(env_cfg)
    goals = sample_goals(len(robots), n_envs, seed)
    plans = [EpisodePlan(spec, float(budget), float(speed * np.sign(goals[r, j])))
             for r, spec in enumerate(robots) for j in range(n_envs)]
    out = run_episodes(policy, plans, cfg, seed)
    scores = displacement_score(out.displacement, goals.reshape(-1)).reshape(len(robots), n_envs)
    rep = report or EvalReport()
    mode = mode_name(budget)
    for r, spec in enumerate(robots):
        rep.rows.append({
            "robot_id": f"{spec.category}-{spec.seed}",
            "mode": mode,
            "score_mean": float(scores[r].mean()),
            "score_std": float(scores[r].std()),
            "n": int(n_envs),
        })
    rep.scores[mode] = scores.reshape(-1)
    rep.metadata.update({"seed": seed, "n_envs": n_envs, "n_robots": len(robots), "speed": speed,
                         "robot_seeds": [int(s.seed) for s in robots]})
    return rep


def paired_greater(a, b) -> float:
    """One-sided paired t-test p-value for mean(a) > mean(b)."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    d = a - b
    if np.allclose(d, d[0]):
        # no spread in the differences: the test is degenerate
        return 0.0 if d[0] > 0 else 1.0
    return float(stats.ttest_rel(a, b, alternative="greater").pvalue)


@dataclass
class SweepResult:
    budgets: list
    survival: np.ndarray  # (n_budgets, n_episodes) seconds
    metadata: dict = field(default_factory=dict)

    def means(self) -> np.ndarray:
        return self.survival.mean(axis=1)

    def p_value(self, hi: float, lo: float = 0.0) -> float:
        i, j = self.budgets.index(hi), self.budgets.index(lo)
        return paired_greater(self.survival[i], self.survival[j])

    def report(self) -> EvalReport:
        rep = EvalReport(metadata=dict(self.metadata))
        for b, s in zip(self.budgets, self.survival):
            rep.survival.append({"budget": float(b), "survival_mean": float(s.mean()),
                                 "survival_std": float(s.std()), "n": int(s.size)})
            rep.scores[f"survival_{b:g}s"] = s
        return rep


def adaptation_sweep(policy, budgets, n_episodes: int = 500, multiplier: float = 2.0, seed: int = 0,
                     categories=CATEGORIES, env_cfg: EnvConfig | None = None,
                     rollout_seconds: float = ROLLOUT_SECONDS, speed: float = EVAL_SPEED) -> SweepResult:
    """Mean time-to-fall in the final trial (capped at ``rollout_seconds``) per budget.

    The same held-out robots, commands and env random streams are used for
    every budget, so the samples are paired across budgets.
    """
    budgets = [float(b) for b in budgets]
    if budgets != sorted(budgets):
        raise ValueError("budgets must be sorted ascending")
    if isinstance(categories, str):
        categories = (categories,)
    cfg = eval_env_config(env_cfg, rollout_seconds)
    robots = held_out_robots(n_episodes, seed, categories, multiplier)
    rng = np.random.default_rng([seed, 101])
    commands = speed * rng.choice([-1.0, 1.0], size=n_episodes)
    surv = np.zeros((len(budgets), n_episodes))
    for k, b in enumerate(budgets):
        plans = [EpisodePlan(spec, b, float(c)) for spec, c in zip(robots, commands)]
        out = run_episodes(policy, plans, cfg, seed)
        surv[k] = np.where(out.fell, out.final_steps * cfg.control_dt, rollout_seconds)
        surv[k] = np.minimum(surv[k], rollout_seconds)
    meta = {"seed": seed, "n_episodes": n_episodes, "multiplier": multiplier, "categories": list(categories),
            "rollout_seconds": rollout_seconds, "robot_seeds": [int(s.seed) for s in robots]}
    return SweepResult(budgets, surv, meta)


@dataclass
class Trace:
    times: np.ndarray  # (steps,) seconds
    means: np.ndarray  # (k, steps, d) mean activation per variant
    counts: np.ndarray  # (k, steps) rollouts contributing
    distances: np.ndarray  # (steps, k, k) pairwise Euclidean distances between variant means
    intra: np.ndarray | None = None  # (k, steps) distance between even- and odd-rollout means

    def inter_mean(self) -> np.ndarray:
        k = self.distances.shape[1]
        iu = np.triu_indices(k, 1)
        return self.distances[:, iu[0], iu[1]].mean(axis=1)

    def at(self, seconds: float) -> int:
        return int(np.argmin(np.abs(self.times - seconds)))


def representation_trace(policy, variants: list, n_rollouts: int = 256, seconds: float = 5.5, layer: int = 2,
                         seed: int = 0, env_cfg: EnvConfig | None = None, speed: float = EVAL_SPEED) -> Trace:
    """Mean output of transformer block ``layer`` over zero-shot rollouts, per variant.

    ``variants`` is a list of robots (one :class:`MorphSpec` each). At every
    step, the mean is over rollouts that have not fallen yet. Rollouts of a
    variant differ through initial-state jitter, observation noise and the
    command sign.
    """
    if policy.cfg.n_layers < layer or not hasattr(policy, "blocks"):
        raise ValueError(f"policy needs at least {layer} transformer layers")
    cfg = eval_env_config(env_cfg, max(seconds + 1.0, ROLLOUT_SECONDS))
    steps = int(round(seconds / cfg.control_dt)) + 1
    rng = np.random.default_rng([seed, 202])
    # signs come in equal pairs so the even and odd halves see the same command mix
    signs = np.repeat(rng.choice([-1.0, 1.0], size=(n_rollouts + 1) // 2), 2)[:n_rollouts]
    k = len(variants)
    d = policy.cfg.d_model
    means = np.full((k, steps, d), np.nan)
    counts = np.zeros((k, steps), dtype=int)
    intra = np.full((k, steps), np.nan)
    for v, spec in enumerate(variants):
        plans = [EpisodePlan(spec, 0.0, float(speed * s)) for s in signs]
        ids = [v * n_rollouts + i for i in range(n_rollouts)]
        out = run_episodes(policy, plans, cfg, seed, stream_ids=ids, record_layer=layer, record_steps=steps)
        a, alive = out.activations, out.alive  # (steps, n, d), (steps, n)
        counts[v] = alive.sum(axis=1)
        w = alive[..., None].astype(float)
        with np.errstate(invalid="ignore", divide="ignore"):
            means[v] = (a * w).sum(axis=1) / alive.sum(axis=1)[:, None]
            m1 = (a[:, 0::2] * w[:, 0::2]).sum(axis=1) / alive[:, 0::2].sum(axis=1)[:, None]
            m2 = (a[:, 1::2] * w[:, 1::2]).sum(axis=1) / alive[:, 1::2].sum(axis=1)[:, None]
            intra[v] = np.linalg.norm(m1 - m2, axis=-1)
    diff = means[:, None] - means[None, :]  # (k, k, steps, d)
    dist = np.linalg.norm(diff, axis=-1).transpose(2, 0, 1)
    times = np.arange(steps) * cfg.control_dt
    return Trace(times, means, counts, dist, intra)


def dynamics_variants(k: int, seed: int, category: str = "quadruped", multiplier: float = 2.0) -> list:
    """One held-out morphology under ``k`` different dynamics draws."""
    rng = np.random.default_rng([seed, 303])
    mseed = int(rng.integers(TRAIN_SEED_LIMIT, 2 * TRAIN_SEED_LIMIT))
    spec = sample_morphology(mseed, category)
    ranges = RandomizationRanges(multiplier=multiplier)
    return [randomize_dynamics(spec, ranges, int(rng.integers(2**31))) for _ in range(k)]
