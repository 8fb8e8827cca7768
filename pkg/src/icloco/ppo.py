"""PPO over segment-structured rollouts.

One collection round runs exactly ``segment_len`` steps per env with
incremental inference. The policy memory at the start of the round (for the
transformer: the previous segment's layer inputs) is stored with the buffer so
the update can rebuild the same computation under the current parameters,
with that memory held constant.
"""
from __future__ import annotations

import json
import math
import os
import pickle
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .env import TERMS, VecEnv
from .morph import CATEGORIES
from .nn import Adam, clip_grad_norm
from .policy import act, gaussian_entropy_t, gaussian_log_prob_t


@dataclass
class PPOConfig:
    clip_eps: float = 0.2
    epochs: int = 4
    minibatches: int = 4
    lr: float = 3e-4
    lr_min: float = 3e-5
    lr_schedule: str = "cosine"  # or "constant"
    gamma: float = 0.99
    lam: float = 0.95
    value_coef: float = 0.5
    entropy_coef: float = 0.003
    max_grad_norm: float = 1.0
    # rewards are multiplied by this before GAE so returns stay O(1) for the shared value head
    reward_scale: float = 0.02
    n_envs: int = 1024
    iterations: int = 1000

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lam must be in [0, 1], got {self.lam}")
        if self.clip_eps <= 0:
            raise ValueError("clip_eps must be positive")
        if self.reward_scale <= 0:
            raise ValueError("reward_scale must be positive")
        if self.minibatches < 1 or self.minibatches > self.n_envs:
            raise ValueError("minibatches must be between 1 and n_envs")

    def learning_rate(self, iteration: int) -> float:
        if self.lr_schedule == "constant" or self.iterations <= 1:
            return self.lr
        frac = min(iteration / (self.iterations - 1), 1.0)
        return self.lr_min + 0.5 * (self.lr - self.lr_min) * (1.0 + math.cos(math.pi * frac))


@dataclass
class CurriculumPhase:
    phase: int
    trial_seconds: float
    budget_cap: float
    start_iteration: int


def default_curriculum(switch_at: int) -> list:
    return [CurriculumPhase(1, 4.0, 10.0, 0), CurriculumPhase(2, 6.0, 20.0, switch_at)]


def check_curriculum(phases: list) -> None:
    if not phases or phases[0].start_iteration != 0:
        raise ValueError("curriculum must start at iteration 0")
    for a, b in zip(phases, phases[1:]):
        if b.start_iteration <= a.start_iteration:
            raise ValueError("curriculum phases must start at increasing iterations")
        if b.trial_seconds < a.trial_seconds or b.budget_cap < a.budget_cap:
            raise ValueError("later curriculum phases may not shorten trials or budgets")


def phase_at(phases: list, iteration: int) -> CurriculumPhase:
    cur = phases[0]
    for ph in phases:
        if ph.start_iteration <= iteration:
            cur = ph
    return cur


# ---------------------------------------------------------------------------
# rollouts


@dataclass
class RolloutBuffer:
    """Arrays are ``(B, L, ...)``; ``memory`` is the policy memory before step 0."""

    obs: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    rewards: np.ndarray
    trial_done: np.ndarray
    episode_done: np.ndarray
    starts: np.ndarray
    memory: object
    bootstrap: np.ndarray  # (B,) value of the observation after the last step
    category: np.ndarray  # (B, L) category index of the acting robot
    terms: dict = field(default_factory=dict)  # name -> (B, L)
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    @property
    def shape(self):
        return self.rewards.shape


@dataclass
class Collector:
    """Carries what has to survive between collection rounds."""

    obs: np.ndarray
    starts: np.ndarray
    memory: object


def start_collector(policy, env: VecEnv) -> Collector:
    obs = env.reset()
    return Collector(obs, np.ones(env.n, dtype=bool), policy.initial_memory(env.n))


def collect_rollout(policy, env: VecEnv, col: Collector, rng: np.random.Generator,
                    deterministic: bool = False) -> RolloutBuffer:
    L = policy.cfg.segment_len
    cat_index = {c: i for i, c in enumerate(CATEGORIES)}
    stream = policy.start_stream(col.memory)
    obs, starts = col.obs, col.starts
    keys = ("obs", "actions", "log_probs", "values", "rewards", "trial_done", "episode_done", "starts", "category")
    rec = {k: [] for k in keys}
    terms = {k: [] for k in TERMS}
    records = []
    with T.no_grad():
        for _ in range(L):
            mean, log_std, value, hid = policy.step(stream, obs, starts)
            action, logp = act(mean, log_std, rng, deterministic)
            rec["category"].append([cat_index[s.category] for s in env.specs])
            res = env.step(action)
            rec["obs"].append(obs)
            rec["actions"].append(action)
            rec["log_probs"].append(logp)
            rec["values"].append(value)
            rec["rewards"].append(res.reward)
            rec["trial_done"].append(res.trial_done)
            rec["episode_done"].append(res.episode_done)
            rec["starts"].append(starts)
            for k in TERMS:
                terms[k].append(res.terms[k])
            records.append(hid)
            obs, starts = res.obs, res.episode_start
        arrays = {k: np.stack(v, axis=1) for k, v in rec.items()}
        memory = policy.memory_from_records(records, arrays["starts"])
        # peek at V(next obs) without disturbing the live stream state
        peek = policy.start_stream(memory)
        _, _, bootstrap, _ = policy.step(peek, obs, starts)
    col.obs, col.starts = obs, starts
    buf = RolloutBuffer(
        obs=arrays["obs"],
        actions=arrays["actions"],
        log_probs=arrays["log_probs"],
        values=arrays["values"],
        rewards=arrays["rewards"],
        trial_done=arrays["trial_done"],
        episode_done=arrays["episode_done"],
        starts=arrays["starts"],
        memory=col.memory,
        bootstrap=np.asarray(bootstrap, dtype=float),
        category=arrays["category"],
        terms={k: np.stack(v, axis=1) for k, v in terms.items()},
    )
    col.memory = memory
    return buf


def compute_gae(rewards, values, episode_done, bootstrap, gamma: float, lam: float):
    """Advantages and returns for ``(B, T)`` arrays.

    Only episode boundaries cut the recursion; a trial boundary inside an
    episode keeps bootstrapping through the reset.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    cont = 1.0 - np.asarray(episode_done, dtype=float)
    Tn = rewards.shape[1]
    adv = np.zeros_like(rewards)
    nxt_adv = np.zeros(rewards.shape[0])
    nxt_val = np.asarray(bootstrap, dtype=float)
    for t in range(Tn - 1, -1, -1):
        delta = rewards[:, t] + gamma * nxt_val * cont[:, t] - values[:, t]
        nxt_adv = delta + gamma * lam * cont[:, t] * nxt_adv
        adv[:, t] = nxt_adv
        nxt_val = values[:, t]
    return adv, adv + values


def normalize(adv: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    return (adv - adv.mean()) / (adv.std() + eps)


def clipped_surrogate(ratio, adv, eps: float):
    """Mean of min(r A, clip(r, 1-eps, 1+eps) A); works on arrays and Tensors."""
    if isinstance(ratio, T.Tensor):
        adv = T.as_tensor(adv)
        return T.mean(T.minimum(ratio * adv, T.clip(ratio, 1.0 - eps, 1.0 + eps) * adv))
    return float(np.mean(np.minimum(ratio * adv, np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv)))


def ppo_loss(policy, buf: RolloutBuffer, idx, adv: np.ndarray, cfg: PPOConfig):
    mean, log_std, value = policy.forward_sequence(buf.obs[idx], buf.memory.select(idx), buf.starts[idx])
    logp = gaussian_log_prob_t(buf.actions[idx], mean, log_std)
    ratio = T.exp(logp - buf.log_probs[idx])
    surr = clipped_surrogate(ratio, adv[idx], cfg.clip_eps)
    v_loss = T.mean(T.square(value - buf.returns[idx]))
    ent = gaussian_entropy_t(log_std)
    loss = -surr + cfg.value_coef * v_loss - cfg.entropy_coef * ent
    stats = {
        "policy_loss": -float(surr.data),
        "value_loss": float(v_loss.data),
        "entropy": float(ent.data),
        "approx_kl": float(np.mean(buf.log_probs[idx] - logp.data)),
        "clip_frac": float(np.mean(np.abs(ratio.data - 1.0) > cfg.clip_eps)),
    }
    return loss, stats


def ppo_update(policy, opt: Adam, buf: RolloutBuffer, cfg: PPOConfig, rng: np.random.Generator,
               lr: float | None = None) -> dict:
    if buf.advantages is None:
        buf.advantages, buf.returns = compute_gae(buf.rewards * cfg.reward_scale, buf.values, buf.episode_done, buf.bootstrap,
                                                  cfg.gamma, cfg.lam)
    adv = normalize(buf.advantages)
    B = buf.shape[0]
    params = policy.parameters()
    totals, n, skipped = {}, 0, 0
    for _ in range(cfg.epochs):
        order = rng.permutation(B)
        for idx in np.array_split(order, cfg.minibatches):
            idx = np.sort(idx)
            policy.zero_grad()
            try:
                loss, stats = ppo_loss(policy, buf, idx, adv, cfg)
                if not np.isfinite(loss.data):
                    raise FloatingPointError("non-finite loss")
                grads = T.backward(loss, params)
            except FloatingPointError:
                skipped += 1
                continue
            if not all(np.all(np.isfinite(g)) for g in grads.values()):
                skipped += 1
                continue
            stats["grad_norm"] = clip_grad_norm(grads, cfg.max_grad_norm)
            stats["loss"] = float(loss.data)
            opt.step(grads, lr)
            for k, v in stats.items():
                totals[k] = totals.get(k, 0.0) + v
            n += 1
    out = {k: v / max(n, 1) for k, v in totals.items()}
    out["skipped"] = skipped
    return out


def rollout_metrics(buf: RolloutBuffer, reward_weights) -> dict:
    m = {
        "reward": float(buf.rewards.mean()),
        # raw tracking score exp(-(v - v_cmd)^2 / s1), i.e. the weighted term over its weight
        "tracking": float(buf.terms["track_lin"].mean() / reward_weights[0]) if reward_weights[0] else 0.0,
        "trials_done": int(buf.trial_done.sum()),
        "episodes_done": int(buf.episode_done.sum()),
        "falls": int((buf.trial_done & (buf.terms["alive"] == 0)).sum()),
    }
    per_cat = {}
    for i, c in enumerate(CATEGORIES):
        sel = buf.category == i
        if sel.any():
            per_cat[c] = float(buf.rewards[sel].mean())
    m["reward_by_category"] = per_cat
    return m


# ---------------------------------------------------------------------------
# training loop


def _ckpt_dir(out_dir, iteration: int) -> str:
    return os.path.join(out_dir, "checkpoints", f"iter_{iteration:06d}")


def save_checkpoint(out_dir, iteration: int, policy, opt: Adam, state: dict, meta: dict) -> str:
    """Write ``checkpoints/iter_NNNNNN/`` and point ``checkpoints/latest.json`` at it."""
    path = _ckpt_dir(out_dir, iteration)
    tmp = path + ".tmp"
    os.makedirs(tmp, exist_ok=True)
    T.save_arrays(os.path.join(tmp, "params.npz"), policy.state_dict(), meta={"iteration": iteration, **meta})
    T.save_arrays(os.path.join(tmp, "optimizer.npz"), opt.state_dict())
    with open(os.path.join(tmp, "state.pkl"), "wb") as fh:
        pickle.dump(state, fh, protocol=4)
    if os.path.isdir(path):
        for f in os.listdir(path):
            os.remove(os.path.join(path, f))
        os.rmdir(path)
    os.replace(tmp, path)
    index = os.path.join(out_dir, "checkpoints", "latest.json")
    with open(index + ".tmp", "w") as fh:
        json.dump({"iteration": iteration, "path": os.path.basename(path)}, fh)
    os.replace(index + ".tmp", index)
    return path


def latest_checkpoint(out_dir):
    index = os.path.join(out_dir, "checkpoints", "latest.json")
    if not os.path.exists(index):
        return None
    with open(index) as fh:
        info = json.load(fh)
    return os.path.join(out_dir, "checkpoints", info["path"])


def load_policy_params(policy, path) -> dict:
    arrays, meta = T.load_arrays(os.path.join(path, "params.npz") if os.path.isdir(path) else path)
    policy.load_state_dict(arrays)
    return meta


def _load_resume(path, policy, opt):
    load_policy_params(policy, path)
    opt_state, _ = T.load_arrays(os.path.join(path, "optimizer.npz"))
    opt.load_state_dict(opt_state)
    try:
        with open(os.path.join(path, "state.pkl"), "rb") as fh:
            return pickle.load(fh)
    except (OSError, pickle.UnpicklingError, EOFError) as exc:
        raise ValueError(f"corrupt checkpoint state in {path}: {exc}") from exc


def _truncate_metrics(path, last_iteration: int) -> None:
    if not os.path.exists(path):
        return
    with open(path) as fh:
        lines = [ln for ln in fh if ln.strip() and json.loads(ln)["iteration"] <= last_iteration]
    with open(path, "w") as fh:
        fh.writelines(lines)


def train(run, out_dir, resume: bool = False, stop_after: int | None = None, log=print):
    """Run (or continue) training for ``run`` (a :class:`~icloco.config.RunConfig`).

    Layout of ``out_dir``::

        manifest.json                config snapshot, seed, version, phase history, checkpoints
        metrics.jsonl                one JSON object per iteration
        checkpoints/latest.json      {"iteration": k, "path": "iter_00000k"}
        checkpoints/iter_NNNNNN/     params.npz, optimizer.npz, state.pkl

    A checkpoint labelled k holds the state after k finished iterations.
    ``stop_after`` ends the call early (after that many total iterations)
    without changing the schedule, which is what a crash looks like.
    """
    from .config import RunManifest, build_env, build_policy, new_manifest

    T.set_precision(run.precision)
    os.makedirs(out_dir, exist_ok=True)
    cfg = run.ppo
    check_curriculum(run.curriculum)
    policy = build_policy(run)
    opt = Adam(policy.parameters(), lr=cfg.lr)
    env = build_env(run)
    act_rng = np.random.default_rng([run.seed, 1])
    mb_rng = np.random.default_rng([run.seed, 2])
    metrics_path = os.path.join(out_dir, "metrics.jsonl")

    manifest_path = os.path.join(out_dir, "manifest.json")
    start = 0
    ckpt = latest_checkpoint(out_dir) if resume else None
    if ckpt is not None and os.path.exists(manifest_path):
        manifest = RunManifest.load(manifest_path)
    else:
        manifest = new_manifest(run)
        manifest.save(manifest_path)
    if ckpt is not None:
        state = _load_resume(ckpt, policy, opt)
        env.set_state(state["env"])
        act_rng.bit_generator.state = state["act_rng"]
        mb_rng.bit_generator.state = state["mb_rng"]
        col = Collector(state["obs"], state["starts"], state["memory"])
        start = state["iteration"]
        _truncate_metrics(metrics_path, start - 1)
        log(f"resumed from {ckpt} at iteration {start}")
    else:
        if os.path.exists(metrics_path):
            os.remove(metrics_path)
        col = start_collector(policy, env)

    end = cfg.iterations if stop_after is None else min(cfg.iterations, stop_after)
    phase = None
    for it in range(start, end):
        ph = phase_at(run.curriculum, it)
        if phase is None or ph.phase != phase.phase:
            env.apply_curriculum(ph.trial_seconds, ph.budget_cap)
            phase = ph
            if manifest.record_phase(ph.phase, it):
                manifest.save(manifest_path)
        t0 = time.perf_counter()
        buf = collect_rollout(policy, env, col, act_rng)
        t1 = time.perf_counter()
        lr = cfg.learning_rate(it)
        stats = ppo_update(policy, opt, buf, cfg, mb_rng, lr)
        t2 = time.perf_counter()
        rec = {"iteration": it, "phase": ph.phase, "lr": lr, **rollout_metrics(buf, env.cfg.reward.weights), **stats}
        rec["steps"] = int((it + 1) * env.n * policy.cfg.segment_len)
        timing = {"collect_s": round(t1 - t0, 3), "update_s": round(t2 - t1, 3)}
        with open(metrics_path, "a") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        if it % max(run.log_every, 1) == 0:
            log(f"it {it} phase {ph.phase} reward {rec['reward']:.3f} track {rec['tracking']:.3f} "
                f"falls {rec['falls']} kl {stats.get('approx_kl', 0):.4f} {timing}")
        done = it + 1
        if done % run.checkpoint_every == 0 or done == end:
            state = {
                "iteration": done,
                "env": env.get_state(),
                "act_rng": act_rng.bit_generator.state,
                "mb_rng": mb_rng.bit_generator.state,
                "obs": col.obs,
                "starts": col.starts,
                "memory": col.memory,
            }
            save_checkpoint(out_dir, done, policy, opt, state, {"run": run.to_dict()})
            manifest.record_checkpoint(done)
            manifest.save(manifest_path)
    return policy

