"""Command line entry point.

    icloco gen --seed 0 --category biped --count 10 --out-dir robots/
    icloco train --config run.json --out-dir runs/a [--resume] [--set ppo.lr=1e-4]
    icloco eval RUN_OR_CHECKPOINT --robots 8 --n-envs 16 --budget 5 --out-dir reports/
    icloco sweep RUN_OR_CHECKPOINT --budgets 0,1,2,5 --n-episodes 500 --out-dir reports/
    icloco trace RUN_OR_CHECKPOINT --variants 4 --n-rollouts 256 --out-dir reports/
    icloco show-config [--preset small]

Exit codes: 0 success, 1 usage error, 2 data or config error, 3 numerical fault.
Set ICLOCO_THREADS to cap the number of BLAS threads.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


class RunLock:
    """Exclusive lock file inside a run directory."""

    def __init__(self, directory):
        self.path = os.path.join(directory, ".lock")
        self.fd = None

    def __enter__(self):
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ValueError(f"{os.path.dirname(self.path)} is locked by another command ({self.path})") from None
        os.write(self.fd, str(os.getpid()).encode())
        return self

    def __exit__(self, *exc):
        os.close(self.fd)
        os.remove(self.path)
        return False


def _ensure_dir(path) -> None:
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise ValueError(f"cannot create directory {path}: {exc.strerror}") from exc
    if not os.access(path, os.W_OK):
        raise ValueError(f"directory {path} is not writable")


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    from .morph import CATEGORIES, sample_morphology, to_json, validate

    if args.category not in CATEGORIES:
        raise UsageError(f"category must be one of {CATEGORIES}")
    if args.count < 0:
        raise UsageError("count must be >= 0")
    _ensure_dir(args.out_dir)
    index = []
    for i in range(args.count):
        seed = args.seed + i
        spec = sample_morphology(seed, args.category)
        errors = validate(spec)
        if errors:
            raise ValueError(f"generated spec {seed} is invalid: {errors}")
        name = f"{args.category}_{seed:07d}.json"
        with open(os.path.join(args.out_dir, name), "w") as fh:
            fh.write(to_json(spec))
        index.append({"file": name, "seed": seed, "category": args.category})
    with open(os.path.join(args.out_dir, "index.json"), "w") as fh:
        json.dump({"count": args.count, "robots": index}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {args.count} robot specs to {args.out_dir}")
    return EXIT_OK


def _run_config(args):
    from .config import apply_overrides, load_config, preset

    if args.config:
        if not os.path.exists(args.config):
            raise ValueError(f"config file {args.config} not found")
        run = load_config(args.config)
    elif getattr(args, "preset", None):
        run = preset(args.preset)
    else:
        raise UsageError("give --config or --preset")
    run = apply_overrides(run, getattr(args, "set", None))
    if getattr(args, "seed", None) is not None:
        run.seed = args.seed
    return run


def cmd_train(args) -> int:
    from . import tensor as T
    from .ppo import train

    run = _run_config(args)
    _ensure_dir(args.out_dir)
    with RunLock(args.out_dir):
        with open(os.path.join(args.out_dir, "config.json"), "w") as fh:
            fh.write(run.to_json())
        T.CHECK_FINITE = True
        train(run, args.out_dir, resume=args.resume, stop_after=args.stop_after,
              log=lambda s: print(s, flush=True))
    return EXIT_OK


def load_checkpoint(path, config_path=None):
    """Policy and run config from a run directory, checkpoint directory or params file."""
    from . import tensor as T
    from .config import load_config, make_policy, policy_config, policy_from_meta
    from .ppo import latest_checkpoint

    if os.path.isdir(path) and os.path.exists(os.path.join(path, "checkpoints")):
        ck = latest_checkpoint(path)
        if ck is None:
            raise ValueError(f"run directory {path} has no checkpoint")
        path = ck
    params = os.path.join(path, "params.npz") if os.path.isdir(path) else path
    if not os.path.exists(params):
        raise ValueError(f"checkpoint {params} not found")
    arrays, meta = T.load_arrays(params)
    if "run" not in meta:
        raise ValueError(f"checkpoint {params} carries no run config")
    _, run = policy_from_meta(meta)
    T.set_precision(run.precision)
    if config_path is not None:
        cfg_run = load_config(config_path)
        want, have = policy_config(cfg_run).to_dict(), policy_config(run).to_dict()
        diff = [k for k in sorted(want) if want[k] != have.get(k)]
        if diff:
            k = diff[0]
            raise ValueError(f"config/checkpoint mismatch in policy.{k}: config {want[k]} != checkpoint {have.get(k)}")
        run = cfg_run
    policy = make_policy(policy_config(run), run.seed)
    policy.load_state_dict(arrays)
    return policy, run


def _write_report(rep, out_dir, stem, csv_text) -> None:
    _ensure_dir(out_dir)
    with open(os.path.join(out_dir, f"{stem}.csv"), "w") as fh:
        fh.write(csv_text)
    with open(os.path.join(out_dir, f"{stem}.txt"), "w") as fh:
        fh.write(rep.to_table())
    with open(os.path.join(out_dir, f"{stem}.json"), "w") as fh:
        fh.write(rep.to_json())
    print(rep.to_table(), end="")


def cmd_eval(args) -> int:
    from .evaluation import eval_displacement, held_out_robots

    policy, run = load_checkpoint(args.checkpoint, args.config)
    robots = held_out_robots(args.robots, args.seed, multiplier=args.multiplier)
    rep = eval_displacement(policy, robots, args.budget, args.n_envs, args.seed, run.env)
    rep.metadata["multiplier"] = args.multiplier
    _write_report(rep, args.out_dir, "eval", rep.to_csv())
    return EXIT_OK


def _parse_budgets(text):
    try:
        budgets = [float(b) for b in text.split(",") if b.strip()]
    except ValueError:
        raise UsageError(f"budgets must be comma-separated numbers, got {text!r}") from None
    if not budgets:
        raise UsageError("no budgets given")
    return budgets


def cmd_sweep(args) -> int:
    from .evaluation import adaptation_sweep
    from .morph import CATEGORIES

    budgets = _parse_budgets(args.budgets)
    cats = CATEGORIES if args.category == "all" else (args.category,)
    policy, run = load_checkpoint(args.checkpoint, args.config)
    res = adaptation_sweep(policy, budgets, args.n_episodes, args.multiplier, args.seed, cats, run.env)
    rep = res.report()
    _write_report(rep, args.out_dir, "sweep", rep.survival_csv())
    return EXIT_OK


def cmd_trace(args) -> int:
    import numpy as np

    from .evaluation import dynamics_variants, representation_trace

    policy, run = load_checkpoint(args.checkpoint, args.config)
    variants = dynamics_variants(args.variants, args.seed, args.category, args.multiplier)
    tr = representation_trace(policy, variants, args.n_rollouts, args.seconds, args.layer, args.seed, run.env)
    _ensure_dir(args.out_dir)
    inter = tr.inter_mean()
    with open(os.path.join(args.out_dir, "trace.csv"), "w") as fh:
        fh.write("time_s,inter_variant_distance," + ",".join(f"alive_{v}" for v in range(len(variants))) + "\n")
        for t in range(len(tr.times)):
            counts = ",".join(str(int(c)) for c in tr.counts[:, t])
            fh.write(f"{tr.times[t]:.2f},{inter[t]:.6f},{counts}\n")
    np.savez(os.path.join(args.out_dir, "trace_means.npz"), times=tr.times, means=tr.means, distances=tr.distances)
    for s in (0.5, 5.0):
        if s <= tr.times[-1]:
            print(f"t={s:.1f}s inter-variant distance {inter[tr.at(s)]:.4f}")
    return EXIT_OK


def cmd_show_config(args) -> int:
    from .config import preset

    print(preset(args.preset).to_json(), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    from .config import PRESETS
    from .morph import CATEGORIES

    p = _Parser(prog="icloco", description="Train and evaluate in-context locomotion policies.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen", help="write procedurally generated robot specs")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--category", default="quadruped", help=f"one of {', '.join(CATEGORIES)}")
    g.add_argument("--count", type=int, default=10)
    g.add_argument("--out-dir", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train (or resume) a run")
    t.add_argument("--config")
    t.add_argument("--preset", choices=PRESETS)
    t.add_argument("--out-dir", required=True)
    t.add_argument("--resume", action="store_true")
    t.add_argument("--seed", type=int)
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config entry")
    t.add_argument("--stop-after", type=int, help="stop after this many total iterations")
    t.set_defaults(func=cmd_train)

    def common(sp):
        sp.add_argument("checkpoint", help="run directory, checkpoint directory or params.npz")
        sp.add_argument("--config", help="check the checkpoint against this run config")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out-dir", required=True)

    e = sub.add_parser("eval", help="goal-displacement evaluation on held-out robots")
    common(e)
    e.add_argument("--robots", type=int, default=8)
    e.add_argument("--n-envs", type=int, default=16)
    e.add_argument("--budget", type=float, default=0.0, help="adaptation budget in seconds (0: zero-shot)")
    e.add_argument("--multiplier", type=float, default=1.0)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="survival versus adaptation budget")
    common(s)
    s.add_argument("--budgets", default="0,1,2,5")
    s.add_argument("--n-episodes", type=int, default=500)
    s.add_argument("--multiplier", type=float, default=2.0)
    s.add_argument("--category", default="all")
    s.set_defaults(func=cmd_sweep)

    r = sub.add_parser("trace", help="mean layer activations over time for dynamics variants")
    common(r)
    r.add_argument("--variants", type=int, default=4)
    r.add_argument("--n-rollouts", type=int, default=256)
    r.add_argument("--seconds", type=float, default=5.5)
    r.add_argument("--layer", type=int, default=2)
    r.add_argument("--category", default="quadruped")
    r.add_argument("--multiplier", type=float, default=2.0)
    r.set_defaults(func=cmd_trace)

    c = sub.add_parser("show-config", help="print a full default config")
    c.add_argument("--preset", choices=PRESETS, default="desk")
    c.set_defaults(func=cmd_show_config)
    return p


def main(argv=None) -> int:
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        if not getattr(args, "func", None):
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"numerical fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
