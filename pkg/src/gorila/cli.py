"""Command line entry point: ``gorila train|eval|report|oracle|record``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .envs import load_trajectory, rollout, save_trajectory, value_iteration
from .evaluation import (
    HUMAN_STARTS,
    NULL_OP,
    SchemaError,
    random_baseline,
    report_tables,
    shipped_raw_scores,
    write_report,
)
from .experiment import (
    Evaluator,
    RunFailed,
    build_env,
    expert_policy,
    record_expert,
    run_experiment,
    tabular_core,
)
from .nn import load_checkpoint, sizes_from_layout


def _config_for_checkpoint(args) -> RunConfig:
    if args.config:
        return load_config(args.config)
    # checkpoints live in <run>/checkpoints/
    snapshot = Path(args.checkpoint).resolve().parent.parent / "config.txt"
    if snapshot.exists():
        return load_config(snapshot)
    return RunConfig(env=args.env)


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    try:
        res = run_experiment(cfg, args.out)
    except RunFailed as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 1
    print(json.dumps({"run_dir": str(res.run_dir), "best_score": res.best_score,
                      "best_version": res.best_version, "server": res.server_stats,
                      "wall_clock_s": round(res.wall_clock_s, 3)}, indent=2))
    return 0


def cmd_eval(args) -> int:
    cfg = _config_for_checkpoint(args).replace(eval_protocol=args.protocol)
    if args.episodes is not None:
        cfg = cfg.replace(eval_episodes=args.episodes, eval_start_points=args.episodes)
    if args.seed is not None:
        cfg = cfg.replace(eval_seed=args.seed)
    params = load_checkpoint(args.checkpoint)
    trajectory = None
    if args.protocol == HUMAN_STARTS:
        default = Path(args.checkpoint).resolve().parent.parent / "expert_trajectory.grtj"
        path = Path(args.trajectory) if args.trajectory else default
        trajectory = load_trajectory(path) if path.exists() else record_expert(cfg)
    ev = Evaluator(cfg, trajectory)
    if sizes_from_layout(params.layout) != ev.sizes:
        print(f"checkpoint network {sizes_from_layout(params.layout)} does not fit "
              f"environment network {ev.sizes}", file=sys.stderr)
        return 2
    score = ev.score(params)
    rnd = random_baseline(ev.env, ev.protocol, cfg.eval_seed, trajectory)
    out = {"protocol": args.protocol, "score": score, "random_score": rnd}
    expert = expert_policy(cfg, ev.env)
    if expert is not None:
        human = ev.score_policy(lambda obs, rng: expert(obs))
        out["expert_score"] = human
        if human != rnd:
            out["human_normalized"] = 100.0 * (score - rnd) / (human - rnd)
    print(json.dumps(out, indent=2))
    return 0


def cmd_report(args) -> int:
    source = args.raw if args.raw not in (NULL_OP, HUMAN_STARTS) else shipped_raw_scores(args.raw)
    try:
        rows = report_tables(source)
    except SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return 2
    if args.out:
        with open(args.out, "w", newline="") as fh:
            write_report(rows, fh)
    else:
        write_report(rows, sys.stdout)
    return 0


def cmd_oracle(args) -> int:
    cfg = RunConfig(env=args.env, gamma=args.gamma)
    if args.size is not None:
        cfg = cfg.replace(env_size=args.size)
    if args.slip is not None:
        cfg = cfg.replace(env_slip=args.slip)
    env = build_env(cfg)
    core = tabular_core(env)
    q = value_iteration(core.mdp, cfg.gamma, tol=1e-12)
    policy = expert_policy(cfg, env)
    rng = np.random.default_rng(args.seed)
    returns = [rollout(env, lambda obs, r: policy(obs), rng, cfg.eval_null_op_cap)
               for _ in range(args.episodes)]
    print(json.dumps({
        "env": args.env,
        "gamma": cfg.gamma,
        "q_star": q.round(6).tolist(),
        "v_star": q.max(axis=1).round(6).tolist(),
        "greedy_actions": q.argmax(axis=1).tolist(),
        "greedy_mean_return": float(np.mean(returns)),
    }, indent=2))
    return 0


def cmd_record(args) -> int:
    cfg = load_config(args.config) if args.config else RunConfig(env=args.env)
    traj = record_expert(cfg, seed=args.seed, max_steps=args.steps)
    save_trajectory(args.out, traj)
    print(f"recorded {len(traj)} steps to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gorila", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run one training experiment")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--protocol", choices=(NULL_OP, HUMAN_STARTS), required=True)
    e.add_argument("--config", help="defaults to the run's config.txt snapshot")
    e.add_argument("--env", choices=("chain", "gridworld"), default="chain")
    e.add_argument("--trajectory", help="expert trajectory for human starts")
    e.add_argument("--episodes", type=int)
    e.add_argument("--seed", type=int)
    e.set_defaults(fn=cmd_eval)

    r = sub.add_parser("report", help="normalized score tables from raw scores")
    r.add_argument("--raw", required=True,
                   help="raw score csv, or null_op / human_starts for the bundled tables")
    r.add_argument("--out")
    r.set_defaults(fn=cmd_report)

    o = sub.add_parser("oracle", help="exact Q* by value iteration")
    o.add_argument("--env", choices=("chain", "gridworld"), default="chain")
    o.add_argument("--gamma", type=float, default=0.9)
    o.add_argument("--size", type=int)
    o.add_argument("--slip", type=float)
    o.add_argument("--episodes", type=int, default=30)
    o.add_argument("--seed", type=int, default=0)
    o.set_defaults(fn=cmd_oracle)

    rec = sub.add_parser("record", help="record an expert trajectory for human starts")
    rec.add_argument("--out", required=True)
    rec.add_argument("--config")
    rec.add_argument("--env", choices=("chain", "gridworld"), default="gridworld")
    rec.add_argument("--seed", type=int, default=0)
    rec.add_argument("--steps", type=int)
    rec.set_defaults(fn=cmd_record)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.fn(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
