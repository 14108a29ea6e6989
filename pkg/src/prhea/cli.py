"""Command-line entry point: ``prhea {train,eval,baseline,trace}``.

Settings resolve as built-in defaults < ``--config`` JSON file <
command-line flags, and the resolved values are echoed as JSON before a
command runs.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import persistence
from .env import ENVIRONMENTS, make_env
from .learner import FIXED_1, HALF_L, LearnConfig, evaluate, train
from .planner import PlanConfig, run_episode

OUT_DIR_ENV = "PRHEA_OUT_DIR"

TRAIN_DEFAULTS = {
    "horizon": 20,
    "generations": 5,
    "population": None,
    "discount": 0.99,
    "steps_rule": HALF_L,
    "minibatch": 32,
    "buffer_size": 20000,
    "replay_start": 5000,
    "trains_per_cycle": 50,
    "learning_rate": 3e-3,
    "rms_decay": 0.99,
    "grad_clip": 0.5,
    "checkpoint_every": 50,
    "budget": 200_000,
    "seed": 0,
    "workers": 1,
}

EVAL_DEFAULTS = {"horizon": 20, "generations": 5, "population": None, "discount": 0.99,
                 "episodes": 25, "seed": 0, "workers": 1}

BASELINE_DEFAULTS = {"horizon": 20, "generations": None, "population": None, "discount": 0.99,
                     "episodes": 5, "seed": 0, "workers": 1}

TRACE_DEFAULTS = {"horizon": 20, "generations": None, "population": None, "discount": 0.99,
                  "seed": 0, "workers": 1}


class CliError(Exception):
    pass


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return value


def _nonnegative_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be non-negative, got {text}")
    return value


def _env_id(text: str) -> str:
    if text not in ENVIRONMENTS:
        raise argparse.ArgumentTypeError(
            f"unknown environment id {text!r} (choose from {', '.join(sorted(ENVIRONMENTS))})"
        )
    return text


def _default_out_dir() -> Path:
    return Path(os.environ.get(OUT_DIR_ENV, "runs"))


def _load_config_file(path: Optional[str]) -> Dict:
    if not path:
        return {}
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise CliError(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CliError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise CliError(f"config file {path} must contain a mapping")
    return {k.replace("-", "_"): v for k, v in data.items()}


def _resolve(defaults: Dict, args: argparse.Namespace) -> Dict:
    resolved = dict(defaults)
    file_cfg = _load_config_file(getattr(args, "config", None))
    unknown = set(file_cfg) - set(defaults)
    if unknown:
        raise CliError(f"unknown keys in config file: {', '.join(sorted(unknown))}")
    resolved.update(file_cfg)
    for key in defaults:
        flag = getattr(args, key, None)
        if flag is not None:
            resolved[key] = flag
    return resolved


def _echo(command: str, resolved: Dict) -> None:
    print(json.dumps({"command": command, **resolved}, sort_keys=True, default=str))


def _add_planner_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--horizon", type=_positive_int)
    p.add_argument("--generations", type=_positive_int)
    p.add_argument("--population", type=_positive_int)
    p.add_argument("--discount", type=float)
    p.add_argument("--workers", type=_positive_int, help="threads for fitness evaluation")


def _write_rows(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def cmd_train(args) -> int:
    cfg = _resolve(TRAIN_DEFAULTS, args)
    out_dir = Path(args.out_dir) if args.out_dir else _default_out_dir()
    _echo("train", {"env": args.env, "out_dir": str(out_dir), **cfg})
    plan_cfg = PlanConfig(horizon=cfg["horizon"], generations=cfg["generations"],
                          population=cfg["population"], discount=cfg["discount"], workers=cfg["workers"])
    learn = LearnConfig(minibatch=cfg["minibatch"], buffer_capacity=cfg["buffer_size"],
                        replay_start=cfg["replay_start"], trains_per_cycle=cfg["trains_per_cycle"],
                        total_steps=cfg["budget"], execution_rule=cfg["steps_rule"],
                        checkpoint_every=cfg["checkpoint_every"], learning_rate=cfg["learning_rate"],
                        rms_decay=cfg["rms_decay"], grad_clip=cfg["grad_clip"])
    resume = persistence.load(args.resume) if args.resume else None
    learner = train(args.env, plan_cfg, learn, seed=cfg["seed"], out_dir=out_dir, resume=resume)
    print(f"trained {learner.episodes} episodes, {learner.steps} steps -> {out_dir}")
    return 0


def _load_checkpoint(path: str) -> persistence.Checkpoint:
    if not Path(path).is_file():
        raise CliError(f"checkpoint not found: {path}")
    return persistence.load(path)


def cmd_eval(args) -> int:
    cfg = _resolve(EVAL_DEFAULTS, args)
    ckpt = _load_checkpoint(args.checkpoint)
    env_id = args.env or ckpt.env_id
    persistence.check_compatible(ckpt, make_env(env_id))
    out = Path(args.out) if args.out else _default_out_dir() / "eval.csv"
    _echo("eval", {"env": env_id, "checkpoint": args.checkpoint, "out": str(out), **cfg})
    plan_cfg = PlanConfig(horizon=cfg["horizon"], generations=cfg["generations"],
                          population=cfg["population"], discount=cfg["discount"], workers=cfg["workers"])
    value = ckpt.value() if ckpt.value_active else None
    seeds = [cfg["seed"] + i for i in range(cfg["episodes"])]
    report = evaluate(ckpt.policy(), value, env_id, plan_cfg, seeds=seeds)
    _write_rows(out, ("episode", "seed", "return"),
                [(i, s, r) for i, (s, r) in enumerate(zip(seeds, report.returns))])
    print(f"{env_id}: {report.mean:.3f} ± {report.std:.3f} over {len(seeds)} episodes")
    return 0


def cmd_baseline(args) -> int:
    cfg = _resolve(BASELINE_DEFAULTS, args)
    if cfg["generations"] is None:
        cfg["generations"] = cfg["horizon"]
    out = Path(args.out) if args.out else \
        _default_out_dir() / f"baseline_{args.env}_H{cfg['horizon']}_G{cfg['generations']}.csv"
    _echo("baseline", {"env": args.env, "out": str(out), **cfg})
    plan_cfg = PlanConfig.plain_rhea(cfg["horizon"], cfg["generations"], population=cfg["population"],
                                     discount=cfg["discount"], workers=cfg["workers"])
    env = make_env(args.env)
    rows: List = []
    for i in range(cfg["episodes"]):
        seed = cfg["seed"] + i
        ep = run_episode(env, plan_cfg, rng=np.random.default_rng(seed), seed=seed)
        rows.append((i, seed, cfg["horizon"], cfg["generations"], ep.total_return, ep.steps))
    _write_rows(out, ("episode", "seed", "horizon", "generations", "return", "steps"), rows)
    returns = np.array([r[4] for r in rows])
    std = float(returns.std()) if len(returns) > 1 else 0.0
    print(f"{args.env} RHEA H={cfg['horizon']} G={cfg['generations']}: {returns.mean():.3f} ± {std:.3f}")
    return 0


def trace_rows(rewards) -> List:
    cumulative = np.cumsum(rewards)
    return [(t, float(r), float(c)) for t, (r, c) in enumerate(zip(rewards, cumulative))]


def cmd_trace(args) -> int:
    cfg = _resolve(TRACE_DEFAULTS, args)
    ckpt = _load_checkpoint(args.checkpoint) if args.checkpoint else None
    env_id = args.env or (ckpt.env_id if ckpt else None)
    if env_id is None:
        raise CliError("trace needs --env or --checkpoint")
    env = make_env(env_id)
    if ckpt is not None:
        persistence.check_compatible(ckpt, env)
        cfg["generations"] = cfg["generations"] or 5
        plan_cfg = PlanConfig(horizon=cfg["horizon"], generations=cfg["generations"],
                              population=cfg["population"], discount=cfg["discount"], workers=cfg["workers"])
        policy, value = ckpt.policy(), (ckpt.value() if ckpt.value_active else None)
    else:
        cfg["generations"] = cfg["generations"] or cfg["horizon"]
        plan_cfg = PlanConfig.plain_rhea(cfg["horizon"], cfg["generations"], population=cfg["population"],
                                         discount=cfg["discount"], workers=cfg["workers"])
        policy = value = None
    out = Path(args.out) if args.out else _default_out_dir() / f"trace_{env_id}.csv"
    _echo("trace", {"env": env_id, "checkpoint": args.checkpoint, "out": str(out), **cfg})
    ep = run_episode(env, plan_cfg, policy, value, rng=np.random.default_rng(cfg["seed"]), seed=cfg["seed"])
    _write_rows(out, ("step", "reward", "cumulative_reward"), trace_rows(ep.rewards))
    print(f"{env_id}: return {ep.total_return:.3f} over {ep.steps} steps -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prhea", description=__doc__.splitlines()[0])
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="plan/learn training loop")
    p.add_argument("--env", required=True, type=_env_id)
    p.add_argument("--budget", type=_nonnegative_int, help="real environment steps")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir")
    p.add_argument("--config")
    p.add_argument("--resume", help="checkpoint to continue from")
    _add_planner_flags(p)
    p.add_argument("--steps-rule", choices=[HALF_L, FIXED_1])
    p.add_argument("--minibatch", type=_positive_int)
    p.add_argument("--buffer-size", type=_positive_int)
    p.add_argument("--replay-start", type=_positive_int)
    p.add_argument("--trains-per-cycle", type=_nonnegative_int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--rms-decay", type=float)
    p.add_argument("--grad-clip", type=float)
    p.add_argument("--checkpoint-every", type=_nonnegative_int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="real-play evaluation of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--env", type=_env_id)
    p.add_argument("--episodes", type=_positive_int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--config")
    _add_planner_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("baseline", help="plain RHEA scores")
    p.add_argument("--env", required=True, type=_env_id)
    p.add_argument("--episodes", type=_positive_int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--config")
    _add_planner_flags(p)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("trace", help="per-step reward trace of one episode")
    p.add_argument("--checkpoint")
    p.add_argument("--env", type=_env_id)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--config")
    _add_planner_flags(p)
    p.set_defaults(func=cmd_trace)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, persistence.CheckpointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
