"""Command-line entry point.

Verbs: `train` runs a multi-seed experiment, `eval` replays a stored
checkpoint greedily, `delta` prints the buffer match threshold for a given
capacity/embedding size, `compare` ranks finished runs by overall win-rate.
Exit codes: 0 success, 1 configuration error, 2 all seeds failed."""

from __future__ import annotations

import argparse
import json
import os
import sys

from .embedding import EMBED_MODES, EmbeddingConfig
from .env import GridworldConfig
from .harness import (
    ENV_NAMES,
    ExperimentSpec,
    compare_runs,
    eval_checkpoint,
    run_experiment,
)
from .incentive import INCENTIVE_MODES, IncentiveConfig
from .marl import MIXERS, TrainConfig
from .memory import compute_delta

_FLAT_ENV_KEYS = ("width", "height", "penalty_p", "t_max")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="emarl",
        description="cooperative Q-learning with episodic memory incentives")
    sub = parser.add_subparsers(dest="verb", required=True)

    tr = sub.add_parser("train", help="run a multi-seed experiment")
    tr.add_argument("--config", help="JSON config file; flags override it")
    tr.add_argument("--env", choices=ENV_NAMES)
    tr.add_argument("--embed", choices=EMBED_MODES)
    tr.add_argument("--embed-dim", type=int)
    tr.add_argument("--lambda-rcon", type=float)
    tr.add_argument("--t-emb", type=int)
    tr.add_argument("--delta", help="match threshold: a float or 'auto'")
    tr.add_argument("--capacity", type=int)
    tr.add_argument("--incentive", choices=INCENTIVE_MODES)
    tr.add_argument("--lambda-ec", type=float)
    tr.add_argument("--beta-e3b", type=float)
    tr.add_argument("--lambda-e3b", type=float)
    tr.add_argument("--no-clamp", action="store_true",
                    help="allow negative episodic incentives")
    tr.add_argument("--mixer", choices=MIXERS)
    tr.add_argument("--gamma", type=float)
    tr.add_argument("--eps-anneal", type=int)
    tr.add_argument("--target-interval", type=int)
    tr.add_argument("--n-circle", type=int)
    tr.add_argument("--batch-episodes", type=int)
    tr.add_argument("--seeds", type=int, nargs="+")
    tr.add_argument("--total-steps", type=int)
    tr.add_argument("--eval-interval", type=int)
    tr.add_argument("--eval-episodes", type=int)
    tr.add_argument("--out", help="output directory (default under $EMU_OUT)")

    ev = sub.add_parser("eval", help="greedy evaluation of a checkpoint")
    ev.add_argument("run_dir")
    ev.add_argument("--seed", type=int, help="training seed to load")
    ev.add_argument("--episodes", type=int, default=30)
    ev.add_argument("--eval-seed", type=int, default=0)

    dl = sub.add_parser("delta", help="print the buffer match threshold")
    dl.add_argument("--capacity", type=float, default=1e6)
    dl.add_argument("--embed-dim", type=int, default=4)
    dl.add_argument("--sigma", type=float, default=1.0)

    cp = sub.add_parser("compare", help="rank runs by overall win-rate")
    cp.add_argument("run_dirs", nargs="+")
    cp.add_argument("--horizon", type=float)
    return parser


def _load_config_file(path: str) -> dict:
    with open(path) as fh:
        return json.load(fh)


def _positions(raw) -> tuple:
    return tuple(tuple(int(c) for c in p) for p in raw)


def build_spec(args) -> ExperimentSpec:
    env_kw: dict = {}
    train_kw: dict = {}
    emb_kw: dict = {}
    inc_kw: dict = {}
    top: dict = {}

    if args.config:
        data = _load_config_file(args.config)
        for key in _FLAT_ENV_KEYS:
            if key in data:
                env_kw[key] = data[key]
        env_kw.update(data.get("env_cfg", {}))
        train_kw.update(data.get("train_cfg", {}))
        emb_kw.update(data.get("emb_cfg", {}))
        inc_kw.update(data.get("inc_cfg", {}))
        for key in ("seeds", "capacity", "delta", "out_dir"):
            if key in data:
                top[key] = data[key]
        if "env" in data:
            top["env"] = data["env"]
    for key in ("starts", "goals"):
        if key in env_kw:
            env_kw[key] = _positions(env_kw[key])

    flag_map = [
        (args.env, top, "env"),
        (args.embed, emb_kw, "mode"),
        (args.embed_dim, emb_kw, "embed_dim"),
        (args.lambda_rcon, emb_kw, "lambda_rcon"),
        (args.t_emb, emb_kw, "t_emb"),
        (args.capacity, top, "capacity"),
        (args.incentive, inc_kw, "mode"),
        (args.lambda_ec, inc_kw, "lambda_ec"),
        (args.beta_e3b, inc_kw, "beta_e3b"),
        (args.lambda_e3b, inc_kw, "lambda_e3b"),
        (args.mixer, train_kw, "mixer"),
        (args.gamma, train_kw, "gamma"),
        (args.eps_anneal, train_kw, "eps_anneal_steps"),
        (args.target_interval, train_kw, "target_interval"),
        (args.n_circle, train_kw, "n_circle"),
        (args.batch_episodes, train_kw, "batch_episodes"),
        (args.total_steps, train_kw, "total_steps"),
        (args.eval_interval, train_kw, "eval_interval"),
        (args.eval_episodes, train_kw, "eval_episodes"),
    ]
    for value, target, key in flag_map:
        if value is not None:
            target[key] = value
    if args.no_clamp:
        inc_kw["clamp"] = False
    if args.delta is not None:
        top["delta"] = args.delta if args.delta == "auto" else float(args.delta)
    if args.seeds is not None:
        top["seeds"] = args.seeds
    if args.out is not None:
        top["out_dir"] = args.out

    if "seeds" in top:
        top["seeds"] = tuple(int(s) for s in top["seeds"])
    if isinstance(top.get("delta"), str) and top["delta"] != "auto":
        top["delta"] = float(top["delta"])
    if "out_dir" not in top:
        emb_cfg_mode = emb_kw.get("mode", "dcae")
        inc_mode = inc_kw.get("mode", "ei")
        root = os.environ.get("EMU_OUT", "runs")
        top["out_dir"] = os.path.join(
            root, f"{top.get('env', 'gridworld')}_{inc_mode}_{emb_cfg_mode}")
    return ExperimentSpec(
        env_cfg=GridworldConfig(**env_kw),
        train_cfg=TrainConfig(**train_kw),
        emb_cfg=EmbeddingConfig(**emb_kw),
        inc_cfg=IncentiveConfig(**inc_kw),
        **top,
    )


def cmd_train(args) -> int:
    spec = build_spec(args)
    result = run_experiment(spec)
    for seed, msg in result["failures"].items():
        print(f"seed {seed} failed: {msg}", file=sys.stderr)
    if result["all_failed"]:
        print("all seeds failed", file=sys.stderr)
        return 2
    summary = result["summary"]
    final = summary["final_win_rate"]
    if final is not None:
        print(f"final_win_rate {final['mean']:.9g} +- {final['std']:.9g}")
        if summary["mu_w"]:
            last = max(summary["mu_w"], key=int)
            print(f"mu_w@{last} {summary['mu_w'][last]:.9g}")
    print(f"wrote {spec.out_dir}")
    return 0


def cmd_eval(args) -> int:
    win, ret = eval_checkpoint(args.run_dir, seed=args.seed,
                               episodes=args.episodes,
                               eval_seed=args.eval_seed)
    print(f"win_rate {win:.9g}")
    print(f"mean_return {ret:.9g}")
    return 0


def cmd_delta(args) -> int:
    print(f"{compute_delta(args.capacity, args.embed_dim, args.sigma):.9g}")
    return 0


def cmd_compare(args) -> int:
    report = compare_runs(args.run_dirs, args.horizon)
    width = max(len(r["run"]) for r in report)
    print(f"{'run':<{width}}  {'mu_w':>12}  {'final':>8}")
    for r in report:
        print(f"{r['run']:<{width}}  {r['mu_w']:>12.9g}  "
              f"{r['final_win_rate']:>8.4g}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; those are config errors here
        return 0 if not exc.code else 1
    handlers = {"train": cmd_train, "eval": cmd_eval, "delta": cmd_delta,
                "compare": cmd_compare}
    try:
        return handlers[args.verb](args)
    except (ValueError, TypeError, OSError, KeyError,
            json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
