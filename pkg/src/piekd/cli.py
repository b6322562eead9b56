"""Command line entry point: ``piekd train|sweep|eval``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness


def _config(args):
    overrides = {}
    if args.env is not None:
        overrides["env"] = args.env
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.total_steps is not None:
        overrides["total_steps"] = args.total_steps
    if args.config:
        return harness.load_config(args.config, arm=args.arm, **overrides)
    return harness.arm_config(args.arm or "piekd", preset=args.preset, **overrides)


def cmd_train(args):
    if args.resume:
        trainer = harness.Trainer.load(args.resume, out_dir=args.out, append=True)
        if args.total_steps is not None:
            # extending a finished run; every other setting comes from the checkpoint
            trainer.cfg.total_steps = args.total_steps
            trainer.cfg.validate()
        try:
            trainer.run()
            trainer.save(Path(args.out) / "checkpoint.npz")
        finally:
            trainer.close()
    else:
        trainer = harness.run_arm(_config(args), args.out)
    evals = [r for r in trainer.records if r["type"] == "eval"]
    out = {"out": str(args.out), "steps": trainer.state.total_steps}
    if evals:
        out["final_best"] = evals[-1]["best"]
        out["final_worst"] = evals[-1]["worst"]
    print(json.dumps(out))
    return 0


def cmd_sweep(args):
    cfg = _config(args)
    summary = harness.sweep(cfg, harness.parse_seeds(args.seeds), args.out, jobs=args.jobs)
    last = summary["points"][-1]
    print(json.dumps({"out": str(args.out), "final": last}))
    return 0


def cmd_eval(args):
    trainer = harness.Trainer.load(args.checkpoint, out_dir=None)
    rng = np.random.default_rng(args.eval_seed)
    n = args.episodes or trainer.cfg.eval_episodes
    result = harness.evaluate(trainer.state, trainer.cfg.env, n, rng)
    result["step"] = trainer.state.total_steps
    print(json.dumps(result))
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="piekd", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--arm", choices=list(harness.ARMS), default=None)
        sp.add_argument("--env", choices=sorted(harness.envs.ENVS), default=None)
        sp.add_argument("--config", help="JSON file with TrainerConfig fields")
        sp.add_argument("--preset", choices=list(harness.PRESETS), default="desk")
        sp.add_argument("--total-steps", type=int, default=None)
        sp.add_argument("--out", required=True, type=Path)

    t = sub.add_parser("train", help="train one arm for one seed")
    common(t)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--resume", help="continue from a checkpoint.npz")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="train one arm over several seeds and aggregate")
    common(s)
    s.add_argument("--seeds", default="0..4", help="'0..4' or '0,3,7'")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_sweep, seed=None)

    e = sub.add_parser("eval", help="evaluate a saved checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--episodes", type=int, default=None)
    e.add_argument("--eval-seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError, FloatingPointError, RuntimeError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
