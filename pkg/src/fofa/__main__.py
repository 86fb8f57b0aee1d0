"""``python -m fofa <command>``: a thin wrapper over :mod:`fofa.commands`."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .commands import COMMANDS, ConfigError, load_config, merge, run


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="python -m fofa")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON run config; flags override its fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--mode")
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--dataset", help="path to a ratings file")
    p.add_argument("--synthetic", help="synthetic generator settings as JSON ('{}' for defaults)")
    p.add_argument("--checkpoint", dest="checkpoints", action="append")
    p.add_argument("--policy", choices=("every-S", "drift"))
    p.add_argument("--interval", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--sampled-negatives", type=int)
    p.add_argument("--full-rank", action="store_true", help="rank the full catalog (default)")
    p.add_argument("--out")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s %(message)s")
    try:
        base = load_config(args.config)
        policy = dict(base.get("policy", {}))
        for key, value in (("kind", args.policy), ("interval", args.interval), ("threshold", args.threshold)):
            if value is not None:
                policy[key] = value
        sampled = 0 if args.full_rank else args.sampled_negatives
        cfg = merge(base, command=args.command, seed=args.seed, mode=args.mode, lam=args.lam, tau=args.tau,
                    dataset=args.dataset,
                    synthetic=None if args.synthetic is None else json.loads(args.synthetic),
                    checkpoints=args.checkpoints, policy=policy or None, sampled_negatives=sampled, out=args.out)
        if sampled == 0:
            cfg.sampled_negatives = None
        result = run(cfg)
    except (ConfigError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    for name, ok in result.checks.items():
        print(f"{'PASS' if ok else 'FAIL'} {name}")
    for path in result.artifacts:
        print(path)
    return 0 if result.ok else 1


if __name__ == "__main__":
    sys.exit(main())
