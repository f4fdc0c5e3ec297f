"""Command-line entry point: ``abya <subcommand> [--config PATH] [--key=value ...]``."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import Dict, List, Optional, Sequence, Tuple

from . import harness
from . import oracle as orc
from .config import ConfigError, KEYS, build_config, parse_lines, parse_overrides
from .persist import kind_of, lm_entries, load_checkpoint, save_checkpoint

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

COMMANDS = ("pretrain-lm", "train", "transfer", "ablate", "eval", "enumerate-grammar")
NEEDS_CHECKPOINT = ("transfer", "ablate", "eval")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="abya", description=__doc__, allow_abbrev=False)
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", metavar="PATH")
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint", metavar="PATH")
    p.add_argument("--out-dir", metavar="PATH")
    p.add_argument("--quiet", action="store_true")
    p.epilog = "config keys may be overridden as --key=value: " + ", ".join(sorted(KEYS))
    return p


def _split_overrides(extra: Sequence[str]) -> List[Tuple[str, str]]:
    pairs = []
    it = iter(extra)
    for arg in it:
        if not arg.startswith("--") or len(arg) < 3:
            raise UsageError(f"unexpected argument {arg!r}")
        body = arg[2:]
        if "=" in body:
            key, value = body.split("=", 1)
        else:
            key = body
            try:
                value = next(it)
            except StopIteration:
                raise UsageError(f"flag --{key} needs a value") from None
        key = key.replace("-", "_") if key.replace("-", "_") in KEYS else key
        if key not in KEYS:
            raise UsageError(f"unknown flag --{key}")
        pairs.append((key, value))
    return pairs


def _resolve(args, extra) -> Tuple[object, Dict[str, object]]:
    values: Dict[str, object] = {}
    if args.config:
        with open(args.config) as f:
            values.update(parse_lines(f, args.config))
    values.update(parse_overrides(_split_overrides(extra)))
    if args.seed is not None:
        values["seed"] = args.seed
    if args.out_dir is not None:
        values["out_dir"] = args.out_dir
    if args.command in NEEDS_CHECKPOINT and "model" not in values:
        values["model"] = kind_of(load_checkpoint(args.checkpoint)).value
    if args.command in ("transfer", "ablate"):
        values.setdefault("env", harness.TRANSFER_ENV)
        values.setdefault("oracle", "test")
    if args.command == "eval":
        values.setdefault("oracle", "test")
    return build_config(values), values


def _report(name: str, result: harness.RunResult) -> None:
    print(f"{name}: episodes={result.episodes} final_ma100={result.final_ma:.4f} stopped={result.stopped}")


def _run(args, extra) -> int:
    if args.command == "enumerate-grammar":
        if extra:
            raise UsageError(f"enumerate-grammar takes no options, got {extra}")
        for s in orc.enumerate_grammar():
            print(orc.decode(s[1:-1]))
        return EXIT_OK
    if args.command in NEEDS_CHECKPOINT and not args.checkpoint:
        raise UsageError(f"{args.command} needs --checkpoint PATH")
    cfg, values = _resolve(args, extra)
    os.makedirs(cfg.out_dir, exist_ok=True)

    if args.command == "pretrain-lm":
        from .agent import Agent
        from .training import pretrain_lm
        if cfg.kind.value not in ("main", "film"):
            raise UsageError("pretrain-lm needs model=main or model=film")
        agent = Agent(cfg.kind, seed=cfg.seed)
        res = pretrain_lm(agent, seed=cfg.seed)
        path = os.path.join(cfg.out_dir, "lm.ckpt")
        save_checkpoint(path, lm_entries(agent))
        with open(os.path.join(cfg.out_dir, "lm_history.csv"), "w") as f:
            f.write("epoch,cross_entropy\n")
            f.writelines(f"{i + 1},{ce:.6f}\n" for i, ce in enumerate(res.history))
        print(f"pretrain-lm: epochs={res.epochs} final_ce={res.final_ce:.4f} -> {path}")
    elif args.command == "train":
        result, _, _ = harness.run_training(cfg, lm_checkpoint=args.checkpoint, out_dir=cfg.out_dir)
        _report("train", result)
    elif args.command == "transfer":
        result, _ = harness.run_transfer(args.checkpoint, cfg, env=cfg.env, out_dir=cfg.out_dir)
        _report(f"transfer[{cfg.oracle}]", result)
    elif args.command == "ablate":
        for mode, result in harness.run_ablation(args.checkpoint, cfg, env=cfg.env, out_dir=cfg.out_dir).items():
            _report(f"ablate[{mode}]", result)
    elif args.command == "eval":
        _report("eval", harness.run_eval(args.checkpoint, cfg, out_dir=cfg.out_dir))
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        if not args.quiet:
            logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
        return _run(args, extra)
    except (UsageError, ConfigError) as exc:
        print(exc, file=sys.stderr)
        if isinstance(exc, ConfigError):
            print(parser.format_usage(), file=sys.stderr, end="")
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    except Exception as exc:
        print(f"abya {argv[0] if argv else ''}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
