"""Desk-scale training and transfer runs over several seeds.

Layout under --root:

    <model>/seed<k>/train/{metrics.csv,transcripts.jsonl,final.ckpt}
    <model>/seed<k>/transfer_<oracle>/{metrics.csv,transcripts.jsonl,final.ckpt}
    summary.json   final ma100 per finished run

Finished stages are skipped, so the script can be re-run to resume.

    python3 scripts/run_experiments.py train --models baseline main --seeds 0 1 2
    python3 scripts/run_experiments.py transfer --models main --oracles test random
    python3 scripts/run_experiments.py summary
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from abya import harness
from abya.config import build_config, parse_overrides

log = logging.getLogger("experiments")

DONE = "done.json"


def _stage_dir(root, model, seed, stage):
    return os.path.join(root, model, f"seed{seed}", stage)


def _finish(path, result: harness.RunResult):
    with open(os.path.join(path, DONE), "w") as f:
        json.dump({"episodes": result.episodes, "final_ma100": result.final_ma,
                   "stopped": result.stopped, "wall_seconds": round(result.wall_seconds, 1),
                   "skipped_updates": result.skipped_updates,
                   "top_questions": harness.top_questions(result, 10)}, f, indent=1)


def train(args):
    for seed in args.seeds:
        for model in args.models:
            out = _stage_dir(args.root, model, seed, "train")
            if os.path.exists(os.path.join(out, DONE)):
                log.info("skip %s", out)
                continue
            extra = {} if args.early_stop else {"converge_window": 0}
            cfg = build_config({"model": model, "seed": seed, "episodes": args.episodes,
                                "out_dir": out, **extra, **args.set})
            log.info("train %s seed %d -> %s", model, seed, out)
            result, _, _ = harness.run_training(cfg, out_dir=out)
            _finish(out, result)


def transfer(args):
    for seed in args.seeds:
        for model in args.models:
            ckpt = os.path.join(_stage_dir(args.root, model, seed, "train"), "final.ckpt")
            if not os.path.exists(ckpt):
                log.warning("no trained checkpoint at %s", ckpt)
                continue
            for oracle in args.oracles:
                if model == "baseline" and oracle != args.oracles[0]:
                    continue  # the baseline never hears answers, one run suffices
                out = _stage_dir(args.root, model, seed, f"transfer_{oracle}")
                if os.path.exists(os.path.join(out, DONE)):
                    log.info("skip %s", out)
                    continue
                cfg = build_config({"model": model, "seed": seed, "episodes": args.episodes,
                                    "oracle": oracle, "env": harness.TRANSFER_ENV, "out_dir": out,
                                    **args.set})
                log.info("transfer %s seed %d oracle %s -> %s", model, seed, oracle, out)
                result, _ = harness.run_transfer(ckpt, cfg, env=cfg.env, out_dir=out)
                _finish(out, result)


def summary(args):
    rows = {}
    for model in sorted(os.listdir(args.root)):
        mdir = os.path.join(args.root, model)
        if not os.path.isdir(mdir):
            continue
        for seed_dir in sorted(os.listdir(mdir)):
            for stage in sorted(os.listdir(os.path.join(mdir, seed_dir))):
                done = os.path.join(mdir, seed_dir, stage, DONE)
                if os.path.exists(done):
                    with open(done) as f:
                        rows.setdefault(f"{model}/{stage}", {})[seed_dir] = json.load(f)["final_ma100"]
    table = {}
    for cond, per_seed in sorted(rows.items()):
        mean, std = harness.aggregate(list(per_seed.values()))
        table[cond] = {"per_seed": per_seed, "mean": mean, "std": std}
        print(f"{cond:28s} {mean:.3f} +- {std:.3f}  ({len(per_seed)} seeds)")
    with open(os.path.join(args.root, "summary.json"), "w") as f:
        json.dump(table, f, indent=1)


def _kv(text):
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    k, v = text.split("=", 1)
    return k, v


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("stage", choices=("train", "transfer", "summary"))
    p.add_argument("--root", default="runs")
    p.add_argument("--models", nargs="+", default=["baseline", "main"])
    p.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    p.add_argument("--oracles", nargs="+", default=["test", "random"])
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--early-stop", action="store_true", help="stop training on ma100 convergence")
    p.add_argument("--set", nargs="*", type=_kv, default=[], help="extra config overrides key=value")
    args = p.parse_args(argv)
    if args.episodes is None:
        args.episodes = 30_000 if args.stage == "train" else 5_000
    args.set = parse_overrides(args.set)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    os.makedirs(args.root, exist_ok=True)
    {"train": train, "transfer": transfer, "summary": summary}[args.stage](args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
