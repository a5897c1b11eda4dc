"""Command line entry point: ``powerdet <subcommand> [options]``."""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import torch

from ..data import load_png, load_split, write_dataset
from .ablate import GROUPS, run_ablation
from .bench import run_bench
from .config import ConfigError, dump_config, load_config, with_seed
from .heatmap import LAYER_TAGS, write_heatmap
from .reports import evaluate, write_detections_jsonl, write_report
from .train import load_checkpoint, train_from_config


def _groups(s):
    gs = tuple(g for g in s.upper().replace(",", "") if not g.isspace())
    bad = sorted(set(gs) - set(GROUPS))
    if not gs or bad:
        raise argparse.ArgumentTypeError(f"groups must be letters from {''.join(GROUPS)}, got {s!r}")
    return gs


def _ints(s):
    try:
        return tuple(int(t) for t in s.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from None


def _common(p):
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed (default 0)")
    p.add_argument("--out-dir", default=".", help="directory for outputs (created if missing)")
    p.add_argument("--threads", type=int, default=1, help="torch intra-op threads (1 = deterministic)")
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="config override, repeatable")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="powerdet", description="Power-equipment defect detector toolkit.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic dataset (PNG + VOC XML + manifest + splits)")
    _common(p)
    p.add_argument("--count", type=int, default=None)

    p = sub.add_parser("train", help="train a detector; writes train_log.csv and checkpoint.pdnt")
    _common(p)
    p.add_argument("--data-dir", default=None)
    p.add_argument("--epochs", type=int, default=None)

    p = sub.add_parser("eval", help="evaluate a checkpoint; writes eval_report.csv and detections.jsonl")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", default=None)
    p.add_argument("--split", default="test", help="train, val, test or all")

    p = sub.add_parser("ablate", help="train and evaluate the eight-row flag grid; writes ablation.csv")
    _common(p)
    p.add_argument("--data-dir", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--groups", type=_groups, default=tuple(GROUPS), help="e.g. AH or A,H")

    p = sub.add_parser("heatmap", help="grayscale activation heatmap of the pooling block")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="PNG image")
    p.add_argument("--layer", required=True, help=f"one of: {', '.join(LAYER_TAGS)}")

    p = sub.add_parser("bench", help="forward-pass timings; writes bench.csv")
    _common(p)
    p.add_argument("--sizes", type=_ints, default=(8, 16))
    p.add_argument("--channels", type=int, default=64)
    p.add_argument("--topk", type=_ints, default=(1, 2, 4))
    p.add_argument("--repeats", type=int, default=20)
    return ap


def _config(args):
    cfg = load_config(args.config, args.overrides)
    if args.seed is not None:
        cfg = with_seed(cfg, args.seed)
    if getattr(args, "data_dir", None):
        cfg = replace(cfg, data_dir=args.data_dir)
    if getattr(args, "epochs", None):
        cfg = replace(cfg, train=replace(cfg.train, epochs=args.epochs))
    if getattr(args, "count", None):
        cfg = replace(cfg, gen=replace(cfg.gen, count=args.count))
    return cfg


def _set_threads(n):
    if n < 1:
        raise ValueError("--threads must be >= 1")
    torch.set_num_threads(n)
    try:
        torch.set_num_interop_threads(n)
    except RuntimeError:
        pass  # already fixed for this process


def run(args) -> int:
    _set_threads(args.threads)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = _config(args)
    cmd = args.command
    if cmd == "gen-data":
        train, val, test = write_dataset(out, cfg.gen, cfg.split_ratios)
        (out / "run_config.txt").write_text(dump_config(cfg))
        print(f"wrote {cfg.gen.count} samples to {out} (train {len(train)}, val {len(val)}, test {len(test)})")
    elif cmd == "train":
        log = lambda r: print(" ".join(f"{k}={v}" for k, v in r.items()), flush=True)
        train_from_config(cfg, out, log)
        (out / "run_config.txt").write_text(dump_config(cfg))
        print(f"wrote {out / 'checkpoint.pdnt'} and {out / 'train_log.csv'}")
    elif cmd == "eval":
        if cfg.data_dir is None:
            raise ValueError("data_dir is not set (config key 'data_dir' or --data-dir)")
        model = load_checkpoint(args.checkpoint)
        samples = load_split(cfg.data_dir, args.split)
        report, dets = evaluate(model, samples, model.spec, cfg.eval, tag=Path(args.checkpoint).stem)
        write_report(out / "eval_report.csv", [report], cfg.eval)
        write_detections_jsonl(out / "detections.jsonl", [s.image_id for s in samples], dets)
        print(f"P {report.precision:.2f}%  R {report.recall:.2f}%  mAP@0.5 {report.map50:.2f}%")
        if report.undefined:
            print(f"AP undefined (no ground truth): {', '.join(report.undefined)}")
    elif cmd == "ablate":
        rows = run_ablation(cfg, out, args.groups,
                            progress=lambda r: print(f"group {r.group}: {'ok' if r.report else r.error}", flush=True))
        print((out / "ablation.txt").read_text(), end="")
        if not all(r.report for r in rows):
            return 1
    elif cmd == "heatmap":
        model = load_checkpoint(args.checkpoint)
        path = out / f"heatmap_{Path(args.image).stem}_{args.layer}.png"
        write_heatmap(model, load_png(args.image), args.layer, path)
        print(f"wrote {path}")
    elif cmd == "bench":
        run_bench(args.sizes, args.channels, args.topk, args.repeats, cfg.train.seed, out / "bench.csv")
        print(f"wrote {out / 'bench.csv'}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except (ConfigError, ValueError, FileNotFoundError, KeyError) as e:
        print(f"powerdet {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
