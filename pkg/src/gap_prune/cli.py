"""Command line: ``gap-prune {gen-data,train,eval,sweep,probe,bench-ttft}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .bench.config import RunConfig
from .bench.data import generate_dataset, save_dataset
from .bench.runner import make_datasets, obtain_weights, run_sweep
from .core import Rng
from .model import load_weights, save_weights
from .pruning import ALIGNMENTS, STRATEGIES
from .rope import ConfigError

log = logging.getLogger("gap_prune")


def _load_config(args) -> RunConfig:
    run = RunConfig.load(args.config) if args.config else RunConfig()
    if getattr(args, "out", None):
        run.paths.out_dir = args.out
    if getattr(args, "weights", None):
        run.paths.weights = args.weights
    return run


def _weights_for(run: RunConfig, required: bool):
    path = run.paths.weights or str(Path(run.paths.out_dir) / "weights.bin")
    if Path(path).is_file():
        return load_weights(path)
    if required:
        raise ConfigError(f"no weights at {path}; run `gap-prune train` first or pass --weights")
    return None


def cmd_gen_data(args) -> int:
    run = _load_config(args)
    out = Path(run.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.count:
        data = generate_dataset(args.count, run.model, Rng(run.seeds.data), run.data.max_objects)
        save_dataset(data, out / "dataset.jsonl")
    else:
        train, val = make_datasets(run)
        save_dataset(train, out / "train.jsonl")
        save_dataset(val, out / "val.jsonl")
    print(f"wrote datasets to {out}")
    return 0


def cmd_train(args) -> int:
    run = _load_config(args)
    run.paths.weights = None
    w, stats, secs = obtain_weights(run)
    out = Path(run.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_weights(w, out / "weights.bin")
    stats["train_seconds"] = secs
    (out / "train.json").write_text(json.dumps(stats, indent=2, sort_keys=True))
    print(f"train_accuracy={stats['train_accuracy']:.4f} val_accuracy={stats['val_accuracy']:.4f} "
          f"weights={out / 'weights.bin'}")
    return 0


def cmd_eval(args) -> int:
    from .bench.evaluate import evaluate

    run = _load_config(args)
    w = _weights_for(run, required=True)
    _, val = make_datasets(run)
    acc = evaluate(w, val, args.strategy, args.ratio, args.alignment, Rng(run.seeds.eval))
    print(f"strategy={args.strategy} ratio={args.ratio} alignment={args.alignment} accuracy={acc:.4f}")
    return 0


def cmd_sweep(args) -> int:
    run = _load_config(args)
    if not run.paths.weights:
        existing = Path(run.paths.out_dir) / "weights.bin"
        run.paths.weights = str(existing) if existing.is_file() else None
    report = run_sweep(run, run.paths.out_dir)
    print(f"unpruned_accuracy={report.unpruned_accuracy:.4f} rows={len(report.rows)} "
          f"report={Path(run.paths.out_dir) / 'report.json'}")
    return 0


def cmd_probe(args) -> int:
    from .probe import ProbeOptions, probe_all_layers

    run = _load_config(args)
    w = _weights_for(run, required=True)
    train, _ = make_datasets(run)
    images = [ex.image for ex in train[:args.images]]
    report = probe_all_layers(images, w, opts=ProbeOptions(epochs=args.epochs, lr=args.lr, seed=run.seeds.eval))
    out = Path(run.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "probe.json").write_text(report.to_json())
    for lp in report.layers:
        print(f"layer={lp.layer} accuracy={lp.accuracy:.4f} final_loss={lp.final_loss:.4f}")
    return 0


def cmd_bench_ttft(args) -> int:
    from .bench.timing import measure_ttft_many

    run = _load_config(args)
    w = _weights_for(run, required=True)
    _, val = make_datasets(run)
    configs = [("none", 1.0, "gap"), (args.strategy, args.ratio, "shifted"), (args.strategy, args.ratio, "gap")]
    res = measure_ttft_many(w, val[:run.timing.sample], configs, args.runs or run.timing.runs, run.timing.warmup)
    rows = {f"{s}/{r}/{a}": v for (s, r, a), v in res.items()}
    out = Path(run.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ttft.json").write_text(json.dumps(rows, indent=2, sort_keys=True))
    for key, v in rows.items():
        print(f"{key} ttft_ms={v['mean_ms']:.3f} cv={v['cv']:.3f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gap-prune", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="run config JSON")
        p.add_argument("--out", help="output directory (overrides paths.out_dir)")
        p.set_defaults(fn=fn)
        return p

    p = add("gen-data", cmd_gen_data, "write train/val datasets as JSON lines")
    p.add_argument("--count", type=int, help="write a single dataset of this size instead")
    add("train", cmd_train, "train the toy model on unpruned input")
    for name, fn, help_ in (("eval", cmd_eval, "accuracy for one pruning configuration"),
                            ("bench-ttft", cmd_bench_ttft, "time-to-first-token, pruned vs unpruned")):
        p = add(name, fn, help_)
        p.add_argument("--weights")
        p.add_argument("--strategy", choices=STRATEGIES + ("none",), default="cls_visual")
        p.add_argument("--ratio", type=float, default=0.5 if name == "eval" else 0.25)
        if name == "eval":
            p.add_argument("--alignment", choices=ALIGNMENTS, default="gap")
        else:
            p.add_argument("--runs", type=int)
    p = add("sweep", cmd_sweep, "cross-method x cross-ratio sweep, writes report.json and report.csv")
    p.add_argument("--weights")
    p = add("probe", cmd_probe, "linear position probes on every encoder layer")
    p.add_argument("--weights")
    p.add_argument("--images", type=int, default=200)
    p.add_argument("--epochs", type=int, default=500)
    p.add_argument("--lr", type=float, default=0.1)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, ValueError, OSError) as e:
        print(f"gap-prune {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
