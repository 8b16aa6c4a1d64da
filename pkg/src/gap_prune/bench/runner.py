"""End-to-end pipeline shared by the CLI and the acceptance tests."""

from __future__ import annotations

import logging
import time
from pathlib import Path

from ..core import Rng
from ..model import ModelWeights, load_weights, save_weights
from .config import RunConfig
from .data import RecExample, generate_dataset
from .evaluate import EvalReport, cross_sweep
from .timing import measure_ttft_many
from .train import TrainResult, train_model

log = logging.getLogger(__name__)


def make_datasets(run: RunConfig) -> tuple[list[RecExample], list[RecExample]]:
    rng = Rng(run.seeds.data)
    train = generate_dataset(run.data.train_size, run.model, rng.spawn(0), run.data.max_objects)
    val = generate_dataset(run.data.val_size, run.model, rng.spawn(1), run.data.max_objects)
    return train, val


def train_from_config(run: RunConfig, train=None, val=None) -> TrainResult:
    if train is None:
        train, val = make_datasets(run)
    return train_model(train, run.model, Rng(run.seeds.train), run.train, val)


def obtain_weights(run: RunConfig, train=None, val=None) -> tuple[ModelWeights, dict, float]:
    """Load ``paths.weights`` when present, else train. Returns (weights, stats, seconds)."""
    if run.paths.weights and Path(run.paths.weights).is_file():
        w = load_weights(run.paths.weights)
        if w.cfg != run.model:
            log.warning("checkpoint model config differs from run config; using the checkpoint's")
        return w, {"source": "checkpoint"}, 0.0
    t0 = time.perf_counter()
    res = train_from_config(run, train, val)
    stats = {"source": "trained", "train_accuracy": res.train_accuracy, "val_accuracy": res.val_accuracy,
             "initial_loss": res.losses[0], "final_loss": res.losses[-1], "steps": len(res.losses)}
    return res.weights, stats, time.perf_counter() - t0


def run_sweep(run: RunConfig, out_dir: str | Path | None = None) -> EvalReport:
    """Train (or load), sweep, optionally time, and write report.json / report.csv."""
    run.validate()
    train, val = make_datasets(run)
    w, stats, train_seconds = obtain_weights(run, train, val)
    sw = run.sweep
    meta = {"config": run.to_dict(), "training": stats}
    meta["config"]["paths"] = {}  # output locations do not belong in the deterministic section
    report = cross_sweep(w, val, sw.strategies, sw.ratios, sw.alignments, seed=run.seeds.eval, meta=meta,
                         misalignment_ratio=sw.misalignment_ratio)
    report.timing["train_seconds"] = train_seconds
    if run.timing.enabled:
        configs = [(s, r, a) for s in sw.strategies for r in sw.ratios for a in sw.alignments]
        configs.append(("none", 1.0, "gap"))
        timed = measure_ttft_many(w, val[:run.timing.sample], configs, run.timing.runs, run.timing.warmup)
        report.timing["ttft_ms"] = {f"{s}/{r}/{a}": v["mean_ms"] for (s, r, a), v in timed.items()}
        report.timing["ttft_cv"] = {f"{s}/{r}/{a}": v["cv"] for (s, r, a), v in timed.items()}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(report.to_json())
        (out / "report.csv").write_text(report.to_csv())
        if stats.get("source") == "trained":
            save_weights(w, out / "weights.bin")
    return report
