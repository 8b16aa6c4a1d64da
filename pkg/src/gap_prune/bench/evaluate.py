"""Accuracy under pruning, misalignment experiments and the cross-method /
cross-ratio sweep."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..core import Rng
from ..model import (EncoderOutput, ModelWeights, encode_image, generate_greedy, prefill_shifted_full,
                     prefill_with_pruning)
from ..pruning import retained_count
from .data import RecExample

log = logging.getLogger(__name__)

CSV_COLUMNS = ("strategy", "ratio", "alignment", "tokens_kept", "token_percent", "accuracy",
               "normalized_accuracy", "delta", "flops_estimate", "seed", "ttft_ms")


def worker_count() -> int:
    """Evaluation workers: CPU count, capped by ``GAP_PRUNE_THREADS``."""
    n = os.cpu_count() or 1
    cap = os.environ.get("GAP_PRUNE_THREADS")
    if cap:
        n = min(n, max(1, int(cap)))
    return n


def encode_all(w: ModelWeights, dataset: list[RecExample]) -> list[EncoderOutput]:
    return [encode_image(ex.image, w) for ex in dataset]


def predict(w: ModelWeights, ex: RecExample, strategy: str, ratio: float, alignment: str, rng: Rng | None,
            enc: EncoderOutput | None = None, max_new: int = 2) -> list[int]:
    state = prefill_with_pruning(ex.image, ex.query_color, strategy, ratio, alignment, rng, w, enc=enc)
    return generate_greedy(state, max_new, w)


def _count_correct(w, dataset, encodings, lo, hi, run_one) -> int:
    correct = 0
    for i in range(lo, hi):
        enc = encodings[i] if encodings is not None else None
        tokens = run_one(i, dataset[i], enc)
        correct += bool(tokens) and tokens[0] == w.cfg.cell_token(dataset[i].answer_cell)
    return correct


def _accuracy(w, dataset, encodings, run_one, workers: int | None) -> float:
    n = len(dataset)
    if n == 0:
        return float("nan")
    workers = min(workers or worker_count(), n)
    if workers <= 1:
        return _count_correct(w, dataset, encodings, 0, n, run_one) / n
    bounds = np.linspace(0, n, workers + 1).astype(int)
    with ThreadPoolExecutor(workers) as pool:
        parts = pool.map(lambda b: _count_correct(w, dataset, encodings, b[0], b[1], run_one),
                         zip(bounds[:-1], bounds[1:]))
        # order-independent aggregation
        return sum(parts) / n


def evaluate(w: ModelWeights, dataset: list[RecExample], strategy: str, ratio: float, alignment: str,
             rng: Rng | None = None, encodings: list[EncoderOutput] | None = None,
             workers: int | None = None) -> float:
    """Fraction of examples whose first greedy token is the answer cell.

    Random scores for example ``i`` come from ``rng.spawn(i)``, so results do
    not depend on evaluation order or worker count.
    """
    rng = rng or Rng(0)

    def run_one(i, ex, enc):
        return predict(w, ex, strategy, ratio, alignment, rng.spawn(i), enc)

    return _accuracy(w, dataset, encodings, run_one, workers)


def evaluate_shifted_full(w: ModelWeights, dataset: list[RecExample], shift: int,
                        encodings: list[EncoderOutput] | None = None, workers: int | None = None) -> float:
    """Accuracy with every visual token kept but displaced ``shift`` ids from the prefix."""

    def run_one(i, ex, enc):
        return generate_greedy(prefill_shifted_full(ex.image, ex.query_color, shift, w, enc), 2, w)

    return _accuracy(w, dataset, encodings, run_one, workers)


def misalignment_experiments(w: ModelWeights, dataset: list[RecExample], ratio: float = 0.5,
                             encodings=None, workers=None) -> dict[str, float]:
    """The two no-removal experiments: score-permuted order and a shifted visual block.

    The shift equals the number of tokens ``ratio`` pruning would drop.
    """
    n = w.cfg.num_visual
    shift = n - retained_count(n, ratio)
    return {
        "aligned": evaluate(w, dataset, "none", 1.0, "gap", encodings=encodings, workers=workers),
        "permuted_full": evaluate(w, dataset, "cls_visual", 1.0, "permuted", encodings=encodings, workers=workers),
        "shifted_full": evaluate_shifted_full(w, dataset, shift, encodings, workers),
        "shift": shift,
    }


@dataclass
class EvalRow:
    strategy: str
    ratio: float
    alignment: str
    tokens_kept: int
    token_percent: float
    accuracy: float
    normalized_accuracy: float
    delta: float | None
    flops_estimate: int
    seed: int


@dataclass
class EvalReport:
    meta: dict
    unpruned_accuracy: float
    rows: list[EvalRow]
    misalignment: dict
    timing: dict = field(default_factory=dict)

    def deterministic_dict(self) -> dict:
        return {"meta": self.meta, "unpruned_accuracy": self.unpruned_accuracy,
                "rows": [r.__dict__ for r in self.rows], "misalignment": self.misalignment}

    def to_dict(self) -> dict:
        return {**self.deterministic_dict(), "timing": self.timing}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        ttft = self.timing.get("ttft_ms", {})
        for r in self.rows:
            key = f"{r.strategy}/{r.ratio}/{r.alignment}"
            writer.writerow([r.strategy, r.ratio, r.alignment, r.tokens_kept, f"{r.token_percent:.4f}",
                             f"{r.accuracy:.6f}", f"{r.normalized_accuracy:.6f}",
                             "" if r.delta is None else f"{r.delta:.6f}", r.flops_estimate, r.seed,
                             "" if key not in ttft else f"{ttft[key]:.4f}"])
        return buf.getvalue()

    def row(self, strategy: str, ratio: float, alignment: str) -> EvalRow:
        for r in self.rows:
            if r.strategy == strategy and r.alignment == alignment and abs(r.ratio - ratio) < 1e-12:
                return r
        raise KeyError((strategy, ratio, alignment))


def prompt_length(w: ModelWeights, kept: int) -> int:
    cfg = w.cfg
    return len(cfg.prefix_tokens()) + kept + len(cfg.prompt_tokens(1))


def cross_sweep(w: ModelWeights, dataset: list[RecExample], strategies, ratios, alignments, seed: int = 0,
                workers: int | None = None, meta: dict | None = None, misalignment_ratio: float = 0.5) -> EvalReport:
    """Every (strategy, ratio, alignment) cell, plus the unpruned baseline.

    Spatial selection has no score order, so spatial x permuted is skipped.

    ``delta`` is accuracy(gap) - accuracy(shifted) for the same strategy and
    ratio, repeated on both rows; ``normalized_accuracy`` divides by the
    unpruned accuracy.
    """
    from .timing import estimate_flops

    encodings = encode_all(w, dataset)
    base = evaluate(w, dataset, "none", 1.0, "gap", encodings=encodings, workers=workers)
    n = w.cfg.num_visual
    acc = {}
    for s in strategies:
        for r in ratios:
            for a in alignments:
                if s == "spatial" and a == "permuted":
                    log.info("skipping spatial/permuted: spatial selection has no score order")
                    continue
                acc[s, r, a] = evaluate(w, dataset, s, r, a, Rng(seed), encodings, workers)
                log.info("%s ratio=%.2f %s acc=%.4f", s, r, a, acc[s, r, a])
    rows = []
    for (s, r, a), v in acc.items():
        k = retained_count(n, r)
        delta = None
        if (s, r, "gap") in acc and (s, r, "shifted") in acc:
            delta = acc[s, r, "gap"] - acc[s, r, "shifted"]
        rows.append(EvalRow(s, r, a, k, 100.0 * k / n, v, v / base if base > 0 else float("nan"), delta,
                            estimate_flops(w.cfg, prompt_length(w, k)), seed))
    mis = misalignment_experiments(w, dataset, misalignment_ratio, encodings, workers)
    return EvalReport(meta or {}, base, rows, mis)
