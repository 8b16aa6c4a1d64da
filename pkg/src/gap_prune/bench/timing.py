"""Prefill FLOP estimates and time-to-first-token measurement."""

from __future__ import annotations

import gc
import statistics
import time

import numpy as np

from ..core import Rng, argmax, count_flops
from ..model import ModelConfig, ModelWeights, prefill, prefill_with_pruning
from .data import RecExample


def estimate_flops(cfg: ModelConfig, seq_len: int) -> int:
    """Matmul FLOPs of one decoder prefill over ``seq_len`` tokens.

    Per layer: ``8 n d^2`` for the Q/K/V/O projections, ``4 n^2 d`` for the
    score and value products, ``16 n d^2`` for the 4x MLP. The final vocab
    projection is applied to one row only and is left out.
    """
    if seq_len < 1:
        raise ValueError("seq_len must be >= 1")
    n, d = seq_len, cfg.d_model
    per_layer = 8 * n * d * d + 4 * n * n * d + 16 * n * d * d
    return cfg.decoder_layers * per_layer


def counted_prefill_flops(w: ModelWeights, seq_len: int) -> int:
    """Run a prefill of ``seq_len`` total tokens and count its matmul FLOPs."""
    cfg = w.cfg
    n_prefix = len(cfg.prefix_tokens())
    n_text = len(cfg.prompt_tokens(1))
    n_vis = seq_len - n_prefix - n_text
    if n_vis < 0:
        raise ValueError("seq_len shorter than the fixed prompt tokens")
    vis = np.zeros((n_vis, cfg.d_model))
    vis_ids = np.arange(n_prefix, n_prefix + n_vis)
    text_ids = np.arange(n_prefix + n_vis, n_prefix + n_vis + n_text)
    with count_flops() as box:
        prefill(vis, vis_ids, cfg.prompt_tokens(1), text_ids, w)
    return box[0]


def _time_once(w: ModelWeights, ex: RecExample, strategy: str, ratio: float, alignment: str, rng: Rng) -> float:
    t0 = time.perf_counter()
    state = prefill_with_pruning(ex.image, ex.query_color, strategy, ratio, alignment, rng, w)
    argmax(state.logits)
    return time.perf_counter() - t0


def measure_ttft_many(w: ModelWeights, sample: list[RecExample], configs: list[tuple[str, float, str]],
                      runs: int = 50, warmup: int = 3) -> dict[tuple[str, float, str], dict]:
    """TTFT for several configurations, interleaved run by run so drift hits all equally.

    Each run times every example of ``sample`` once (batch size 1, encode
    through first token). Returns per-config mean / stdev of the per-run mean
    in milliseconds, plus the coefficient of variation.
    """
    if not sample:
        raise ValueError("empty timing sample")
    rng = Rng(0)
    for _ in range(warmup):
        for cfg in configs:
            for ex in sample:
                _time_once(w, ex, *cfg, rng)
    per_run = {cfg: [] for cfg in configs}
    gc_was_enabled = gc.isenabled()
    gc.disable()
    try:
        for _ in range(runs):
            for cfg in configs:
                total = sum(_time_once(w, ex, *cfg, rng) for ex in sample)
                per_run[cfg].append(1e3 * total / len(sample))
    finally:
        if gc_was_enabled:
            gc.enable()
    out = {}
    for cfg, vals in per_run.items():
        mean = statistics.fmean(vals)
        sd = statistics.stdev(vals) if len(vals) > 1 else 0.0
        out[cfg] = {"mean_ms": mean, "stdev_ms": sd, "cv": sd / mean if mean else float("nan"), "runs": len(vals)}
    return out


def measure_ttft(w: ModelWeights, sample: list[RecExample], strategy: str, ratio: float, alignment: str,
                 runs: int = 50, warmup: int = 3) -> float:
    """Mean time-to-first-token in milliseconds for one configuration."""
    return measure_ttft_many(w, sample, [(strategy, ratio, alignment)], runs, warmup)[
        (strategy, ratio, alignment)]["mean_ms"]
