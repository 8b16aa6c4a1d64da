"""Visual-token scoring, top-k selection and position-ID alignment modes."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import Matrix, Rng, matmul, softmax_rows
from .rope import ConfigError, sequential_ids

STRATEGIES = ("cls_visual", "text_visual", "random", "spatial")
ALIGNMENTS = ("gap", "shifted", "permuted")


@dataclass(frozen=True)
class PruneSelection:
    strategy: str
    ratio: float
    indices: np.ndarray
    alignment: str = "gap"


def _check_ratio(ratio: float) -> None:
    if not (0.0 < ratio <= 1.0):
        raise ConfigError(f"ratio must lie in (0, 1], got {ratio}")


def retained_count(n: int, ratio: float) -> int:
    """Number of visual tokens kept, ``max(1, floor(n * ratio))``."""
    _check_ratio(ratio)
    if n < 1:
        raise ValueError("need at least one visual token")
    # the epsilon keeps e.g. 10 * 0.7 = 7.000000000000001 and 3 * (1/3) from
    # flooring one short
    return max(1, math.floor(n * ratio + 1e-9))


def topk_select(scores, k: int) -> np.ndarray:
    """Indices of the ``k`` highest scores, ties to the lower index, returned ascending."""
    s = np.asarray(scores, dtype=np.float64)
    if not 1 <= k <= s.shape[0]:
        raise ValueError(f"k={k} outside [1, {s.shape[0]}]")
    # stable sort on -s keeps lower indices first among equal scores
    order = np.argsort(-s, kind="stable")[:k]
    return np.sort(order)


def gather(v: Matrix, indices) -> Matrix:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= v.shape[0]):
        raise IndexError(f"gather index out of range for {v.shape[0]} rows")
    return v[idx]


def score_cls_visual(cls_query, keys: Matrix, d_k: int) -> np.ndarray:
    q = np.asarray(cls_query, dtype=np.float64)[None, :]
    return softmax_rows(matmul(q, keys.T) / math.sqrt(d_k))[0]


def score_text_visual(text_queries: Matrix, visual_keys: Matrix, d_k: int) -> np.ndarray:
    if text_queries.shape[0] == 0:
        raise ValueError("text-visual scoring needs at least one text query")
    attn = softmax_rows(matmul(text_queries, visual_keys.T) / math.sqrt(d_k))
    # summed over text queries without renormalising
    return attn.sum(axis=0)


def score_random(n: int, rng: Rng) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    return rng.uniform(n)


def select_spatial(n: int, ratio: float) -> np.ndarray:
    """Every ``1/ratio``-th token: ``floor(m / ratio)`` for ``m < k``."""
    k = retained_count(n, ratio)
    m = np.arange(k, dtype=np.float64)
    idx = np.floor(m / ratio + 1e-9).astype(np.int64)
    return np.minimum(idx, n - 1)


def align_gap(indices, visual_base: int = 0) -> np.ndarray:
    """Retained tokens keep the position IDs they had before pruning."""
    return visual_base + np.asarray(indices, dtype=np.int64)


def align_shifted(indices, visual_base: int = 0) -> np.ndarray:
    """Retained tokens are renumbered consecutively from ``visual_base``."""
    return sequential_ids(visual_base, len(indices))


def permute_by_score(v: Matrix, scores) -> tuple[Matrix, np.ndarray, np.ndarray]:
    """Reorder all tokens by descending score and number them 0..N-1 in the new order.

    Returns ``(reordered, ids, order)`` where ``order[j]`` is the original
    index of the token now at slot ``j``.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.shape[0] != v.shape[0]:
        raise ValueError("one score per token required")
    order = np.argsort(-s, kind="stable")
    return v[order], sequential_ids(0, v.shape[0]), order


def select_indices(strategy: str, ratio: float, n: int, scores=None) -> np.ndarray:
    """Indices kept by ``strategy``; score strategies need ``scores``."""
    if strategy == "none":
        return np.arange(n, dtype=np.int64)
    if strategy == "spatial":
        return select_spatial(n, ratio)
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}")
    return topk_select(scores, retained_count(n, ratio))
