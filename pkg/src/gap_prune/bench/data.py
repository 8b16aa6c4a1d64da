"""Synthetic referring-expression dataset: find the cell holding a colour."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..core import Rng
from ..model import ModelConfig

BACKGROUND = 0


@dataclass(frozen=True)
class RecExample:
    image: np.ndarray  # G x G colour ids, BACKGROUND where empty
    query_color: int
    answer_cell: int

    def to_json(self) -> str:
        return json.dumps({"image": self.image.tolist(), "query_color": self.query_color,
                           "answer_cell": self.answer_cell})

    @classmethod
    def from_json(cls, line: str) -> "RecExample":
        d = json.loads(line)
        return cls(np.asarray(d["image"], dtype=np.int64), int(d["query_color"]), int(d["answer_cell"]))

    def object_cells(self) -> np.ndarray:
        return np.flatnonzero(self.image.reshape(-1) != BACKGROUND)


def generate_dataset(count: int, cfg: ModelConfig, rng: Rng, max_objects: int = 4) -> list[RecExample]:
    """Images with 1..max_objects distinctly coloured objects on a background.

    The answer cell is drawn uniformly first, so every cell is equally likely
    to be the target; the query colour appears in exactly that cell.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if cfg.num_colors < 2:
        raise ValueError("need a background colour plus at least one object colour")
    n = cfg.num_visual
    max_objects = min(max_objects, cfg.num_colors - 1, n)
    out = []
    for _ in range(count):
        answer = int(rng.integers(n, 1)[0])
        n_obj = 1 + int(rng.integers(max_objects, 1)[0])
        others = [c for c in rng.permutation(n).tolist() if c != answer][: n_obj - 1]
        colors = (1 + rng.permutation(cfg.num_colors - 1))[:n_obj]
        grid = np.full(n, BACKGROUND, dtype=np.int64)
        for cell, color in zip([answer, *others], colors.tolist()):
            grid[cell] = color
        out.append(RecExample(grid.reshape(cfg.grid_size, cfg.grid_size), int(colors[0]), answer))
    return out


def save_dataset(examples: list[RecExample], path) -> None:
    Path(path).write_text("".join(ex.to_json() + "\n" for ex in examples))


def load_dataset(path) -> list[RecExample]:
    return [RecExample.from_json(line) for line in Path(path).read_text().splitlines() if line.strip()]
