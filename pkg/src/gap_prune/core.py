"""Dense float64 kernel: matrix helpers, a counter-based SplitMix64 generator
and an opt-in matmul FLOP counter.

A ``Matrix`` is a 2-D C-contiguous ``numpy.float64`` array. Every matmul in the
engine goes through :func:`matmul` so FLOPs can be counted from a traced run.
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass

import numpy as np

Matrix = np.ndarray

LAYER_NORM_EPS = 1e-5


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


def as_matrix(data) -> Matrix:
    m = np.ascontiguousarray(data, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


# -- FLOP accounting ---------------------------------------------------------

_flop_counter: contextvars.ContextVar[list[int] | None] = contextvars.ContextVar(
    "_flop_counter", default=None
)


@contextlib.contextmanager
def count_flops():
    """Count ``2*m*k*n`` for every :func:`matmul` issued inside the block.

    Yields a one-element list whose item is updated in place.
    """
    box = [0]
    token = _flop_counter.set(box)
    try:
        yield box
    finally:
        _flop_counter.reset(token)


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    box = _flop_counter.get()
    if box is not None:
        box[0] += 2 * a.shape[0] * a.shape[1] * b.shape[1]
    return a @ b


def softmax_rows(m: Matrix) -> Matrix:
    shifted = m - m.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def layer_norm(x: Matrix, gain: np.ndarray, bias: np.ndarray, eps: float = LAYER_NORM_EPS) -> Matrix:
    if gain.shape[-1] != x.shape[-1] or bias.shape[-1] != x.shape[-1]:
        raise ShapeError("layer_norm gain/bias length must equal x.cols")
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / np.sqrt(var + eps) * gain + bias


def gelu(x: Matrix) -> Matrix:
    # tanh approximation; the torch trainer uses approximate="tanh" to match
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x**3)))


def argmax(v) -> int:
    v = np.asarray(v)
    if v.size == 0:
        raise ValueError("argmax of an empty vector")
    # numpy returns the first occurrence, i.e. the lowest index on ties
    return int(np.argmax(v))


# -- RNG ---------------------------------------------------------------------

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MASK64 = (1 << 64) - 1


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@dataclass
class Rng:
    """SplitMix64 generator (Steele, Lea & Flood 2014).

    Output ``i`` (1-based) of a stream is ``mix64(seed + i * 0x9E3779B97F4A7C15)``
    in wrapping 64-bit arithmetic, so blocks can be drawn vectorised and the
    stream is identical on every platform. Doubles use the top 53 bits.
    """

    seed: int
    counter: int = 0

    def __post_init__(self):
        self.seed &= _MASK64

    def next_u64(self, n: int) -> np.ndarray:
        steps = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            state = np.uint64(self.seed) + steps * _GAMMA
            return _mix64(state)

    def uniform(self, n: int) -> np.ndarray:
        """``n`` draws from U[0, 1)."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))

    def normal(self, n: int, std: float = 1.0) -> np.ndarray:
        # Box-Muller on paired uniforms; 1 - u keeps the log argument in (0, 1]
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        r = np.sqrt(-2.0 * np.log(1.0 - u[:m]))
        theta = 2.0 * np.pi * u[m:]
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return z * std

    def integers(self, high: int, n: int) -> np.ndarray:
        """``n`` integers in ``[0, high)`` (multiply-shift; bias < high / 2**53)."""
        return np.floor(self.uniform(n) * high).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def spawn(self, stream: int) -> "Rng":
        """Independent child stream, keyed by ``stream``."""
        key = int(_mix64(np.array([(self.seed ^ (stream * 0xD1B54A32D192ED03)) & _MASK64], dtype=np.uint64))[0])
        return Rng(key)
