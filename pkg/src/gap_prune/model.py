"""Toy multimodal decoder: a small ViT-style encoder over a colour grid feeding a
visual-token prefix into a rotary, causally-masked decoder with a KV cache.

Token layout of a prompt (before pruning)::

    [BOS] [v_0 .. v_{N-1}] [FIND] [colour]      ids: 0, 1 .. N, N+1, N+2

The one-token system prefix sits ahead of the image like a chat template's
system prompt; it is never pruned. Vocabulary: ``END``, ``FIND``, ``BOS``,
one token per colour, one token per grid cell.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import pruning
from .core import Matrix, Rng, argmax, gelu, layer_norm, matmul, softmax_rows
from .rope import ConfigError, RopeConfig, apply_rope, sequential_ids

END = 0
FIND = 1
BOS = 2
NUM_SPECIALS = 3


@dataclass(frozen=True)
class ModelConfig:
    grid_size: int = 4
    num_colors: int = 8
    d_model: int = 64
    num_heads: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 2
    vocab_size: int = 0  # 0 means the minimum NUM_SPECIALS + C + N
    max_seq_len: int = 128
    theta_base: float = 10000.0
    use_bos: bool = True

    def __post_init__(self):
        if self.d_model % self.num_heads:
            raise ConfigError("d_model must be divisible by num_heads")
        if (self.d_model // self.num_heads) % 2:
            raise ConfigError("head_dim must be even")
        if self.grid_size < 1 or self.num_colors < 2:
            raise ConfigError("need grid_size >= 1 and num_colors >= 2")
        if self.vocab_size == 0:
            object.__setattr__(self, "vocab_size", self.min_vocab)
        if self.vocab_size < self.min_vocab:
            raise ConfigError(f"vocab_size {self.vocab_size} < required {self.min_vocab}")

    @property
    def num_visual(self) -> int:
        return self.grid_size * self.grid_size

    @property
    def visual_base(self) -> int:
        """Position id of the first visual token (after the system prefix)."""
        return len(self.prefix_tokens())

    def prefix_tokens(self) -> list[int]:
        return [BOS] if self.use_bos else []

    @property
    def head_dim(self) -> int:
        return self.d_model // self.num_heads

    @property
    def min_vocab(self) -> int:
        return NUM_SPECIALS + self.num_colors + self.num_visual

    @property
    def rope(self) -> RopeConfig:
        return RopeConfig(self.head_dim, self.num_heads, self.theta_base)

    def color_token(self, color: int) -> int:
        return NUM_SPECIALS + int(color)

    def cell_token(self, cell: int) -> int:
        return NUM_SPECIALS + self.num_colors + int(cell)

    def token_cell(self, token: int) -> int | None:
        cell = int(token) - NUM_SPECIALS - self.num_colors
        return cell if 0 <= cell < self.num_visual else None

    def prompt_tokens(self, query_color: int) -> list[int]:
        return [FIND, self.color_token(query_color)]

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# -- weights -----------------------------------------------------------------

def _block_shapes(prefix: str, d: int) -> dict[str, tuple[int, ...]]:
    return {
        f"{prefix}.ln1.g": (d,), f"{prefix}.ln1.b": (d,),
        f"{prefix}.wq": (d, d), f"{prefix}.wk": (d, d),
        f"{prefix}.wv": (d, d), f"{prefix}.wo": (d, d),
        f"{prefix}.ln2.g": (d,), f"{prefix}.ln2.b": (d,),
        f"{prefix}.w1": (d, 4 * d), f"{prefix}.b1": (4 * d,),
        f"{prefix}.w2": (4 * d, d), f"{prefix}.b2": (d,),
    }


def weight_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d = cfg.d_model
    shapes: dict[str, tuple[int, ...]] = {
        "enc.color_emb": (cfg.num_colors, d),
        "enc.pos_emb": (cfg.num_visual, d),
        "enc.cls": (d,),
    }
    for i in range(cfg.encoder_layers):
        shapes.update(_block_shapes(f"enc.{i}", d))
    shapes.update({"enc.ln_f.g": (d,), "enc.ln_f.b": (d,), "proj.w": (d, d), "proj.b": (d,),
                   "dec.tok_emb": (cfg.vocab_size, d)})
    for i in range(cfg.decoder_layers):
        shapes.update(_block_shapes(f"dec.{i}", d))
    shapes.update({"dec.ln_f.g": (d,), "dec.ln_f.b": (d,), "dec.head": (d, cfg.vocab_size)})
    return shapes


@dataclass
class ModelWeights:
    cfg: ModelConfig
    tensors: dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    @classmethod
    def init(cls, cfg: ModelConfig, rng: Rng, std: float = 0.02) -> "ModelWeights":
        """Gaussian(0, std) for matrices and embeddings, ones/zeros for norms, zero biases."""
        tensors = {}
        for name, shape in weight_shapes(cfg).items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "g":
                tensors[name] = np.ones(shape)
            elif leaf in ("b", "b1", "b2"):
                tensors[name] = np.zeros(shape)
            else:
                tensors[name] = rng.normal(int(np.prod(shape)), std).reshape(shape)
        return cls(cfg, tensors)

    def validate(self) -> None:
        expected = weight_shapes(self.cfg)
        if set(expected) != set(self.tensors):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise ValueError(f"weight names mismatch; missing={missing} extra={extra}")
        for name, shape in expected.items():
            t = self.tensors[name]
            if t.shape != shape:
                raise ValueError(f"{name}: shape {t.shape}, expected {shape}")
            if not np.all(np.isfinite(t)):
                raise ValueError(f"{name} has non-finite values")


# Checkpoint layout (all little-endian):
#   b"GAPW"  u32 version  u32 config_len  config JSON (utf-8)
#   u32 tensor_count, then per tensor:
#   u16 name_len  name (utf-8)  u8 ndim  u32 dims[ndim]  f64 data (row-major)
CKPT_MAGIC = b"GAPW"
CKPT_VERSION = 1


def save_weights(w: ModelWeights, path) -> None:
    buf = io.BytesIO()
    cfg_bytes = json.dumps(asdict(w.cfg), sort_keys=True).encode()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(cfg_bytes)))
    buf.write(cfg_bytes)
    buf.write(struct.pack("<I", len(w.tensors)))
    for name in sorted(w.tensors):
        t = np.ascontiguousarray(w.tensors[name], dtype="<f8")
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", t.ndim))
        buf.write(struct.pack(f"<{t.ndim}I", *t.shape))
        buf.write(t.tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_weights(path) -> ModelWeights:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a weight checkpoint")
    version, cfg_len = struct.unpack_from("<II", data, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    cfg = ModelConfig.from_dict(json.loads(data[off:off + cfg_len]))
    off += cfg_len
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
        off += 8 * size
    w = ModelWeights(cfg, tensors)
    w.validate()
    return w


# -- shared pieces -----------------------------------------------------------

def _mlp(w: ModelWeights, p: str, x: Matrix) -> Matrix:
    h = layer_norm(x, w[f"{p}.ln2.g"], w[f"{p}.ln2.b"])
    return matmul(gelu(matmul(h, w[f"{p}.w1"]) + w[f"{p}.b1"]), w[f"{p}.w2"]) + w[f"{p}.b2"]


def _split_heads(x: Matrix, num_heads: int) -> list[Matrix]:
    hd = x.shape[1] // num_heads
    return [x[:, h * hd:(h + 1) * hd] for h in range(num_heads)]


# -- encoder -----------------------------------------------------------------

@dataclass
class EncoderOutput:
    visual_tokens: Matrix      # N x d, projected into the decoder space
    cls_query: np.ndarray      # last encoder layer's CLS query (d,)
    cls_keys: Matrix           # last encoder layer's visual keys (N x d)
    trace: list[Matrix]        # encoder_layers + 1 matrices, row 0 is CLS


def _check_image(image, cfg: ModelConfig) -> np.ndarray:
    img = np.asarray(image)
    if img.shape != (cfg.grid_size, cfg.grid_size):
        raise ValueError(f"image must be {cfg.grid_size}x{cfg.grid_size}, got shape {img.shape}")
    if not np.issubdtype(img.dtype, np.integer) or img.min() < 0 or img.max() >= cfg.num_colors:
        raise ValueError(f"image cells must be integer colours in [0, {cfg.num_colors})")
    return img.reshape(-1).astype(np.int64)


def encode_image(image, w: ModelWeights, cfg: ModelConfig | None = None) -> EncoderOutput:
    cfg = cfg or w.cfg
    cells = _check_image(image, cfg)
    x = np.vstack([w["enc.cls"][None, :], w["enc.color_emb"][cells] + w["enc.pos_emb"]])
    trace = [x]
    cls_query = cls_keys = None
    scale = 1.0 / math.sqrt(cfg.head_dim)
    for i in range(cfg.encoder_layers):
        p = f"enc.{i}"
        h = layer_norm(x, w[f"{p}.ln1.g"], w[f"{p}.ln1.b"])
        q, k, v = matmul(h, w[f"{p}.wq"]), matmul(h, w[f"{p}.wk"]), matmul(h, w[f"{p}.wv"])
        heads = []
        for qh, kh, vh in zip(_split_heads(q, cfg.num_heads), _split_heads(k, cfg.num_heads),
                              _split_heads(v, cfg.num_heads)):
            heads.append(matmul(softmax_rows(matmul(qh, kh.T) * scale), vh))
        x = x + matmul(np.hstack(heads), w[f"{p}.wo"])
        x = x + _mlp(w, p, x)
        trace.append(x)
        cls_query, cls_keys = q[0], k[1:]
    if cls_query is None:
        # encoder without attention layers: score against the raw embeddings
        cls_query, cls_keys = x[0], x[1:]
    feats = layer_norm(x[1:], w["enc.ln_f.g"], w["enc.ln_f.b"])
    visual = matmul(feats, w["proj.w"]) + w["proj.b"]
    return EncoderOutput(visual, cls_query, cls_keys, trace)


# -- decoder -----------------------------------------------------------------

@dataclass
class KVCache:
    """Per decoder layer: rotated keys, values and the ids the keys were rotated with."""

    keys: list[Matrix]
    values: list[Matrix]
    ids: list[np.ndarray]

    @property
    def length(self) -> int:
        return self.keys[0].shape[0] if self.keys else 0

    def max_id(self) -> int:
        return int(self.ids[0].max()) if self.length else -1

    def append(self, layer: int, k: Matrix, v: Matrix, ids) -> None:
        self.keys[layer] = np.vstack([self.keys[layer], k])
        self.values[layer] = np.vstack([self.values[layer], v])
        self.ids[layer] = np.concatenate([self.ids[layer], np.asarray(ids, dtype=np.int64)])


@dataclass
class PromptState:
    """A prefilled prompt: next-token logits plus the cache to decode from."""

    logits: np.ndarray
    cache: KVCache
    next_id: int
    attn_logits: list[np.ndarray] | None = None  # per layer, (heads, n, n), pre-mask
    selection: pruning.PruneSelection | None = None
    visual_ids: np.ndarray | None = None
    text_ids: np.ndarray | None = None


def _rope_heads(x: Matrix, ids, cfg: ModelConfig) -> Matrix:
    rc = cfg.rope
    return np.hstack([apply_rope(xh, ids, rc) for xh in _split_heads(x, cfg.num_heads)])


def decoder_qk_layer0(x: Matrix, w: ModelWeights) -> tuple[Matrix, Matrix]:
    """Un-rotated first-layer queries and keys, used by text-visual scoring."""
    h = layer_norm(x, w["dec.0.ln1.g"], w["dec.0.ln1.b"])
    return matmul(h, w["dec.0.wq"]), matmul(h, w["dec.0.wk"])


def _decoder_forward(x: Matrix, ids: np.ndarray, w: ModelWeights, cfg: ModelConfig,
                     cache: KVCache | None, record: bool) -> tuple[np.ndarray, KVCache, list | None]:
    n_new = x.shape[0]
    past = cache.length if cache is not None else 0
    if cache is None:
        cache = KVCache([np.zeros((0, cfg.d_model))] * cfg.decoder_layers,
                        [np.zeros((0, cfg.d_model))] * cfg.decoder_layers,
                        [np.zeros(0, dtype=np.int64)] * cfg.decoder_layers)
    scale = 1.0 / math.sqrt(cfg.head_dim)
    # query at new row i may see every cached row and new rows <= i
    mask = np.triu(np.full((n_new, past + n_new), -np.inf), k=past + 1)
    recorded = [] if record else None
    for i in range(cfg.decoder_layers):
        p = f"dec.{i}"
        h = layer_norm(x, w[f"{p}.ln1.g"], w[f"{p}.ln1.b"])
        q = _rope_heads(matmul(h, w[f"{p}.wq"]), ids, cfg)
        k = _rope_heads(matmul(h, w[f"{p}.wk"]), ids, cfg)
        v = matmul(h, w[f"{p}.wv"])
        cache.append(i, k, v, ids)
        heads, layer_logits = [], []
        for qh, kh, vh in zip(_split_heads(q, cfg.num_heads), _split_heads(cache.keys[i], cfg.num_heads),
                              _split_heads(cache.values[i], cfg.num_heads)):
            s = matmul(qh, kh.T) * scale
            if record:
                layer_logits.append(s)
            heads.append(matmul(softmax_rows(s + mask), vh))
        if record:
            recorded.append(np.stack(layer_logits))
        x = x + matmul(np.hstack(heads), w[f"{p}.wo"])
        x = x + _mlp(w, p, x)
    last = layer_norm(x[-1:], w["dec.ln_f.g"], w["dec.ln_f.b"])
    return matmul(last, w["dec.head"])[0], cache, recorded


def prefill(visual_tokens: Matrix, visual_ids, text_tokens, text_ids, w: ModelWeights,
            cfg: ModelConfig | None = None, record_logits: bool = False) -> PromptState:
    """Causal pass over ``[prefix] [visual] [text]`` with rotary ids as given.

    The system prefix (``cfg.prefix_tokens()``) always occupies ids
    ``0 .. visual_base - 1``; visual ids must lie above it and below the text ids.
    """
    cfg = cfg or w.cfg
    prefix = np.asarray(cfg.prefix_tokens(), dtype=np.int64)
    visual_ids = np.asarray(visual_ids, dtype=np.int64)
    text_ids = np.asarray(text_ids, dtype=np.int64)
    text_tokens = np.asarray(text_tokens, dtype=np.int64)
    if visual_ids.shape[0] != visual_tokens.shape[0]:
        raise ValueError(f"{visual_tokens.shape[0]} visual tokens but {visual_ids.shape[0]} ids")
    if text_ids.shape[0] != text_tokens.shape[0]:
        raise ValueError(f"{text_tokens.shape[0]} text tokens but {text_ids.shape[0]} ids")
    ids = np.concatenate([sequential_ids(0, prefix.size), visual_ids, text_ids])
    if ids.size == 0:
        raise ValueError("empty prompt")
    if ids.min() < 0 or ids.max() >= cfg.max_seq_len:
        raise ValueError(f"position ids must lie in [0, {cfg.max_seq_len})")
    if visual_ids.size and visual_ids.min() < prefix.size:
        raise ValueError("visual ids overlap the system prefix")
    if visual_ids.size and text_ids.size and visual_ids.max() >= text_ids.min():
        raise ValueError("visual ids must precede text ids")
    x = np.vstack([w["dec.tok_emb"][prefix], visual_tokens, w["dec.tok_emb"][text_tokens]])
    logits, cache, rec = _decoder_forward(x, ids, w, cfg, None, record_logits)
    return PromptState(logits, cache, int(ids.max()) + 1, rec, visual_ids=visual_ids, text_ids=text_ids)


def decode_step(token: int, cache: KVCache, next_id: int, w: ModelWeights,
                cfg: ModelConfig | None = None) -> tuple[np.ndarray, KVCache]:
    """Feed one token at position ``next_id``; the cache is extended in place."""
    cfg = cfg or w.cfg
    if next_id <= cache.max_id():
        raise ValueError(f"next_id {next_id} must exceed cached max id {cache.max_id()}")
    if next_id >= cfg.max_seq_len:
        raise ValueError(f"next_id {next_id} exceeds max_seq_len {cfg.max_seq_len}")
    x = w["dec.tok_emb"][[int(token)]]
    logits, cache, _ = _decoder_forward(x, np.array([next_id]), w, cfg, cache, False)
    return logits, cache


def generate_greedy(state: PromptState, max_new: int, w: ModelWeights,
                    cfg: ModelConfig | None = None, stop_token: int = END) -> list[int]:
    """Greedy decoding; emitted tokens are fed back at ids continuing from the prompt's max id."""
    cfg = cfg or w.cfg
    out: list[int] = []
    logits = state.logits
    while len(out) < max_new:
        tok = argmax(logits)
        out.append(tok)
        if tok == stop_token or len(out) == max_new:
            break
        logits, state.cache = decode_step(tok, state.cache, state.next_id, w, cfg)
        state.next_id += 1
    return out


# -- pruning pipeline --------------------------------------------------------

def prompt_ids(alignment: str, indices, n_visual: int, n_text: int, base: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Visual and text position ids for ``gap`` or ``shifted`` alignment."""
    if alignment == "gap":
        # text keeps its unpruned offset right after the full visual prefix
        return pruning.align_gap(indices, base), sequential_ids(base + n_visual, n_text)
    if alignment == "shifted":
        k = len(indices)
        return pruning.align_shifted(indices, base), sequential_ids(base + k, n_text)
    raise ConfigError(f"unknown alignment {alignment!r}")


def compute_scores(strategy: str, enc: EncoderOutput, text_tokens, w: ModelWeights,
                   rng: Rng | None) -> np.ndarray | None:
    cfg = w.cfg
    if strategy == "cls_visual":
        return pruning.score_cls_visual(enc.cls_query, enc.cls_keys, cfg.d_model)
    if strategy == "text_visual":
        q_text, _ = decoder_qk_layer0(w["dec.tok_emb"][np.asarray(text_tokens)], w)
        _, k_vis = decoder_qk_layer0(enc.visual_tokens, w)
        return pruning.score_text_visual(q_text, k_vis, cfg.d_model)
    if strategy == "random":
        if rng is None:
            raise ValueError("random pruning needs an Rng")
        return pruning.score_random(cfg.num_visual, rng)
    if strategy in ("spatial", "none"):
        return None
    raise ConfigError(f"unknown strategy {strategy!r}")


def prefill_with_pruning(image, query_color: int, strategy: str, ratio: float, alignment: str,
                         rng: Rng | None, w: ModelWeights, cfg: ModelConfig | None = None,
                         enc: EncoderOutput | None = None, record_logits: bool = False) -> PromptState:
    """Encode, score, select, align ids and prefill.

    ``permuted`` keeps the selected tokens in descending-score order with
    consecutive ids; at ratio 1 this is the full-sequence permutation experiment.
    ``enc`` may carry a precomputed encoding of ``image``.
    """
    cfg = cfg or w.cfg
    if enc is None:
        enc = encode_image(image, w, cfg)
    text = cfg.prompt_tokens(query_color)
    n, base = cfg.num_visual, cfg.visual_base
    if strategy == "none":
        idx = np.arange(n, dtype=np.int64)
        vis_ids, text_ids = prompt_ids("gap", idx, n, len(text), base)
        state = prefill(enc.visual_tokens, vis_ids, text, text_ids, w, cfg, record_logits)
        state.selection = pruning.PruneSelection("none", 1.0, idx, "gap")
        return state
    scores = compute_scores(strategy, enc, text, w, rng)
    idx = pruning.select_indices(strategy, ratio, n, scores)
    visual = pruning.gather(enc.visual_tokens, idx)
    if alignment == "permuted":
        if scores is None:
            raise ConfigError(f"permuted alignment needs a score-based strategy, not {strategy!r}")
        visual, vis_local, order = pruning.permute_by_score(visual, scores[idx])
        vis_ids = base + vis_local
        text_ids = sequential_ids(base + len(idx), len(text))
        idx = idx[order]
    else:
        vis_ids, text_ids = prompt_ids(alignment, idx, n, len(text), base)
    state = prefill(visual, vis_ids, text, text_ids, w, cfg, record_logits)
    state.selection = pruning.PruneSelection(strategy, ratio, idx, alignment)
    return state


def prefill_shifted_full(image, query_color: int, shift: int, w: ModelWeights,
                         enc: EncoderOutput | None = None) -> PromptState:
    """Shift misalignment with nothing removed.

    Shifted pruning moves a surviving token relative to the prefix by the
    number of tokens pruned before it, and relative to the text by the number
    pruned after it; together these add up to the number removed. Here every
    visual token is kept in order and ``shift`` empty ids are split between
    the two boundaries: ``shift // 2`` between the prefix and the visual
    block, the rest between the visual block and the text.
    """
    cfg = w.cfg
    if shift < 0:
        raise ValueError("shift must be >= 0")
    if enc is None:
        enc = encode_image(image, w, cfg)
    text = cfg.prompt_tokens(query_color)
    n, base = cfg.num_visual, cfg.visual_base
    return prefill(enc.visual_tokens, sequential_ids(base + shift // 2, n), text,
                   sequential_ids(base + shift + n, len(text)), w, cfg)
    text = cfg.prompt_tokens(query_color)
    n, base = cfg.num_visual, cfg.visual_base
    return prefill(enc.visual_tokens, sequential_ids(base + shift, n), text,
                   sequential_ids(base + shift + n, len(text)), w, cfg)
    text = cfg.prompt_tokens(query_color)
    n, base = cfg.num_visual, cfg.visual_base
    return prefill(enc.visual_tokens, sequential_ids(base, n), text,
                   sequential_ids(base + n + shift, len(text)), w, cfg)
