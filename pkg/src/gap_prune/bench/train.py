"""Training the toy model with torch autograd.

The torch forward here mirrors the numpy engine in :mod:`gap_prune.model`
operation for operation (tanh-GELU, interleaved rotary pairs, same layer
norm), so trained weights transfer directly; in float64 the two agree to
1e-9, which ``tests/test_train.py`` checks.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from ..core import Rng
from ..model import END, FIND, NUM_SPECIALS, ModelConfig, ModelWeights
from .data import BACKGROUND, RecExample

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int = 1500
    batch_size: int = 64
    lr: float = 3e-3
    warmup: int = 100
    init_std: float = 0.02
    # weight of the CLS-attention saliency term (mass on object cells)
    saliency_weight: float = 0.5
    # weight of the term asking each visual token's state after the first
    # decoder layer to name its own cell (through the shared output head)
    position_weight: float = 1.0
    # weight of the term asking each visual token's final state to name its
    # own colour, so colour identity survives the encoder
    color_weight: float = 1.0
    # dropout on decoder attention weights
    attn_dropout: float = 0.3
    # shuffle encoder positional embeddings per example so the decoder must
    # take cell positions from its rotary ids, not from encoder features
    scramble_positions: bool = True
    # float32 halves step time on CPUs without wide SIMD; weights are
    # exported as float64 either way
    dtype: str = "float32"
    log_every: int = 100


@dataclass
class TrainResult:
    weights: ModelWeights
    losses: list[float] = field(default_factory=list)
    train_accuracy: float = 0.0
    val_accuracy: float = 0.0


def _batch_arrays(examples: list[RecExample]):
    imgs = torch.tensor(np.stack([ex.image.reshape(-1) for ex in examples]))
    colors = torch.tensor([ex.query_color for ex in examples])
    answers = torch.tensor([ex.answer_cell for ex in examples])
    return imgs, colors, answers


def _rope(x: torch.Tensor, ids: torch.Tensor, cfg: ModelConfig) -> torch.Tensor:
    # x: (B, H, T, hd)
    inv = torch.tensor(cfg.rope.inv_freq(), dtype=torch.float64)
    ang = (ids.to(torch.float64)[:, None] * inv[None, :]).to(x.dtype)
    cos, sin = torch.cos(ang), torch.sin(ang)
    even, odd = x[..., 0::2], x[..., 1::2]
    return torch.stack([even * cos - odd * sin, even * sin + odd * cos], dim=-1).flatten(-2)


def _block(p: dict, pre: str, x: torch.Tensor, cfg: ModelConfig, ids=None, causal=False, drop=None):
    B, T, d = x.shape
    H, hd = cfg.num_heads, cfg.head_dim
    h = F.layer_norm(x, (d,), p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"], eps=1e-5)
    q, k, v = h @ p[f"{pre}.wq"], h @ p[f"{pre}.wk"], h @ p[f"{pre}.wv"]
    qh = q.view(B, T, H, hd).transpose(1, 2)
    kh = k.view(B, T, H, hd).transpose(1, 2)
    vh = v.view(B, T, H, hd).transpose(1, 2)
    if ids is not None:
        qh, kh = _rope(qh, ids, cfg), _rope(kh, ids, cfg)
    s = qh @ kh.transpose(-1, -2) / math.sqrt(hd)
    if causal:
        s = s.masked_fill(torch.triu(torch.ones(T, T, dtype=torch.bool), 1), float("-inf"))
    probs = torch.softmax(s, -1)
    if drop is not None:
        rate, gen = drop
        keep = torch.rand(probs.shape, generator=gen) >= rate
        probs = probs * keep.to(probs.dtype) / (1 - rate)
    a = (probs @ vh).transpose(1, 2).reshape(B, T, d)
    x = x + a @ p[f"{pre}.wo"]
    h2 = F.layer_norm(x, (d,), p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"], eps=1e-5)
    x = x + F.gelu(h2 @ p[f"{pre}.w1"] + p[f"{pre}.b1"], approximate="tanh") @ p[f"{pre}.w2"] + p[f"{pre}.b2"]
    return x, q, k


def forward(p: dict, cfg: ModelConfig, imgs, colors, answers, pos_perm=None, drop=None):
    """Batched teacher-forced pass over ``[visual] FIND colour cell``.

    Returns logits at the colour and cell positions (B, 2, V), CLS scores
    (B, N), and output-head logits read off every visual token after the first
    and after the last decoder layer (each (B, N, V)).
    """
    B, N = imgs.shape
    d = cfg.d_model
    pos = p["enc.pos_emb"] if pos_perm is None else p["enc.pos_emb"][pos_perm]
    x = torch.cat([p["enc.cls"].expand(B, 1, d), p["enc.color_emb"][imgs] + pos], dim=1)
    q = k = None
    for i in range(cfg.encoder_layers):
        x, q, k = _block(p, f"enc.{i}", x, cfg)
    if q is None:
        q, k = x, x
    cls_scores = torch.softmax((k[:, 1:] @ q[:, 0, :, None]).squeeze(-1) / math.sqrt(d), -1)
    feats = F.layer_norm(x[:, 1:], (d,), p["enc.ln_f.g"], p["enc.ln_f.b"], eps=1e-5)
    visual = feats @ p["proj.w"] + p["proj.b"]
    text = torch.stack([torch.full_like(colors, FIND), NUM_SPECIALS + colors,
                        NUM_SPECIALS + cfg.num_colors + answers], dim=1)
    prefix = torch.tensor(cfg.prefix_tokens(), dtype=torch.long).expand(B, -1)
    y = torch.cat([p["dec.tok_emb"][prefix], visual, p["dec.tok_emb"][text]], dim=1)
    base = cfg.visual_base
    ids = torch.arange(0, base + N + 3)
    vis_logits = None
    for i in range(cfg.decoder_layers):
        y, _, _ = _block(p, f"dec.{i}", y, cfg, ids=ids, causal=True, drop=drop)
        if i == 0:
            h = F.layer_norm(y[:, base:base + N], (d,), p["dec.ln_f.g"], p["dec.ln_f.b"], eps=1e-5)
            vis_logits = h @ p["dec.head"]
    y = F.layer_norm(y[:, base:], (d,), p["dec.ln_f.g"], p["dec.ln_f.b"], eps=1e-5) @ p["dec.head"]
    return y[:, N + 1:], cls_scores, (vis_logits, y[:, :N])


def _to_torch(w: ModelWeights, dtype=torch.float64) -> dict:
    return {k: torch.tensor(v, dtype=dtype, requires_grad=True) for k, v in w.tensors.items()}


def _to_numpy(p: dict, cfg: ModelConfig) -> ModelWeights:
    return ModelWeights(cfg, {k: v.detach().to(torch.float64).numpy().copy() for k, v in p.items()})


def _losses(p, cfg, imgs, colors, answers, perm, tc: TrainConfig, drop=None):
    logits, cls_scores, (vis_mid, vis_last) = forward(p, cfg, imgs, colors, answers, perm, drop)
    targets = torch.stack([NUM_SPECIALS + cfg.num_colors + answers, torch.full_like(answers, END)], 1)
    ce = F.cross_entropy(logits.reshape(-1, cfg.vocab_size), targets.reshape(-1))
    objects = (imgs != BACKGROUND).to(cls_scores.dtype)
    sal = -torch.log((cls_scores * objects).sum(-1) + 1e-12).mean()
    loss = ce + tc.saliency_weight * sal
    if tc.position_weight:
        own = NUM_SPECIALS + cfg.num_colors + torch.arange(cfg.num_visual).expand(len(answers), -1)
        loss = loss + tc.position_weight * F.cross_entropy(vis_mid.reshape(-1, cfg.vocab_size), own.reshape(-1))
    if tc.color_weight:
        loss = loss + tc.color_weight * F.cross_entropy(vis_last.reshape(-1, cfg.vocab_size),
                                                        (NUM_SPECIALS + imgs).reshape(-1))
    return loss, ce, logits


@torch.no_grad()
def batched_accuracy(w: ModelWeights, examples: list[RecExample], chunk: int = 512) -> float:
    """Teacher-forced argmax accuracy of the answer cell with unpruned input."""
    if not examples:
        return float("nan")
    p = {k: torch.tensor(v) for k, v in w.tensors.items()}
    cfg = w.cfg
    correct = 0
    for s in range(0, len(examples), chunk):
        imgs, colors, answers = _batch_arrays(examples[s:s + chunk])
        logits, _, _ = forward(p, cfg, imgs, colors, answers)
        pred = logits[:, 0].argmax(-1)
        correct += int((pred == NUM_SPECIALS + cfg.num_colors + answers).sum())
    return correct / len(examples)


def train_model(train: list[RecExample], cfg: ModelConfig, rng: Rng, tc: TrainConfig | None = None,
                val: list[RecExample] | None = None) -> TrainResult:
    """Adam on answer and end-token cross-entropy plus the auxiliary terms in
    :class:`TrainConfig`, always on unpruned input. Deterministic for a given seed."""
    if not train:
        raise ValueError("empty training set")
    tc = tc or TrainConfig()
    prev_threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        w0 = ModelWeights.init(cfg, rng.spawn(1), tc.init_std)
        p = _to_torch(w0, getattr(torch, tc.dtype))
        opt = torch.optim.Adam(list(p.values()), lr=tc.lr)
        sched = torch.optim.lr_scheduler.LambdaLR(
            opt, lambda s: min(1.0, (s + 1) / tc.warmup) * 0.5 * (1 + math.cos(math.pi * min(s, tc.steps) / tc.steps)))
        imgs_all, colors_all, answers_all = _batch_arrays(train)
        batch_rng, perm_rng = rng.spawn(2), rng.spawn(3)
        n_vis = cfg.num_visual
        drop = None
        if tc.attn_dropout > 0:
            gen = torch.Generator().manual_seed(int(rng.spawn(4).next_u64(1)[0] >> 1))
            drop = (tc.attn_dropout, gen)
        losses = []
        for step in range(tc.steps):
            idx = torch.tensor(batch_rng.integers(len(train), tc.batch_size))
            perm = None
            if tc.scramble_positions:
                keys = perm_rng.uniform(tc.batch_size * n_vis).reshape(tc.batch_size, n_vis)
                perm = torch.tensor(np.argsort(keys, axis=1, kind="stable"))
            loss, ce, _ = _losses(p, cfg, imgs_all[idx], colors_all[idx], answers_all[idx], perm, tc, drop)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at step {step} (ce={ce.item()})")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            losses.append(loss.item())
            if tc.log_every and step % tc.log_every == 0:
                log.info("step %d loss %.4f ce %.4f", step, loss.item(), ce.item())
        w = _to_numpy(p, cfg)
    finally:
        torch.set_num_threads(prev_threads)
    res = TrainResult(w, losses, batched_accuracy(w, train[:2000]))
    if val:
        res.val_accuracy = batched_accuracy(w, val)
    return res
