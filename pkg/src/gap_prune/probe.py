"""Linear probes that predict a visual token's grid position from encoder features."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .core import Matrix, Rng, matmul, softmax_rows
from .model import ModelConfig, ModelWeights, encode_image


def collect_features(images, layer: int, w: ModelWeights, cfg: ModelConfig | None = None) -> tuple[Matrix, np.ndarray]:
    """One (feature, position) row per visual token per image at ``layer`` of the trace."""
    cfg = cfg or w.cfg
    if not 0 <= layer <= cfg.encoder_layers:
        raise IndexError(f"layer {layer} outside [0, {cfg.encoder_layers}]")
    feats = [encode_image(img, w, cfg).trace[layer][1:] for img in images]
    labels = np.tile(np.arange(cfg.num_visual), len(feats))
    return np.vstack(feats), labels


@dataclass
class LinearProbe:
    """Standardise, then affine map to class logits."""

    mean: np.ndarray
    scale: np.ndarray
    weight: Matrix  # d x classes
    bias: np.ndarray
    losses: list[float] = field(default_factory=list)

    def logits(self, x: Matrix) -> Matrix:
        return matmul((x - self.mean) / self.scale, self.weight) + self.bias

    def predict(self, x: Matrix) -> np.ndarray:
        return np.argmax(self.logits(x), axis=1)

    def accuracy(self, x: Matrix, y) -> float:
        return float(np.mean(self.predict(x) == np.asarray(y)))


def probe_loss_and_grad(weight: Matrix, bias: np.ndarray, z: Matrix, y: np.ndarray) -> tuple[float, Matrix, np.ndarray]:
    """Mean softmax cross-entropy on standardised features ``z`` and its gradient."""
    logits = matmul(z, weight) + bias
    p = softmax_rows(logits)
    m = z.shape[0]
    rows = np.arange(m)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_p = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = float(-log_p[rows, y].mean())
    p[rows, y] -= 1.0
    p /= m
    return loss, matmul(z.T, p), p.sum(axis=0)


def train_probe(features: Matrix, labels, epochs: int = 500, lr: float = 0.1, rng: Rng | None = None,
                num_classes: int | None = None) -> LinearProbe:
    """Multinomial logistic regression by full-batch gradient descent."""
    y = np.asarray(labels, dtype=np.int64)
    if not np.all(np.isfinite(features)):
        raise ValueError("features must be finite")
    if np.unique(y).size < 2:
        raise ValueError("probe needs at least two distinct labels")
    classes = num_classes or int(y.max()) + 1
    mean = features.mean(axis=0)
    scale = features.std(axis=0)
    scale[scale < 1e-12] = 1.0
    z = (features - mean) / scale
    rng = rng or Rng(0)
    weight = rng.normal(z.shape[1] * classes, 1e-3).reshape(z.shape[1], classes)
    bias = np.zeros(classes)
    losses = []
    for _ in range(epochs):
        loss, gw, gb = probe_loss_and_grad(weight, bias, z, y)
        losses.append(loss)
        weight -= lr * gw
        bias -= lr * gb
    if epochs:
        losses.append(probe_loss_and_grad(weight, bias, z, y)[0])
    return LinearProbe(mean, scale, weight, bias, losses)


@dataclass
class ProbeOptions:
    epochs: int = 500
    lr: float = 0.1
    holdout: float = 0.2
    seed: int = 0


@dataclass
class LayerProbe:
    layer: int
    accuracy: float
    final_loss: float
    initial_loss: float
    train_samples: int
    test_samples: int


@dataclass
class ProbeReport:
    layers: list[LayerProbe]

    def to_dict(self) -> dict:
        return {"layers": {str(lp.layer): {"accuracy": lp.accuracy, "final_loss": lp.final_loss,
                                           "initial_loss": lp.initial_loss,
                                           "train_samples": lp.train_samples,
                                           "test_samples": lp.test_samples}
                           for lp in self.layers}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def probe_all_layers(images, w: ModelWeights, cfg: ModelConfig | None = None,
                     opts: ProbeOptions | None = None) -> ProbeReport:
    """Held-out top-1 position accuracy for every encoder layer, 0 included.

    Images are split by image (not by token) into train and held-out sets.
    """
    cfg = cfg or w.cfg
    opts = opts or ProbeOptions()
    images = list(images)
    if len(images) < 2:
        raise ValueError("need at least two images to split")
    rng = Rng(opts.seed)
    order = rng.permutation(len(images))
    n_test = min(len(images) - 1, max(1, int(round(len(images) * opts.holdout))))
    test_imgs = [images[i] for i in order[:n_test]]
    train_imgs = [images[i] for i in order[n_test:]]
    out = []
    for layer in range(cfg.encoder_layers + 1):
        xtr, ytr = collect_features(train_imgs, layer, w, cfg)
        xte, yte = collect_features(test_imgs, layer, w, cfg)
        probe = train_probe(xtr, ytr, opts.epochs, opts.lr, rng.spawn(layer), cfg.num_visual)
        out.append(LayerProbe(layer, probe.accuracy(xte, yte), probe.losses[-1] if probe.losses else float("nan"),
                              probe.losses[0] if probe.losses else float("nan"), len(ytr), len(yte)))
    return ProbeReport(out)
