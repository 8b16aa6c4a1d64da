"""Score-based visual-token pruning with position-ID preserving alignment on a
toy rotary multimodal decoder."""

from .core import Rng, argmax, layer_norm, matmul, softmax_rows
from .model import ModelConfig, ModelWeights, encode_image, prefill, prefill_with_pruning
from .pruning import align_gap, align_shifted, retained_count, topk_select

__version__ = "0.1.0"
