import numpy as np
import pytest

from gap_prune.core import Rng
from gap_prune.model import ModelConfig, ModelWeights

SMALL = ModelConfig(grid_size=4, num_colors=6, d_model=32, num_heads=4, encoder_layers=2, decoder_layers=2)


def random_weights(cfg: ModelConfig = SMALL, seed: int = 0, std: float = 0.3) -> ModelWeights:
    """Untrained weights large enough that attention patterns are far from uniform."""
    w = ModelWeights.init(cfg, Rng(seed), std)
    rng = Rng(seed + 1000)
    for name, t in w.tensors.items():
        if name.endswith(".g"):
            w.tensors[name] = 1.0 + rng.normal(t.size, 0.1).reshape(t.shape)
        elif name.endswith((".b", ".b1", ".b2")):
            w.tensors[name] = rng.normal(t.size, 0.1).reshape(t.shape)
    return w


def random_image(cfg: ModelConfig, seed: int) -> np.ndarray:
    return Rng(seed).integers(cfg.num_colors, cfg.num_visual).reshape(cfg.grid_size, cfg.grid_size)


@pytest.fixture
def small_weights():
    return random_weights()


def pytest_terminal_summary(terminalreporter):
    """One pass/fail line per acceptance criterion, with the measured values."""
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if "test_acceptance.py" not in rep.nodeid or rep.when != "call":
                continue
            props = dict(rep.user_properties)
            if "criterion" in props:
                lines.append((props["criterion"], f"criterion {props['criterion']:>2} "
                              f"{'PASS' if outcome == 'passed' else 'FAIL'}: {props.get('detail', '')}"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
