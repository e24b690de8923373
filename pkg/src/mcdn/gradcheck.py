"""Whole-model gradient verification on a reduced configuration.

Backward-pass gradients of the total objective (focal loss + L2) are
compared per coordinate against central finite differences on a small
random batch.  This is the release gate for the numeric core.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .config import ModelConfig
from .model import batch_objective, init_params, trainable_params
from .optim import finite_diff
from .tensor import Rng, no_grad
from .text import SegmentedExample, Vocabulary, encode_batch

__all__ = ["GradCheckResult", "reduced_config", "model_gradient_check"]


@dataclass
class GradCheckResult:
    max_rel_error: float
    passed: bool
    threshold: float
    elapsed_s: float
    per_param: Dict[str, float] = field(default_factory=dict)


def reduced_config() -> ModelConfig:
    return ModelConfig(d=16, n_blocks=2, n_heads=2, k=12, windows=(2, 3, 4),
                       d_g=8, gru_layers=2, max_len=8, dropout=0.5, l2=3e-4)


def _toy_batch(rng: Rng):
    words = ["storm", "broke", "lines", "so", "power", "went"]
    vocab = Vocabulary(words)
    examples = []
    for i in range(4):
        n = int(rng.integers(4, 7))
        tokens = [words[int(rng.integers(0, len(words)))] for _ in range(n)]
        start = int(rng.integers(1, n - 1))
        end = min(n, start + 1 + int(rng.integers(0, 2)))
        examples.append(SegmentedExample(tokens=tokens, bl=(0, start),
                                         l=(start, end), al=(end, n),
                                         label=int(i % 2)))
    return encode_batch(examples, vocab, max_len=8), vocab


def model_gradient_check(seed: int = 1, eps: float = 1e-4,
                         threshold: float = 1e-3,
                         cfg: Optional[ModelConfig] = None) -> GradCheckResult:
    t0 = time.time()
    cfg = cfg or reduced_config()
    rng = Rng(seed)
    batch, vocab = _toy_batch(rng)
    params = init_params(cfg, len(vocab), rng)
    trainables = trainable_params(params)

    loss, _ = batch_objective(params, cfg, batch, training=False)
    loss.backward()
    analytic = {k: p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
                for k, p in trainables.items()}

    def objective(_theta: np.ndarray) -> float:
        with no_grad():
            value, _ = batch_objective(params, cfg, batch, training=False)
        return float(value.data)

    per_param: Dict[str, float] = {}
    worst = 0.0
    for name, p in trainables.items():
        fd = finite_diff(objective, p.data, eps=eps)
        num = np.abs(analytic[name] - fd)
        den = np.maximum(np.maximum(np.abs(analytic[name]), np.abs(fd)), 1e-6)
        rel = float((num / den).max())
        per_param[name] = rel
        worst = max(worst, rel)
    elapsed = time.time() - t0
    return GradCheckResult(max_rel_error=worst, passed=worst <= threshold,
                           threshold=threshold, elapsed_s=elapsed,
                           per_param=per_param)
