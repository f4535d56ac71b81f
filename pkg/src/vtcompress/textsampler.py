"""Text-guided token selection from attention-derived importance.

Projected text queries and visual keys come in as (h, T, d) / (h, N, d)
tensors. Attention rows are softmaxed per (head, text token); the importance
of visual token n is the max over heads of its attention, averaged over the
text tokens. Selection keeps the smallest top-ranked set whose cumulative
importance mass strictly exceeds a threshold gamma.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numeric import as_tensor, matmul, softmax, stable_sort_desc

__all__ = [
    "attention_scores",
    "importance",
    "per_layer_importance",
    "SelectionResult",
    "cumulative_topk",
    "StochasticConfig",
    "StochasticDraws",
    "draw_stochastic_config",
]


def attention_scores(queries, keys) -> np.ndarray:
    """Scaled dot-product attention probabilities, (h, T, N).

    ``queries`` is (h, T, d), ``keys`` is (h, N, d); each (head, text token)
    row is softmax(q . k / sqrt(d)) over the N visual positions.
    """
    q = as_tensor(queries)
    k = as_tensor(keys)
    if q.ndim != 3 or k.ndim != 3:
        raise ValueError(f"expected (h, T, d) and (h, N, d), got {q.shape} and {k.shape}")
    if q.shape[0] != k.shape[0]:
        raise ValueError(f"head count mismatch: {q.shape[0]} vs {k.shape[0]}")
    if q.shape[2] != k.shape[2]:
        raise ValueError(f"head dim mismatch: {q.shape[2]} vs {k.shape[2]}")
    heads, t, d = q.shape
    n = k.shape[1]
    if d < 1:
        raise ValueError("head dim must be >= 1")
    scale = 1.0 / math.sqrt(d)
    scores = np.empty((heads, t, n))
    for h in range(heads):
        logits = matmul(q[h], k[h].T) * scale
        scores[h] = softmax(logits, axis=-1)
    return scores


def importance(attention) -> np.ndarray:
    """Per-visual-token importance: reduce-max over heads, mean over text tokens."""
    a = as_tensor(attention)
    if a.ndim != 3:
        raise ValueError(f"expected (h, T, N) attention, got shape {a.shape}")
    return a.max(axis=0).mean(axis=0)


def per_layer_importance(attention_stack) -> np.ndarray:
    """Importance per layer of a layer-major (L, h, T, N) stack; returns (L, N)."""
    a = as_tensor(attention_stack)
    if a.ndim != 4:
        raise ValueError(f"expected a layer-major (L, h, T, N) stack, got shape {a.shape}")
    return np.stack([importance(a[i]) for i in range(a.shape[0])])


@dataclass(frozen=True)
class SelectionResult:
    """Kept token set from cumulative-importance selection.

    ``kept_indices`` holds original positions in descending-importance order.
    ``degenerate`` marks the fail-open case of all-zero importance, where all
    tokens are kept.
    """

    kept_indices: np.ndarray
    k: int
    gamma: float
    degenerate: bool = False


def cumulative_topk(scores, gamma: float) -> SelectionResult:
    """Keep the smallest descending-importance prefix whose mass fraction exceeds gamma.

    k is the smallest j with sum(top j scores) / sum(all scores) > gamma; with
    gamma = 1.0 the strict inequality never triggers and all N tokens are
    kept. All-zero scores also keep everything, flagged as degenerate.
    """
    s = as_tensor(scores)
    if s.ndim != 1 or s.size < 1:
        raise ValueError("scores must be a non-empty vector")
    if np.any(s < 0):
        raise ValueError("scores must be non-negative")
    if not (0.0 < gamma <= 1.0):
        raise ValueError(f"gamma must be in (0, 1], got {gamma}")
    order = stable_sort_desc(s)
    prefix = np.cumsum(s[order])
    total = float(prefix[-1])
    if total == 0.0:
        return SelectionResult(order, int(s.size), float(gamma), degenerate=True)
    hits = np.nonzero(prefix / total > gamma)[0]
    k = int(hits[0]) + 1 if hits.size else int(s.size)
    return SelectionResult(order[:k], k, float(gamma))


@dataclass(frozen=True)
class StochasticConfig:
    """Ranges for the training-time draw of (insertion layer, gamma)."""

    layer_range: tuple[int, int] = (8, 24)
    gamma_range: tuple[float, float] = (0.7, 1.0)
    total_layers: int = 32
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.layer_range
        glo, ghi = self.gamma_range
        if not (0 <= lo <= hi < self.total_layers):
            raise ValueError(f"layer range {self.layer_range} invalid for {self.total_layers} layers")
        if not (0.0 < glo <= ghi <= 1.0):
            raise ValueError(f"gamma range {self.gamma_range} must lie in (0, 1]")


class StochasticDraws:
    """Seeded stream of (layer, gamma) draws; one instance per training run."""

    def __init__(self, config: StochasticConfig):
        self.config = config
        self._rng = np.random.default_rng(config.seed)

    def draw(self) -> tuple[int, float]:
        lo, hi = self.config.layer_range
        glo, ghi = self.config.gamma_range
        layer = int(self._rng.integers(lo, hi + 1))
        gamma = glo if glo == ghi else float(self._rng.uniform(glo, ghi))
        return layer, gamma


def draw_stochastic_config(config: StochasticConfig) -> tuple[int, float]:
    """First draw of a fresh seeded stream (use :class:`StochasticDraws` for sequences)."""
    return StochasticDraws(config).draw()
