"""Text-guided token selection: attention scores -> importance -> coverage top-k.

Importance of a visual token is the max over attention heads, averaged over
text tokens. Selection keeps the smallest descending-importance prefix whose
share of the total importance mass strictly exceeds gamma.
"""

import pathlib
import tempfile

import numpy as np

from vtcompress import (
    StochasticConfig,
    StochasticDraws,
    SyntheticConfig,
    attention_scores,
    cumulative_topk,
    export_heatmap,
    gen_synthetic,
    importance,
    read_tensor,
)

out_dir = pathlib.Path(tempfile.mkdtemp(prefix="vtc_demo2_"))
cfg = SyntheticConfig(height=16, width=16, channels=8, heads=4, text_tokens=6,
                      head_dim=16, seed=3, structure="block-structured")
meta = gen_synthetic(cfg, out_dir)
q, _ = read_tensor(meta["paths"]["q"])
k, _ = read_tensor(meta["paths"]["k"])
print(f"queries {q.shape}, keys {k.shape} "
      f"(query anchors sit inside the high-variance rectangles)")

attn = attention_scores(q, k)  # (heads, T, N), rows sum to 1
scores = importance(attn)
print(f"importance vector over {scores.size} visual tokens: "
      f"min {scores.min():.4f}, max {scores.max():.4f}, sum {scores.sum():.3f}")

export_heatmap(scores.reshape(16, 16), "pgm", out_dir / "importance.pgm")
print(f"importance heatmap written to {out_dir / 'importance.pgm'}")

print("\ncoverage threshold sweep (kept set grows monotonically with gamma):")
print(f"{'gamma':>7} {'kept':>6} {'share of tokens':>16}")
previous = set()
for gamma in (0.5, 0.7, 0.85, 0.95, 1.0):
    result = cumulative_topk(scores, gamma)
    kept = set(result.kept_indices.tolist())
    assert previous <= kept
    previous = kept
    print(f"{gamma:>7.2f} {result.k:>6} {100 * result.k / scores.size:>15.1f}%")

print("\ntraining-time augmentation draws a (layer, gamma) pair per sample:")
draws = StochasticDraws(StochasticConfig(layer_range=(8, 24), gamma_range=(0.7, 1.0), seed=0))
for i in range(5):
    layer, gamma = draws.draw()
    print(f"  draw {i}: insert at layer {layer}, gamma {gamma:.3f}")
