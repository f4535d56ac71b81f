"""Vision-guided region compression.

The feature map is partitioned into w x w regions. Each region can be
down-sampled by any kernel in a :class:`ScaleMenu`; a linear selector scores
the region against the flattened global feature map and picks one scale.
Inference emits the max-pooled tokens of the winning scale; the training
variant additionally multiplies each emitted token by the winning softmax
probability so the selector parameters stay on the gradient path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .numeric import as_tensor, matmul, max_pool, softmax

__all__ = [
    "ScaleSpec",
    "ScaleMenu",
    "default_menu",
    "seven_branch_menu",
    "retain_discard_menu",
    "SelectorParams",
    "init_selector_params",
    "params_to_array",
    "params_from_array",
    "RegionSelection",
    "flatten_grid",
    "partition",
    "selector_score",
    "selector_logits",
    "choose_scale",
    "compress_inference",
    "compress_training",
    "selection_heatmap",
]

POOL_MODES = ("mean", "max")


@dataclass(frozen=True)
class ScaleSpec:
    """One down-sampling path: a max-pool kernel, or a drop-the-region pseudo-scale."""

    kernel: tuple[int, int] | None
    discard: bool = False

    def __post_init__(self):
        if self.discard:
            if self.kernel is not None:
                raise ValueError("a discard scale carries no kernel")
        else:
            if self.kernel is None:
                raise ValueError("a pooling scale needs a kernel")
            kh, kw = self.kernel
            if kh < 1 or kw < 1:
                raise ValueError(f"kernel must be positive, got {self.kernel}")

    def token_count(self, window: int) -> int:
        if self.discard:
            return 0
        kh, kw = self.kernel
        return (window // kh) * (window // kw)


@dataclass(frozen=True)
class ScaleMenu:
    """Ordered set of scales for one window size; index 0 is the coarsest."""

    window: int
    scales: tuple[ScaleSpec, ...]

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if not isinstance(self.scales, tuple):
            object.__setattr__(self, "scales", tuple(self.scales))
        has_discard = any(s.discard for s in self.scales)
        if len(self.scales) < (1 if has_discard else 2):
            raise ValueError("a menu needs at least two scales (or one plus discard)")
        for s in self.scales:
            if s.discard:
                continue
            kh, kw = s.kernel
            if self.window % kh != 0 or self.window % kw != 0:
                raise ValueError(f"kernel {s.kernel} does not divide window {self.window}")
        counts = self.token_counts
        if any(counts[i] > counts[i + 1] for i in range(len(counts) - 1)):
            raise ValueError("scales must be ordered coarsest first (non-decreasing token count)")

    @property
    def token_counts(self) -> tuple[int, ...]:
        return tuple(s.token_count(self.window) for s in self.scales)

    def __len__(self) -> int:
        return len(self.scales)


def default_menu(window: int = 4) -> ScaleMenu:
    """Three-branch menu (4x4, 2x2, 1x1 kernels), dropping kernels that do not divide the window."""
    kernels = [(4, 4), (2, 2), (1, 1)]
    specs = tuple(
        ScaleSpec(k) for k in kernels if window % k[0] == 0 and window % k[1] == 0
    )
    return ScaleMenu(window, specs)


def seven_branch_menu(window: int = 4) -> ScaleMenu:
    """Default menu plus the four asymmetric kernels 4x2, 2x4, 2x1, 1x2."""
    kernels = [(4, 4), (4, 2), (2, 4), (2, 2), (2, 1), (1, 2), (1, 1)]
    specs = tuple(
        ScaleSpec(k) for k in kernels if window % k[0] == 0 and window % k[1] == 0
    )
    return ScaleMenu(window, specs)


def retain_discard_menu() -> ScaleMenu:
    """Single-token window variant: either drop the token or keep it."""
    return ScaleMenu(1, (ScaleSpec(None, discard=True), ScaleSpec((1, 1))))


@dataclass
class SelectorParams:
    """Linear head mapping a global-correlation score vector to scale logits."""

    weight: np.ndarray  # (S, Ng)
    bias: np.ndarray    # (S,)

    def __post_init__(self):
        self.weight = as_tensor(self.weight)
        self.bias = as_tensor(self.bias)
        if self.weight.ndim != 2 or self.bias.ndim != 1:
            raise ValueError("weight must be (S, Ng) and bias (S,)")
        if self.weight.shape[0] != self.bias.shape[0]:
            raise ValueError(
                f"bias length {self.bias.shape[0]} does not match weight rows {self.weight.shape[0]}"
            )

    @property
    def num_scales(self) -> int:
        return self.weight.shape[0]

    @property
    def num_global_tokens(self) -> int:
        return self.weight.shape[1]


def init_selector_params(num_scales: int, num_global_tokens: int, seed: int = 0) -> SelectorParams:
    """Seeded init: weights uniform in [-1/sqrt(Ng), 1/sqrt(Ng)], zero bias."""
    if num_scales < 1 or num_global_tokens < 1:
        raise ValueError("num_scales and num_global_tokens must be >= 1")
    rng = np.random.default_rng(seed)
    limit = 1.0 / math.sqrt(num_global_tokens)
    weight = rng.uniform(-limit, limit, size=(num_scales, num_global_tokens))
    return SelectorParams(weight, np.zeros(num_scales))


def params_to_array(params: SelectorParams) -> np.ndarray:
    """Pack params into the (S, Ng+1) on-disk layout, bias in the last column."""
    return np.concatenate([params.weight, params.bias[:, None]], axis=1)


def params_from_array(arr) -> SelectorParams:
    arr = as_tensor(arr)
    if arr.ndim != 2 or arr.shape[1] < 2:
        raise ValueError(f"selector array must be (S, Ng+1), got shape {arr.shape}")
    return SelectorParams(arr[:, :-1].copy(), arr[:, -1].copy())


@dataclass(frozen=True)
class RegionSelection:
    """Outcome of scale selection for one region."""

    region: int
    scale: int
    probs: np.ndarray  # (S,)
    token_count: int

    @property
    def top1_prob(self) -> float:
        return float(self.probs[self.scale])


def flatten_grid(grid) -> np.ndarray:
    """Flatten an (H, W, C) grid to (H*W, C) token rows, row-major."""
    g = as_tensor(grid)
    if g.ndim != 3:
        raise ValueError(f"expected an (H, W, C) grid, got shape {g.shape}")
    return g.reshape(-1, g.shape[2])


def partition(feature_map, window: int) -> list[np.ndarray]:
    """Split an (H, W, C) map into (H/w)*(W/w) blocks of shape (w, w, C), row-major.

    Non-divisible dimensions are an error; inputs are never padded.
    """
    fm = as_tensor(feature_map)
    if fm.ndim != 3:
        raise ValueError(f"expected an (H, W, C) map, got shape {fm.shape}")
    h, w, _ = fm.shape
    if window < 1 or h % window != 0 or w % window != 0:
        raise ValueError(f"window {window} does not divide map {h}x{w}")
    blocks = []
    for bi in range(h // window):
        for bj in range(w // window):
            blocks.append(
                fm[bi * window : (bi + 1) * window, bj * window : (bj + 1) * window, :].copy()
            )
    return blocks


def _pool_block(block: np.ndarray, pool: str) -> np.ndarray:
    if pool == "mean":
        return block.mean(axis=(0, 1))
    if pool == "max":
        return block.max(axis=(0, 1))
    raise ValueError(f"unknown pool mode {pool!r} (use 'mean' or 'max')")


def selector_score(block, global_tokens, pool: str = "mean") -> np.ndarray:
    """Correlation of a region with every global token.

    The block is pooled to a single C-vector (mean by default) and the score
    for global token k is its inner product with that vector. Scores are not
    normalized; the selector weights absorb their scale.
    """
    b = as_tensor(block)
    g = as_tensor(global_tokens)
    if b.ndim != 3:
        raise ValueError(f"block must be (w, w, C), got shape {b.shape}")
    if g.ndim != 2:
        raise ValueError(f"global tokens must be (Ng, C), got shape {g.shape}")
    if b.shape[2] != g.shape[1]:
        raise ValueError(f"channel mismatch: block C={b.shape[2]}, global C={g.shape[1]}")
    pooled = _pool_block(b, pool)
    return matmul(g, pooled[:, None])[:, 0]


def selector_logits(score, params: SelectorParams) -> np.ndarray:
    """Affine map from score vector to per-scale logits: weight @ score + bias."""
    s = as_tensor(score)
    if s.ndim != 1:
        raise ValueError("score must be a vector")
    if s.shape[0] != params.num_global_tokens:
        raise ValueError(
            f"score length {s.shape[0]} does not match weight columns {params.num_global_tokens}"
        )
    return matmul(params.weight, s[:, None])[:, 0] + params.bias


def choose_scale(logits) -> tuple[int, np.ndarray]:
    """Softmax the logits and pick the winning index.

    Ties go to the lowest index (the coarsest scale), so the choice is
    deterministic and invariant under adding a constant or scaling the
    logits by a positive factor.
    """
    z = as_tensor(logits)
    if z.ndim != 1 or z.size < 1:
        raise ValueError("logits must be a non-empty vector")
    probs = softmax(z)
    return int(np.argmax(z)), probs


def _normalize_force(force_scales, num_regions: int, num_scales: int):
    if force_scales is None:
        return None
    if isinstance(force_scales, (int, np.integer)):
        forced = [int(force_scales)] * num_regions
    else:
        forced = [int(j) for j in force_scales]
        if len(forced) != num_regions:
            raise ValueError(f"force_scales needs {num_regions} entries, got {len(forced)}")
    if any(j < 0 or j >= num_scales for j in forced):
        raise ValueError("forced scale index out of range")
    return forced


def compress_inference(
    feature_map,
    global_tokens,
    params: SelectorParams,
    menu: ScaleMenu,
    *,
    pool: str = "mean",
    force_scales: int | Sequence[int] | None = None,
) -> tuple[np.ndarray, list[RegionSelection]]:
    """Compress a feature map region by region.

    Each region is max-pooled by its selected scale and the resulting tokens
    are flattened row-major, regions concatenated in row-major region order.
    Returns the (total_tokens, C) token matrix and the per-region selections.

    ``force_scales`` overrides the selector's argmax (one index for all
    regions, or one per region); probabilities are still reported. This is a
    diagnostic hook for lossless-path checks and fixed-split accounting.
    """
    g = as_tensor(global_tokens)
    if g.ndim == 3:
        g = flatten_grid(g)
    blocks = partition(feature_map, menu.window)
    if len(menu) != params.num_scales:
        raise ValueError(f"menu has {len(menu)} scales but params have {params.num_scales}")
    if g.shape[0] != params.num_global_tokens:
        raise ValueError(
            f"global token count {g.shape[0]} does not match weight columns {params.num_global_tokens}"
        )
    forced = _normalize_force(force_scales, len(blocks), len(menu))

    channels = blocks[0].shape[2]
    groups: list[np.ndarray] = []
    selections: list[RegionSelection] = []
    for r, block in enumerate(blocks):
        score = selector_score(block, g, pool)
        z = selector_logits(score, params)
        j, probs = choose_scale(z)
        if forced is not None:
            j = forced[r]
        spec = menu.scales[j]
        if spec.discard:
            toks = np.zeros((0, channels))
        else:
            toks = max_pool(block, spec.kernel).reshape(-1, channels)
        groups.append(toks)
        selections.append(RegionSelection(r, j, probs, toks.shape[0]))
    tokens = np.concatenate(groups, axis=0) if groups else np.zeros((0, channels))
    return tokens, selections


def compress_training(
    feature_map,
    global_tokens,
    params: SelectorParams,
    menu: ScaleMenu,
    *,
    pool: str = "mean",
    force_scales: int | Sequence[int] | None = None,
) -> tuple[np.ndarray, list[RegionSelection]]:
    """Differentiable-path variant: each region's tokens scaled by its top-1 probability.

    Selection is identical to :func:`compress_inference`; only the emitted
    values differ, satisfying ``weighted[r] == top1_prob(r) * inference[r]``
    exactly.
    """
    tokens, selections = compress_inference(
        feature_map, global_tokens, params, menu, pool=pool, force_scales=force_scales
    )
    weighted = tokens.copy()
    offset = 0
    for sel in selections:
        weighted[offset : offset + sel.token_count] *= sel.top1_prob
        offset += sel.token_count
    return weighted, selections


def selection_heatmap(
    selections: Sequence[RegionSelection], menu: ScaleMenu, region_grid: tuple[int, int]
) -> np.ndarray:
    """Per-pixel kept-token fraction: each region's w x w patch is filled with
    token_count / w^2 of the scale chosen there."""
    rows, cols = region_grid
    if rows * cols != len(selections):
        raise ValueError(f"region grid {region_grid} does not hold {len(selections)} selections")
    w = menu.window
    grid = np.zeros((rows * w, cols * w))
    denom = float(w * w)
    for sel in selections:
        bi, bj = divmod(sel.region, cols)
        grid[bi * w : (bi + 1) * w, bj * w : (bj + 1) * w] = sel.token_count / denom
    return grid
