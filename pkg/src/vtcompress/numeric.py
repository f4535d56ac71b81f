"""Dense float64 kernels shared by every other module.

All functions are pure and use deterministic accumulation orders, so repeated
runs on the same inputs are bit-identical. Performance is deliberately traded
for reproducibility: matrix products accumulate in row-major k-order rather
than calling into BLAS.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "as_tensor",
    "matmul",
    "softmax",
    "max_pool",
    "stable_sort_desc",
    "finite_diff_grad",
]


def as_tensor(values, dims: Sequence[int] | None = None) -> np.ndarray:
    """Return ``values`` as a C-contiguous float64 array, rejecting non-finite data.

    If ``dims`` is given the data is reshaped to it; the element count must
    match exactly.
    """
    arr = np.ascontiguousarray(values, dtype=np.float64)
    if dims is not None:
        dims = tuple(int(d) for d in dims)
        if any(d < 1 for d in dims):
            raise ValueError(f"dims must be positive, got {dims}")
        expected = 1
        for d in dims:
            expected *= d
        if arr.size != expected:
            raise ValueError(f"data length {arr.size} does not match dims {dims}")
        arr = arr.reshape(dims)
    if arr.size and not np.isfinite(arr).all():
        raise ValueError("tensor contains non-finite values")
    return arr


def matmul(a, b) -> np.ndarray:
    """Matrix product with sequential k-order accumulation.

    Bit-identical to the naive triple loop ``acc += a[i,k]*b[k,j]`` with k
    ascending, which keeps downstream reports reproducible and lets tests
    compare against a brute-force oracle exactly.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got shapes {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions differ: {a.shape} x {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]))
    for k in range(a.shape[1]):
        out += a[:, k, np.newaxis] * b[np.newaxis, k, :]
    return out


def softmax(x, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax along ``axis`` (max-subtraction before exp)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0 or x.size == 0:
        raise ValueError("softmax of an empty input")
    if not np.isfinite(x).all():
        raise ValueError("softmax input contains non-finite values")
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def max_pool(block, kernel: tuple[int, int]) -> np.ndarray:
    """Channel-wise windowed max over an (h, w, C) block.

    The kernel (kh, kw) must divide (h, w); output is (h/kh, w/kw, C).
    """
    block = np.asarray(block, dtype=np.float64)
    if block.ndim != 3:
        raise ValueError(f"max_pool expects an (h, w, C) block, got shape {block.shape}")
    kh, kw = int(kernel[0]), int(kernel[1])
    h, w, c = block.shape
    if kh < 1 or kw < 1 or h % kh != 0 or w % kw != 0:
        raise ValueError(f"kernel ({kh}, {kw}) does not divide block {h}x{w}")
    view = block.reshape(h // kh, kh, w // kw, kw, c)
    return view.max(axis=(1, 3))


def stable_sort_desc(values) -> np.ndarray:
    """Indices sorting ``values`` descending; ties keep their original order."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError("stable_sort_desc expects a 1-d vector")
    if v.size and not np.isfinite(v).all():
        raise ValueError("cannot sort non-finite values")
    return np.argsort(-v, kind="stable")


def finite_diff_grad(f: Callable[[np.ndarray], float], x, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of an array.

    Per-coordinate step is ``step * max(1, |x_i|)``. Used as the independent
    oracle for analytic gradients; never call it from a gradient it verifies.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.array(x, dtype=np.float64, copy=True)
    grad = np.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_g = grad.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        h = step * max(1.0, abs(orig))
        flat_x[i] = orig + h
        up = float(f(x))
        flat_x[i] = orig - h
        down = float(f(x))
        flat_x[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise ValueError(f"objective returned a non-finite value near coordinate {i}")
        flat_g[i] = (up - down) / (2.0 * h)
    return grad
