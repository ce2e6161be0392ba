"""Dense fp32 tensor arithmetic for the CPU forward pass.

Tensors are plain numpy arrays; the dtype doubles as the element tag
(float32, float16 for storage only, unsigned ints for quantization codes).
Every reduction used by the model has a fixed summation order so results
are bit-identical from run to run.
"""

from __future__ import annotations

import numpy as np

FP32 = np.float32

_use_blas = False


class ShapeError(ValueError):
    pass


def use_blas(flag: bool = True) -> None:
    """Route matmul_transposed through BLAS.

    Much faster for full-size checkpoints, but the summation order is then
    up to the BLAS library and may vary with its thread count.
    """
    global _use_blas
    _use_blas = bool(flag)


def as_fp32(t) -> np.ndarray:
    a = np.asarray(t)
    if a.dtype == FP32:
        return a
    if a.dtype.kind not in "fiu":
        raise TypeError(f"cannot upcast dtype {a.dtype} to fp32")
    return a.astype(FP32)


def frozen(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


def _same_shape(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _elementwise(a: np.ndarray, out32: np.ndarray) -> np.ndarray:
    # keep the storage dtype of the input
    return out32 if a.dtype == FP32 else out32.astype(a.dtype)


def matmul_transposed(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Y = X W^T with Y[i, j] = sum_k X[i, k] * W[j, k].

    The sum runs over k in ascending order with an fp32 accumulator, which
    is exactly what a naive triple loop does.
    """
    x = np.asarray(x)
    w = np.asarray(w)
    if x.ndim != 2 or w.ndim != 2:
        raise ShapeError(f"matmul_transposed expects 2-d operands, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"matmul_transposed: inner dims differ {x.shape} vs {w.shape}")
    if x.dtype != FP32 or w.dtype != FP32:
        raise TypeError(f"matmul_transposed needs fp32 operands, got {x.dtype} and {w.dtype}")
    if _use_blas:
        return x @ w.T
    out = np.zeros((x.shape[0], w.shape[0]), dtype=FP32)
    prod = np.empty_like(out)
    for k in range(x.shape[1]):
        np.multiply.outer(x[:, k], w[:, k], out=prod)
        out += prod
    return out


def hadamard(a, b) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    _same_shape(a, b, "hadamard")
    return _elementwise(a, as_fp32(a) * as_fp32(b))


def add(a, b) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    _same_shape(a, b, "add")
    return _elementwise(a, as_fp32(a) + as_fp32(b))


def scale(t, s: float) -> np.ndarray:
    t = np.asarray(t)
    return _elementwise(t, as_fp32(t) * FP32(s))


def transpose2d(t) -> np.ndarray:
    t = np.asarray(t)
    if t.ndim != 2:
        raise ShapeError(f"transpose2d expects a 2-d tensor, got {t.shape}")
    return np.ascontiguousarray(t.T)


def silu(x) -> np.ndarray:
    x32 = as_fp32(x)
    # sigmoid via tanh never overflows
    sig = FP32(0.5) * (FP32(1.0) + np.tanh(FP32(0.5) * x32))
    return _elementwise(np.asarray(x), x32 * sig)


def gelu(x) -> np.ndarray:
    """GELU, tanh approximation."""
    x32 = as_fp32(x)
    c = FP32(np.sqrt(2.0 / np.pi))
    inner = c * (x32 + FP32(0.044715) * x32 * x32 * x32)
    return _elementwise(np.asarray(x), FP32(0.5) * x32 * (FP32(1.0) + np.tanh(inner)))


def softmax_rows(x) -> np.ndarray:
    x32 = as_fp32(x)
    if x32.ndim == 1:
        return softmax_rows(x32[None, :])[0]
    shifted = x32 - x32.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def rmsnorm(x, gain=None, eps: float = 1e-6) -> np.ndarray:
    if eps <= 0:
        raise ValueError("eps must be positive")
    x32 = as_fp32(x)
    ms = np.mean(x32 * x32, axis=-1, keepdims=True)
    out = x32 / np.sqrt(ms + FP32(eps))
    if gain is not None:
        gain = as_fp32(gain)
        if gain.shape != x32.shape[-1:]:
            raise ShapeError(f"rmsnorm gain {gain.shape} does not match width {x32.shape[-1]}")
        out = out * gain
    return out


def max_abs(t) -> tuple[float, tuple[int, ...]]:
    """Largest magnitude and its coordinates; ties go to the lowest flat index."""
    a = np.asarray(t)
    if a.size == 0:
        raise ValueError("max_abs of an empty tensor")
    flat = int(np.argmax(np.abs(as_fp32(a)).ravel()))
    idx = tuple(int(i) for i in np.unravel_index(flat, a.shape))
    return float(abs(a[idx])), idx


def median(t) -> float:
    """Median; for an even count this is the lower of the two middle values."""
    flat = as_fp32(t).ravel()
    if flat.size == 0:
        raise ValueError("median of an empty tensor")
    mid = (flat.size - 1) // 2
    return float(np.partition(flat, mid)[mid])


def mean_std(t) -> tuple[float, float]:
    """Mean and population standard deviation."""
    flat = np.asarray(t, dtype=np.float64).ravel()
    if flat.size == 0:
        raise ValueError("mean_std of an empty tensor")
    return float(flat.mean()), float(flat.std())
