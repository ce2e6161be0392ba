"""Asymmetric round-to-nearest codecs and super-outlier aware pipelines.

Group layout is row-major over a 2-d view of the tensor (1-d tensors are a
single row).  Groups are enumerated in scan order: block rows first, then
block columns inside each block row.  ``QuantizedTensor.scales`` and
``.mins`` are parallel arrays in that order and ``codes`` keeps the
original shape, so the packed form is

    codes  (uint8, row-major, original shape)
    scales (fp32, n_groups)
    mins   (fp32, n_groups)

Trailing blocks that do not fill a whole tile are groups of their own;
no padding values enter the min/max statistics.
"""

from __future__ import annotations

from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .tensor import FP32

GRANULARITIES = ("per_tensor", "per_token", "block2d")
DEFAULT_Z_GRID = tuple(float(z) for z in np.geomspace(2.0, 10.0, 20))


@dataclass(frozen=True)
class QuantScheme:
    """Codec settings.

    ``restore`` holds the coordinates kept at full precision: ``(row, col)``
    pairs or SuperWeightRecords for weights.  ``literal_delta`` switches the
    step denominator from 2**bits - 1 to 2**(bits-1) - 1.
    """

    bits: int = 8
    granularity: str = "per_tensor"
    block: tuple[int, int] | None = None
    clip_z: float | None = None
    restore: tuple = ()
    literal_delta: bool = False

    def __post_init__(self):
        if not isinstance(self.bits, (int, np.integer)) or not 2 <= self.bits <= 8:
            raise ValueError(f"bits must be in [2, 8], got {self.bits}")
        if self.granularity not in GRANULARITIES:
            raise ValueError(f"unknown granularity {self.granularity!r}")
        if self.granularity == "block2d":
            if self.block is None or len(self.block) != 2 or min(self.block) < 1:
                raise ValueError("block2d needs block=(rows, cols) with both >= 1")
            object.__setattr__(self, "block", (int(self.block[0]), int(self.block[1])))
        if self.clip_z is not None and not self.clip_z > 0:
            raise ValueError("clip_z must be positive")
        object.__setattr__(self, "restore", tuple(self.restore))

    @property
    def levels(self) -> int:
        return 2 ** (self.bits - 1) - 1 if self.literal_delta else 2 ** self.bits - 1

    @property
    def label(self) -> str:
        if self.granularity == "block2d":
            return f"{self.block[0]}x{self.block[1]}"
        return self.granularity

    @classmethod
    def blocks(cls, bits: int, block: tuple[int, int] | None, **kw) -> QuantScheme:
        if block is None:
            return cls(bits=bits, granularity="per_tensor", **kw)
        return cls(bits=bits, granularity="block2d", block=block, **kw)


@dataclass
class QuantizedTensor:
    codes: np.ndarray
    scales: np.ndarray
    mins: np.ndarray
    scheme: QuantScheme
    shape: tuple[int, ...] = field(default=())


def parse_block(text: str) -> tuple[int, int] | None:
    """'64x64' -> (64, 64); 'per_tensor' / 'tensor' -> None."""
    t = text.strip().lower()
    if t in ("per_tensor", "tensor", "per-tensor"):
        return None
    r, _, c = t.partition("x")
    return int(r), int(c or r)


def _as_2d(t: np.ndarray) -> np.ndarray:
    if t.ndim == 0:
        return t.reshape(1, 1)
    if t.ndim == 1:
        return t.reshape(1, -1)
    return t.reshape(-1, t.shape[-1])


def _tile(shape2d: tuple[int, int], scheme: QuantScheme) -> tuple[int, int]:
    R, C = shape2d
    if scheme.granularity == "per_tensor":
        return R, C
    if scheme.granularity == "per_token":
        return 1, C
    return min(scheme.block[0], R), min(scheme.block[1], C)


def _grouped(x: np.ndarray, tile: tuple[int, int]) -> tuple[np.ndarray, int, int]:
    """View [R, C] as [n_groups, r*c], NaN-padding trailing partial tiles."""
    R, C = x.shape
    r, c = tile
    nbr, nbc = -(-R // r), -(-C // c)
    if nbr * r != R or nbc * c != C:
        padded = np.full((nbr * r, nbc * c), np.nan, dtype=FP32)
        padded[:R, :C] = x
    else:
        padded = x
    g = padded.reshape(nbr, r, nbc, c).transpose(0, 2, 1, 3).reshape(nbr * nbc, r * c)
    return g, nbr, nbc


def _expand(per_group: np.ndarray, nbr: int, nbc: int, tile, shape2d) -> np.ndarray:
    grid = per_group.reshape(nbr, nbc)
    full = np.repeat(np.repeat(grid, tile[0], axis=0), tile[1], axis=1)
    return full[: shape2d[0], : shape2d[1]]


def _round_half_away(v: np.ndarray) -> np.ndarray:
    return np.sign(v) * np.floor(np.abs(v) + FP32(0.5))


def quantize(t, scheme: QuantScheme) -> QuantizedTensor:
    """Q(X) = round((X - min) / delta), delta = (max - min) / levels, per group."""
    x = T.as_fp32(t)
    x2 = _as_2d(x)
    tile = _tile(x2.shape, scheme)
    g, nbr, nbc = _grouped(x2, tile)
    with np.errstate(invalid="ignore"):
        mins = np.nanmin(g, axis=1).astype(FP32)
        maxs = np.nanmax(g, axis=1).astype(FP32)
    scales = ((maxs - mins) / FP32(scheme.levels)).astype(FP32)
    scale_full = _expand(scales, nbr, nbc, tile, x2.shape)
    min_full = _expand(mins, nbr, nbc, tile, x2.shape)
    safe = np.where(scale_full == 0, FP32(1.0), scale_full)
    codes = _round_half_away((x2 - min_full) / safe)
    codes = np.where(scale_full == 0, FP32(0.0), codes)
    codes = np.clip(codes, 0, 2 ** scheme.bits - 1).astype(np.uint8)
    return QuantizedTensor(codes.reshape(x.shape), scales, mins, scheme, tuple(x.shape))


def dequantize(q: QuantizedTensor) -> np.ndarray:
    """Q^-1(X_hat) = delta * X_hat + min, per group."""
    codes2 = _as_2d(q.codes)
    tile = _tile(codes2.shape, q.scheme)
    R, C = codes2.shape
    nbr, nbc = -(-R // tile[0]), -(-C // tile[1])
    scale_full = _expand(q.scales, nbr, nbc, tile, codes2.shape)
    min_full = _expand(q.mins, nbr, nbc, tile, codes2.shape)
    out = codes2.astype(FP32) * scale_full + min_full
    return out.reshape(q.shape)


def quantize_dequantize(t, scheme: QuantScheme) -> np.ndarray:
    return dequantize(quantize(t, scheme))


def group_steps(t, scheme: QuantScheme) -> np.ndarray:
    """Per-element quantization step (the delta of the element's group)."""
    q = quantize(t, scheme)
    codes2 = _as_2d(q.codes)
    tile = _tile(codes2.shape, scheme)
    R, C = codes2.shape
    nbr, nbc = -(-R // tile[0]), -(-C // tile[1])
    return _expand(q.scales, nbr, nbc, tile, codes2.shape).reshape(q.shape)


# ------------------------------------------------------------- activations

def _check_sa(a: np.ndarray, token: int, channel: int) -> None:
    if not (0 <= token < a.shape[0] and 0 <= channel < a.shape[1]):
        raise IndexError(f"super activation ({token}, {channel}) outside tensor {a.shape}")


def quantize_activation_restore(a, sa, bits: int = 8) -> np.ndarray:
    """Per-token RTN with the super activation held out.

    The element at (sa.token, sa.channel) is replaced by the median of ``a``
    before quantizing and written back with its original value afterwards.
    """
    x = T.as_fp32(a)
    if x.ndim != 2:
        raise ValueError("activations must be [tokens, channels]")
    t, c = sa.token, sa.channel
    _check_sa(x, t, c)
    held = x[t, c]
    replaced = np.array(x)
    replaced[t, c] = FP32(T.median(x))
    out = quantize_dequantize(replaced, QuantScheme(bits=bits, granularity="per_token"))
    out[t, c] = held
    return out


# ------------------------------------------------------------------ weights

def _restore_coords(restore: Iterable) -> list[tuple[int, int]]:
    out = []
    for r in restore:
        if hasattr(r, "row"):
            out.append((int(r.row), int(r.col)))
        else:
            out.append((int(r[0]), int(r[1])))
    return out


def clip_z(w, z: float) -> np.ndarray:
    """Clamp to [mu - z*sigma, mu + z*sigma] with whole-tensor mu, sigma."""
    if not z > 0:
        raise ValueError(f"z must be positive, got {z}")
    x = T.as_fp32(w)
    mu, sigma = T.mean_std(x)
    lo, hi = FP32(mu - z * sigma), FP32(mu + z * sigma)
    return np.clip(x, lo, hi)


def quantize_weight_clip_restore(w, scheme: QuantScheme) -> np.ndarray:
    """Clip_z, quantize/dequantize at the scheme granularity, restore SWs."""
    x = T.as_fp32(w)
    coords = _restore_coords(scheme.restore)
    for rc in coords:
        if len(rc) != x.ndim or any(not 0 <= i < s for i, s in zip(rc, x.shape)):
            raise IndexError(f"super weight {rc} outside tensor {x.shape}")
    clipped = clip_z(x, scheme.clip_z) if scheme.clip_z is not None else x
    out = quantize_dequantize(clipped, scheme)
    for rc in coords:
        out[rc] = x[rc]
    return out


def reconstruction_error(w: np.ndarray, w_hat: np.ndarray, calib: np.ndarray | None = None) -> float:
    """||W - W_hat||_F, or ||X W^T - X W_hat^T||_F over calibration rows X."""
    diff = np.asarray(w, dtype=np.float64) - np.asarray(w_hat, dtype=np.float64)
    if calib is None:
        return float(np.linalg.norm(diff))
    return float(np.linalg.norm(np.asarray(calib, dtype=np.float64) @ diff.T))


def tune_z(w, scheme: QuantScheme, calib: np.ndarray | None = None,
           grid: Sequence[float] | None = None) -> float:
    """Grid value of z with the least reconstruction error; ties go to the smaller z."""
    grid = DEFAULT_Z_GRID if grid is None else tuple(grid)
    if not grid:
        raise ValueError("z grid must be nonempty")
    best_z, best_err = None, np.inf
    for z in sorted(float(g) for g in grid):
        w_hat = quantize_weight_clip_restore(w, replace(scheme, clip_z=z))
        err = reconstruction_error(w, w_hat, calib)
        if err < best_err:
            best_z, best_err = z, err
    return best_z
