"""Dynamic max-min activation quantizer.

Parameters are fit per call from the tensor's own range: the step is
s = (max - min) / (2^b - 1) and the offset z = floor(-min / s) in floor
mode (round-to-nearest in nearest mode). z is deliberately left unclamped
so that sign-definite inputs (all positive or all negative) still
reconstruct with per-element error below s; clamping z would shift the
whole tensor and break the error bound for such inputs.

bits=None is the identity configuration: no quantization at all. It is
what full-precision paths use, and it makes the reformulation-exactness
checks meaningful. bits=0 is reserved for the skip rule in the modulated
layer; the quantizer itself never runs at 0 bits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensorops import Tensor, as_tensor

GRANULARITIES = ("tensor", "channel")
ROUNDINGS = ("floor", "nearest")


@dataclass
class QuantConfig:
    bits: int | None = 8
    granularity: str = "tensor"
    axis: int = 1  # slice axis when granularity == "channel"
    rounding: str = "floor"
    skip_threshold: float = 0.0

    def __post_init__(self):
        if self.bits is not None and not 0 <= self.bits <= 16:
            raise ValueError(f"bits must be in 0..16 or None, got {self.bits}")
        if self.granularity not in GRANULARITIES:
            raise ValueError(f"granularity must be one of {GRANULARITIES}")
        if self.rounding not in ROUNDINGS:
            raise ValueError(f"rounding must be one of {ROUNDINGS}")
        if not self.skip_threshold >= 0.0:
            raise ValueError("skip_threshold must be >= 0")

    @property
    def is_identity(self) -> bool:
        return self.bits is None


@dataclass
class QuantParams:
    """Fitted step/offset pair; arrays so channel slices broadcast."""

    scale: np.ndarray       # () or (C,), >= 0; 0 marks a constant slice
    zero_point: np.ndarray  # int64, same shape as scale, unclamped
    bits: int
    axis: int | None = None  # None for tensor-wise params
    min_val: np.ndarray = field(default=None, repr=False)  # fitted per-slice min

    @property
    def is_degenerate(self) -> bool:
        return bool(np.any(self.scale == 0.0))


@dataclass
class QuantizedTensor:
    ints: np.ndarray  # int32 payload whatever the bit-width
    params: QuantParams

    @property
    def shape(self):
        return self.ints.shape


def _round_fn(rounding: str):
    if rounding == "floor":
        return np.floor
    if rounding == "nearest":
        return np.rint  # ties to even; odd-symmetric, which the edge analysis relies on
    raise ValueError(f"unknown rounding {rounding!r}")


def _slice_reduce(x: np.ndarray, axis: int, fn) -> np.ndarray:
    axes = tuple(i for i in range(x.ndim) if i != axis)
    return fn(x, axis=axes)


def _broadcastable(arr: np.ndarray, ndim: int, axis: int | None) -> np.ndarray:
    if axis is None:
        return arr
    shape = [1] * ndim
    shape[axis] = -1
    return arr.reshape(shape)


def fit_params(x: Tensor, cfg: QuantConfig) -> QuantParams:
    """Fit (scale, zero_point) from the tensor's own min/max."""
    if cfg.is_identity or cfg.bits == 0:
        raise ValueError(f"cannot fit parameters at bits={cfg.bits}")
    x = as_tensor(x)
    if x.size == 0:
        raise ValueError("cannot fit parameters on an empty tensor")
    if cfg.granularity == "channel":
        axis = cfg.axis % x.ndim
        mn = _slice_reduce(x, axis, np.min)
        mx = _slice_reduce(x, axis, np.max)
    else:
        axis = None
        mn = np.min(x)
        mx = np.max(x)
    mn = np.asarray(mn, dtype=np.float64)
    mx = np.asarray(mx, dtype=np.float64)
    levels = (1 << cfg.bits) - 1
    scale = (mx - mn) / levels
    rnd = _round_fn(cfg.rounding)
    safe = np.where(scale > 0.0, scale, 1.0)
    z = np.where(scale > 0.0, rnd(-mn / safe), 0.0)
    return QuantParams(
        scale=scale,
        zero_point=z.astype(np.int64),
        bits=cfg.bits,
        axis=axis,
        min_val=mn,
    )


def quantize(x: Tensor, params: QuantParams, rounding: str = "floor") -> QuantizedTensor:
    """Map to integers: clamp(round(x / s) + z, 0, 2^b - 1)."""
    x = as_tensor(x)
    s = _broadcastable(params.scale, x.ndim, params.axis)
    z = _broadcastable(params.zero_point, x.ndim, params.axis)
    rnd = _round_fn(rounding)
    top = (1 << params.bits) - 1
    safe = np.where(s > 0.0, s, 1.0)
    ints = np.clip(rnd(x / safe) + z, 0, top)
    # constant slices carry no information; park them at the zero point
    ints = np.where(np.broadcast_to(s > 0.0, x.shape), ints, np.broadcast_to(z, x.shape))
    return QuantizedTensor(ints=ints.astype(np.int32), params=params)


def dequantize(q: QuantizedTensor) -> Tensor:
    """Back to reals: s * (ints - z); constant slices return the fitted value."""
    p = q.params
    ndim = q.ints.ndim
    s = _broadcastable(p.scale, ndim, p.axis)
    z = _broadcastable(p.zero_point, ndim, p.axis)
    out = s * (q.ints.astype(np.float64) - z.astype(np.float64))
    if p.is_degenerate:
        if p.min_val is None:
            raise ValueError("degenerate params without a stored constant")
        mn = _broadcastable(np.asarray(p.min_val, dtype=np.float64), ndim, p.axis)
        out = np.where(s > 0.0, out, np.broadcast_to(mn, out.shape))
    return out


def fake_quant(x: Tensor, cfg: QuantConfig) -> Tensor:
    """Fit, quantize, dequantize in one go; identity config passes through."""
    x = as_tensor(x)
    if cfg.is_identity:
        return x.copy()
    return dequantize(quantize(x, fit_params(x, cfg), cfg.rounding))


def error_bound(x: Tensor, bits: int, rounding: str = "floor") -> float:
    """Worst-case squared reconstruction error for a tensor-wise fit.

    floor:   (max - min)^2 * d / (2^b - 1)^2
    nearest: a quarter of the floor bound
    """
    if not 1 <= bits <= 16:
        raise ValueError(f"bits must be in 1..16, got {bits}")
    x = as_tensor(x)
    rng2 = (float(np.max(x)) - float(np.min(x))) ** 2
    bound = rng2 * x.size / ((1 << bits) - 1) ** 2
    if rounding == "nearest":
        bound /= 4.0
    elif rounding != "floor":
        raise ValueError(f"unknown rounding {rounding!r}")
    return bound


def contraction_ratio(x: Tensor, qx: Tensor) -> float:
    """Measured per-call contraction ||x - Q(x)||^2 / ||x||^2 (0 for a zero input)."""
    denom = float(np.sum(x * x))
    if denom == 0.0:
        return 0.0
    diff = x - qx
    return float(np.sum(diff * diff)) / denom


def bits_for_contraction(d: int, c: float) -> int:
    """Smallest bit-width whose worst-case floor-mode contraction stays below c.

    Inverts the floor bound d * (range/levels)^2 <= c * ||x||^2 under the
    conservative range <= 2*||x||_inf <= 2*||x|| reading, giving
    ceil(log2(sqrt(4 d / c) + 1)).
    """
    if d < 1:
        raise ValueError(f"dimension must be positive, got {d}")
    if not 0.0 < c:
        raise ValueError(f"target contraction must be positive, got {c}")
    return int(math.ceil(math.log2(math.sqrt(4.0 * d / c) + 1.0)))
