"""Dense float32 tensors and the layer operations a Darknet detector needs.

Activations are ``(channels, height, width)`` arrays and convolution weights
are ``(out, in, kh, kw)`` arrays, both float32 in C order. Every op returns a
new array and never mutates its inputs.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from ._validation import check_tensor
from .exceptions import ShapeError

DEFAULT_BN_EPSILON = 1e-5
DEFAULT_LEAKY_SLOPE = 0.1
# GEMM accumulator; float32 products are exact in float64, so the only error
# left is the final rounding of each output to float32
ACCUMULATE_DTYPE = np.float64

Tensor = np.ndarray


def as_tensor(data, shape=None) -> Tensor:
    """Build a tensor from nested values or a flat buffer plus ``shape``."""
    arr = np.asarray(data, dtype=np.float32)
    if shape is not None:
        shape = tuple(int(d) for d in shape)
        if int(np.prod(shape)) != arr.size:
            raise ShapeError(f"{arr.size} values cannot fill shape {shape}")
        arr = arr.reshape(shape)
    return check_tensor(arr)


def _readonly(arr):
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class BatchNorm:
    gamma: np.ndarray
    beta: np.ndarray
    rolling_mean: np.ndarray
    rolling_var: np.ndarray
    epsilon: float = DEFAULT_BN_EPSILON

    def __post_init__(self):
        vectors = [self.gamma, self.beta, self.rolling_mean, self.rolling_var]
        vectors = [_readonly(np.ravel(v)) for v in vectors]
        if len({v.size for v in vectors}) != 1:
            raise ShapeError("batchnorm vectors must share one length")
        if np.any(vectors[3] < 0):
            raise ValueError("rolling_var entries must be non-negative")
        if not self.epsilon > 0:
            raise ValueError("batchnorm epsilon must be positive")
        for name, v in zip(("gamma", "beta", "rolling_mean", "rolling_var"), vectors):
            object.__setattr__(self, name, v)


@dataclass(frozen=True)
class ConvParams:
    """Weights and geometry of one convolutional layer.

    When ``batchnorm`` is set the separate ``bias`` is ignored and the
    batchnorm ``beta`` provides the shift, as in Darknet weight files.
    """

    weights: np.ndarray
    bias: np.ndarray
    batchnorm: Optional[BatchNorm] = None
    stride: int = 1
    pad: int = 0
    activation: str = "linear"
    slope: float = DEFAULT_LEAKY_SLOPE

    def __post_init__(self):
        w = _readonly(self.weights)
        b = _readonly(np.ravel(self.bias))
        if w.ndim != 4:
            raise ShapeError(f"conv weights must be 4-d (o, i, kh, kw), got {w.shape}")
        if b.size != w.shape[0]:
            raise ShapeError(f"bias length {b.size} != out channels {w.shape[0]}")
        if self.batchnorm is not None and self.batchnorm.gamma.size != w.shape[0]:
            raise ShapeError(
                f"batchnorm length {self.batchnorm.gamma.size} != out channels {w.shape[0]}"
            )
        if self.stride < 1 or self.pad < 0:
            raise ValueError(f"invalid stride/pad {self.stride}/{self.pad}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def out_channels(self):
        return self.weights.shape[0]

    @property
    def in_channels(self):
        return self.weights.shape[1]

    @property
    def kernel(self):
        return self.weights.shape[2:]

    @property
    def n_params(self):
        n = self.weights.size
        return n + (4 * self.out_channels if self.batchnorm is not None else self.out_channels)


def conv_output_extent(size, kernel, stride, pad):
    """Spatial extent after a convolution (floored, as in Darknet), or None if empty."""
    span = size + 2 * pad - kernel
    if span < 0:
        return None
    return span // stride + 1


def conv2d(x: Tensor, params: ConvParams, layer=None, accumulate=None) -> Tensor:
    """Cross-correlate ``x`` with ``params``, apply batchnorm or bias, no activation.

    Lowered to a single GEMM over an im2col matrix; 1x1 stride-1 kernels skip
    the column copy. ``accumulate`` picks the GEMM dtype (default
    :data:`ACCUMULATE_DTYPE`); the result is always float32.
    """
    acc = np.dtype(accumulate or ACCUMULATE_DTYPE)
    x = check_tensor(x, ndim=3, layer=layer)
    w = params.weights
    o, c, kh, kw = w.shape
    if x.shape[0] != c:
        raise ShapeError(f"expected {c} input channels, got {x.shape[0]}", layer)
    _, h, wd = x.shape
    s, p = params.stride, params.pad
    oh = conv_output_extent(h, kh, s, p)
    ow = conv_output_extent(wd, kw, s, p)
    if oh is None or ow is None:
        raise ShapeError(
            f"kernel {kh}x{kw} stride {s} pad {p} does not tile input {h}x{wd}", layer
        )

    if kh == 1 and kw == 1 and s == 1 and p == 0:
        cols = x.reshape(c, h * wd).astype(acc, copy=False)
    else:
        xp = np.pad(x, ((0, 0), (p, p), (p, p))) if p else x
        cols = np.empty((c, kh, kw, oh, ow), dtype=acc)
        for i in range(kh):
            for j in range(kw):
                cols[:, i, j] = xp[:, i : i + s * oh : s, j : j + s * ow : s]
        cols = cols.reshape(c * kh * kw, oh * ow)
    out = (w.reshape(o, -1).astype(acc, copy=False) @ cols).reshape(o, oh, ow)

    bn = params.batchnorm
    if bn is None:
        out += params.bias.astype(acc)[:, None, None]
    else:
        scale = bn.gamma.astype(acc) / np.sqrt(bn.rolling_var.astype(acc) + acc.type(bn.epsilon))
        out -= bn.rolling_mean.astype(acc)[:, None, None]
        out *= scale[:, None, None]
        out += bn.beta.astype(acc)[:, None, None]
    return out.astype(np.float32, copy=False)


def fold_batchnorm(params: ConvParams) -> ConvParams:
    """Return equivalent params with batchnorm merged into weights and bias."""
    bn = params.batchnorm
    if bn is None:
        return params
    scale = (bn.gamma / np.sqrt(bn.rolling_var.astype(np.float64) + bn.epsilon)).astype(
        np.float64
    )
    weights = params.weights.astype(np.float64) * scale[:, None, None, None]
    bias = bn.beta.astype(np.float64) - bn.rolling_mean.astype(np.float64) * scale
    return replace(
        params,
        weights=weights.astype(np.float32),
        bias=bias.astype(np.float32),
        batchnorm=None,
    )


def leaky_relu(x: Tensor, slope: float = DEFAULT_LEAKY_SLOPE) -> Tensor:
    x = np.asarray(x, dtype=np.float32)
    return np.where(x > 0, x, x * np.float32(slope)).astype(np.float32)


def activate(x: Tensor, kind: str, slope: float = DEFAULT_LEAKY_SLOPE) -> Tensor:
    if kind == "linear":
        return x
    if kind == "leaky":
        return leaky_relu(x, slope)
    if kind == "relu":
        return np.maximum(x, np.float32(0))
    if kind == "logistic":
        with np.errstate(over="ignore"):
            return (1.0 / (1.0 + np.exp(-x))).astype(np.float32)
    raise ValueError(f"unsupported activation {kind!r}")


def upsample(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling: ``out[k, y, x] = in[k, y // f, x // f]``."""
    x = check_tensor(x, ndim=3)
    return np.repeat(np.repeat(x, factor, axis=1), factor, axis=2)


def upsample2x(x: Tensor) -> Tensor:
    return upsample(x, 2)


def shortcut_add(a: Tensor, b: Tensor, layer=None) -> Tensor:
    a = check_tensor(a, layer=layer)
    b = check_tensor(b, layer=layer)
    if a.shape != b.shape:
        raise ShapeError(f"shortcut operands differ: {a.shape} vs {b.shape}", layer)
    return a + b


def route_concat(inputs: Sequence[Tensor], layer=None) -> Tensor:
    if not inputs:
        raise ShapeError("route needs at least one input", layer)
    tensors = [check_tensor(t, ndim=3, layer=layer) for t in inputs]
    spatial = {t.shape[1:] for t in tensors}
    if len(spatial) != 1:
        raise ShapeError(f"route inputs disagree on height/width: {sorted(spatial)}", layer)
    if len(tensors) == 1:
        return tensors[0].copy()
    return np.concatenate(tensors, axis=0)
