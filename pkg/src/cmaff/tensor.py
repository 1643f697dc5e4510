"""Dense tensor substrate: storage types, pooling, affine layers, activations,
and the hand-derived adjoint of each primitive.

All values are immutable after construction and every operation is a pure
function, so everything here can be shared freely across threads.  Buffers are
float32 unless an explicit float64 ndarray is supplied; the float64 path exists
so gradient verification can re-run the forward graph in double precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import NumericError, ShapeError

__all__ = [
    "FeatureMap",
    "ChannelVector",
    "AffineLayer",
    "gap",
    "gmp",
    "sigmoid",
    "relu",
    "softmax_pair",
    "affine_apply",
    "gap_backward",
    "gmp_backward",
    "sigmoid_backward",
    "relu_backward",
    "softmax_pair_backward",
    "affine_backward",
    "grad_check",
]


def _freeze(data, name: str, ndim: int) -> np.ndarray:
    """Copy into an owned, read-only float buffer and validate finiteness."""
    if isinstance(data, np.ndarray) and data.dtype == np.float64:
        arr = np.array(data, dtype=np.float64)
    else:
        arr = np.array(data, dtype=np.float32)
    if arr.ndim != ndim:
        raise ShapeError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if arr.size == 0 or min(arr.shape) < 1:
        raise ShapeError(f"{name} dimensions must be positive, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise NumericError(f"{name} contains non-finite values")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class FeatureMap:
    """A dense C x H x W map, stored channel-major row-major."""

    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _freeze(self.data, "FeatureMap", 3))

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def astype(self, dtype) -> "FeatureMap":
        return FeatureMap(self.data.astype(dtype))


@dataclass(frozen=True)
class ChannelVector:
    """A per-channel descriptor of length C (pooled stats, logits, masks)."""

    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _freeze(self.data, "ChannelVector", 1))

    @property
    def length(self) -> int:
        return self.data.shape[0]

    def astype(self, dtype) -> "ChannelVector":
        return ChannelVector(self.data.astype(dtype))


@dataclass(frozen=True)
class AffineLayer:
    """out = weights @ v + bias; a 1x1 convolution on a C x 1 x 1 input is
    exactly this matrix-vector map, which is why no spatial kernel exists here.
    """

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        w = _freeze(self.weights, "AffineLayer.weights", 2)
        b = _freeze(self.bias, "AffineLayer.bias", 1)
        if b.shape[0] != w.shape[0]:
            raise ShapeError(
                f"bias length {b.shape[0]} does not match weight rows {w.shape[0]}"
            )
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    def astype(self, dtype) -> "AffineLayer":
        return AffineLayer(self.weights.astype(dtype), self.bias.astype(dtype))


# ---------------------------------------------------------------------------
# forward primitives
# ---------------------------------------------------------------------------


def gap(m: FeatureMap) -> ChannelVector:
    """Global average pooling over spatial positions.

    Accumulates in float64 so the mean never exceeds the max by rounding,
    then rounds back to the storage dtype.
    """
    out = m.data.mean(axis=(1, 2), dtype=np.float64).astype(m.data.dtype)
    return ChannelVector(out)


def gmp(m: FeatureMap) -> ChannelVector:
    """Global max pooling over spatial positions."""
    return ChannelVector(m.data.max(axis=(1, 2)))


def sigmoid(v: ChannelVector) -> ChannelVector:
    """Logistic function, branch-stable so large magnitudes saturate without
    overflow."""
    x = v.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return ChannelVector(out)


def relu(v: ChannelVector) -> ChannelVector:
    return ChannelVector(np.maximum(v.data, 0))


def softmax_pair(a: ChannelVector, b: ChannelVector) -> tuple[ChannelVector, ChannelVector]:
    """Two-way softmax, applied per channel across the pair (a[c], b[c]).

    Outputs sum to 1 per channel; computed with max-subtraction for stability.
    """
    if a.length != b.length:
        raise ShapeError(f"softmax_pair lengths differ: {a.length} vs {b.length}")
    hi = np.maximum(a.data, b.data)
    ea = np.exp(a.data - hi)
    eb = np.exp(b.data - hi)
    total = ea + eb
    return ChannelVector(ea / total), ChannelVector(eb / total)


def affine_apply(layer: AffineLayer, v: ChannelVector) -> ChannelVector:
    if v.length != layer.in_dim:
        raise ShapeError(
            f"affine input length {v.length} does not match in_dim {layer.in_dim}"
        )
    return ChannelVector(layer.weights @ v.data + layer.bias)


# ---------------------------------------------------------------------------
# adjoints, one per primitive so each is testable in isolation
# ---------------------------------------------------------------------------


def gap_backward(grad: ChannelVector, height: int, width: int) -> FeatureMap:
    """Adjoint of gap: spread each channel gradient uniformly over H*W cells."""
    scale = grad.data / (height * width)
    return FeatureMap(np.broadcast_to(scale[:, None, None], (grad.length, height, width)))


def gmp_backward(grad: ChannelVector, m: FeatureMap) -> FeatureMap:
    """Adjoint of gmp: route each channel gradient to the first spatial argmax."""
    if grad.length != m.channels:
        raise ShapeError("gmp_backward channel mismatch")
    out = np.zeros(m.shape, dtype=grad.data.dtype)
    flat = m.data.reshape(m.channels, -1)
    idx = flat.argmax(axis=1)
    out.reshape(m.channels, -1)[np.arange(m.channels), idx] = grad.data
    return FeatureMap(out)


def sigmoid_backward(grad: ChannelVector, out: ChannelVector) -> ChannelVector:
    """Adjoint of sigmoid expressed through its output: dy * y * (1 - y)."""
    return ChannelVector(grad.data * out.data * (1.0 - out.data))


def relu_backward(grad: ChannelVector, pre: ChannelVector) -> ChannelVector:
    return ChannelVector(grad.data * (pre.data > 0))


def softmax_pair_backward(
    grad_a: ChannelVector,
    grad_b: ChannelVector,
    out_a: ChannelVector,
    out_b: ChannelVector,
) -> tuple[ChannelVector, ChannelVector]:
    """Adjoint of softmax_pair; the two logit gradients are exact negatives."""
    d = (grad_a.data - grad_b.data) * out_a.data * out_b.data
    return ChannelVector(d), ChannelVector(-d)


def affine_backward(
    layer: AffineLayer, v: ChannelVector, grad_out: ChannelVector
) -> tuple[ChannelVector, np.ndarray, np.ndarray]:
    """Adjoint of affine_apply.

    Returns (grad wrt input, grad wrt weights, grad wrt bias).
    """
    if grad_out.length != layer.out_dim:
        raise ShapeError("affine_backward output-gradient length mismatch")
    grad_v = ChannelVector(layer.weights.T @ grad_out.data)
    grad_w = np.outer(grad_out.data, v.data)
    grad_b = grad_out.data.copy()
    return grad_v, grad_w, grad_b


# ---------------------------------------------------------------------------
# finite-difference verification harness
# ---------------------------------------------------------------------------


def grad_check(
    f: Callable[[np.ndarray], float],
    grad: Callable[[np.ndarray], np.ndarray],
    x0,
    step: float = 1e-5,
) -> float:
    """Compare an analytic gradient against central finite differences.

    Everything is evaluated in float64.  Returns the worst coordinate's
    |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.array(x0, dtype=np.float64)
    g = np.asarray(grad(x), dtype=np.float64)
    if g.shape != x.shape:
        raise ShapeError(f"gradient shape {g.shape} does not match point shape {x.shape}")
    worst = 0.0
    for i in range(x.size):
        xp = x.copy()
        xp.flat[i] += step
        xm = x.copy()
        xm.flat[i] -= step
        fp = float(f(xp))
        fm = float(f(xm))
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericError(f"objective is non-finite near coordinate {i}")
        numeric = (fp - fm) / (2.0 * step)
        analytic = float(g.flat[i])
        err = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
        if err > worst:
            worst = err
    return worst
