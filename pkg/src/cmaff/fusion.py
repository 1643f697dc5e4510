"""Cross-modality attentive fusion of paired RGB/thermal feature maps.

Two channel-attention stages operate on the decomposition of the pair into a
common component (sum) and a differential component (difference):

* the differential stage derives a gate in (0, 1) from the difference map and
  amplifies both streams with a residual gain of (1 + gate), so neither stream
  is ever attenuated below its input scale;
* the common stage derives one logit per stream from the summed map and
  converts them into a per-channel two-way softmax, convexly reweighting the
  streams against each other.

The stages can be wired in parallel (summed or concat-projected) or
sequentially in either order.  In the sequential wirings each stage is
dual-input dual-output: it hands its two per-stream maps, not their sum, to
the next stage, and only the final stage's pair is summed.

All parameters are immutable after initialization; ``fuse`` and
``fuse_backward`` are pure functions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, FormatError, ShapeError
from .ften import read_ften, write_ften
from .tensor import (
    AffineLayer,
    ChannelVector,
    FeatureMap,
    affine_apply,
    affine_backward,
    gap,
    gap_backward,
    gmp,
    gmp_backward,
    grad_check,
    relu,
    relu_backward,
    sigmoid,
    softmax_pair,
    softmax_pair_backward,
)

__all__ = [
    "CSM_REDUCTION",
    "Arrangement",
    "DemParams",
    "CsmParams",
    "ConcatReduceParams",
    "CmaffParams",
    "FusionMasks",
    "AffineGrads",
    "CmaffGrads",
    "bottleneck_width",
    "decompose",
    "dem_attention",
    "dem_forward",
    "csm_attention",
    "csm_forward",
    "fuse",
    "fuse_with_masks",
    "fuse_backward",
    "param_count",
    "init_params",
    "params_to_vector",
    "vector_to_params",
    "grads_to_vector",
    "save_params",
    "load_params",
    "check_gradients",
]

# the shared first layer of the common stage reduces to 1/32 of the input
CSM_REDUCTION = 32

_BASE_PARAM_NAMES = [
    "dem.reduce.w",
    "dem.reduce.b",
    "dem.expand.w",
    "dem.expand.b",
    "csm.shared.w",
    "csm.shared.b",
    "csm.rgb.w",
    "csm.rgb.b",
    "csm.ir.w",
    "csm.ir.b",
]


def bottleneck_width(channels: int, ratio: int) -> int:
    """Hidden width of a squeeze layer: ceil(C / ratio), floored at 1."""
    if channels < 1 or ratio < 1:
        raise ConfigError(f"channels and ratio must be >= 1, got {channels}, {ratio}")
    return max(1, math.ceil(channels / ratio))


class Arrangement(Enum):
    """How the differential and common stages are wired together."""

    PARALLEL = "parallel"
    PARALLEL_CONCAT = "parallel-concat"
    COMMON_FIRST = "csm-dem"
    DIFFERENTIAL_FIRST = "dem-csm"


@dataclass(frozen=True)
class DemParams:
    """Shared squeeze/expand bottleneck of the differential stage."""

    reduce: AffineLayer
    expand: AffineLayer
    r_dem: int

    def __post_init__(self):
        channels = self.reduce.in_dim
        hidden = bottleneck_width(channels, self.r_dem)
        if self.reduce.out_dim != hidden or self.expand.in_dim != hidden:
            raise ShapeError(
                f"differential bottleneck width must be {hidden} for C={channels}, "
                f"r={self.r_dem}"
            )
        if self.expand.out_dim != channels:
            raise ShapeError("differential expand layer must restore C outputs")

    @property
    def channels(self) -> int:
        return self.reduce.in_dim

    def astype(self, dtype) -> "DemParams":
        return DemParams(self.reduce.astype(dtype), self.expand.astype(dtype), self.r_dem)


@dataclass(frozen=True)
class CsmParams:
    """Shared first layer plus two per-stream branch layers of the common stage."""

    shared: AffineLayer
    branch_rgb: AffineLayer
    branch_ir: AffineLayer

    def __post_init__(self):
        channels = self.shared.in_dim
        hidden = bottleneck_width(channels, CSM_REDUCTION)
        if self.shared.out_dim != hidden:
            raise ShapeError(f"common shared layer must output {hidden} for C={channels}")
        for name, layer in (("rgb", self.branch_rgb), ("ir", self.branch_ir)):
            if layer.in_dim != hidden or layer.out_dim != channels:
                raise ShapeError(f"common {name} branch must map {hidden} -> {channels}")

    @property
    def channels(self) -> int:
        return self.shared.in_dim

    def astype(self, dtype) -> "CsmParams":
        return CsmParams(
            self.shared.astype(dtype),
            self.branch_rgb.astype(dtype),
            self.branch_ir.astype(dtype),
        )


@dataclass(frozen=True)
class ConcatReduceParams:
    """Per-pixel 2C -> C projection used by the concat variant."""

    project: AffineLayer

    def __post_init__(self):
        if self.project.in_dim != 2 * self.project.out_dim:
            raise ShapeError("concat projection must map 2C -> C")

    @property
    def channels(self) -> int:
        return self.project.out_dim

    def astype(self, dtype) -> "ConcatReduceParams":
        return ConcatReduceParams(self.project.astype(dtype))


@dataclass(frozen=True)
class CmaffParams:
    """All learnable weights of one fusion block."""

    channels: int
    dem: DemParams
    csm: CsmParams
    concat_reduce: Optional[ConcatReduceParams] = None
    seed: int = 0

    def __post_init__(self):
        if self.dem.channels != self.channels or self.csm.channels != self.channels:
            raise ShapeError("stage parameter widths disagree with channels")
        if self.concat_reduce is not None and self.concat_reduce.channels != self.channels:
            raise ShapeError("concat projection width disagrees with channels")

    def astype(self, dtype) -> "CmaffParams":
        concat = None if self.concat_reduce is None else self.concat_reduce.astype(dtype)
        return CmaffParams(self.channels, self.dem.astype(dtype), self.csm.astype(dtype), concat, self.seed)


@dataclass(frozen=True)
class FusionMasks:
    """The per-channel attention vectors a fuse call actually applied."""

    diff: ChannelVector
    rgb: ChannelVector
    ir: ChannelVector


@dataclass
class AffineGrads:
    weights: np.ndarray
    bias: np.ndarray


@dataclass
class CmaffGrads:
    """Parameter gradients mirroring CmaffParams layer by layer."""

    dem_reduce: AffineGrads
    dem_expand: AffineGrads
    csm_shared: AffineGrads
    csm_rgb: AffineGrads
    csm_ir: AffineGrads
    concat: Optional[AffineGrads] = None


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def _require_same_shape(fr: FeatureMap, ft: FeatureMap) -> None:
    if fr.shape != ft.shape:
        raise ShapeError(f"stream shapes differ: {fr.shape} vs {ft.shape}")


def decompose(fr: FeatureMap, ft: FeatureMap) -> tuple[FeatureMap, FeatureMap]:
    """Split a pair into its common (sum) and differential (difference) parts.

    Halving each part and adding/subtracting reconstructs the inputs exactly.
    """
    _require_same_shape(fr, ft)
    return FeatureMap(fr.data + ft.data), FeatureMap(fr.data - ft.data)


def _squeeze_expand(p: DemParams, pooled: ChannelVector) -> ChannelVector:
    return affine_apply(p.expand, relu(affine_apply(p.reduce, pooled)))


def dem_attention(fr: FeatureMap, ft: FeatureMap, p: DemParams) -> ChannelVector:
    """Per-channel gate in (0, 1) derived from the difference of the streams.

    Average- and max-pooled descriptors of the difference map pass through the
    shared bottleneck; their logits are summed and squashed.
    """
    _require_same_shape(fr, ft)
    if p.channels != fr.channels:
        raise ShapeError(f"params expect C={p.channels}, inputs have C={fr.channels}")
    diff = FeatureMap(fr.data - ft.data)
    logits_avg = _squeeze_expand(p, gap(diff))
    logits_max = _squeeze_expand(p, gmp(diff))
    return sigmoid(ChannelVector(logits_avg.data + logits_max.data))


def dem_forward(fr: FeatureMap, ft: FeatureMap, p: DemParams) -> tuple[FeatureMap, FeatureMap]:
    """Amplify both streams by (1 + gate); returned unsummed so sequential
    wirings can keep the two modalities separate."""
    mask = dem_attention(fr, ft, p)
    gain = (1.0 + mask.data)[:, None, None]
    return FeatureMap(fr.data * gain), FeatureMap(ft.data * gain)


def csm_attention(fr: FeatureMap, ft: FeatureMap, p: CsmParams) -> tuple[ChannelVector, ChannelVector]:
    """Convex per-channel selection weights for the two streams.

    One pooled descriptor of the summed map feeds the shared layer; the two
    branch layers produce one logit per stream, normalized so the pair sums
    to 1 in every channel.
    """
    _require_same_shape(fr, ft)
    if p.channels != fr.channels:
        raise ShapeError(f"params expect C={p.channels}, inputs have C={fr.channels}")
    pooled = gap(FeatureMap(fr.data + ft.data))
    hidden = relu(affine_apply(p.shared, pooled))
    logits_rgb = affine_apply(p.branch_rgb, hidden)
    logits_ir = affine_apply(p.branch_ir, hidden)
    return softmax_pair(logits_rgb, logits_ir)


def csm_forward(fr: FeatureMap, ft: FeatureMap, p: CsmParams) -> tuple[FeatureMap, FeatureMap]:
    """Reweight each stream by its selection mask; returned unsummed."""
    mask_rgb, mask_ir = csm_attention(fr, ft, p)
    return (
        FeatureMap(fr.data * mask_rgb.data[:, None, None]),
        FeatureMap(ft.data * mask_ir.data[:, None, None]),
    )


def _concat_project(p: ConcatReduceParams, top: FeatureMap, bottom: FeatureMap) -> FeatureMap:
    stacked = np.concatenate([top.data, bottom.data], axis=0)
    out = np.einsum("oc,chw->ohw", p.project.weights, stacked)
    out = out + p.project.bias[:, None, None]
    return FeatureMap(out)


def fuse_with_masks(
    fr: FeatureMap, ft: FeatureMap, p: CmaffParams, arrangement: Arrangement
) -> tuple[FeatureMap, FusionMasks]:
    """Fuse a pair and also report the attention vectors that were applied."""
    _require_same_shape(fr, ft)
    if arrangement is Arrangement.PARALLEL:
        er, et = dem_forward(fr, ft, p.dem)
        sr, st = csm_forward(fr, ft, p.csm)
        out = FeatureMap((er.data + et.data) + (sr.data + st.data))
        diff = dem_attention(fr, ft, p.dem)
        rgb, ir = csm_attention(fr, ft, p.csm)
    elif arrangement is Arrangement.PARALLEL_CONCAT:
        if p.concat_reduce is None:
            raise ConfigError("parallel-concat needs concat_reduce parameters")
        er, et = dem_forward(fr, ft, p.dem)
        sr, st = csm_forward(fr, ft, p.csm)
        out = _concat_project(
            p.concat_reduce,
            FeatureMap(er.data + et.data),
            FeatureMap(sr.data + st.data),
        )
        diff = dem_attention(fr, ft, p.dem)
        rgb, ir = csm_attention(fr, ft, p.csm)
    elif arrangement is Arrangement.COMMON_FIRST:
        sr, st = csm_forward(fr, ft, p.csm)
        er, et = dem_forward(sr, st, p.dem)
        out = FeatureMap(er.data + et.data)
        rgb, ir = csm_attention(fr, ft, p.csm)
        diff = dem_attention(sr, st, p.dem)
    elif arrangement is Arrangement.DIFFERENTIAL_FIRST:
        er, et = dem_forward(fr, ft, p.dem)
        sr, st = csm_forward(er, et, p.csm)
        out = FeatureMap(sr.data + st.data)
        diff = dem_attention(fr, ft, p.dem)
        rgb, ir = csm_attention(er, et, p.csm)
    else:  # pragma: no cover - enum is closed
        raise ConfigError(f"unknown arrangement {arrangement}")
    return out, FusionMasks(diff=diff, rgb=rgb, ir=ir)


def fuse(fr: FeatureMap, ft: FeatureMap, p: CmaffParams, arrangement: Arrangement) -> FeatureMap:
    return fuse_with_masks(fr, ft, p, arrangement)[0]


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def _dem_backward(
    fr: FeatureMap, ft: FeatureMap, p: DemParams, g_er: np.ndarray, g_et: np.ndarray
) -> tuple[np.ndarray, np.ndarray, AffineGrads, AffineGrads]:
    """Adjoint of dem_forward for upstream gradients on its two outputs."""
    diff = FeatureMap(fr.data - ft.data)
    pooled_avg = gap(diff)
    pooled_max = gmp(diff)
    pre_avg = affine_apply(p.reduce, pooled_avg)
    hid_avg = relu(pre_avg)
    pre_max = affine_apply(p.reduce, pooled_max)
    hid_max = relu(pre_max)
    logits = ChannelVector(
        affine_apply(p.expand, hid_avg).data + affine_apply(p.expand, hid_max).data
    )
    mask = sigmoid(logits)

    gain = (1.0 + mask.data)[:, None, None]
    d_fr = g_er * gain
    d_ft = g_et * gain
    g_mask = (g_er * fr.data).sum(axis=(1, 2)) + (g_et * ft.data).sum(axis=(1, 2))
    g_logits = sigmoid_backward(ChannelVector(g_mask), mask)

    g_hid_avg, gw_e1, gb_e1 = affine_backward(p.expand, hid_avg, g_logits)
    g_pre_avg = relu_backward(g_hid_avg, pre_avg)
    g_pool_avg, gw_r1, gb_r1 = affine_backward(p.reduce, pooled_avg, g_pre_avg)

    g_hid_max, gw_e2, gb_e2 = affine_backward(p.expand, hid_max, g_logits)
    g_pre_max = relu_backward(g_hid_max, pre_max)
    g_pool_max, gw_r2, gb_r2 = affine_backward(p.reduce, pooled_max, g_pre_max)

    g_diff = (
        gap_backward(g_pool_avg, diff.height, diff.width).data
        + gmp_backward(g_pool_max, diff).data
    )
    d_fr = d_fr + g_diff
    d_ft = d_ft - g_diff
    return (
        d_fr,
        d_ft,
        AffineGrads(gw_r1 + gw_r2, gb_r1 + gb_r2),
        AffineGrads(gw_e1 + gw_e2, gb_e1 + gb_e2),
    )


def _csm_backward(
    fr: FeatureMap, ft: FeatureMap, p: CsmParams, g_sr: np.ndarray, g_st: np.ndarray
) -> tuple[np.ndarray, np.ndarray, AffineGrads, AffineGrads, AffineGrads]:
    """Adjoint of csm_forward for upstream gradients on its two outputs."""
    common = FeatureMap(fr.data + ft.data)
    pooled = gap(common)
    pre = affine_apply(p.shared, pooled)
    hidden = relu(pre)
    logits_rgb = affine_apply(p.branch_rgb, hidden)
    logits_ir = affine_apply(p.branch_ir, hidden)
    mask_rgb, mask_ir = softmax_pair(logits_rgb, logits_ir)

    d_fr = g_sr * mask_rgb.data[:, None, None]
    d_ft = g_st * mask_ir.data[:, None, None]
    g_mask_rgb = ChannelVector((g_sr * fr.data).sum(axis=(1, 2)))
    g_mask_ir = ChannelVector((g_st * ft.data).sum(axis=(1, 2)))
    g_logit_rgb, g_logit_ir = softmax_pair_backward(g_mask_rgb, g_mask_ir, mask_rgb, mask_ir)

    g_hid_rgb, gw_rgb, gb_rgb = affine_backward(p.branch_rgb, hidden, g_logit_rgb)
    g_hid_ir, gw_ir, gb_ir = affine_backward(p.branch_ir, hidden, g_logit_ir)
    g_pre = relu_backward(ChannelVector(g_hid_rgb.data + g_hid_ir.data), pre)
    g_pooled, gw_sh, gb_sh = affine_backward(p.shared, pooled, g_pre)

    g_common = gap_backward(g_pooled, common.height, common.width).data
    d_fr = d_fr + g_common
    d_ft = d_ft + g_common
    return (
        d_fr,
        d_ft,
        AffineGrads(gw_sh, gb_sh),
        AffineGrads(gw_rgb, gb_rgb),
        AffineGrads(gw_ir, gb_ir),
    )


def fuse_backward(
    fr: FeatureMap,
    ft: FeatureMap,
    p: CmaffParams,
    arrangement: Arrangement,
    upstream: FeatureMap,
) -> tuple[FeatureMap, FeatureMap, CmaffGrads]:
    """Exact adjoint of ``fuse``: gradients for both inputs and all parameters.

    The forward graph is recomputed internally, including the attention paths
    through pooling, the softmax pair, and the sigmoid gate.
    """
    _require_same_shape(fr, ft)
    if upstream.shape != fr.shape:
        raise ShapeError(
            f"upstream shape {upstream.shape} does not match output shape {fr.shape}"
        )
    up = upstream.data
    concat_grads: Optional[AffineGrads] = None

    if arrangement is Arrangement.PARALLEL:
        d_fr1, d_ft1, g_red, g_exp = _dem_backward(fr, ft, p.dem, up, up)
        d_fr2, d_ft2, g_sh, g_rgb, g_ir = _csm_backward(fr, ft, p.csm, up, up)
        d_fr = d_fr1 + d_fr2
        d_ft = d_ft1 + d_ft2
    elif arrangement is Arrangement.PARALLEL_CONCAT:
        if p.concat_reduce is None:
            raise ConfigError("parallel-concat needs concat_reduce parameters")
        er, et = dem_forward(fr, ft, p.dem)
        sr, st = csm_forward(fr, ft, p.csm)
        stacked = np.concatenate([er.data + et.data, sr.data + st.data], axis=0)
        weights = p.concat_reduce.project.weights
        g_cat = np.einsum("oc,ohw->chw", weights, up)
        concat_grads = AffineGrads(
            np.einsum("ohw,chw->oc", up, stacked), up.sum(axis=(1, 2))
        )
        c = p.channels
        d_fr1, d_ft1, g_red, g_exp = _dem_backward(fr, ft, p.dem, g_cat[:c], g_cat[:c])
        d_fr2, d_ft2, g_sh, g_rgb, g_ir = _csm_backward(fr, ft, p.csm, g_cat[c:], g_cat[c:])
        d_fr = d_fr1 + d_fr2
        d_ft = d_ft1 + d_ft2
    elif arrangement is Arrangement.COMMON_FIRST:
        sr, st = csm_forward(fr, ft, p.csm)
        d_sr, d_st, g_red, g_exp = _dem_backward(sr, st, p.dem, up, up)
        d_fr, d_ft, g_sh, g_rgb, g_ir = _csm_backward(fr, ft, p.csm, d_sr, d_st)
    elif arrangement is Arrangement.DIFFERENTIAL_FIRST:
        er, et = dem_forward(fr, ft, p.dem)
        d_er, d_et, g_sh, g_rgb, g_ir = _csm_backward(er, et, p.csm, up, up)
        d_fr, d_ft, g_red, g_exp = _dem_backward(fr, ft, p.dem, d_er, d_et)
    else:  # pragma: no cover - enum is closed
        raise ConfigError(f"unknown arrangement {arrangement}")

    grads = CmaffGrads(
        dem_reduce=g_red,
        dem_expand=g_exp,
        csm_shared=g_sh,
        csm_rgb=g_rgb,
        csm_ir=g_ir,
        concat=concat_grads,
    )
    return FeatureMap(d_fr), FeatureMap(d_ft), grads


# ---------------------------------------------------------------------------
# parameter accounting, initialization, serialization
# ---------------------------------------------------------------------------


def param_count(channels: int, r_dem: int = 16, use_concat: bool = False) -> int:
    """Closed-form scalar parameter count of one block (weights plus biases)."""
    hd = bottleneck_width(channels, r_dem)
    hc = bottleneck_width(channels, CSM_REDUCTION)
    total = (hd * channels + hd) + (channels * hd + channels)  # squeeze + expand
    total += (hc * channels + hc) + 2 * (channels * hc + channels)  # shared + branches
    if use_concat:
        total += 2 * channels * channels + channels
    return total


def _xavier(rng: np.random.Generator, out_dim: int, in_dim: int) -> AffineLayer:
    limit = math.sqrt(6.0 / (in_dim + out_dim))
    weights = rng.uniform(-limit, limit, size=(out_dim, in_dim)).astype(np.float32)
    return AffineLayer(weights, np.zeros(out_dim, dtype=np.float32))


def init_params(
    channels: int, r_dem: int = 16, seed: int = 0, use_concat: bool = False
) -> CmaffParams:
    """Deterministic seeded initialization: uniform Xavier weights, zero biases.

    Draw order is fixed (differential squeeze, differential expand, common
    shared, common rgb branch, common ir branch, then the optional concat
    projection) so a given seed yields bit-identical buffers regardless of the
    concat flag.
    """
    rng = np.random.default_rng(seed)
    hd = bottleneck_width(channels, r_dem)
    hc = bottleneck_width(channels, CSM_REDUCTION)
    dem = DemParams(_xavier(rng, hd, channels), _xavier(rng, channels, hd), r_dem)
    csm = CsmParams(
        _xavier(rng, hc, channels),
        _xavier(rng, channels, hc),
        _xavier(rng, channels, hc),
    )
    concat = ConcatReduceParams(_xavier(rng, channels, 2 * channels)) if use_concat else None
    return CmaffParams(channels, dem, csm, concat, seed)


def _param_items(p: CmaffParams) -> list[tuple[str, np.ndarray]]:
    items = [
        ("dem.reduce.w", p.dem.reduce.weights),
        ("dem.reduce.b", p.dem.reduce.bias),
        ("dem.expand.w", p.dem.expand.weights),
        ("dem.expand.b", p.dem.expand.bias),
        ("csm.shared.w", p.csm.shared.weights),
        ("csm.shared.b", p.csm.shared.bias),
        ("csm.rgb.w", p.csm.branch_rgb.weights),
        ("csm.rgb.b", p.csm.branch_rgb.bias),
        ("csm.ir.w", p.csm.branch_ir.weights),
        ("csm.ir.b", p.csm.branch_ir.bias),
    ]
    if p.concat_reduce is not None:
        items.append(("concat.w", p.concat_reduce.project.weights))
        items.append(("concat.b", p.concat_reduce.project.bias))
    return items


def _grad_items(g: CmaffGrads) -> list[tuple[str, np.ndarray]]:
    items = [
        ("dem.reduce.w", g.dem_reduce.weights),
        ("dem.reduce.b", g.dem_reduce.bias),
        ("dem.expand.w", g.dem_expand.weights),
        ("dem.expand.b", g.dem_expand.bias),
        ("csm.shared.w", g.csm_shared.weights),
        ("csm.shared.b", g.csm_shared.bias),
        ("csm.rgb.w", g.csm_rgb.weights),
        ("csm.rgb.b", g.csm_rgb.bias),
        ("csm.ir.w", g.csm_ir.weights),
        ("csm.ir.b", g.csm_ir.bias),
    ]
    if g.concat is not None:
        items.append(("concat.w", g.concat.weights))
        items.append(("concat.b", g.concat.bias))
    return items


def params_to_vector(p: CmaffParams) -> np.ndarray:
    """Flatten all parameters in manifest order (float64)."""
    return np.concatenate([arr.ravel().astype(np.float64) for _, arr in _param_items(p)])


def grads_to_vector(g: CmaffGrads) -> np.ndarray:
    return np.concatenate([np.asarray(arr, dtype=np.float64).ravel() for _, arr in _grad_items(g)])


def vector_to_params(vec: np.ndarray, template: CmaffParams) -> CmaffParams:
    """Rebuild parameters from a flat vector, using the template's shapes."""
    vec = np.asarray(vec)
    arrays = []
    pos = 0
    for _, arr in _param_items(template):
        n = arr.size
        arrays.append(vec[pos : pos + n].reshape(arr.shape))
        pos += n
    if pos != vec.size:
        raise ShapeError(f"vector length {vec.size} does not match parameter count {pos}")
    dem = DemParams(
        AffineLayer(arrays[0], arrays[1]), AffineLayer(arrays[2], arrays[3]), template.dem.r_dem
    )
    csm = CsmParams(
        AffineLayer(arrays[4], arrays[5]),
        AffineLayer(arrays[6], arrays[7]),
        AffineLayer(arrays[8], arrays[9]),
    )
    concat = None
    if template.concat_reduce is not None:
        concat = ConcatReduceParams(AffineLayer(arrays[10], arrays[11]))
    return CmaffParams(template.channels, dem, csm, concat, template.seed)


def save_params(p: CmaffParams, manifest_path) -> None:
    """Write each layer as an FTEN file next to a manifest of (name, file) pairs."""
    manifest_path = Path(manifest_path)
    lines = []
    for name, arr in _param_items(p):
        filename = f"{manifest_path.stem}.{name}.ften"
        write_ften(manifest_path.parent / filename, arr)
        lines.append(f"{name} {filename}")
    manifest_path.write_text("\n".join(lines) + "\n")


def _recover_ratio(channels: int, hidden: int) -> int:
    ratio = max(1, math.ceil(channels / hidden))
    if bottleneck_width(channels, ratio) != hidden:
        raise FormatError(
            f"no reduction ratio yields hidden width {hidden} for C={channels}"
        )
    return ratio


def load_params(manifest_path) -> CmaffParams:
    """Load a parameter bundle written by save_params."""
    manifest_path = Path(manifest_path)
    entries = []
    for raw in manifest_path.read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise FormatError(f"{manifest_path}: bad manifest line {raw!r}")
        entries.append((parts[0], parts[1]))
    names = [name for name, _ in entries]
    full = _BASE_PARAM_NAMES + ["concat.w", "concat.b"]
    if names != _BASE_PARAM_NAMES and names != full:
        raise FormatError(f"{manifest_path}: unexpected entry order {names}")
    tensors = {name: read_ften(manifest_path.parent / fname) for name, fname in entries}
    dem_reduce = AffineLayer(tensors["dem.reduce.w"], tensors["dem.reduce.b"])
    channels = dem_reduce.in_dim
    r_dem = _recover_ratio(channels, dem_reduce.out_dim)
    dem = DemParams(dem_reduce, AffineLayer(tensors["dem.expand.w"], tensors["dem.expand.b"]), r_dem)
    csm = CsmParams(
        AffineLayer(tensors["csm.shared.w"], tensors["csm.shared.b"]),
        AffineLayer(tensors["csm.rgb.w"], tensors["csm.rgb.b"]),
        AffineLayer(tensors["csm.ir.w"], tensors["csm.ir.b"]),
    )
    concat = None
    if "concat.w" in tensors:
        concat = ConcatReduceParams(AffineLayer(tensors["concat.w"], tensors["concat.b"]))
    return CmaffParams(channels, dem, csm, concat, 0)


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------


def _kink_margins(fr: np.ndarray, ft: np.ndarray, p: CmaffParams) -> float:
    """Smallest distance of the raw-input graph to a max/relu kink."""
    diff = FeatureMap(fr - ft)
    flat = np.sort(diff.data.reshape(diff.channels, -1), axis=1)
    margin = float((flat[:, -1] - flat[:, -2]).min())
    for pooled in (gap(diff), gmp(diff)):
        pre = affine_apply(p.dem.reduce, pooled)
        margin = min(margin, float(np.abs(pre.data).min()))
    common = FeatureMap(fr + ft)
    pre = affine_apply(p.csm.shared, gap(common))
    margin = min(margin, float(np.abs(pre.data).min()))
    return margin


def _draw_inputs(
    channels: int, height: int, width: int, seed: int, p: CmaffParams
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # redraw (deterministically) if a kink sits too close for finite differences
    for attempt in range(64):
        rng = np.random.default_rng([seed, attempt])
        fr = rng.standard_normal((channels, height, width))
        ft = rng.standard_normal((channels, height, width))
        upstream = rng.standard_normal((channels, height, width))
        if _kink_margins(fr, ft, p) > 1e-3:
            return fr, ft, upstream
    return fr, ft, upstream


def _check_one(
    channels: int,
    height: int,
    width: int,
    arrangement: Arrangement,
    seed: int,
    step: float,
    r_dem: int,
) -> float:
    use_concat = arrangement is Arrangement.PARALLEL_CONCAT
    p64 = init_params(channels, r_dem=r_dem, seed=seed, use_concat=use_concat).astype(np.float64)
    fr, ft, upstream = _draw_inputs(channels, height, width, seed, p64)
    n = channels * height * width
    x0 = np.concatenate([fr.ravel(), ft.ravel(), params_to_vector(p64)])

    def unpack(x: np.ndarray) -> tuple[FeatureMap, FeatureMap, CmaffParams]:
        fr_ = FeatureMap(x[:n].reshape(channels, height, width))
        ft_ = FeatureMap(x[n : 2 * n].reshape(channels, height, width))
        return fr_, ft_, vector_to_params(x[2 * n :], p64)

    def objective(x: np.ndarray) -> float:
        fr_, ft_, p_ = unpack(x)
        return float((upstream * fuse(fr_, ft_, p_, arrangement).data).sum())

    def analytic(x: np.ndarray) -> np.ndarray:
        fr_, ft_, p_ = unpack(x)
        g_fr, g_ft, g_p = fuse_backward(fr_, ft_, p_, arrangement, FeatureMap(upstream))
        return np.concatenate([g_fr.data.ravel(), g_ft.data.ravel(), grads_to_vector(g_p)])

    return grad_check(objective, analytic, x0, step)


def check_gradients(
    channels: int,
    height: int,
    width: int,
    arrangement: Arrangement,
    seeds,
    step: float = 1e-5,
    r_dem: int = 16,
) -> list[float]:
    """Per-seed worst relative error of fuse_backward vs central differences."""
    return [
        _check_one(channels, height, width, arrangement, seed, step, r_dem)
        for seed in seeds
    ]
