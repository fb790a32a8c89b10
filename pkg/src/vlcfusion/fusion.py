"""Condition-aware fusion blocks and the four baseline fusion blocks.

Feature maps are ``(B, C, H, W)`` arrays. Every public operation accepts
plain numpy arrays or :class:`~vlcfusion.autodiff.Var` nodes: with plain
arrays in, a plain array comes out; if any input or weight is a ``Var``
the result is a ``Var`` wired into the autodiff graph, which is how the
detector trains these blocks.

The VLC block is ``concat -> CBAM -> FiLM``:

    F   = [A; B]
    F'  = Mc(F) * F
    F'' = Ms(F') * F'
    out = (1 + gamma(r)) * F'' + beta(r)

with ``Mc`` the channel mask, ``Ms`` the spatial mask and ``gamma``,
``beta`` per-channel outputs of two small MLPs over the condition
vector ``r``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Var

log = logging.getLogger(__name__)

VARIANTS = ("vlc", "concat_conv", "concat_conv_selfattn", "cbam_only", "learnable_align")

SPATIAL_KERNEL = 7


class FusionShapeError(ValueError):
    """Raised when feature maps, conditions or weights have incompatible shapes."""


@dataclass
class FusionBlockParams:
    """Learned weights of one fusion block plus the dimensions they imply.

    ``weights`` maps names to arrays; which names exist depends on the
    variant (see :func:`init_fusion_params`).
    """

    variant: str
    c_a: int
    c_b: int
    c_out: int
    n_conditions: int = 0
    reduction: int = 16
    out_depth: int = 0
    seed: int | None = None
    weights: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def c_fused(self) -> int:
        return self.c_a + self.c_b

    def copy(self) -> "FusionBlockParams":
        return FusionBlockParams(
            self.variant, self.c_a, self.c_b, self.c_out, self.n_conditions,
            self.reduction, self.out_depth, self.seed,
            {k: v.copy() for k, v in self.weights.items()},
        )

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.weights.values()))


# =============================================================================
# construction
# =============================================================================


def channel_hidden(c_fused: int, reduction: int) -> int:
    return max(c_fused // reduction, 1)


def film_hidden(n_conditions: int) -> int:
    return max(2 * n_conditions, 32)


def _he(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


def init_fusion_params(
    variant: str,
    c_a: int,
    c_b: int,
    c_out: int | None = None,
    *,
    n_conditions: int = 0,
    reduction: int = 16,
    out_depth: int | None = None,
    seed: int = 0,
    dtype=np.float64,
    zero_film: bool = True,
) -> FusionBlockParams:
    """Randomly initialise a fusion block.

    ``c_out`` defaults to ``c_a + c_b``. ``out_depth`` is the number of
    3x3 convolutions applied after CBAM: 1 for ``cbam_only`` and 0 for
    ``vlc`` by default. With ``zero_film`` the last FiLM layers start at
    zero so the VLC block begins as a plain CBAM block.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown fusion variant {variant!r}; expected one of {VARIANTS}")
    if min(c_a, c_b) < 1:
        raise FusionShapeError(f"channel counts must be >= 1, got c_a={c_a}, c_b={c_b}")
    c = c_a + c_b
    c_out = c if c_out is None else int(c_out)
    if variant == "vlc" and n_conditions < 1:
        raise FusionShapeError("the vlc variant needs n_conditions >= 1")
    if out_depth is None:
        out_depth = {"cbam_only": 1}.get(variant, 0)
    if variant == "vlc" and out_depth == 0:
        c_out = c
    rng = np.random.default_rng(seed)
    w: dict[str, np.ndarray] = {}

    if variant in ("vlc", "cbam_only"):
        hid = channel_hidden(c, reduction)
        for path in ("avg", "max"):
            w[f"ca_{path}_w1"] = _he(rng, (hid, c), c, dtype)
            w[f"ca_{path}_b1"] = np.zeros(hid, dtype)
            w[f"ca_{path}_w2"] = _he(rng, (c, hid), hid, dtype)
            w[f"ca_{path}_b2"] = np.zeros(c, dtype)
        w["sa_w"] = _he(rng, (1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL), 2 * SPATIAL_KERNEL**2, dtype)
        w["sa_b"] = np.zeros(1, dtype)
        c_in = c
        for i in range(out_depth):
            w[f"out_w{i}"] = _he(rng, (c_out, c_in, 3, 3), 9 * c_in, dtype)
            w[f"out_b{i}"] = np.zeros(c_out, dtype)
            c_in = c_out
    if variant == "vlc":
        k, hid = n_conditions, film_hidden(n_conditions)
        for head in ("gamma", "beta"):
            w[f"film_{head}_w1"] = _he(rng, (hid, k), k, dtype)
            w[f"film_{head}_b1"] = np.zeros(hid, dtype)
            w[f"film_{head}_w2"] = (
                np.zeros((c, hid), dtype) if zero_film else _he(rng, (c, hid), hid, dtype) * 0.1
            )
            w[f"film_{head}_b2"] = np.zeros(c, dtype)
    if variant in ("concat_conv", "concat_conv_selfattn"):
        w["conv_w"] = _he(rng, (c_out, c, 3, 3), 9 * c, dtype)
        w["conv_b"] = np.zeros(c_out, dtype)
    if variant == "concat_conv_selfattn":
        for name in ("q", "k", "v"):
            w[f"attn_{name}"] = (rng.standard_normal((c_out, c_out)) / math.sqrt(c_out)).astype(dtype)
    if variant == "learnable_align":
        d = c_out
        w["xa_q_w"] = _he(rng, (d, c_a, 1, 1), c_a, dtype)
        w["xa_q_b"] = np.zeros(d, dtype)
        for name in ("k", "v"):
            w[f"xa_{name}_w"] = _he(rng, (d, c_b, 1, 1), c_b, dtype)
            w[f"xa_{name}_b"] = np.zeros(d, dtype)
        w["xa_out_w"] = _he(rng, (c_out, d + c_a, 1, 1), d + c_a, dtype)
        w["xa_out_b"] = np.zeros(c_out, dtype)

    return FusionBlockParams(variant, c_a, c_b, c_out, n_conditions, reduction, out_depth, seed, w)


# =============================================================================
# helpers
# =============================================================================


def _weights(params) -> Mapping[str, np.ndarray | Var]:
    if isinstance(params, FusionBlockParams):
        return params.weights
    return params


def _wants_var(*items) -> bool:
    for it in items:
        if isinstance(it, Var):
            return True
        if isinstance(it, Mapping) and any(isinstance(v, Var) for v in it.values()):
            return True
    return False


def _finish(out: Var, *sources):
    return out if _wants_var(*sources) else out.data


def _check_feature_map(x, name: str) -> Var:
    v = ad.as_var(x)
    if v.ndim != 4:
        raise FusionShapeError(f"{name} must be (B, C, H, W), got shape {v.shape}")
    if min(v.shape) < 1:
        raise FusionShapeError(f"{name} has an empty dimension: {v.shape}")
    if not np.all(np.isfinite(v.data)):
        raise FusionShapeError(f"{name} contains non-finite entries")
    return v


def _check_compatible(a: Var, b: Var) -> None:
    for axis, label in ((0, "B"), (2, "H"), (3, "W")):
        if a.shape[axis] != b.shape[axis]:
            raise FusionShapeError(
                f"feature maps are not concat-compatible: {label} differs ({a.shape[axis]} vs {b.shape[axis]})"
            )


def _need(w, name: str, shape0: int | None = None, what: str = ""):
    if name not in w:
        raise FusionShapeError(f"missing weight {name!r}{' for ' + what if what else ''}")
    v = ad.as_var(w[name])
    if shape0 is not None and v.shape[-1] != shape0:
        raise FusionShapeError(f"weight {name!r} expects input dim {v.shape[-1]}, got {shape0}")
    return v


def encode_conditions(values: Sequence[bool | None], dtype=np.float64) -> np.ndarray:
    """Encode boolean answers as 1.0/0.0; unknown (``None``) becomes 0.0."""
    out = np.zeros(len(values), dtype=dtype)
    unknown = 0
    for i, v in enumerate(values):
        if v is None:
            unknown += 1
        elif v:
            out[i] = 1.0
    if unknown:
        log.info("encoded %d unknown condition answer(s) as 0.0", unknown)
    return out


def _condition_matrix(r, batch: int, k: int) -> Var:
    rv = ad.as_var(r)
    if rv.ndim == 1:
        rv = ad.reshape(rv, (1, -1))
        if batch != 1:
            rv = ad.mul(rv, np.ones((batch, 1), dtype=rv.dtype))
    if rv.ndim != 2 or rv.shape[1] != k:
        raise FusionShapeError(f"condition vector must have length K={k}, got shape {rv.shape}")
    if rv.shape[0] != batch:
        raise FusionShapeError(f"condition batch {rv.shape[0]} does not match feature batch {batch}")
    return rv


def resize_bilinear(x: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of a (B, C, H, W) array with half-pixel centres.

    Fusion blocks require equal spatial extents; callers align modalities
    with this before fusing.
    """
    x = np.asarray(x)
    H, W = x.shape[2:]
    oh, ow = size

    def coords(n_in, n_out):
        c = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        c = np.clip(c, 0, n_in - 1)
        lo = np.floor(c).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, c - lo

    y0, y1, fy = coords(H, oh)
    x0, x1, fx = coords(W, ow)
    top = x[:, :, y0][:, :, :, x0] * (1 - fx) + x[:, :, y0][:, :, :, x1] * fx
    bot = x[:, :, y1][:, :, :, x0] * (1 - fx) + x[:, :, y1][:, :, :, x1] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


# =============================================================================
# building blocks (Var in, Var out)
# =============================================================================


def _mlp(x: Var, w, prefix: str) -> Var:
    h = ad.relu(ad.linear(x, _need(w, f"{prefix}_w1", x.shape[-1]), _need(w, f"{prefix}_b1")))
    return ad.linear(h, _need(w, f"{prefix}_w2"), _need(w, f"{prefix}_b2"))


def _channel_attention(f: Var, w) -> Var:
    B, C = f.shape[:2]
    avg = ad.mean(f, axis=(2, 3))
    mx = ad.amax(f, axis=(2, 3))
    logits = ad.add(_mlp(avg, w, "ca_avg"), _mlp(mx, w, "ca_max"))
    if logits.shape[1] != C:
        raise FusionShapeError(f"channel MLP outputs {logits.shape[1]} channels, feature map has {C}")
    return ad.reshape(ad.sigmoid(logits, open_interval=True), (B, C, 1, 1))


def _spatial_attention(f: Var, w) -> Var:
    pooled = ad.concat([ad.mean(f, axis=1, keepdims=True), ad.amax(f, axis=1, keepdims=True)], axis=1)
    kernel = _need(w, "sa_w")
    if kernel.shape[:2] != (1, 2):
        raise FusionShapeError(f"spatial kernel must be (1, 2, k, k), got {kernel.shape}")
    pad = kernel.shape[2] // 2
    return ad.sigmoid(ad.conv2d(pooled, kernel, _need(w, "sa_b"), stride=1, pad=pad), open_interval=True)


def _cbam(f: Var, w) -> Var:
    f1 = ad.mul(_channel_attention(f, w), f)
    return ad.mul(_spatial_attention(f1, w), f1)


def _film(f: Var, r, w) -> Var:
    B, C = f.shape[:2]
    k = _need(w, "film_gamma_w1").shape[1]
    rv = _condition_matrix(r, B, k)
    gamma = _mlp(rv, w, "film_gamma")
    beta = _mlp(rv, w, "film_beta")
    if gamma.shape[1] != C:
        raise FusionShapeError(f"FiLM produces {gamma.shape[1]} channels, feature map has {C}")
    gamma = ad.reshape(gamma, (B, C, 1, 1))
    beta = ad.reshape(beta, (B, C, 1, 1))
    return ad.add(ad.mul(ad.add(gamma, 1.0), f), beta)


def _out_stack(x: Var, w) -> Var:
    i = 0
    while f"out_w{i}" in w:
        if i > 0:
            x = ad.relu(x)
        x = ad.conv2d(x, _need(w, f"out_w{i}"), _need(w, f"out_b{i}"), stride=1, pad=1)
        i += 1
    return x


def _concat_conv(a: Var, b: Var, w) -> Var:
    f = ad.concat([a, b], axis=1)
    return ad.conv2d(f, _need(w, "conv_w"), _need(w, "conv_b"), stride=1, pad=1)


def _self_attention(y: Var, w) -> Var:
    B, C, H, W = y.shape
    x = ad.transpose(ad.reshape(y, (B, C, H * W)), (0, 2, 1))
    q = ad.linear(x, _need(w, "attn_q", C))
    k = ad.linear(x, _need(w, "attn_k", C))
    v = ad.linear(x, _need(w, "attn_v", C))
    att = ad.softmax(ad.mul(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(C)), axis=-1)
    z = ad.add(x, ad.matmul(att, v))
    return ad.reshape(ad.transpose(z, (0, 2, 1)), (B, C, H, W))


def _cross_attention(a: Var, b: Var, w) -> Var:
    B, Ca, H, W = a.shape
    Hb, Wb = b.shape[2:]
    if Hb * Wb == 0:
        raise FusionShapeError("key/value feature map has no spatial cells")
    q = ad.conv2d(a, _need(w, "xa_q_w"), _need(w, "xa_q_b"))
    k = ad.conv2d(b, _need(w, "xa_k_w"), _need(w, "xa_k_b"))
    v = ad.conv2d(b, _need(w, "xa_v_w"), _need(w, "xa_v_b"))
    d = q.shape[1]
    if k.shape[1] != d or v.shape[1] != d:
        raise FusionShapeError(f"projection dims differ: q={d}, k={k.shape[1]}, v={v.shape[1]}")
    qf = ad.transpose(ad.reshape(q, (B, d, H * W)), (0, 2, 1))
    kf = ad.reshape(k, (B, d, Hb * Wb))
    vf = ad.transpose(ad.reshape(v, (B, d, Hb * Wb)), (0, 2, 1))
    att = ad.softmax(ad.mul(ad.matmul(qf, kf), 1.0 / math.sqrt(d)), axis=-1)
    attended = ad.reshape(ad.transpose(ad.matmul(att, vf), (0, 2, 1)), (B, d, H, W))
    return ad.conv2d(ad.concat([attended, a], axis=1), _need(w, "xa_out_w"), _need(w, "xa_out_b"))


# =============================================================================
# public operations
# =============================================================================


def concat_features(a, b):
    """Stack two feature maps along channels, ``a`` first."""
    av, bv = _check_feature_map(a, "a"), _check_feature_map(b, "b")
    _check_compatible(av, bv)
    return _finish(ad.concat([av, bv], axis=1), a, b)


def channel_attention(f, params):
    """Channel mask ``sigmoid(MLP_avg(avgpool F) + MLP_max(maxpool F))``, shape (B, C, 1, 1)."""
    w = _weights(params)
    return _finish(_channel_attention(_check_feature_map(f, "f"), w), f, w)


def spatial_attention(f, params):
    """Spatial mask from a 7x7 conv over channel-wise [mean; max] maps, shape (B, 1, H, W)."""
    w = _weights(params)
    return _finish(_spatial_attention(_check_feature_map(f, "f"), w), f, w)


def cbam(f, params):
    w = _weights(params)
    return _finish(_cbam(_check_feature_map(f, "f"), w), f, w)


def film_modulate(f, r, params):
    """Per-channel affine modulation ``(1 + gamma(r)) * f + beta(r)``.

    ``r`` is (B, K) or a single (K,) vector shared by the batch.
    """
    w = _weights(params)
    return _finish(_film(_check_feature_map(f, "f"), r, w), f, r, w)


def vlc_fuse(a, b, r, params):
    """Concatenate, apply CBAM, then FiLM-modulate with the condition vector ``r``."""
    if r is None:
        raise FusionShapeError("vlc fusion requires a condition vector")
    w = _weights(params)
    av, bv = _check_feature_map(a, "a"), _check_feature_map(b, "b")
    _check_compatible(av, bv)
    out = _film(_cbam(ad.concat([av, bv], axis=1), w), r, w)
    return _finish(_out_stack(out, w), a, b, r, w)


def concat_conv_fuse(a, b, params):
    """Concatenation followed by one 3x3 convolution (Fusion SSD style)."""
    w = _weights(params)
    av, bv = _check_feature_map(a, "a"), _check_feature_map(b, "b")
    _check_compatible(av, bv)
    return _finish(_concat_conv(av, bv, w), a, b, w)


def self_attention_fuse(a, b, params):
    """:func:`concat_conv_fuse` followed by residual single-head self-attention over positions."""
    w = _weights(params)
    av, bv = _check_feature_map(a, "a"), _check_feature_map(b, "b")
    _check_compatible(av, bv)
    return _finish(_self_attention(_concat_conv(av, bv, w), w), a, b, w)


def cbam_fuse(a, b, params):
    """Concatenation, CBAM and the output convolution stack (RGB-X style)."""
    w = _weights(params)
    av, bv = _check_feature_map(a, "a"), _check_feature_map(b, "b")
    _check_compatible(av, bv)
    return _finish(_out_stack(_cbam(ad.concat([av, bv], axis=1), w), w), a, b, w)


def cross_attention_fuse(a, b, params):
    """Cells of ``a`` attend over all cells of ``b``; the result is joined with ``a``
    and reduced by a 1x1 convolution."""
    w = _weights(params)
    av, bv = _check_feature_map(a, "a"), _check_feature_map(b, "b")
    if av.shape[0] != bv.shape[0]:
        raise FusionShapeError(f"feature maps differ in B ({av.shape[0]} vs {bv.shape[0]})")
    return _finish(_cross_attention(av, bv, w), a, b, w)


def fuse(variant: str, a, b, r=None, params=None):
    """Dispatch to the fusion operation named by ``variant``."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown fusion variant {variant!r}; expected one of {VARIANTS}")
    if params is None:
        raise ValueError("fuse() needs params")
    if variant == "vlc":
        if r is None:
            raise FusionShapeError("variant 'vlc' requires a condition vector r")
        return vlc_fuse(a, b, r, params)
    if r is not None:
        raise ValueError(f"variant {variant!r} takes no condition vector")
    if variant == "concat_conv":
        return concat_conv_fuse(a, b, params)
    if variant == "concat_conv_selfattn":
        return self_attention_fuse(a, b, params)
    if variant == "cbam_only":
        return cbam_fuse(a, b, params)
    return cross_attention_fuse(a, b, params)
