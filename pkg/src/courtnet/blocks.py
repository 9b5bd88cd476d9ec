"""Transformer building blocks operating on patch features [B, P, D].

Blocks are plain functions of ``(input, params, prefix)`` where ``params`` maps
dotted names to :class:`~courtnet.tensor.Tensor`.  Each ``init_*`` helper
writes freshly initialized parameters for its block under ``prefix``.

Attention functions accept an optional ``trace`` dict; when given, the
attention maps (numpy arrays) are stored in it for later analysis.
"""
from __future__ import annotations

import math
from typing import MutableMapping, Mapping

import numpy as np

from . import tensor as T
from .config import EmbedConfig
from .tensor import ShapeError, Tensor

Params = Mapping[str, Tensor]


def _param(params: MutableMapping[str, Tensor], name: str, value: np.ndarray) -> None:
    if name in params:
        raise KeyError(f"duplicate parameter {name}")
    params[name] = Tensor(value, requires_grad=True, name=name)


def init_linear(params, name: str, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True) -> None:
    # variance scaled by fan-in
    _param(params, f"{name}.w", rng.standard_normal((d_in, d_out)) / math.sqrt(d_in))
    if bias:
        _param(params, f"{name}.b", np.zeros(d_out))


def init_layernorm(params, name: str, dim: int) -> None:
    _param(params, f"{name}.w", np.ones(dim))
    _param(params, f"{name}.b", np.zeros(dim))


def _linear(x: Tensor, params: Params, name: str) -> Tensor:
    return T.linear(x, params[f"{name}.w"], params.get(f"{name}.b"))


def _layernorm(x: Tensor, params: Params, name: str) -> Tensor:
    return T.layernorm(x, -1, 1e-5, params[f"{name}.w"], params[f"{name}.b"])


# ---------------------------------------------------------------------------
# patch embedding
# ---------------------------------------------------------------------------
def init_patch_embed(params, prefix: str, cfg: EmbedConfig, rng: np.random.Generator) -> None:
    init_linear(params, f"{prefix}.proj", cfg.patch_pixels, cfg.embed_dim, rng)
    _param(params, f"{prefix}.pos", 0.02 * rng.standard_normal((cfg.num_patches, cfg.embed_dim)))


def patch_embed(image: Tensor, cfg: EmbedConfig, params: Params, prefix: str = "embed") -> Tensor:
    """[B,1,H,W] -> [B,P,C]: linear projection of each patch's pixels plus a position table."""
    image = T._as_tensor(image)
    if image.ndim != 4 or image.shape[1:] != (1, cfg.image_h, cfg.image_w):
        raise ShapeError(f"expected [B,1,{cfg.image_h},{cfg.image_w}] image, got {image.shape}")
    patches = T.unfold_patches(image, cfg.grid)
    return _linear(patches, params, f"{prefix}.proj") + params[f"{prefix}.pos"]


def init_patch_deembed(params, prefix: str, cfg: EmbedConfig, width: int, rng, out_bias: float = 0.0) -> None:
    init_linear(params, f"{prefix}.proj", width, cfg.patch_pixels, rng)
    params[f"{prefix}.proj.b"].data[:] = out_bias


def patch_deembed(feat: Tensor, cfg: EmbedConfig, params: Params, prefix: str = "deembed") -> Tensor:
    """[B,P,C] -> [B,1,H,W] probabilities: per-patch projection to pixels, regridded, sigmoid."""
    if feat.ndim != 3 or feat.shape[1] != cfg.num_patches:
        raise ShapeError(f"expected [B,{cfg.num_patches},C] features, got {feat.shape}")
    logits = _linear(feat, params, f"{prefix}.proj")
    return T.sigmoid(T.fold_patches(logits, cfg.grid, cfg.image_h, cfg.image_w))


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------
def init_attention(params, prefix: str, dim: int, rng: np.random.Generator) -> None:
    for part in ("q", "k", "v", "o"):
        init_linear(params, f"{prefix}.{part}", dim, dim, rng)


def coarse_attention(x: Tensor, params: Params, prefix: str, heads: int, trace: dict | None = None) -> Tensor:
    """Patch-level multi-head attention; each head's map is P x P.

    The width D is split into ``heads`` groups of D/heads channels and every
    group attends over patches with softmax(Q K^T / sqrt(D/heads)).
    """
    B, P, D = x.shape
    if D % heads:
        raise ShapeError(f"{heads} heads do not divide width {D}")
    dh = D // heads

    def split(t: Tensor) -> Tensor:
        return t.reshape(B, P, heads, dh).transpose(0, 2, 1, 3)

    q = split(_linear(x, params, f"{prefix}.q"))
    k = split(_linear(x, params, f"{prefix}.k"))
    v = split(_linear(x, params, f"{prefix}.v"))
    out, maps = T.attention(q, k, v, 1.0 / math.sqrt(dh))
    if trace is not None:
        trace["coarse"] = maps
    out = out.transpose(0, 2, 1, 3).reshape(B, P, D)
    return _linear(out, params, f"{prefix}.o")


def fine_attention(x: Tensor, params: Params, prefix: str, groups: int, trace: dict | None = None) -> Tensor:
    """Channel-axis attention inside groups of patches; each group's map is D x D.

    Patches are split into ``groups`` consecutive runs of P/groups rows.  Within
    run k the map is softmax(Q_k^T K_k / sqrt(P/groups)) over the key-channel
    axis and the output is V_k A_k^T.
    """
    B, P, D = x.shape
    if P % groups:
        raise ShapeError(f"{groups} groups do not divide patch count {P}")
    rows = P // groups

    def split_t(t: Tensor) -> Tensor:
        # [B,P,D] -> [B,groups,D,rows]: channels become the attending axis
        return t.reshape(B, groups, rows, D).transpose(0, 1, 3, 2)

    q = split_t(_linear(x, params, f"{prefix}.q"))
    k = split_t(_linear(x, params, f"{prefix}.k"))
    v = split_t(_linear(x, params, f"{prefix}.v"))
    # (A V^T)^T == V A^T
    out, maps = T.attention(q, k, v, 1.0 / math.sqrt(rows))
    if trace is not None:
        trace["fine"] = maps
    out = out.transpose(0, 1, 3, 2).reshape(B, P, D)
    return _linear(out, params, f"{prefix}.o")


def init_feed_forward(params, prefix: str, dim: int, rng: np.random.Generator, expansion: int = 4) -> None:
    init_linear(params, f"{prefix}.fc1", dim, expansion * dim, rng)
    init_linear(params, f"{prefix}.fc2", expansion * dim, dim, rng)


def feed_forward(x: Tensor, params: Params, prefix: str) -> Tensor:
    return _linear(T.gelu(_linear(x, params, f"{prefix}.fc1")), params, f"{prefix}.fc2")


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------
def init_denseblock(params, prefix: str, in_width: int, growth: int, rng: np.random.Generator) -> None:
    init_linear(params, f"{prefix}.proj", in_width, growth, rng)
    init_layernorm(params, f"{prefix}.ln1", growth)
    init_attention(params, f"{prefix}.coarse", growth, rng)
    init_layernorm(params, f"{prefix}.ln2", growth)
    init_feed_forward(params, f"{prefix}.ffn1", growth, rng)
    init_layernorm(params, f"{prefix}.ln3", growth)
    init_attention(params, f"{prefix}.fine", growth, rng)
    init_layernorm(params, f"{prefix}.ln4", growth)
    init_feed_forward(params, f"{prefix}.ffn2", growth, rng)


def denseblock(
    feat: Tensor,
    params: Params,
    prefix: str,
    heads: int,
    groups: int,
    trace: dict | None = None,
) -> Tensor:
    """[B,P,C] -> [B,P,C+growth]; the input channels pass through untouched.

    The input is projected to the working width, refined by pre-norm residual
    coarse attention, feed-forward, fine attention and feed-forward, then
    appended to the input along the channel axis.
    """
    h = _linear(feat, params, f"{prefix}.proj")
    h = h + coarse_attention(_layernorm(h, params, f"{prefix}.ln1"), params, f"{prefix}.coarse", heads, trace)
    h = h + feed_forward(_layernorm(h, params, f"{prefix}.ln2"), params, f"{prefix}.ffn1")
    if trace is not None:
        trace["fine_input"] = h.data
    h = h + fine_attention(_layernorm(h, params, f"{prefix}.ln3"), params, f"{prefix}.fine", groups, trace)
    h = h + feed_forward(_layernorm(h, params, f"{prefix}.ln4"), params, f"{prefix}.ffn2")
    return T.concat([feat, h], axis=-1)


def init_vit_block(params, prefix: str, dim: int, rng: np.random.Generator) -> None:
    init_layernorm(params, f"{prefix}.ln1", dim)
    init_attention(params, f"{prefix}.attn", dim, rng)
    init_layernorm(params, f"{prefix}.ln2", dim)
    init_feed_forward(params, f"{prefix}.ffn", dim, rng)


def vit_block(x: Tensor, params: Params, prefix: str, heads: int, trace: dict | None = None) -> Tensor:
    """Constant-width pre-norm block: attention then feed-forward, both residual."""
    x = x + coarse_attention(_layernorm(x, params, f"{prefix}.ln1"), params, f"{prefix}.attn", heads, trace)
    return x + feed_forward(_layernorm(x, params, f"{prefix}.ln2"), params, f"{prefix}.ffn")
