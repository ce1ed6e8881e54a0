"""Spatially separable attention: windowed local attention plus a global
stage that attends to a strided-convolution summary of the grid.

Tokens live on an L x L grid with an embedding per cell. The local stage
(:func:`lsa_forward`) runs full multi-head attention independently inside
non-overlapping W x W windows. The global stage (:func:`gsa_forward`)
subsamples the grid with a W-strided W x W convolution down to an m x m
feature map (m = L/W) and lets every grid token attend to those m*m
summaries. :func:`attention_flops` gives the exact multiply-accumulate
counts for both stages; the engine's instrumented counter must agree with
it, which the tests enforce.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import Conv2d, Linear
from .tensor import ShapeMismatchError, Tensor, matmul, reshape, scale, softmax, transpose


@dataclass(frozen=True)
class AttentionConfig:
    """Geometry of the separable attention: grid side, window side, embed dim, heads."""

    grid: int
    window: int
    embed_dim: int
    heads: int

    def __post_init__(self):
        if self.grid % self.window != 0:
            raise ValueError(f"grid {self.grid} not divisible by window {self.window}")
        if self.embed_dim % self.heads != 0:
            raise ValueError(f"embed dim {self.embed_dim} not divisible by heads {self.heads}")

    @property
    def windows_per_side(self) -> int:
        return self.grid // self.window

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads


class MhaWeights:
    """Q/K/V projections and the output projection of one attention layer.

    Each projection is stored as a single [d, d] matrix; head ``n`` owns the
    contiguous column slice ``n*head_dim:(n+1)*head_dim``, so permuting head
    weight sets is a column permutation.
    """

    def __init__(self, query: Linear, key: Linear, value: Linear, out: Linear):
        self.query = query
        self.key = key
        self.value = value
        self.out = out

    @classmethod
    def create(cls, rng: np.random.Generator, embed_dim: int, name: str,
               dtype=np.float32) -> "MhaWeights":
        return cls(
            Linear.create(rng, embed_dim, embed_dim, f"{name}.query", dtype),
            Linear.create(rng, embed_dim, embed_dim, f"{name}.key", dtype),
            Linear.create(rng, embed_dim, embed_dim, f"{name}.value", dtype),
            Linear.create(rng, embed_dim, embed_dim, f"{name}.out", dtype),
        )

    def named_params(self):
        out = []
        for lin in (self.query, self.key, self.value, self.out):
            out.extend(lin.named_params())
        return out


def window_partition(x: Tensor, window: int) -> Tensor:
    """Split [b, L, L, d] into non-overlapping tiles, flattened per window.

    Returns [b*m*m, W*W, d] with windows ordered row-major; exact inverse of
    :func:`window_merge`.
    """
    b, rows, cols, d = x.shape
    if rows != cols:
        raise ShapeMismatchError(f"window_partition: grid must be square, got {x.shape}")
    if rows % window != 0:
        raise ShapeMismatchError(f"window_partition: grid {rows} not divisible by window {window}")
    m = rows // window
    tiles = reshape(x, (b, m, window, m, window, d))
    tiles = transpose(tiles, (0, 1, 3, 2, 4, 5))
    return reshape(tiles, (b * m * m, window * window, d))


def window_merge(x: Tensor, grid: int, window: int) -> Tensor:
    """Inverse of :func:`window_partition`; returns [b, L, L, d]."""
    m = grid // window
    total, tokens, d = x.shape
    if tokens != window * window or total % (m * m) != 0:
        raise ShapeMismatchError(f"window_merge: shape {x.shape} inconsistent with grid {grid}, window {window}")
    b = total // (m * m)
    tiles = reshape(x, (b, m, m, window, window, d))
    tiles = transpose(tiles, (0, 1, 3, 2, 4, 5))
    return reshape(tiles, (b, grid, grid, d))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    x = reshape(x, (b, n, heads, d // heads))
    return transpose(x, (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, heads, n, hd = x.shape
    x = transpose(x, (0, 2, 1, 3))
    return reshape(x, (b, n, heads * hd))


def attention_mix(q: Tensor, k: Tensor, v: Tensor, weights: MhaWeights,
                  heads: int, tag_prefix: str = "") -> Tensor:
    """Concatenated per-head attention outputs, before the output projection.

    Per head: scores = Q K^T / sqrt(head_dim), row-softmax, then value
    aggregation. Head ``n`` of the result is exactly head ``n``'s weight
    slice at work, so permuting head weight sets permutes the output slices.
    """
    d = q.shape[-1]
    if k.shape[-1] != d or v.shape[-1] != d:
        raise ShapeMismatchError(f"attention: embed dims differ: {q.shape}, {k.shape}, {v.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeMismatchError(f"attention: key/value token counts differ: {k.shape} vs {v.shape}")
    if d % heads != 0:
        raise ShapeMismatchError(f"attention: embed dim {d} not divisible by {heads} heads")

    qh = _split_heads(weights.query(q, tag=f"{tag_prefix}projections"), heads)
    kh = _split_heads(weights.key(k, tag=f"{tag_prefix}projections"), heads)
    vh = _split_heads(weights.value(v, tag=f"{tag_prefix}projections"), heads)

    head_dim = d // heads
    scores = matmul(qh, transpose(kh, (0, 1, 3, 2)), tag=f"{tag_prefix}score")
    attn = softmax(scale(scores, 1.0 / np.sqrt(head_dim)), axis=-1)
    mixed = matmul(attn, vh, tag=f"{tag_prefix}aggregate")
    return _merge_heads(mixed)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, weights: MhaWeights,
                         heads: int, tag_prefix: str = "") -> Tensor:
    """Scaled dot-product attention over token tensors [batch, tokens, d].

    Key and value token counts must agree; queries may differ.
    """
    mixed = attention_mix(q, k, v, weights, heads, tag_prefix)
    return weights.out(mixed, tag=f"{tag_prefix}projections")


def lsa_forward(x: Tensor, config: AttentionConfig, weights: MhaWeights) -> Tensor:
    """Locally grouped self-attention on [b, L, L, d]: windows never interact."""
    tiles = window_partition(x, config.window)
    mixed = multi_head_attention(tiles, tiles, tiles, weights, config.heads,
                                 tag_prefix="lsa_")
    return window_merge(mixed, config.grid, config.window)


def gsa_forward(x: Tensor, config: AttentionConfig, weights: MhaWeights,
                subsample_conv: Conv2d) -> Tensor:
    """Global sub-sampled attention on [b, L, L, d].

    One strided convolution summarizes each window into a single feature
    token; the shared m*m summary map provides both keys and values, while
    every grid token queries it.
    """
    b, rows, cols, d = x.shape
    m = config.windows_per_side
    kernel_shape = subsample_conv.kernel.shape
    if kernel_shape[2] != config.window or subsample_conv.stride != config.window:
        raise ShapeMismatchError(
            f"gsa: subsample conv kernel {kernel_shape[2:]} / stride {subsample_conv.stride} "
            f"must both equal window {config.window}")

    features = subsample_conv(transpose(x, (0, 3, 1, 2)), tag="gsa_subsample_conv")
    fb, fd, fh, fw = features.shape
    if fh != m or fw != m:
        raise ShapeMismatchError(f"gsa: feature map {fh}x{fw} != expected {m}x{m}")
    summary = transpose(reshape(features, (b, d, m * m)), (0, 2, 1))

    queries = reshape(x, (b, rows * cols, d))
    mixed = multi_head_attention(queries, summary, summary, weights, config.heads,
                                 tag_prefix="gsa_")
    return reshape(mixed, (b, rows, cols, d))


@dataclass(frozen=True)
class AttentionFlops:
    """Exact per-sample MAC counts of one local+global attention pass."""

    lsa_score: int
    lsa_aggregate: int
    gsa_score: int
    gsa_aggregate: int
    projections: int

    @property
    def total(self) -> int:
        return (self.lsa_score + self.lsa_aggregate + self.gsa_score
                + self.gsa_aggregate + self.projections)

    def as_dict(self) -> dict[str, int]:
        return {
            "lsa_score": self.lsa_score,
            "lsa_aggregate": self.lsa_aggregate,
            "gsa_score": self.gsa_score,
            "gsa_aggregate": self.gsa_aggregate,
            "projections": self.projections,
        }


def attention_flops(config: AttentionConfig) -> AttentionFlops:
    """Analytic MAC breakdown for the separable attention at ``config``.

    The local score/aggregate cost is m^2 * W^4 * d = L^4/m^2 * d, i.e.
    1/m^2 of full attention's L^4 * d; the measured exponent is 2, not 4.
    The global stage costs L^2 * m^2 * d for each of score and aggregate.
    The subsampling convolution is not included here; it is accounted as an
    ordinary convolution layer.
    """
    grid, window, d = config.grid, config.window, config.embed_dim
    m = config.windows_per_side
    tokens = grid * grid
    window_tokens = window * window
    lsa_sa = m * m * window_tokens * window_tokens * d
    gsa_sa = tokens * m * m * d
    projections = (4 * tokens * d * d            # local q/k/v/out over all tokens
                   + 2 * tokens * d * d          # global q and out over all tokens
                   + 2 * m * m * d * d)          # global k/v over the summary tokens
    return AttentionFlops(lsa_score=lsa_sa, lsa_aggregate=lsa_sa,
                          gsa_score=gsa_sa, gsa_aggregate=gsa_sa,
                          projections=projections)


def full_attention_score_macs(grid: int, embed_dim: int) -> int:
    """Score-matmul MACs of undivided attention over the L^2-token grid."""
    tokens = grid * grid
    return tokens * tokens * embed_dim


def lsa_score_reduction(config: AttentionConfig) -> float:
    """Measured score-cost ratio of windowed vs full attention (= 1/m^2)."""
    flops = attention_flops(config)
    return flops.lsa_score / full_attention_score_macs(config.grid, config.embed_dim)
