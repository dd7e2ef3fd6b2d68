"""Composite network blocks.

Five pieces, combined by :mod:`amseg.model`:

* :class:`ExpandingStage` — channel chunks refined by 1x1 convolutions, then
  concatenated and merged by a strided 3x3 convolution.
* :class:`MHSA` — multi-head self-attention over the flattened spatial grid
  with a learned additive positional table.
* :class:`WMHSA` — attention applied to diagonal tiles of the feature map;
  tile outputs are stacked along height and along width and the two stacks
  are multiplied per channel, widening attention beyond the tiles.
* :func:`cdwcc_forward` — a parameter-free channel gate driven by the mean
  inner product between decoder and skip features.
* :class:`DDWPP` — parallel depthwise convolutions at several dilation rates
  (clamped to the feature extent), summed and rectified.
* :class:`CCB` — the plain double 3x3 convolution block used as the baseline
  encoder, with batch normalisation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .modules import BatchNorm2d, Conv2d, Linear, Module, uniform_init
from .tensor import Tensor

__all__ = [
    "ExpandingStageSpec", "ExpandingStage",
    "AttentionSpec", "MHSA",
    "WMHSASpec", "WMHSA",
    "cdwcc_forward",
    "DDWPPSpec", "DDWPP", "clamped_dilations",
    "CCBSpec", "CCB",
]


# -- expanding convolution stage -------------------------------------------------


@dataclass(frozen=True)
class ExpandingStageSpec:
    """One encoder stage: ``chunk_count`` parallel 1x1 refinements over equal
    channel chunks, concatenated, then a 3x3 stride-``stride`` merge."""

    in_channels: int
    out_channels: int
    chunk_count: int
    stride: int = 2

    def __post_init__(self):
        if min(self.in_channels, self.out_channels, self.chunk_count, self.stride) < 1:
            raise ConfigError(f"ExpandingStageSpec: all fields must be positive, got {self}")


class ExpandingStage(Module):
    def __init__(self, spec: ExpandingStageSpec, *, rng: np.random.Generator,
                 dtype=np.float32):
        super().__init__()
        if spec.in_channels % spec.chunk_count:
            raise ShapeError("expanding stage: channels not divisible into chunks",
                             expected=f"multiple of {spec.chunk_count}",
                             actual=spec.in_channels)
        self.spec = spec
        chunk = spec.in_channels // spec.chunk_count
        self.chunk_convs = [Conv2d(chunk, chunk, 1, rng=rng, dtype=dtype)
                            for _ in range(spec.chunk_count)]
        self.merge = Conv2d(spec.in_channels, spec.out_channels, 3,
                            stride=spec.stride, padding=1, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ShapeError("expanding stage: channel mismatch",
                             expected=self.spec.in_channels, actual=x.shape)
        chunks = T.split(x, self.spec.chunk_count, axis=1)
        refined = [conv.forward(c) for conv, c in zip(self.chunk_convs, chunks)]
        return T.relu(self.merge.forward(T.concat(refined, axis=1)))


# -- multi-head self-attention ----------------------------------------------------


@dataclass(frozen=True)
class AttentionSpec:
    """Self-attention over ``token_count`` tokens of width ``embed_dim``."""

    embed_dim: int
    head_count: int
    token_count: int

    def __post_init__(self):
        if self.embed_dim % self.head_count:
            raise ConfigError(f"AttentionSpec: embed_dim {self.embed_dim} not divisible "
                              f"by head_count {self.head_count}")
        if self.token_count < 1:
            raise ConfigError("AttentionSpec: token_count must be positive")


class MHSA(Module):
    """Multi-head self-attention over a flattened (H, W) grid.

    Tokens are the spatial positions; a learned positional table is added
    before the query/key/value projections.  ``forward_with_weights`` also
    returns the (N, heads, L, L) attention weights.
    """

    def __init__(self, spec: AttentionSpec, *, rng: np.random.Generator,
                 dtype=np.float32):
        super().__init__()
        self.spec = spec
        self.positional = uniform_init(rng, (spec.token_count, spec.embed_dim),
                                       spec.embed_dim, dtype)
        self.query = Linear(spec.embed_dim, spec.embed_dim, rng=rng, dtype=dtype)
        self.key = Linear(spec.embed_dim, spec.embed_dim, rng=rng, dtype=dtype)
        self.value = Linear(spec.embed_dim, spec.embed_dim, rng=rng, dtype=dtype)
        self.out = Linear(spec.embed_dim, spec.embed_dim, rng=rng, dtype=dtype)

    def _project(self, layer: Linear, tokens: Tensor, n: int) -> Tensor:
        length, dim = self.spec.token_count, self.spec.embed_dim
        heads = self.spec.head_count
        flat = layer.forward(tokens.reshape(n * length, dim))
        return flat.reshape(n, length, heads, dim // heads).transpose(0, 2, 1, 3)

    def forward_with_weights(self, x: Tensor) -> tuple:
        spec = self.spec
        if x.ndim != 4 or x.shape[1] != spec.embed_dim:
            raise ShapeError("attention: channel mismatch",
                             expected=spec.embed_dim, actual=x.shape)
        n, c, h, w = x.shape
        if h * w != spec.token_count:
            raise ShapeError("attention: token count mismatch",
                             expected=spec.token_count, actual=h * w)
        tokens = T.add(x.reshape(n, c, h * w).transpose(0, 2, 1), self.positional)
        q = self._project(self.query, tokens, n)
        k = self._project(self.key, tokens, n)
        v = self._project(self.value, tokens, n)
        head_dim = c // spec.head_count
        scores = T.scale(T.matmul(q, k.transpose(0, 1, 3, 2)), 1.0 / np.sqrt(head_dim))
        weights = T.softmax_lastdim(scores)
        context = T.matmul(weights, v).transpose(0, 2, 1, 3).reshape(n * h * w, c)
        out = self.out.forward(context).reshape(n, h * w, c).transpose(0, 2, 1) \
            .reshape(n, c, h, w)
        return out, weights

    def forward(self, x: Tensor) -> Tensor:
        return self.forward_with_weights(x)[0]


# -- windowed (tiled) attention with widening product ------------------------------


@dataclass(frozen=True)
class WMHSASpec:
    """Tiled attention at ``rate`` tiles per axis on a square map of extent
    ``rate * tile_size``, with ``head_count`` heads inside each tile."""

    channels: int
    rate: int
    tile_size: int
    head_count: int

    def __post_init__(self):
        if self.rate < 1 or self.tile_size < 1:
            raise ConfigError(f"WMHSASpec: rate and tile_size must be positive, got {self}")
        if self.channels % self.head_count:
            raise ConfigError(f"WMHSASpec: channels {self.channels} not divisible by "
                              f"head_count {self.head_count}")


class WMHSA(Module):
    """Diagonal-tile attention followed by a per-channel widening product.

    The ``rate`` tiles along the main diagonal each run their own MHSA.  Tile
    outputs concatenated along height form A (H x tile), along width form B
    (tile x W); their per-channel product A @ B spreads tile attention over
    the full map, and a 1x1 convolution mixes the result back across
    channels.
    """

    def __init__(self, spec: WMHSASpec, *, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.spec = spec
        attn_spec = AttentionSpec(embed_dim=spec.channels, head_count=spec.head_count,
                                  token_count=spec.tile_size * spec.tile_size)
        self.attentions = [MHSA(attn_spec, rng=rng, dtype=dtype) for _ in range(spec.rate)]
        self.project = Conv2d(spec.channels, spec.channels, 1, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        spec = self.spec
        if x.ndim != 4 or x.shape[1] != spec.channels:
            raise ShapeError("wmhsa: channel mismatch", expected=spec.channels,
                             actual=x.shape)
        n, c, h, w = x.shape
        if h != w:
            raise ShapeError("wmhsa: the widening product needs a square map",
                             expected="H == W", actual=(h, w))
        if h != spec.rate * spec.tile_size:
            raise ShapeError("wmhsa: extent does not match rate * tile_size",
                             expected=spec.rate * spec.tile_size, actual=h)
        t = spec.tile_size
        outs = []
        for i, attn in enumerate(self.attentions):
            tile = T.narrow(T.narrow(x, 2, i * t, t), 3, i * t, t)
            outs.append(attn.forward(tile))
        stacked_h = T.concat(outs, axis=2) if len(outs) > 1 else outs[0]
        stacked_w = T.concat(outs, axis=3) if len(outs) > 1 else outs[0]
        widened = T.matmul(stacked_h, stacked_w)
        return self.project.forward(widened)


# -- channel gating between decoder and skip features -------------------------------


def cdwcc_forward(decoder_map: Tensor, encoder_map: Tensor) -> Tensor:
    """Gate decoder channels by their agreement with the skip features.

    For each channel the spatial mean of the elementwise product of the two
    maps passes through a sigmoid, and the decoder map is scaled by the
    resulting per-channel factor.  The block has no parameters.
    """
    if decoder_map.shape != encoder_map.shape:
        raise ShapeError("channel gate: maps must have identical shapes",
                         expected=decoder_map.shape, actual=encoder_map.shape)
    if decoder_map.ndim != 4:
        raise ShapeError("channel gate expects (N,C,H,W)", expected=4,
                         actual=decoder_map.ndim)
    _, _, h, w = decoder_map.shape
    inner = T.mul(decoder_map, encoder_map).sum(axis=(2, 3), keepdims=True)
    gate = T.sigmoid(T.scale(inner, 1.0 / (h * w)))
    return T.mul(gate, decoder_map)


# -- dilated depthwise pyramid -------------------------------------------------------


@dataclass(frozen=True)
class DDWPPSpec:
    """Parallel depthwise branches as (kernel, dilation) pairs, summed and
    rectified.  Dilations clamp down on small maps so kernels always fit."""

    channels: int
    branches: tuple = ((7, 16), (5, 8), (5, 4), (3, 2))

    def __post_init__(self):
        if self.channels < 1:
            raise ConfigError("DDWPPSpec: channels must be positive")
        for k, d in self.branches:
            if k < 1 or k % 2 == 0 or d < 1:
                raise ConfigError(f"DDWPPSpec: kernels must be odd and positive, got {(k, d)}")


def clamped_dilations(spec: DDWPPSpec, h: int, w: int) -> tuple:
    """Effective dilation per branch: ``min(d, max(1, (min(H,W)-1)//(k-1)))``."""
    extent = min(h, w)
    out = []
    for k, d in spec.branches:
        cap = max(1, (extent - 1) // (k - 1)) if k > 1 else 1
        out.append(min(d, cap))
    return tuple(out)


class DDWPP(Module):
    def __init__(self, spec: DDWPPSpec, *, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.spec = spec
        c = spec.channels
        self.weights = []
        self.biases = []
        for k, _ in spec.branches:
            self.weights.append(uniform_init(rng, (c, 1, k, k), k * k, dtype))
            self.biases.append(Tensor(np.zeros(c, dtype=dtype), requires_grad=True))

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.spec.channels:
            raise ShapeError("pyramid: channel mismatch", expected=self.spec.channels,
                             actual=x.shape)
        _, _, h, w = x.shape
        dilations = clamped_dilations(self.spec, h, w)
        total = None
        for (k, _), d, weight, bias in zip(self.spec.branches, dilations,
                                           self.weights, self.biases):
            pad = d * (k - 1) // 2
            branch = T.conv2d(x, weight, bias, padding=pad, dilation=d,
                              groups=self.spec.channels)
            total = branch if total is None else T.add(total, branch)
        return T.relu(total)


# -- double convolution block ---------------------------------------------------------


@dataclass(frozen=True)
class CCBSpec:
    """Two rounds of 3x3 convolution, batch normalisation, and rectification."""

    in_channels: int
    out_channels: int

    def __post_init__(self):
        if min(self.in_channels, self.out_channels) < 1:
            raise ConfigError("CCBSpec: channels must be positive")


class CCB(Module):
    def __init__(self, spec: CCBSpec, *, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.spec = spec
        self.conv1 = Conv2d(spec.in_channels, spec.out_channels, 3, padding=1,
                            rng=rng, dtype=dtype)
        self.norm1 = BatchNorm2d(spec.out_channels, dtype=dtype)
        self.conv2 = Conv2d(spec.out_channels, spec.out_channels, 3, padding=1,
                            rng=rng, dtype=dtype)
        self.norm2 = BatchNorm2d(spec.out_channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ShapeError("double conv block: channel mismatch",
                             expected=self.spec.in_channels, actual=x.shape)
        h = T.relu(self.norm1.forward(self.conv1.forward(x)))
        return T.relu(self.norm2.forward(self.conv2.forward(h)))
