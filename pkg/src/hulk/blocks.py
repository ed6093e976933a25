"""Semantic and digit tokenizer/de-tokenizer blocks.

Every block is a (stack of) convolution(s). Token sequences are laid out as
``(..., N, channels)``; image-like inputs as ``(..., C, H, W)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .embeddings import SemanticEmbeddingTable


@dataclass
class TokenSequence:
    """Tokens ``data`` of shape ``(..., N, d)`` plus the layout they came from.

    ``layout`` is ``(N,)`` for sequences, ``(h, w)`` for grids and
    ``(h, w, depth)`` for grid-by-depth layouts.
    """
    data: torch.Tensor
    layout: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        if self.layout is None:
            self.layout = (self.data.shape[-2],)
        self.layout = tuple(int(s) for s in self.layout)
        if self.data.shape[-2] < 1:
            raise ValueError("token sequence must have N >= 1")

    def __len__(self):
        return self.data.shape[-2]

    @property
    def dim(self) -> int:
        return self.data.shape[-1]

    @property
    def positions(self) -> np.ndarray:
        """Per-token grid coordinates, ``(N, len(layout))``."""
        idx = np.indices(self.layout).reshape(len(self.layout), -1).T
        return idx[: len(self)]


class ConvBlock(nn.Module):
    """Convolutional projection shared by all four block kinds.

    ``spatial_dims=1`` convolves along the token axis (length preserving for
    odd kernels). ``spatial_dims=2`` is a patchifying convolution with
    ``kernel = stride = patch``. Extra layers are pointwise with GELU between.
    """

    def __init__(self, in_channels, out_channels, kernel_size=1, spatial_dims=1,
                 num_layers=1, bias=True):
        super().__init__()
        if spatial_dims not in (1, 2):
            raise ValueError("spatial_dims must be 1 or 2")
        if spatial_dims == 1 and kernel_size % 2 == 0:
            raise ValueError("token-axis kernels must be odd to preserve length")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.spatial_dims = spatial_dims
        self.stride = kernel_size if spatial_dims == 2 else 1
        Conv = nn.Conv1d if spatial_dims == 1 else nn.Conv2d
        pad = kernel_size // 2 if spatial_dims == 1 else 0
        layers = [Conv(in_channels, out_channels, kernel_size, stride=self.stride,
                       padding=pad, bias=bias)]
        for _ in range(num_layers - 1):
            layers += [nn.GELU(), Conv(out_channels, out_channels, 1, bias=bias)]
        self.net = nn.Sequential(*layers)

    @property
    def num_layers(self):
        return (len(self.net) + 1) // 2

    def forward_tokens(self, x: torch.Tensor) -> torch.Tensor:
        """``(..., N, C_in) -> (..., N, C_out)`` along the token axis."""
        if self.spatial_dims != 1:
            raise ValueError("forward_tokens needs a 1-D block")
        lead = x.shape[:-2]
        y = self.net(x.reshape(-1, *x.shape[-2:]).transpose(1, 2))
        return y.transpose(1, 2).reshape(*lead, y.shape[-1], self.out_channels)

    def forward_grid(self, x: torch.Tensor) -> torch.Tensor:
        """``(..., C_in, H, W) -> (..., C_out, H/s, W/s)``."""
        lead = x.shape[:-3]
        y = self.net(x.reshape(-1, *x.shape[-3:]))
        return y.reshape(*lead, *y.shape[1:])


def _check_channels(x, block, what):
    if x.shape[-1] != block.in_channels:
        raise ValueError(
            f"{what}: input has {x.shape[-1]} channels, block expects {block.in_channels}")


def semantic_tokenize(features: torch.Tensor, block: ConvBlock, layout=None) -> TokenSequence:
    """Word features ``(..., N, d_sem)`` to tokens ``(..., N, d_model)``."""
    _check_channels(features, block, "semantic_tokenize")
    return TokenSequence(block.forward_tokens(features), layout)


def similarity(features: torch.Tensor, table: SemanticEmbeddingTable) -> torch.Tensor:
    """Raw dot products ``v_k . f`` for every row, ``(..., C)``."""
    if features.shape[-1] != table.d_sem:
        raise ValueError(
            f"feature dimension {features.shape[-1]} does not match table d_sem {table.d_sem}")
    v = torch.tensor(table.matrix, dtype=features.dtype, device=features.device)
    return features @ v.T


def semantic_detokenize(tokens, table: SemanticEmbeddingTable, block: ConvBlock):
    """Project tokens to the embedding space and pick the most similar word.

    Returns ``(features, indices)``; ties go to the lowest index.
    """
    data = tokens.data if isinstance(tokens, TokenSequence) else tokens
    if block.out_channels != table.d_sem:
        raise ValueError(
            f"block emits {block.out_channels} channels but table has d_sem {table.d_sem}")
    feats = block.forward_tokens(data)
    # torch.argmax returns the first maximal index
    idx = similarity(feats, table).argmax(dim=-1)
    return feats, idx


def digit_tokenize(digits: torch.Tensor, block: ConvBlock) -> TokenSequence:
    """Conv then flatten.

    For 2-D blocks ``digits`` is ``(..., C, H, W)`` and each patch becomes a
    token; for 1-D blocks ``digits`` is ``(..., N, D)`` and each element does.
    """
    if not torch.all(torch.isfinite(digits)):
        raise ValueError("digits must be finite")
    if block.spatial_dims == 1:
        _check_channels(digits, block, "digit_tokenize")
        return TokenSequence(block.forward_tokens(digits), (digits.shape[-2],))
    c, h, w = digits.shape[-3:]
    s = block.stride
    if h % s or w % s:
        raise ValueError(f"spatial dims {h}x{w} must be divisible by patch size {s}")
    if c != block.in_channels:
        raise ValueError(f"digit_tokenize: {c} input channels, block expects {block.in_channels}")
    y = block.forward_grid(digits)
    gh, gw = y.shape[-2:]
    tokens = y.flatten(-2).transpose(-1, -2)
    return TokenSequence(tokens, (gh, gw))


def digit_detokenize(tokens, block: ConvBlock, out_shape) -> torch.Tensor:
    """Conv then reshape the per-token digits to ``out_shape`` (batch dims kept)."""
    data = tokens.data if isinstance(tokens, TokenSequence) else tokens
    out_shape = tuple(out_shape)
    n = data.shape[-2]
    if math.prod(out_shape) != n * block.out_channels:
        raise ValueError(
            f"cannot reshape {n} tokens x {block.out_channels} digits into {out_shape}")
    y = block.forward_tokens(data)
    return y.reshape(*data.shape[:-2], *out_shape)
