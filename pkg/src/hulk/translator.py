"""Modality-shared encoder/decoder, modality indicators, masks and positional tables."""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .blocks import TokenSequence

BASE_GRID = 14


@dataclass
class TranslatorConfig:
    d_model: int = 64
    encoder_layers: int = 2
    decoder_layers: int = 2
    heads: int = 4
    mlp_ratio: float = 2.0
    drop_path_rate: float = 0.0

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.d_model % 4:
            raise ValueError("d_model must be a multiple of 4 for 2-D sin-cos tables")
        if self.encoder_layers < 0 or self.decoder_layers < 1 or self.heads < 1:
            raise ValueError("invalid layer/head counts")


class MaskRegime(str, Enum):
    FULL = "full"
    DIAGONAL = "diagonal"
    CAUSAL_DIAGONAL = "causal_diagonal"


class PEScheme(str, Enum):
    INTERP2D = "interp2d"
    ANCHOR_GRID = "anchor_grid"
    SUM3D = "sum3d"


# -- positional embeddings -------------------------------------------------------

def sincos_1d(d: int, positions: np.ndarray) -> np.ndarray:
    if d % 2:
        raise ValueError("sin-cos embedding dim must be even")
    omega = 1.0 / 10000 ** (np.arange(d // 2, dtype=np.float64) / (d / 2.0))
    out = np.outer(np.asarray(positions, dtype=np.float64).reshape(-1), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def sincos_2d(d: int, h: int, w: int) -> np.ndarray:
    """MAE-style fixed 2-D table, ``(h*w, d)``; half the channels per axis."""
    gy, gx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                         indexing="ij")
    return np.concatenate([sincos_1d(d // 2, gy), sincos_1d(d // 2, gx)], axis=1)


def interp_2d(d: int, h: int, w: int, base: int = BASE_GRID) -> np.ndarray:
    """Bilinear resize of the ``base x base`` table to ``h x w``."""
    table = torch.from_numpy(sincos_2d(d, base, base)).T.reshape(1, d, base, base)
    if (h, w) != (base, base):
        table = F.interpolate(table, size=(h, w), mode="bilinear", align_corners=False)
    return table.reshape(d, h * w).T.numpy()


def interp_1d(d: int, n: int, base: int = BASE_GRID) -> np.ndarray:
    table = torch.from_numpy(sincos_1d(d, np.arange(base))).T.reshape(1, d, base)
    if n != base:
        table = F.interpolate(table, size=n, mode="linear", align_corners=False)
    return table.reshape(d, n).T.numpy()


def anchor_points(g: int) -> np.ndarray:
    """Normalised cell centres of a ``g x g`` grid as ``(g*g, 2)`` (x, y)."""
    c = (np.arange(g, dtype=np.float64) + 0.5) / g
    gy, gx = np.meshgrid(c, c, indexing="ij")
    return np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1)


def build_positional_embeddings(scheme, layout, d_model: int, count: Optional[int] = None,
                                table_1d: Optional[np.ndarray] = None):
    """Fixed positional table for a token layout.

    ``interp2d``: layout ``(n,)`` or ``(h, w)``.
    ``anchor_grid``: layout ``(g, g)``; returns ``(embeddings, anchors)``.
    ``sum3d``: layout ``(h, w, depth)``; 2-D table broadcast over depth plus
    the 1-D table (``table_1d`` overrides it) broadcast over the grid.
    ``count`` truncates to the first ``count`` tokens.
    """
    scheme = PEScheme(scheme)
    layout = tuple(int(s) for s in layout)
    if scheme is PEScheme.INTERP2D:
        if len(layout) == 1:
            pe = interp_1d(d_model, layout[0])
        elif len(layout) == 2:
            pe = interp_2d(d_model, *layout)
        else:
            raise ValueError(f"interp2d needs a 1-D or 2-D layout, got {layout}")
    elif scheme is PEScheme.ANCHOR_GRID:
        if len(layout) != 2 or layout[0] != layout[1]:
            raise ValueError(f"anchor grid needs a square g x g layout, got {layout}")
        g = layout[0]
        pe = interp_2d(d_model, g, g)
        anchors = anchor_points(g)
        if count is not None:
            pe, anchors = pe[:count], anchors[:count]
        return pe, anchors
    else:
        if len(layout) != 3:
            raise ValueError(f"sum3d needs an (h, w, depth) layout, got {layout}")
        h, w, depth = layout
        pe2 = interp_2d(d_model, h, w)
        pe1 = interp_1d(d_model, depth) if table_1d is None else np.asarray(table_1d)
        if pe1.shape != (depth, d_model):
            raise ValueError(f"1-D table must be ({depth}, {d_model})")
        pe = (pe2[:, None, :] + pe1[None, :, :]).reshape(h * w * depth, d_model)
    if count is not None:
        if count > pe.shape[0]:
            raise ValueError(f"layout {layout} has fewer than {count} positions")
        pe = pe[:count]
    return pe


# -- masks ------------------------------------------------------------------------

def build_attention_mask(n: int, n_prime: int, regime, encoded_block: str = "full") -> torch.Tensor:
    """Boolean ``(N+N', N+N')`` mask over ``[encoded; indicators]``, True = attend.

    ``encoded_block`` selects whether encoded tokens attend to each other
    (``"full"``) or only to themselves (``"diagonal"``) under the diagonal
    regimes.
    """
    if n < 1 or n_prime < 1:
        raise ValueError("N and N' must be >= 1")
    regime = MaskRegime(regime)
    size = n + n_prime
    if regime is MaskRegime.FULL:
        return torch.ones(size, size, dtype=torch.bool)
    mask = torch.zeros(size, size, dtype=torch.bool)
    if encoded_block == "full":
        mask[:n, :n] = True
    elif encoded_block == "diagonal":
        mask[:n, :n] = torch.eye(n, dtype=torch.bool)
    else:
        raise ValueError(f"unknown encoded_block {encoded_block!r}")
    mask[n:, :n] = True
    if regime is MaskRegime.DIAGONAL:
        mask[n:, n:] = torch.eye(n_prime, dtype=torch.bool)
    else:
        mask[n:, n:] = torch.tril(torch.ones(n_prime, n_prime, dtype=torch.bool))
    return mask


# -- transformer layers -------------------------------------------------------------

class DropPath(nn.Module):
    def __init__(self, p: float = 0.0):
        super().__init__()
        self.p = p

    def forward(self, x):
        if self.p == 0.0 or not self.training:
            return x
        keep = 1.0 - self.p
        shape = (x.shape[0],) + (1,) * (x.dim() - 1)
        return x * x.new_empty(shape).bernoulli_(keep) / keep


class Attention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, mask=None):
        *lead, n, d = x.shape
        qkv = self.qkv(x).reshape(*lead, n, 3, self.heads, d // self.heads)
        q, k, v = qkv.movedim(-3, 0).transpose(-2, -3).unbind(0)
        # boolean mask: True = attend
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=mask, scale=self.scale)
        return self.proj(out.transpose(-2, -3).reshape(*lead, n, d))


class Block(nn.Module):
    """Pre-norm transformer layer."""

    def __init__(self, dim, heads, mlp_ratio=2.0, drop_path=0.0):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))
        self.drop_path = DropPath(drop_path)

    def forward(self, x, mask=None):
        x = x + self.drop_path(self.attn(self.norm1(x), mask))
        x = x + self.drop_path(self.mlp(self.norm2(x)))
        return x


def _drop_rates(cfg: TranslatorConfig, n):
    return [cfg.drop_path_rate * i / max(n - 1, 1) for i in range(n)]


class Encoder(nn.Module):
    def __init__(self, cfg: TranslatorConfig):
        super().__init__()
        self.cfg = cfg
        self.blocks = nn.ModuleList(
            Block(cfg.d_model, cfg.heads, cfg.mlp_ratio, r)
            for r in _drop_rates(cfg, cfg.encoder_layers))

    def forward(self, x, pos=None):
        if x.shape[-1] != self.cfg.d_model:
            raise ValueError(f"token dim {x.shape[-1]} != d_model {self.cfg.d_model}")
        if pos is not None:
            x = x + pos
        for blk in self.blocks:
            x = blk(x)
        return x


class Decoder(nn.Module):
    """One masked self-attention stack over the concatenation ``[h; indicators]``.

    There is no trailing norm: the last LayerNorm is the final layer's
    ``norm2``, which is the task-shared gradient probe.
    """

    def __init__(self, cfg: TranslatorConfig):
        super().__init__()
        self.cfg = cfg
        self.blocks = nn.ModuleList(
            Block(cfg.d_model, cfg.heads, cfg.mlp_ratio, r)
            for r in _drop_rates(cfg, cfg.decoder_layers))

    @property
    def probe(self) -> nn.Parameter:
        return self.blocks[-1].norm2.weight

    def forward(self, h, indicators, mask, memory_pos=None, return_all=False):
        if h.shape[-1] != indicators.shape[-1]:
            raise ValueError("encoded tokens and indicators must share d_model")
        n, n_prime = h.shape[-2], indicators.shape[-2]
        if mask.shape != (n + n_prime, n + n_prime):
            raise ValueError(f"mask shape {tuple(mask.shape)} does not match "
                             f"{n}+{n_prime} tokens")
        if memory_pos is not None:
            h = h + memory_pos
        if indicators.dim() < h.dim():
            indicators = indicators.expand(*h.shape[:-2], *indicators.shape[-2:])
        x = torch.cat([h, indicators], dim=-2)
        states = [x]
        for blk in self.blocks:
            x = blk(x, mask)
            states.append(x)
        q = x[..., n:, :]
        return (q, states) if return_all else q


class ModalityIndicator(nn.Module):
    def __init__(self, d_model: int):
        super().__init__()
        self.base_token = nn.Parameter(torch.randn(d_model) * 0.02)


def make_indicators(indicator: ModalityIndicator, n_prime: int, positional=None) -> TokenSequence:
    """Repeat the base token ``n_prime`` times and add the positional table."""
    if n_prime < 1:
        raise ValueError("N' must be >= 1")
    tok = indicator.base_token.expand(n_prime, -1)
    if positional is not None:
        tok = tok + torch.as_tensor(positional, dtype=tok.dtype, device=tok.device)
    return TokenSequence(tok, (n_prime,))


def positional_for(layout, d_model: int, dtype=torch.float64) -> torch.Tensor:
    """Encoder-side positional table for an input token layout."""
    if len(layout) == 3:
        pe = build_positional_embeddings(PEScheme.SUM3D, layout, d_model)
    else:
        pe = build_positional_embeddings(PEScheme.INTERP2D, layout, d_model)
    return torch.as_tensor(pe, dtype=dtype)


def encode(p: TokenSequence, encoder: Encoder, pos=None) -> TokenSequence:
    if pos is None:
        pos = positional_for(p.layout, encoder.cfg.d_model, p.data.dtype)
    return TokenSequence(encoder(p.data, pos), p.layout)


def decode(h: TokenSequence, indicators: TokenSequence, regime, decoder: Decoder,
           encoded_block: str = "full", memory_pos=None) -> TokenSequence:
    mask = build_attention_mask(len(h), len(indicators), regime, encoded_block)
    q = decoder(h.data, indicators.data, mask.to(h.data.device), memory_pos)
    return TokenSequence(q, indicators.layout)
