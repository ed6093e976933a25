"""Modality tokenizers and de-tokenizers stacked from the two block kinds.

Image, text, sparse-label and dense-label tokenizers; text, sparse-label and
dense-label de-tokenizers. There is no image de-tokenizer.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .blocks import (ConvBlock, TokenSequence, digit_detokenize, digit_tokenize,
                     semantic_detokenize, semantic_tokenize, similarity)
from .embeddings import SemanticEmbeddingTable, Vocabulary, embed_phrase

END_WORD = "<end>"


class Modality(str, Enum):
    IMAGE = "image"
    TEXT = "text"
    SPARSE = "sparse"
    DENSE = "dense"


@dataclass
class ModalitySample:
    """One task input or output; exactly one payload is populated.

    Sparse labels use ``names`` (possibly empty) plus ``coords`` of shape
    ``(K, D)`` or ``(T, J, D)`` for skeleton sequences, where ``names`` has
    one entry per joint.
    """
    kind: Modality
    image: Optional[np.ndarray] = None
    words: Optional[List[str]] = None
    names: Optional[List[str]] = None
    coords: Optional[np.ndarray] = None
    dense: Optional[np.ndarray] = None

    def __post_init__(self):
        self.kind = Modality(self.kind)
        populated = {
            Modality.IMAGE: self.image is not None,
            Modality.TEXT: self.words is not None,
            Modality.SPARSE: self.coords is not None,
            Modality.DENSE: self.dense is not None,
        }
        if sum(populated.values()) != 1 or not populated[self.kind]:
            raise ValueError(f"{self.kind.value} sample must carry exactly its own payload")
        if self.kind is Modality.IMAGE:
            self.image = np.asarray(self.image, dtype=np.float64)
            if self.image.ndim != 3:
                raise ValueError("image must be C x H x W")
            if self.image.min() < 0 or self.image.max() > 1:
                raise ValueError("image values must lie in [0, 1]")
        elif self.kind is Modality.SPARSE:
            self.coords = np.asarray(self.coords, dtype=np.float64)
            if not np.all(np.isfinite(self.coords)):
                raise ValueError("sparse coords must be finite")
            if self.coords.ndim not in (2, 3) or self.coords.shape[-1] not in (2, 3, 4):
                raise ValueError(f"sparse coords must be (K, D) or (T, J, D) with D in 2..4, "
                                 f"got {self.coords.shape}")
            self.names = list(self.names or [])
            if self.names and len(self.names) != self.coords.shape[-2]:
                raise ValueError(f"{len(self.names)} names for {self.coords.shape[-2]} points")
        elif self.kind is Modality.DENSE:
            self.dense = np.asarray(self.dense, dtype=np.float64)
        elif self.kind is Modality.TEXT:
            self.words = list(self.words)

    def to_json(self) -> dict:
        out = {"kind": self.kind.value}
        if self.kind is Modality.IMAGE:
            out["image"] = self.image.tolist()
        elif self.kind is Modality.TEXT:
            out["words"] = list(self.words)
        elif self.kind is Modality.SPARSE:
            out["names"] = list(self.names)
            out["coords"] = self.coords.tolist()
        else:
            out["dense"] = self.dense.tolist()
        return out

    @classmethod
    def from_json(cls, rec: dict) -> "ModalitySample":
        kind = Modality(rec["kind"])
        return cls(kind, image=rec.get("image"), words=rec.get("words"),
                   names=rec.get("names") if kind is Modality.SPARSE else None,
                   coords=rec.get("coords"), dense=rec.get("dense"))


def _as_tensor(x, like: torch.nn.Module) -> torch.Tensor:
    p = next(like.parameters())
    return torch.as_tensor(np.asarray(x), dtype=p.dtype, device=p.device)


def word_features(words: Sequence[str], table, vocab, dtype=torch.float64) -> torch.Tensor:
    return torch.tensor(np.stack([embed_phrase(w, table, vocab) for w in words]), dtype=dtype)


# -- tokenizers ---------------------------------------------------------------

def image_tokenize(x, block: ConvBlock) -> TokenSequence:
    """Patchify an image batch ``(..., C, H, W)`` with values in [0, 1]."""
    if isinstance(x, ModalitySample):
        x = _as_tensor(x.image, block)
    if x.min() < 0 or x.max() > 1:
        raise ValueError("image values must lie in [0, 1]")
    return digit_tokenize(x, block)


def text_tokenize(words, table: SemanticEmbeddingTable, vocab: Vocabulary,
                  block: ConvBlock) -> TokenSequence:
    if isinstance(words, ModalitySample):
        words = words.words
    feats = word_features(words, table, vocab, dtype=next(block.parameters()).dtype)
    return semantic_tokenize(feats, block)


def sparse_tokenize(names, coords, table, vocab, block_s: Optional[ConvBlock],
                    block_d: ConvBlock, skeleton: bool = False) -> TokenSequence:
    """Sum of the semantic token of each point's name and its digit token.

    ``coords`` is ``(..., K, D)`` or, with ``skeleton=True``,
    ``(..., T, J, D)`` with one name per joint; frames are flattened to
    ``T*J`` tokens.
    """
    coords = coords if torch.is_tensor(coords) else _as_tensor(coords, block_d)
    names = list(names or [])
    if names and len(names) != coords.shape[-2]:
        raise ValueError(f"{len(names)} names for {coords.shape[-2]} points")
    if skeleton:
        t, j = coords.shape[-3:-1]
        layout = (t, j)
        flat = coords.reshape(*coords.shape[:-3], t * j, coords.shape[-1])
    else:
        t, layout, flat = 1, (coords.shape[-2],), coords
    p = digit_tokenize(flat, block_d).data
    if names:
        if block_s is None:
            raise ValueError("named sparse labels need a semantic block")
        sem = semantic_tokenize(word_features(names, table, vocab, dtype=p.dtype), block_s).data
        p = p + sem.repeat(t, 1)
    return TokenSequence(p, layout)


def dense_tokenize(x, table: SemanticEmbeddingTable, block: ConvBlock) -> TokenSequence:
    """One-hot class maps ``(..., C, H, W)`` -> per-pixel embeddings -> patches."""
    if isinstance(x, ModalitySample):
        x = x.dense
    x = x if torch.is_tensor(x) else _as_tensor(x, block)
    if x.shape[-3] != len(table):
        raise ValueError(f"dense map has {x.shape[-3]} classes, table has {len(table)}")
    ok = ((x == 0) | (x == 1)).all() and (x.sum(dim=-3) == 1).all()
    if not ok:
        raise ValueError("dense label must be a valid one-hot map over classes")
    v = torch.tensor(table.matrix, dtype=x.dtype, device=x.device)
    emb = torch.einsum("...chw,cd->...dhw", x, v)
    y = block.forward_grid(emb)
    gh, gw = y.shape[-2:]
    return TokenSequence(y.flatten(-2).transpose(-1, -2), (gh, gw))


# -- de-tokenizers -------------------------------------------------------------

@dataclass
class ClassReadout:
    features: torch.Tensor      # (..., C, d_sem)
    similarities: torch.Tensor  # (..., C, C): row j = v . f_j
    raw: torch.Tensor           # (..., C) diagonal v_j . f_j
    scores: torch.Tensor        # (..., C) softmax over classes, read on the diagonal
    predicted: torch.Tensor     # bool (..., C) for attributes, int (...) for actions


def text_classify_detokenize(q, class_table: SemanticEmbeddingTable, block: ConvBlock,
                             mode: str = "attribute", threshold: float = 0.5,
                             temperature: float = 1.0) -> ClassReadout:
    data = q.data if isinstance(q, TokenSequence) else q
    c = len(class_table)
    if data.shape[-2] != c:
        raise ValueError(f"expected one output token per class ({c}), got {data.shape[-2]}")
    feats = block.forward_tokens(data)
    sims = similarity(feats, class_table)
    raw = torch.diagonal(sims, dim1=-2, dim2=-1)
    scores = torch.diagonal(torch.softmax(sims / temperature, dim=-1), dim1=-2, dim2=-1)
    if mode == "attribute":
        pred = scores > threshold
    elif mode == "action":
        pred = scores.argmax(dim=-1)
    else:
        raise ValueError(f"unknown readout mode {mode!r}")
    return ClassReadout(feats, sims, raw, scores, pred)


def text_caption_detokenize(decode_step: Callable[[List[int]], torch.Tensor],
                            table: SemanticEmbeddingTable, vocab: Vocabulary,
                            block: ConvBlock, max_len: int = 40,
                            end_word: str = END_WORD) -> List[str]:
    """Greedy autoregressive decoding.

    ``decode_step(prefix_ids)`` must return the ``(max_len, d_model)`` decoder
    output for the indicator sequence whose earlier positions carry the
    already-emitted words; only position ``len(prefix_ids)`` is read.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    end_id = vocab.lookup(end_word) if end_word in vocab else None
    emitted: List[int] = []
    words: List[str] = []
    for t in range(max_len):
        q = decode_step(list(emitted))
        q = q.data if isinstance(q, TokenSequence) else q
        if q.shape[-2] != max_len:
            raise ValueError(f"decode_step returned {q.shape[-2]} tokens, expected {max_len}")
        _, idx = semantic_detokenize(q[..., t:t + 1, :], table, block)
        k = int(idx.reshape(-1)[0])
        emitted.append(k)
        words.append(vocab.word_of(k))
        if k == end_id:
            break
    return words


def sparse_detokenize(q, table: Optional[SemanticEmbeddingTable], block_s: Optional[ConvBlock],
                      block_d: ConvBlock, coord_dim: int, with_semantics: bool = True):
    """Parallel semantic and digit read-out of the same tokens.

    Returns ``(name_indices | None, coords, features | None)``. A digit block
    wider than ``coord_dim`` (shared across sparse tasks) is sliced.
    """
    if coord_dim not in (2, 3, 4):
        raise ValueError("coord_dim must be 2, 3 or 4")
    if block_d.out_channels < coord_dim:
        raise ValueError(f"digit block emits {block_d.out_channels} < {coord_dim} channels")
    data = q.data if isinstance(q, TokenSequence) else q
    n = data.shape[-2]
    digits = digit_detokenize(data, block_d, (n, block_d.out_channels))
    coords = digits[..., :coord_dim]
    if not with_semantics:
        return None, coords, None
    feats, idx = semantic_detokenize(data, table, block_s)
    return idx, coords, feats


def dense_detokenize(q, layout, table: SemanticEmbeddingTable, block: ConvBlock,
                     out_hw, upsample_factor: int):
    """Project tokens to features, bilinearly upsample, take per-pixel argmax.

    Returns ``(indices (..., H, W), similarity maps (..., C, H, W))``.
    """
    data = q.data if isinstance(q, TokenSequence) else q
    gh, gw = layout
    H, W = out_hw
    if gh * gw != data.shape[-2]:
        raise ValueError(f"{data.shape[-2]} tokens do not fill a {gh}x{gw} grid")
    if (gh * upsample_factor, gw * upsample_factor) != (H, W):
        raise ValueError(f"grid {gh}x{gw} x{upsample_factor} does not give {H}x{W}")
    feats = block.forward_tokens(data)
    lead = feats.shape[:-2]
    grid = feats.transpose(-1, -2).reshape(-1, feats.shape[-1], gh, gw)
    if upsample_factor != 1:
        grid = F.interpolate(grid, size=(H, W), mode="bilinear", align_corners=False)
    up = grid.reshape(*lead, feats.shape[-1], H, W)
    sims = similarity(up.movedim(-3, -1), table).movedim(-1, -3)
    return sims.argmax(dim=-3), sims
