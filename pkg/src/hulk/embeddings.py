"""Fixed word/class embedding tables.

Rows are either drawn from a seeded Gaussian keyed by the word text (so a
table does not change when the vocabulary is reordered) or loaded from a
JSON-lines file of ``{"word": ..., "vec": [...]}`` records.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union

import numpy as np


@dataclass(frozen=True)
class Vocabulary:
    words: tuple
    index: dict = field(repr=False, compare=False)

    @classmethod
    def from_words(cls, words: Iterable[str]) -> "Vocabulary":
        words = tuple(words)
        if not words:
            raise ValueError("vocabulary must be non-empty")
        index = {}
        for i, w in enumerate(words):
            if w in index:
                raise ValueError(f"duplicate word in vocabulary: {w!r}")
            index[w] = i
        return cls(words, index)

    def __len__(self):
        return len(self.words)

    def __contains__(self, word):
        return word in self.index

    def lookup(self, word: str) -> int:
        try:
            return self.index[word]
        except KeyError:
            raise KeyError(f"unknown word: {word!r}") from None

    def word_of(self, i: int) -> str:
        return self.words[i]


@dataclass(frozen=True)
class Synthetic:
    seed: int = 0


EmbeddingSource = Union[Synthetic, str, os.PathLike]


@dataclass(frozen=True)
class SemanticEmbeddingTable:
    matrix: np.ndarray
    source: object = None

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] == 0:
            raise ValueError(f"embedding matrix must be non-empty C x d, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError("embedding matrix has non-finite entries")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def d_sem(self) -> int:
        return self.matrix.shape[1]

    def __len__(self):
        return self.matrix.shape[0]

    def row(self, k: int) -> np.ndarray:
        return self.matrix[k]

    def normalized(self) -> "SemanticEmbeddingTable":
        norms = np.linalg.norm(self.matrix, axis=1, keepdims=True)
        return SemanticEmbeddingTable(self.matrix / np.maximum(norms, 1e-12), self.source)


def _word_rng(seed: int, word: str) -> np.random.Generator:
    digest = hashlib.sha256(f"{seed}\x00{word}".encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def synthetic_row(word: str, seed: int, d_sem: int) -> np.ndarray:
    return _word_rng(seed, word).standard_normal(d_sem) / np.sqrt(d_sem)


def load_embedding_file(path) -> dict:
    """Read a JSON-lines embedding file into ``{word: vector}``."""
    rows = {}
    d = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            vec = np.asarray(rec["vec"], dtype=np.float64)
            if d is None:
                d = vec.shape[0]
            elif vec.shape != (d,):
                raise ValueError(
                    f"{path}:{lineno}: dimension mismatch, expected {d} got {vec.shape[0]}")
            rows[rec["word"]] = vec
    return rows


def build_table(vocab: Vocabulary, source: EmbeddingSource = Synthetic(0),
                d_sem: int | None = None) -> SemanticEmbeddingTable:
    if len(vocab) == 0:
        raise ValueError("vocabulary must be non-empty")
    if isinstance(source, Synthetic):
        if d_sem is None or d_sem < 1:
            raise ValueError("synthetic tables need d_sem >= 1")
        mat = np.stack([synthetic_row(w, source.seed, d_sem) for w in vocab.words])
        return SemanticEmbeddingTable(mat, source)

    rows = load_embedding_file(source)
    for w in vocab.words:
        if w not in rows:
            raise KeyError(f"embedding not found: {w}")
    mat = np.stack([rows[w] for w in vocab.words])
    if d_sem is not None and mat.shape[1] != d_sem:
        raise ValueError(f"file embeddings have dimension {mat.shape[1]}, expected {d_sem}")
    return SemanticEmbeddingTable(mat, os.fspath(source))


def embed_phrase(phrase: str, table: SemanticEmbeddingTable, vocab: Vocabulary) -> np.ndarray:
    """Mean of the rows of the phrase's whitespace-separated words."""
    words = phrase.split()
    if not words:
        raise ValueError("empty phrase")
    for w in words:
        if w not in vocab:
            raise KeyError(f"unknown word: {w!r}")
    if len(words) == 1:
        return table.matrix[vocab.lookup(words[0])].copy()
    return np.mean([table.matrix[vocab.lookup(w)] for w in words], axis=0)


def phrase_table(phrases: Sequence[str], table: SemanticEmbeddingTable,
                 vocab: Vocabulary) -> SemanticEmbeddingTable:
    """Class table whose k-th row is the pooled embedding of ``phrases[k]``."""
    return SemanticEmbeddingTable(np.stack([embed_phrase(p, table, vocab) for p in phrases]),
                                  table.source)


def nearest_index(feature, table: SemanticEmbeddingTable, normalize: bool = False) -> int:
    feature = np.asarray(feature, dtype=np.float64)
    if not np.all(np.isfinite(feature)):
        raise ValueError("feature has non-finite entries")
    mat = table.normalized().matrix if normalize else table.matrix
    # np.argmax returns the first maximal index
    return int(np.argmax(mat @ feature))
