"""Hashed character-trigram text embedding.

This is a stand-in for a pretrained text encoder. It keeps the interface
(any string in, unit vector out, classification by dot product) so the
open-vocabulary class loss can be trained and tested end to end, but it
carries no real semantics: "cat" and "kitten" are unrelated here.
"""

from __future__ import annotations

import hashlib
from functools import lru_cache
from typing import Iterable

import numpy as np

from .errors import EmptyText

DEFAULT_DIM = 64


def _trigrams(text: str) -> list[str]:
    padded = f"^{text}$"
    return [padded[i : i + 3] for i in range(len(padded) - 2)]


@lru_cache(maxsize=65536)
def _embed(text: str, dim: int) -> bytes:
    vec = np.zeros(dim)
    for gram in _trigrams(text):
        digest = hashlib.blake2b(gram.encode("utf-8"), digest_size=8).digest()
        h = int.from_bytes(digest, "little")
        sign = 1.0 if (h >> 63) & 1 else -1.0
        vec[h % dim] += sign
    norm = np.linalg.norm(vec)
    if norm == 0.0:
        # every trigram cancelled out; fall back to the bucket of the whole string
        h = int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little")
        vec[h % dim] = 1.0
        norm = 1.0
    return (vec / norm).tobytes()


def embed_text(text: str, dim: int = DEFAULT_DIM) -> np.ndarray:
    """Deterministic unit-norm embedding of ``text`` (case-insensitive)."""
    if dim < 8:
        raise ValueError(f"embedding dim must be >= 8, got {dim}")
    key = text.strip().lower()
    if not key:
        raise EmptyText("cannot embed empty text")
    return np.frombuffer(_embed(key, dim), dtype=float).copy()


def embed_bank(texts: Iterable[str], dim: int = DEFAULT_DIM) -> np.ndarray:
    """Stack embeddings row-wise into a ``len(texts) x dim`` matrix."""
    rows = [embed_text(t, dim) for t in texts]
    if not rows:
        return np.zeros((0, dim))
    return np.stack(rows)
