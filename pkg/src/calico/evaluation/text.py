"""Label similarity: pluggable embedders and the word-set IoU."""
from __future__ import annotations

import hashlib
import logging
from typing import Callable, Protocol

import numpy as np

from calico.errors import EmbeddingError

log = logging.getLogger(__name__)

EMBED_WIDTH = 512


class TextEmbedder(Protocol):
    def __call__(self, label: str) -> np.ndarray: ...


def _bucket(gram: str) -> int:
    digest = hashlib.blake2b(gram.encode("utf-8"), digest_size=8, key=b"calico-trigram").digest()
    return int.from_bytes(digest, "little") % EMBED_WIDTH


def trigram_embedder(label: str) -> np.ndarray:
    """Hashed character-trigram counts, L2-normalized.

    The label is lowercased, whitespace-collapsed and padded with one space
    on each side so words shorter than three characters still get trigrams.
    """
    text = " ".join(label.split()).lower()
    if not text:
        raise EmbeddingError(f"cannot embed an empty label {label!r}")
    padded = f" {text} "
    vec = np.zeros(EMBED_WIDTH)
    for i in range(len(padded) - 2):
        vec[_bucket(padded[i:i + 3])] += 1.0
    return vec / np.linalg.norm(vec)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


def cached(embedder: Callable[[str], np.ndarray]) -> Callable[[str], np.ndarray]:
    memo: dict[str, np.ndarray] = {}

    def embed(label: str) -> np.ndarray:
        if label not in memo:
            memo[label] = embedder(label)
        return memo[label]

    return embed


def word_set(label: str) -> frozenset[str]:
    return frozenset(label.lower().split())


def label_iou(y: str, y_hat: str) -> float:
    """|V(y) & V(y_hat)| / |V(y) | V(y_hat)| over lowercase whitespace words; 0 when either is empty."""
    a, b = word_set(y), word_set(y_hat)
    if not a or not b:
        log.warning("empty word set in label pair (%r, %r); scored 0", y, y_hat)
        return 0.0
    return len(a & b) / len(a | b)
