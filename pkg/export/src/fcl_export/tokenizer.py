"""Word-level embedding lookup for class names and prompt templates.

Names are lowercased and split on whitespace; each word maps to a
hash-seeded embedding row, so the same word always produces the same vector
and re-exports are bit-identical. No learned tokenizer is involved: the
engine consumes embedding-level inputs, and at this level a stable
word-to-vector map is all the text side needs.
"""

from __future__ import annotations

import hashlib

import numpy as np

PAD_WORD = "<pad>"


def _word_seed(word: str) -> int:
    digest = hashlib.blake2b(word.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def word_embedding(word: str, d_token: int) -> np.ndarray:
    gen = np.random.Generator(np.random.Philox(key=(_word_seed(word), 0)))
    return gen.normal(0.0, 1.0 / np.sqrt(d_token), size=d_token)


def embed_words(text: str, d_token: int, length: int) -> np.ndarray:
    """(length, d_token) matrix: one row per word, padded or truncated."""
    words = text.lower().split()[:length]
    words += [PAD_WORD] * (length - len(words))
    return np.stack([word_embedding(w, d_token) for w in words])


def class_token_table(class_names: list[str], d_token: int,
                      tokens_per_class: int) -> np.ndarray:
    """(C, tokens_per_class, d_token) float32 table for the FCLE file."""
    rows = [embed_words(name, d_token, tokens_per_class)
            for name in class_names]
    return np.stack(rows).astype(np.float32)
