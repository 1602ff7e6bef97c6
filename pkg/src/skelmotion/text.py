"""Frozen text encoders for cross-attention conditioning.

Two encoders ship with the package:

* ``stub``: every token maps through a seeded hash to a fixed unit-norm
  vector. Deterministic, dependency free, good enough to exercise
  word-level cross-attention at desk scale.
* ``file:<path>``: precomputed token vectors from an external encoder
  (e.g. CLIP) read from a JSON embedding file, see :class:`EmbeddingFileEncoder`.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

NULL_TOKEN = "<null>"
DEFAULT_MAX_TOKENS = 32
_TOKEN_RE = re.compile(r"[a-z0-9']+")


class TextEncodingError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    """Lower-case word tokens; punctuation is dropped."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class TextEmbedding:
    tokens: tuple[str, ...]
    vectors: torch.Tensor  # (K, D_text)
    pooled: torch.Tensor  # (D_text,)

    @property
    def n_tokens(self) -> int:
        return len(self.tokens)

    @property
    def is_null(self) -> bool:
        return self.tokens == (NULL_TOKEN,)


class StubTextEncoder:
    """Hash-seeded token vectors; the empty prompt becomes a single null token."""

    def __init__(self, dim: int = 128, seed: int = 0, max_tokens: int = DEFAULT_MAX_TOKENS):
        self.dim = dim
        self.seed = seed
        self.max_tokens = max_tokens
        self._cache: dict[str, np.ndarray] = {}

    @property
    def name(self) -> str:
        return "stub"

    def token_vector(self, token: str) -> np.ndarray:
        vec = self._cache.get(token)
        if vec is None:
            digest = hashlib.sha256(f"{self.seed}:{token}".encode()).digest()
            rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
            vec = rng.standard_normal(self.dim)
            vec = (vec / np.linalg.norm(vec)).astype(np.float32)
            self._cache[token] = vec
        return vec

    def tokens(self, text: str) -> list[str]:
        toks = tokenize(text)
        if len(toks) > self.max_tokens:
            raise TextEncodingError(f"prompt has {len(toks)} tokens, limit is {self.max_tokens}")
        return toks or [NULL_TOKEN]

    def encode(self, text: str) -> TextEmbedding:
        toks = self.tokens(text)
        vectors = torch.from_numpy(np.stack([self.token_vector(t) for t in toks]))
        return TextEmbedding(tuple(toks), vectors, vectors.mean(0))


class EmbeddingFileEncoder:
    """Token vectors precomputed by an external encoder.

    The file is JSON::

        {"dim": 512,
         "prompts": {"a person walks": {"tokens": ["a", "person", "walks"],
                                        "vectors": [[...], [...], [...]]},
                     "": {"tokens": ["<null>"], "vectors": [[...]]}}}

    Every prompt used for training or sampling (including the empty prompt)
    must be present.
    """

    def __init__(self, path: str | Path, max_tokens: int = DEFAULT_MAX_TOKENS):
        self.path = Path(path)
        doc = json.loads(self.path.read_text())
        self.dim = int(doc["dim"])
        self.max_tokens = max_tokens
        self._prompts = doc["prompts"]

    @property
    def name(self) -> str:
        return f"file:{self.path}"

    def tokens(self, text: str) -> list[str]:
        return list(self._entry(text)["tokens"])

    def _entry(self, text: str) -> dict:
        try:
            return self._prompts[text]
        except KeyError:
            raise TextEncodingError(f"prompt {text!r} missing from {self.path}") from None

    def encode(self, text: str) -> TextEmbedding:
        entry = self._entry(text)
        vectors = torch.tensor(entry["vectors"], dtype=torch.float32)
        if vectors.ndim != 2 or vectors.shape[1] != self.dim or vectors.shape[0] != len(entry["tokens"]):
            raise TextEncodingError(f"prompt {text!r}: vectors do not match tokens/dim")
        if vectors.shape[0] > self.max_tokens:
            raise TextEncodingError(f"prompt has {vectors.shape[0]} tokens, limit is {self.max_tokens}")
        return TextEmbedding(tuple(entry["tokens"]), vectors, vectors.mean(0))


def make_text_encoder(name: str, dim: int = 128, seed: int = 0, max_tokens: int = DEFAULT_MAX_TOKENS):
    if name == "stub":
        return StubTextEncoder(dim=dim, seed=seed, max_tokens=max_tokens)
    if name.startswith("file:"):
        return EmbeddingFileEncoder(name[len("file:"):], max_tokens=max_tokens)
    raise TextEncodingError(f"unknown text encoder {name!r}")


def encode_text(text: str, encoder) -> TextEmbedding:
    return encoder.encode(text)


def pad_batch(embeddings: list[TextEmbedding]) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack token vectors to (B, K_max, D) with a (B, K_max) padding mask (True = pad)."""
    k_max = max(e.n_tokens for e in embeddings)
    dim = embeddings[0].vectors.shape[1]
    out = torch.zeros(len(embeddings), k_max, dim)
    mask = torch.ones(len(embeddings), k_max, dtype=torch.bool)
    for i, e in enumerate(embeddings):
        out[i, : e.n_tokens] = e.vectors
        mask[i, : e.n_tokens] = False
    return out, mask
