"""Deterministic hash-projection text embeddings.

A token is hashed (together with a seed) into a pseudo-random unit vector;
sequences embed as the normalized mean of their token vectors. These vectors
stand in for a pretrained contextual encoder everywhere a dense text
representation is needed: entity/document clustering, document importance,
fact retrieval, and the embedding-based evaluation metric. Same (token, seed,
dim) always gives bit-identical vectors, on any platform.
"""
from __future__ import annotations

import hashlib

import numpy as np


class HashEmbedder:
    """Training-free token/sequence embedder based on seeded hash projections."""

    def __init__(self, dim: int = 64, seed: int = 0):
        if dim < 1:
            raise ValueError(f"dim must be >= 1, got {dim}")
        self.dim = dim
        self.seed = seed
        self._cache: dict[str, np.ndarray] = {}

    def embed_token(self, token: str) -> np.ndarray:
        """Unit vector for one token; deterministic in (token, seed, dim)."""
        vec = self._cache.get(token)
        if vec is None:
            digest = hashlib.blake2b(
                token.encode("utf-8"), digest_size=8, key=str(self.seed).encode("utf-8")
            ).digest()
            rng = np.random.default_rng(int.from_bytes(digest, "little"))
            raw = rng.standard_normal(self.dim)
            vec = raw / np.linalg.norm(raw)
            vec.flags.writeable = False
            self._cache[token] = vec
        return vec

    def embed_sequence(self, tokens: list[str]) -> np.ndarray:
        """L2-normalized mean of the token vectors."""
        if not tokens:
            raise ValueError("cannot embed an empty token sequence")
        mean = np.mean([self.embed_token(t) for t in tokens], axis=0)
        norm = np.linalg.norm(mean)
        if norm == 0.0:
            raise ValueError("token vectors cancelled to the zero vector")
        return mean / norm
