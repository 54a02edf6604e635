"""Text embedding providers and the cosine relevance score used for retrieval."""
from __future__ import annotations

import hashlib
import logging
import os
import string
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import httpx
import numpy as np

from engine.errors import ConfigurationError, ParseError, TransportError, ValidationError

logger = logging.getLogger(__name__)

DEFAULT_DIMENSION = 64


class RelevanceScore(NamedTuple):
    value: float
    degenerate: bool = False


class EmbeddingProvider(ABC):
    kind = "abstract"

    def __init__(self, dimension: int):
        if dimension <= 0:
            raise ValidationError(f"embedding dimension must be positive, got {dimension}")
        self.dimension = dimension
        # identical keys may race in; setdefault keeps the first vector
        self._cache: dict[str, np.ndarray] = {}

    def embed(self, text: str) -> np.ndarray:
        key = _key(text)
        cached = self._cache.get(key)
        if cached is not None:
            return cached
        return self._store(key, self._compute(key))

    def embed_many(self, texts: Sequence[str]) -> np.ndarray:
        if not texts:
            return np.zeros((0, self.dimension))
        return np.vstack([self.embed(t) for t in texts])

    def _store(self, key: str, vector) -> np.ndarray:
        vector = np.asarray(vector, dtype=np.float64).reshape(-1)
        if vector.shape != (self.dimension,):
            raise ValidationError(f"{self.kind} provider returned dimension {vector.shape[0]}, "
                                  f"expected {self.dimension}")
        if not np.all(np.isfinite(vector)):
            raise ValidationError(f"{self.kind} provider returned a non-finite vector for {key!r}")
        vector.setflags(write=False)
        return self._cache.setdefault(key, vector)

    @abstractmethod
    def _compute(self, text: str) -> np.ndarray:
        ...


def _key(text: str) -> str:
    key = (text or "").strip()
    if not key:
        raise ValidationError("cannot embed empty text")
    return key


def tokenize(text: str) -> list[str]:
    tokens = [t.strip(string.punctuation).lower() for t in text.split()]
    return [t for t in tokens if t] or text.lower().split()


def _hash64(token: str, person: bytes) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8, person=person).digest()
    return int.from_bytes(digest, "little")


class HashEmbeddingProvider(EmbeddingProvider):
    """Signed feature hashing of whitespace tokens, L2-normalised."""
    kind = "deterministic-hash"

    def _compute(self, text: str) -> np.ndarray:
        vector = np.zeros(self.dimension)
        for token in tokenize(text):
            index = _hash64(token, b"grasp-index") % self.dimension
            sign = 1.0 if _hash64(token, b"grasp-sign") & 1 else -1.0
            vector[index] += sign
        norm = np.linalg.norm(vector)
        return vector / norm if norm > 0 else vector


def read_embedding_table(path: str | Path) -> dict[str, np.ndarray]:
    table = {}
    dimension = None
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip():
                continue
            label, sep, values = line.partition("\t")
            if not sep or not label.strip():
                raise ParseError("expected label<TAB>v1,v2,...", line_no)
            try:
                vector = np.array([float(v) for v in values.split(",")])
            except ValueError:
                raise ParseError("non-numeric vector component", line_no)
            if dimension is None:
                dimension = vector.shape[0]
            elif vector.shape[0] != dimension:
                raise ParseError(f"dimension {vector.shape[0]} differs from {dimension}", line_no)
            table[label.strip()] = vector
    if not table:
        raise ParseError(f"{path}: empty embedding table")
    return table


class TableEmbeddingProvider(EmbeddingProvider):
    kind = "table-file"

    def __init__(self, path: str | Path):
        self._table = read_embedding_table(path)
        super().__init__(len(next(iter(self._table.values()))))
        self._fallback = HashEmbeddingProvider(self.dimension)
        self.path = str(path)

    def _compute(self, text: str) -> np.ndarray:
        if text in self._table:
            return self._table[text]
        logger.warning("no table row for %r in %s, using hash embedding", text, self.path)
        return self._fallback.embed(text)


class HttpEmbeddingProvider(EmbeddingProvider):
    """POST {"texts": [...]} -> {"vectors": [[...], ...]}."""
    kind = "http-service"

    def __init__(self, endpoint: str, dimension: int, token: str | None = None,
                 retries: int = 2, timeout: float = 10.0, client: httpx.Client | None = None):
        super().__init__(dimension)
        if not endpoint:
            raise ConfigurationError("http embedding provider needs an endpoint", "EMBED_URL")
        self.endpoint = endpoint
        self.token = token
        self.retries = retries
        self.timeout = timeout
        self._client = client or httpx.Client(timeout=timeout)

    def _compute(self, text: str) -> np.ndarray:
        return self._request([text])[0]

    def embed_many(self, texts: Sequence[str]) -> np.ndarray:
        keys = [_key(t) for t in texts]
        missing = list(dict.fromkeys(k for k in keys if k not in self._cache))
        if missing:
            for key, vector in zip(missing, self._request(missing)):
                self._store(key, vector)
        return super().embed_many(keys)

    def _request(self, texts: list[str]) -> list[list[float]]:
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        last_error = None
        for attempt in range(self.retries + 1):
            try:
                response = self._client.post(self.endpoint, json={"texts": texts}, headers=headers)
                response.raise_for_status()
                vectors = response.json()["vectors"]
                if len(vectors) != len(texts) or any(len(v) != self.dimension for v in vectors):
                    raise ValueError("vector count or dimension mismatch")
                return vectors
            except (httpx.HTTPError, ValueError, KeyError, TypeError) as exc:
                last_error = exc
                logger.warning("embedding request attempt %d failed: %s", attempt + 1, exc)
        raise TransportError(f"embedding service {self.endpoint} failed: {last_error}", self.retries)


def build_provider(config: Mapping) -> EmbeddingProvider:
    kind = config.get("EMBED_PROVIDER", "hash")
    dimension = int(config.get("EMBED_DIM", DEFAULT_DIMENSION))
    if kind in ("hash", HashEmbeddingProvider.kind):
        return HashEmbeddingProvider(dimension)
    if kind in ("table", TableEmbeddingProvider.kind):
        path = config.get("EMBED_TABLE")
        if not path:
            raise ConfigurationError("table provider needs EMBED_TABLE", "EMBED_TABLE")
        provider = TableEmbeddingProvider(path)
        if "EMBED_DIM" in config and provider.dimension != dimension:
            raise ConfigurationError(
                f"embedding table {path} has width {provider.dimension}, EMBED_DIM is {dimension}", "EMBED_DIM")
        return provider
    if kind in ("http", HttpEmbeddingProvider.kind):
        return HttpEmbeddingProvider(
            config.get("EMBED_URL") or os.environ.get("GRASP_EMBED_URL", ""),
            dimension,
            token=config.get("EMBED_TOKEN") or os.environ.get("GRASP_EMBED_TOKEN"),
            retries=int(config.get("BACKEND_RETRIES", 2)),
        )
    raise ConfigurationError(f"unknown embedding provider {kind!r}", "EMBED_PROVIDER")


def relevance(q: np.ndarray, e: np.ndarray) -> RelevanceScore:
    """cos(q, e); a zero-norm side scores 0 and is flagged degenerate."""
    q = np.asarray(q, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    if q.shape != e.shape:
        raise ValidationError(f"relevance needs equal dimensions, got {q.shape} and {e.shape}")
    nq = float(np.linalg.norm(q))
    ne = float(np.linalg.norm(e))
    if nq == 0.0 or ne == 0.0:
        return RelevanceScore(0.0, True)
    value = float(np.dot(q, e)) / (nq * ne)
    return RelevanceScore(min(1.0, max(-1.0, value)))


def top_k(q: np.ndarray, candidates: Iterable[tuple[int, np.ndarray]],
          k: int) -> list[tuple[int, float]]:
    if k < 1:
        raise ValidationError(f"k must be at least 1, got {k}")
    scored = [(entity, relevance(q, vector).value) for entity, vector in candidates]
    scored.sort(key=lambda pair: (-pair[1], pair[0]))
    return scored[:k]
