"""Query and document embedding behind a pluggable backend.

Two backends share one interface:

* ``hash``: deterministic offline embedder. Character 3-grams of the text are
  feature-hashed into ``dim`` buckets with a seeded sign hash, then the vector is
  L2-normalized.
* ``remote``: an embedding service reached over HTTP
  (``{"model", "inputs": [{"text", "image_path"}]}`` -> ``{"vectors": [...]}``).
"""

import hashlib
import math
import os
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from utils.errors import ConfigError, DimensionMismatchError, EmbeddingError, MragError
from utils.http_client import JsonHttpClient
from utils.logger import LoggerMixin

from .kb_store import Document, Modality

DEFAULT_HASH_DIM = 256
NORM_TOLERANCE = 1e-6
BACKENDS = ('hash', 'remote')


@dataclass(frozen=True)
class EmbedderConfig:
    backend: str = 'hash'
    dim: int = DEFAULT_HASH_DIM
    endpoint: Optional[str] = None
    model_name: Optional[str] = None
    seed: Optional[int] = None
    timeout_seconds: float = 30.0
    max_batch: int = 64
    max_in_flight: int = 4
    retries: int = 2
    backoff_seconds: float = 1.0
    auth_token_env: Optional[str] = None

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ConfigError(f"embedder.backend must be one of {BACKENDS}, got {self.backend!r}")
        if not isinstance(self.dim, int) or self.dim <= 0:
            raise ConfigError(f"embedder.dim must be a positive integer, got {self.dim!r}")
        if self.backend == 'remote' and not self.endpoint:
            raise ConfigError("embedder.endpoint is required for the remote backend")
        if self.backend == 'hash' and self.seed is None:
            raise ConfigError("embedder.seed is required for the hash backend")
        if self.max_batch < 1:
            raise ConfigError("embedder.max_batch must be >= 1")

    @classmethod
    def from_section(cls, section: Dict[str, Any]) -> "EmbedderConfig":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(section) - known)
        if unknown:
            raise ConfigError(f"unknown embedder settings: {unknown}")
        return cls(**section)

    @property
    def fingerprint(self) -> str:
        """Identifies the vector space; indexes and queries must agree on it."""
        if self.backend == 'hash':
            return f"hash:dim={self.dim}:seed={self.seed}"
        return f"remote:model={self.model_name}:dim={self.dim}"


def l2_normalize(values: Sequence[float]) -> np.ndarray:
    """Return ``values`` scaled to unit L2 norm as a float64 vector.

    Raises:
        EmbeddingError: For zero or non-finite vectors.
    """
    vector = np.asarray(values, dtype=np.float64)
    if vector.ndim != 1 or vector.size == 0:
        raise EmbeddingError("expected a non-empty 1-D vector")
    if not np.all(np.isfinite(vector)):
        raise EmbeddingError("vector has non-finite entries")
    norm = float(np.linalg.norm(vector))
    if norm == 0.0:
        raise EmbeddingError("cannot normalize the zero vector")
    return vector / norm


def cosine_sim(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity of two unit vectors (their dot product), clamped to [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"dimension mismatch: {a.shape[-1]} vs {b.shape[-1]}")
    return float(min(1.0, max(-1.0, float(np.dot(a, b)))))


def _seed_key(seed: int) -> bytes:
    return int(seed).to_bytes(8, 'little', signed=True)


class Embedder(LoggerMixin):
    """Common interface; use :func:`build_embedder` to construct one."""

    def __init__(self, config: EmbedderConfig):
        self.config = config

    @property
    def dim(self) -> int:
        return self.config.dim

    @property
    def fingerprint(self) -> str:
        return self.config.fingerprint

    def embed_text(self, text: str, image_path: Optional[str] = None) -> np.ndarray:
        if not isinstance(text, str) or not text.strip():
            raise EmbeddingError("cannot embed empty text")
        return self._embed_batch([(text, image_path)])[0]

    def embed_document(self, doc: Document) -> np.ndarray:
        image_path = doc.image_path if doc.modality is Modality.VISUAL else None
        return self.embed_text(doc.text, image_path)

    def embed_documents(self, docs: Sequence[Document]) -> List[np.ndarray]:
        """Embed documents in ``max_batch`` chunks, preserving order.

        Raises:
            EmbeddingError: Naming the first document of the failing batch.
        """
        vectors: List[np.ndarray] = []
        size = self.config.max_batch
        for start in range(0, len(docs), size):
            batch = docs[start:start + size]
            inputs = [(doc.text, doc.image_path if doc.modality is Modality.VISUAL else None)
                      for doc in batch]
            try:
                vectors.extend(self._embed_batch(inputs))
            except MragError as e:
                raise EmbeddingError(f"embedding failed at document {batch[0].id!r}: {e}") from e
        return vectors

    def _embed_batch(self, inputs: List[tuple]) -> List[np.ndarray]:
        raise NotImplementedError


class HashEmbedder(Embedder):
    """Seeded feature hashing of padded character 3-grams."""

    def _embed_batch(self, inputs: List[tuple]) -> List[np.ndarray]:
        return [self._embed_one(text) for text, _ in inputs]

    def _embed_one(self, text: str) -> np.ndarray:
        if not text.strip():
            raise EmbeddingError("cannot embed empty text")
        # Boundary padding gives short strings ("ab") at least two grams
        padded = f" {text} "
        key = _seed_key(self.config.seed)
        vector = np.zeros(self.config.dim, dtype=np.float64)
        counts = np.zeros(self.config.dim, dtype=np.float64)
        for start in range(len(padded) - 2):
            gram = padded[start:start + 3].encode('utf-8')
            digest = hashlib.blake2b(gram, digest_size=8, key=key).digest()
            value = int.from_bytes(digest, 'little')
            bucket = value % self.config.dim
            sign = 1.0 if (value >> 63) & 1 == 0 else -1.0
            vector[bucket] += sign
            counts[bucket] += 1.0
        if not np.any(vector):
            # Every signed gram cancelled; fall back to the unsigned counts
            vector = counts
        return l2_normalize(vector)


class RemoteEmbedder(Embedder):
    """Embeds through an HTTP service; one POST per batch of inputs."""

    def __init__(self, config: EmbedderConfig):
        super().__init__(config)
        headers = {}
        if config.auth_token_env:
            token = os.environ.get(config.auth_token_env)
            if token:
                headers['Authorization'] = f"Bearer {token}"
        self.client = JsonHttpClient(
            timeout_seconds=config.timeout_seconds,
            retries=config.retries,
            backoff_seconds=config.backoff_seconds,
            max_in_flight=config.max_in_flight,
            headers=headers,
            stage="embed",
        )

    def _embed_batch(self, inputs: List[tuple]) -> List[np.ndarray]:
        payload = {
            'model': self.config.model_name,
            'inputs': [{'text': text, 'image_path': image_path} for text, image_path in inputs],
        }
        body = self.client.post_json(self.config.endpoint, payload)
        raw_vectors = body.get('vectors')
        if not isinstance(raw_vectors, list) or len(raw_vectors) != len(inputs):
            raise EmbeddingError(
                f"embedding service returned {0 if not isinstance(raw_vectors, list) else len(raw_vectors)} "
                f"vectors for {len(inputs)} inputs")
        vectors = []
        for raw in raw_vectors:
            if not isinstance(raw, list) or len(raw) != self.config.dim:
                got = len(raw) if isinstance(raw, list) else 'non-list'
                raise DimensionMismatchError(
                    f"embedding service returned dim {got}, expected {self.config.dim}",
                    stage="embed")
            if not all(isinstance(x, (int, float)) and math.isfinite(x) for x in raw):
                raise EmbeddingError("embedding service returned non-finite values")
            vectors.append(l2_normalize(raw))
        self.logger.debug("Remote batch embedded", count=len(vectors))
        return vectors


def build_embedder(config: EmbedderConfig) -> Embedder:
    if config.backend == 'hash':
        return HashEmbedder(config)
    return RemoteEmbedder(config)


def embed_text(config: EmbedderConfig, text: str) -> np.ndarray:
    return build_embedder(config).embed_text(text)


def embed_document(config: EmbedderConfig, doc: Document) -> np.ndarray:
    return build_embedder(config).embed_document(doc)
