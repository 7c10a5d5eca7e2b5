"""Exact top-k retrieval over flat indexes of unit vectors, plus IR metrics.

Rows and queries are unit-norm, so ranking by descending cosine is the same as
ranking by ascending L2 distance (``|a - b|^2 = 2 - 2 a.b``).

Index file layout (little-endian)::

    MRAGIDX1                 8-byte magic
    uint64                   header length in bytes
    header                   UTF-8 JSON: kb_name, modality, dim, count,
                             embedder fingerprint, ids
    float32[count * dim]     row-major vector block
"""

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Sequence, Set, Tuple, Union

import numpy as np

from utils.errors import (ConfigError, DimensionMismatchError, IndexFormatError, KnowledgeBaseError,
                          MetricError, RetrievalError)
from utils.logger import get_logger

from .embedding import NORM_TOLERANCE, Embedder
from .kb_store import Document, KnowledgeBase, Modality

logger = get_logger(__name__)

INDEX_MAGIC = b"MRAGIDX1"
INDEX_VERSION = 1
DEFAULT_K = 3


@dataclass(frozen=True)
class ScoredDoc:
    id: str
    score: float
    rank: int

    def to_dict(self) -> Dict[str, object]:
        return {'id': self.id, 'score': self.score, 'rank': self.rank}


@dataclass(frozen=True, eq=False)
class FlatIndex:
    """Immutable exhaustive-scan index.

    ``vectors`` holds the float32 rows re-normalized in float64, so a stored row
    scores 1.0 against itself to within float64 rounding.
    """

    kb_name: str
    modality: Modality
    dim: int
    ids: Tuple[str, ...]
    vectors: np.ndarray
    embedder_fingerprint: str
    _rows32: np.ndarray = field(repr=False, compare=False, default=None)

    def __post_init__(self):
        ids = tuple(self.ids)
        object.__setattr__(self, 'ids', ids)
        if len(set(ids)) != len(ids):
            raise IndexFormatError("index ids must be unique")
        rows32 = np.ascontiguousarray(self.vectors, dtype='<f4')
        if rows32.ndim != 2 or rows32.shape != (len(ids), self.dim):
            raise IndexFormatError(
                f"vector block shape {rows32.shape} does not match {len(ids)} x {self.dim}")
        rows = rows32.astype(np.float64)
        norms = np.linalg.norm(rows, axis=1)
        if len(ids) and not np.all(np.abs(norms - 1.0) <= NORM_TOLERANCE):
            raise IndexFormatError("index rows must be unit-norm")
        if len(ids):
            rows = rows / norms[:, None]
        rows.setflags(write=False)
        rows32.setflags(write=False)
        object.__setattr__(self, 'vectors', rows)
        object.__setattr__(self, '_rows32', rows32)

    def __len__(self) -> int:
        return len(self.ids)

    def manifest(self) -> Dict[str, object]:
        return {
            'version': INDEX_VERSION,
            'kb_name': self.kb_name,
            'modality': self.modality.value,
            'dim': self.dim,
            'count': len(self.ids),
            'embedder_fingerprint': self.embedder_fingerprint,
        }

    def to_bytes(self) -> bytes:
        header = dict(self.manifest(), ids=list(self.ids))
        header_bytes = json.dumps(header, sort_keys=True, ensure_ascii=False).encode('utf-8')
        return (INDEX_MAGIC + struct.pack('<Q', len(header_bytes)) + header_bytes
                + self._rows32.tobytes(order='C'))


def build_index(kb: KnowledgeBase, embedder: Embedder) -> FlatIndex:
    """Embed every document of ``kb`` in order into a new flat index.

    Raises:
        KnowledgeBaseError: For an empty knowledge base.
        EmbeddingError: Naming the document whose embedding failed.
    """
    if len(kb) == 0:
        raise KnowledgeBaseError(f"cannot index empty knowledge base {kb.name!r}", stage="index")
    vectors = embedder.embed_documents(kb.documents)
    matrix = np.vstack(vectors).astype('<f4')
    index = FlatIndex(
        kb_name=kb.name,
        modality=kb.modality,
        dim=embedder.dim,
        ids=tuple(doc.id for doc in kb.documents),
        vectors=matrix,
        embedder_fingerprint=embedder.fingerprint,
    )
    logger.info("Flat index built", kb=kb.name, count=len(index), dim=index.dim)
    return index


def save_index(index: FlatIndex, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(index.to_bytes())
    logger.info("Flat index saved", kb=index.kb_name, path=str(path))


def load_index(path: Union[str, Path]) -> FlatIndex:
    path = Path(path)
    if not path.exists():
        raise IndexFormatError(f"index file not found: {path}")
    data = path.read_bytes()
    prefix = len(INDEX_MAGIC) + 8
    if len(data) < prefix or data[:len(INDEX_MAGIC)] != INDEX_MAGIC:
        raise IndexFormatError(f"{path} is not a flat index file (bad magic header)")
    (header_len,) = struct.unpack('<Q', data[len(INDEX_MAGIC):prefix])
    try:
        header = json.loads(data[prefix:prefix + header_len].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise IndexFormatError(f"{path}: corrupt index header ({e})")
    if header.get('version') != INDEX_VERSION:
        raise IndexFormatError(f"{path}: unsupported index version {header.get('version')!r}")

    dim, count = int(header['dim']), int(header['count'])
    block = data[prefix + header_len:]
    if len(block) != count * dim * 4:
        raise IndexFormatError(f"{path}: vector block has {len(block)} bytes, "
                               f"expected {count * dim * 4}")
    vectors = np.frombuffer(block, dtype='<f4').reshape(count, dim)
    return FlatIndex(
        kb_name=header['kb_name'],
        modality=Modality.parse(header['modality']),
        dim=dim,
        ids=tuple(header['ids']),
        vectors=vectors,
        embedder_fingerprint=header['embedder_fingerprint'],
    )


def search(index: FlatIndex, query: np.ndarray, k: int = DEFAULT_K) -> List[ScoredDoc]:
    """Exact top-k by descending cosine; equal scores keep insertion order.

    Raises:
        RetrievalError: If ``k`` is below 1.
        DimensionMismatchError: If the query dimension differs from the index.
    """
    if k < 1:
        raise RetrievalError(f"k must be >= 1, got {k}")
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (index.dim,):
        raise DimensionMismatchError(
            f"query dim {query.shape[-1] if query.ndim else 0} does not match index dim {index.dim}")
    if len(index) == 0:
        return []

    scores = np.clip(index.vectors @ query, -1.0, 1.0)
    # Stable sort on the negated scores keeps lower insertion order first on ties
    order = np.argsort(-scores, kind='stable')[:k]
    return [ScoredDoc(id=index.ids[i], score=float(scores[i]), rank=rank)
            for rank, i in enumerate(order, start=1)]


class IndexedKnowledgeBase:
    """A knowledge base paired with its flat index, resolving hits to documents."""

    def __init__(self, kb: KnowledgeBase, index: FlatIndex):
        if kb.modality is not index.modality:
            raise IndexFormatError(
                f"index {index.kb_name!r} is {index.modality.value}, "
                f"knowledge base {kb.name!r} is {kb.modality.value}")
        missing = [doc_id for doc_id in index.ids if doc_id not in kb]
        if missing:
            raise IndexFormatError(
                f"index references {len(missing)} ids missing from {kb.name!r}, e.g. {missing[0]!r}")
        self.kb = kb
        self.index = index

    @property
    def modality(self) -> Modality:
        return self.kb.modality

    def search(self, query: np.ndarray, k: int = DEFAULT_K) -> List[Tuple[ScoredDoc, Document]]:
        return [(hit, self.kb.get(hit.id)) for hit in search(self.index, query, k)]


def check_indexes(visual: IndexedKnowledgeBase, textual: IndexedKnowledgeBase,
                  embedder: Embedder) -> None:
    """Raise ConfigError unless both indexes match their modality and the embedder."""
    for expected, indexed in ((Modality.VISUAL, visual), (Modality.TEXTUAL, textual)):
        if indexed.modality is not expected:
            raise ConfigError(f"the {expected.value} slot holds a {indexed.modality.value} index")
        if indexed.index.embedder_fingerprint != embedder.fingerprint:
            raise ConfigError(
                f"index {indexed.index.kb_name!r} was built with "
                f"{indexed.index.embedder_fingerprint!r}, configured embedder is "
                f"{embedder.fingerprint!r}")


def retrieval_metrics(runs: Mapping[str, Sequence[str]],
                      qrels: Mapping[str, Set[str]],
                      k: int) -> Dict[str, float]:
    """MRR@k, Recall@k, mAP@k and NDCG@k with binary relevance, averaged over ``runs``.

    Raises:
        MetricError: For a query missing from ``qrels`` or a run with repeated ids.
    """
    if k < 1:
        raise MetricError("k must be >= 1")
    if not runs:
        return {f"MRR@{k}": 0.0, f"Recall@{k}": 0.0, f"mAP@{k}": 0.0, f"NDCG@{k}": 0.0}

    mrr, recall, average_precision, ndcg = [], [], [], []
    for query_id, ranked in runs.items():
        if query_id not in qrels:
            raise MetricError(f"query {query_id!r} has a run but no relevance judgements")
        if len(set(ranked)) != len(ranked):
            raise MetricError(f"run for query {query_id!r} repeats document ids")
        relevant = set(qrels[query_id])
        hits = [doc_id in relevant for doc_id in list(ranked)[:k]]

        first_hit = next((rank for rank, hit in enumerate(hits, start=1) if hit), None)
        mrr.append(1.0 / first_hit if first_hit else 0.0)
        recall.append(sum(hits) / len(relevant) if relevant else 0.0)

        precisions = [sum(hits[:rank]) / rank for rank, hit in enumerate(hits, start=1) if hit]
        denominator = min(len(relevant), k)
        average_precision.append(sum(precisions) / denominator if denominator else 0.0)

        dcg = sum(1.0 / math.log2(rank + 1) for rank, hit in enumerate(hits, start=1) if hit)
        ideal = sum(1.0 / math.log2(rank + 1) for rank in range(1, denominator + 1))
        ndcg.append(dcg / ideal if ideal else 0.0)

    count = len(runs)
    return {
        f"MRR@{k}": sum(mrr) / count,
        f"Recall@{k}": sum(recall) / count,
        f"mAP@{k}": sum(average_precision) / count,
        f"NDCG@{k}": sum(ndcg) / count,
    }
