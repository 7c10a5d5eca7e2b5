"""Modality-partitioned knowledge bases stored as JSON Lines document records."""

from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterator, Optional, Tuple, Union

from utils.errors import KnowledgeBaseError, RecordFormatError
from utils.logger import get_logger
from utils.records import iter_jsonl, write_jsonl

logger = get_logger(__name__)

KNOWN_FIELDS = ('id', 'modality', 'text', 'image_path', 'source')


class Modality(str, Enum):
    """Knowledge-base modality. New modalities are added as members here."""

    VISUAL = "visual"
    TEXTUAL = "textual"

    @classmethod
    def parse(cls, value: Union[str, "Modality"]) -> "Modality":
        if isinstance(value, Modality):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            choices = ', '.join(m.value for m in cls)
            raise KnowledgeBaseError(f"unknown modality {value!r} (expected one of: {choices})")


@dataclass(frozen=True)
class Document:
    """One retrievable unit: an image caption plus path, or a text chunk."""

    id: str
    modality: Modality
    text: str
    image_path: Optional[str] = None
    source: Optional[str] = None

    def __post_init__(self):
        if not isinstance(self.id, str) or not self.id:
            raise KnowledgeBaseError("document id must be a non-empty string")
        if not isinstance(self.text, str) or not self.text.strip():
            raise KnowledgeBaseError(f"document {self.id!r} has empty text")
        if self.modality is Modality.VISUAL and not self.image_path:
            raise KnowledgeBaseError(f"visual document {self.id!r} requires an image_path")
        if self.modality is Modality.TEXTUAL and self.image_path is not None:
            raise KnowledgeBaseError(f"textual document {self.id!r} must not carry an image_path")

    @classmethod
    def from_record(cls, record: Dict[str, Any]) -> "Document":
        for key in ('id', 'modality', 'text'):
            if key not in record:
                raise KnowledgeBaseError(f"missing required field {key!r}")
        for key in ('id', 'text'):
            if not isinstance(record[key], str):
                raise KnowledgeBaseError(f"field {key!r} must be a string")
        for key in ('image_path', 'source'):
            if record.get(key) is not None and not isinstance(record[key], str):
                raise KnowledgeBaseError(f"field {key!r} must be a string")
        return cls(
            id=record['id'],
            modality=Modality.parse(record['modality']),
            text=record['text'],
            image_path=record.get('image_path'),
            source=record.get('source'),
        )

    def to_record(self) -> Dict[str, Any]:
        record: Dict[str, Any] = {'id': self.id, 'modality': self.modality.value, 'text': self.text}
        if self.image_path is not None:
            record['image_path'] = self.image_path
        if self.source is not None:
            record['source'] = self.source
        return record


@dataclass(frozen=True)
class KnowledgeBase:
    """An ordered, modality-homogeneous, immutable collection of documents."""

    name: str
    modality: Modality
    documents: Tuple[Document, ...] = ()
    _positions: Dict[str, int] = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, 'documents', tuple(self.documents))
        for position, doc in enumerate(self.documents):
            if doc.modality is not self.modality:
                raise KnowledgeBaseError(
                    f"document {doc.id!r} is {doc.modality.value}, knowledge base "
                    f"{self.name!r} is {self.modality.value}")
            if doc.id in self._positions:
                raise KnowledgeBaseError(f"duplicate document id {doc.id!r}")
            self._positions[doc.id] = position

    def __len__(self) -> int:
        return len(self.documents)

    def __iter__(self) -> Iterator[Document]:
        return iter(self.documents)

    def __contains__(self, doc_id: object) -> bool:
        return doc_id in self._positions

    def get(self, doc_id: str) -> Document:
        try:
            return self.documents[self._positions[doc_id]]
        except KeyError:
            raise KnowledgeBaseError(f"document {doc_id!r} not in knowledge base {self.name!r}")


@dataclass(frozen=True)
class KBStats:
    count: int
    modality: Modality
    total_text_bytes: int

    def to_dict(self) -> Dict[str, Any]:
        return {'count': self.count, 'modality': self.modality.value,
                'total_text_bytes': self.total_text_bytes}


def load_kb(path: Union[str, Path], modality: Union[str, Modality],
            name: Optional[str] = None) -> KnowledgeBase:
    """Load a knowledge base from a JSON Lines file, preserving file order.

    Raises:
        RecordFormatError: Missing file, malformed record, duplicate id, or a record
            whose modality differs from ``modality``; the message names the line.
    """
    modality = Modality.parse(modality)
    path = Path(path)
    documents = []
    seen: Dict[str, int] = {}
    warned_fields = set()

    for line_no, record in iter_jsonl(path):
        unknown = [key for key in record if key not in KNOWN_FIELDS and key not in warned_fields]
        for key in unknown:
            warned_fields.add(key)
            logger.warning("Ignoring unknown document field", field=key, path=str(path),
                           line=line_no)
        try:
            doc = Document.from_record(record)
        except KnowledgeBaseError as e:
            raise RecordFormatError(str(e), str(path), line_no)
        if doc.modality is not modality:
            raise RecordFormatError(
                f"record modality {doc.modality.value!r} does not match {modality.value!r}",
                str(path), line_no)
        if doc.id in seen:
            raise RecordFormatError(
                f"duplicate document id {doc.id!r} (first seen at line {seen[doc.id]})",
                str(path), line_no)
        seen[doc.id] = line_no
        documents.append(doc)

    kb = KnowledgeBase(name=name or path.stem, modality=modality, documents=tuple(documents))
    logger.info("Knowledge base loaded", kb=kb.name, modality=modality.value, count=len(kb))
    return kb


def save_kb(kb: KnowledgeBase, path: Union[str, Path]) -> None:
    write_jsonl(path, (doc.to_record() for doc in kb.documents))
    logger.info("Knowledge base saved", kb=kb.name, path=str(path), count=len(kb))


def kb_stats(kb: KnowledgeBase) -> KBStats:
    return KBStats(
        count=len(kb),
        modality=kb.modality,
        total_text_bytes=sum(len(doc.text.encode('utf-8')) for doc in kb.documents),
    )
