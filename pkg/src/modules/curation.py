"""Training-data construction from self-assessed generator answers.

For every QA pair the generator answers three times: without retrieval, with
visual top-k and with textual top-k. The three answers are scored against the
gold answers. Those scores drive:

* route labels (best strategy, ties to the cheaper one),
* tuning examples from the modality selected by a strategy (hardest by default),
* noise sets padding each question's gold documents with random fillers.
"""

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from utils.async_helpers import AsyncTaskManager, sync_to_async
from utils.errors import CurationError, MragError, NoiseSetError, RecordFormatError
from utils.logger import get_logger
from utils.records import iter_jsonl

from .embedding import Embedder
from .eval_metrics import Metric, Score, evaluate
from .flat_retriever import DEFAULT_K, IndexedKnowledgeBase, check_indexes
from .generation import DatasetStyle, Generator, PromptStyle, render_prompt
from .kb_store import Document, KnowledgeBase, Modality
from .retrieval_router import RetrievalType, RouteExample

logger = get_logger(__name__)

STRATEGIES = (RetrievalType.NA.value, RetrievalType.VISUAL.value, RetrievalType.TEXTUAL.value)
DEFAULT_TIE_ORDER = STRATEGIES
SELECTION_STRATEGIES = ('challenging', 'easy', 'random')
NOISE_SET_SIZE = 5


@dataclass(frozen=True)
class QAPair:
    id: str
    question: str
    golds: Tuple[str, ...]
    image_path: Optional[str] = None
    gold_doc_ids: Dict[str, Tuple[str, ...]] = field(default_factory=dict)
    parametric: bool = False
    metadata: Dict[str, Any] = field(default_factory=dict)
    category: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, 'golds', tuple(self.golds))
        if not isinstance(self.id, str) or not self.id:
            raise CurationError("QA pair id must be a non-empty string")
        if not isinstance(self.question, str) or not self.question.strip():
            raise CurationError(f"QA pair {self.id!r} has an empty question")
        if not self.golds or not all(isinstance(g, str) and g.strip() for g in self.golds):
            raise CurationError(f"QA pair {self.id!r} needs non-empty gold answers")
        normalized = {}
        for modality, ids in (self.gold_doc_ids or {}).items():
            normalized[Modality.parse(modality).value] = tuple(ids)
        object.__setattr__(self, 'gold_doc_ids', normalized)

    @classmethod
    def from_record(cls, record: Dict[str, Any]) -> "QAPair":
        for key in ('id', 'question', 'golds'):
            if key not in record:
                raise CurationError(f"missing required field {key!r}")
        golds = record['golds']
        if isinstance(golds, str):
            golds = [golds]
        return cls(
            id=record['id'],
            question=record['question'],
            golds=tuple(golds),
            image_path=record.get('image_path'),
            gold_doc_ids=record.get('gold_doc_ids') or {},
            parametric=bool(record.get('parametric', False)),
            metadata=record.get('metadata') or {},
            category=record.get('category'),
        )

    def to_record(self) -> Dict[str, Any]:
        record: Dict[str, Any] = {'id': self.id, 'question': self.question, 'golds': list(self.golds)}
        if self.image_path is not None:
            record['image_path'] = self.image_path
        if self.gold_doc_ids:
            record['gold_doc_ids'] = {key: list(ids) for key, ids in self.gold_doc_ids.items()}
        if self.parametric:
            record['parametric'] = True
        if self.metadata:
            record['metadata'] = dict(self.metadata)
        if self.category is not None:
            record['category'] = self.category
        return record


def load_qa_pairs(path: Union[str, Path]) -> List[QAPair]:
    pairs = []
    seen = set()
    for line_no, record in iter_jsonl(path):
        try:
            pair = QAPair.from_record(record)
        except (MragError, TypeError) as e:
            raise RecordFormatError(str(e), str(path), line_no)
        if pair.id in seen:
            raise RecordFormatError(f"duplicate QA pair id {pair.id!r}", str(path), line_no)
        seen.add(pair.id)
        pairs.append(pair)
    return pairs


def load_noise_records(path: Union[str, Path]) -> "List[NoiseRecord]":
    records = []
    for line_no, record in iter_jsonl(path):
        try:
            records.append(NoiseRecord.from_record(record))
        except (MragError, TypeError) as e:
            raise RecordFormatError(str(e), str(path), line_no)
    return records


@dataclass(frozen=True)
class StrategyScores:
    s_na: Score
    s_vis: Score
    s_text: Score
    responses: Dict[str, str] = field(default_factory=dict)

    def by_strategy(self) -> Dict[str, float]:
        return {RetrievalType.NA.value: self.s_na.value,
                RetrievalType.VISUAL.value: self.s_vis.value,
                RetrievalType.TEXTUAL.value: self.s_text.value}


@dataclass(frozen=True)
class SkipRecord:
    id: str
    stage: str
    reason: str

    def to_record(self) -> Dict[str, str]:
        return {'id': self.id, 'stage': self.stage, 'reason': self.reason}


@dataclass(frozen=True)
class TuningExample:
    id: str
    question: str
    image_path: Optional[str]
    modality: Modality
    docs: Tuple[Document, ...]
    answer: str
    tie_broken: bool

    def __post_init__(self):
        if not self.docs:
            raise CurationError(f"tuning example {self.id!r} has no documents")

    def to_record(self) -> Dict[str, Any]:
        return {
            'id': self.id,
            'question': self.question,
            'image_path': self.image_path,
            'modality': self.modality.value,
            'docs': [doc.to_record() for doc in self.docs],
            'answer': self.answer,
            'tie_broken': self.tie_broken,
        }


@dataclass(frozen=True)
class NoiseRecord:
    id: str
    question: str
    docs: Tuple[Document, ...]
    gold_doc_ids: Tuple[str, ...]
    golds: Tuple[str, ...] = ()
    image_path: Optional[str] = None

    def __post_init__(self):
        ids = [doc.id for doc in self.docs]
        if len(ids) != NOISE_SET_SIZE or not set(self.gold_doc_ids) <= set(ids):
            raise NoiseSetError(f"noise record {self.id!r} violates the 5-document contract")

    @property
    def filler_ids(self) -> Tuple[str, ...]:
        return tuple(doc.id for doc in self.docs if doc.id not in self.gold_doc_ids)

    def to_record(self) -> Dict[str, Any]:
        record: Dict[str, Any] = {
            'id': self.id,
            'question': self.question,
            'golds': list(self.golds),
            'gold_doc_ids': list(self.gold_doc_ids),
            'docs': [doc.to_record() for doc in self.docs],
        }
        if self.image_path is not None:
            record['image_path'] = self.image_path
        return record

    @classmethod
    def from_record(cls, record: Dict[str, Any]) -> "NoiseRecord":
        for key in ('id', 'question', 'golds', 'gold_doc_ids', 'docs'):
            if key not in record:
                raise CurationError(f"missing required field {key!r}")
        if not isinstance(record['docs'], list):
            raise CurationError("field 'docs' must be a list of document records")
        golds = tuple(record['golds'])
        if not golds:
            raise CurationError(f"noise record {record['id']!r} needs gold answers")
        return cls(
            id=record['id'],
            question=record['question'],
            docs=tuple(Document.from_record(doc) for doc in record['docs']),
            gold_doc_ids=tuple(record['gold_doc_ids']),
            golds=golds,
            image_path=record.get('image_path'),
        )


@dataclass
class CurationDeps:
    """Everything self-assessment needs; shared read-only across pairs."""

    visual: IndexedKnowledgeBase
    textual: IndexedKnowledgeBase
    embedder: Embedder
    generator: Generator
    dataset_style: DatasetStyle = DatasetStyle.SENTENCE
    k: int = DEFAULT_K
    metric: Metric = Metric.F1
    max_pairs_in_flight: int = 4
    max_generations_in_flight: int = 3

    def __post_init__(self):
        if self.k < 1:
            raise CurationError("k must be >= 1", stage="config")
        self.dataset_style = DatasetStyle.parse(self.dataset_style)
        self.metric = Metric.parse(self.metric)
        check_indexes(self.visual, self.textual, self.embedder)

    def index_for(self, modality: Modality) -> IndexedKnowledgeBase:
        return self.visual if modality is Modality.VISUAL else self.textual


@dataclass(frozen=True)
class _Assessment:
    scores: StrategyScores
    retrieved: Dict[Modality, Tuple[Document, ...]]


def pair_rng(seed: int, pair_id: str) -> np.random.Generator:
    """Per-pair generator so outputs do not depend on processing order."""
    if seed < 0:
        raise CurationError("curation seed must be non-negative", stage="config")
    digest = hashlib.blake2b(pair_id.encode('utf-8'), digest_size=8).digest()
    return np.random.default_rng(seed ^ int.from_bytes(digest, 'little'))


async def _assess(qa: QAPair, deps: CurationDeps) -> _Assessment:
    query = await sync_to_async(deps.embedder.embed_text)(qa.question, qa.image_path)
    retrieved = {}
    for modality in (Modality.VISUAL, Modality.TEXTUAL):
        hits = deps.index_for(modality).search(query, deps.k)
        retrieved[modality] = tuple(doc for _, doc in hits)

    style = PromptStyle(deps.dataset_style)
    visual_images = [doc.image_path for doc in retrieved[Modality.VISUAL]]
    query_images = [qa.image_path] if qa.image_path else []
    requests = {
        RetrievalType.NA.value: (render_prompt(qa.question, None, style.with_docs(False)),
                                 query_images),
        RetrievalType.VISUAL.value: (render_prompt(qa.question, retrieved[Modality.VISUAL],
                                                   style.with_docs(True)),
                                     query_images + visual_images),
        RetrievalType.TEXTUAL.value: (render_prompt(qa.question, retrieved[Modality.TEXTUAL],
                                                    style.with_docs(True)),
                                      query_images),
    }

    manager = AsyncTaskManager(deps.max_generations_in_flight)
    results = await manager.run_tasks([deps.generator.agenerate(prompt, images)
                                       for prompt, images in requests.values()])
    outcome = dict(zip(requests, results))
    errors = {name: str(result) for name, result in outcome.items()
              if isinstance(result, BaseException)}
    if errors:
        detail = "; ".join(f"{name}: {message}" for name, message in sorted(errors.items()))
        error = CurationError(f"generation failed for pair {qa.id!r} ({detail})", stage="generate")
        error.strategy_errors = errors
        raise error

    responses = {name: outcome[name].text for name in STRATEGIES}
    scores = StrategyScores(
        s_na=evaluate(responses[RetrievalType.NA.value], qa.golds, deps.metric),
        s_vis=evaluate(responses[RetrievalType.VISUAL.value], qa.golds, deps.metric),
        s_text=evaluate(responses[RetrievalType.TEXTUAL.value], qa.golds, deps.metric),
        responses=responses,
    )
    return _Assessment(scores=scores, retrieved=retrieved)


async def self_assess(qa: QAPair, deps: CurationDeps) -> StrategyScores:
    """Score the no-retrieval, visual and textual answers for one pair.

    Raises:
        CurationError: If any of the three generations fails; ``strategy_errors``
            maps each failed strategy to its message.
    """
    return (await _assess(qa, deps)).scores


def label_route(scores: StrategyScores, tie_order: Sequence[str] = DEFAULT_TIE_ORDER) -> str:
    """Best-scoring strategy; exact ties go to the earliest entry of ``tie_order``."""
    if sorted(tie_order) != sorted(STRATEGIES):
        raise CurationError(f"tie order must be a permutation of {list(STRATEGIES)}",
                            stage="config")
    values = scores.by_strategy()
    best = max(values.values())
    return next(label for label in tie_order if values[label] == best)


def select_challenging_modality(scores: StrategyScores, rng: np.random.Generator,
                                strategy: str = 'challenging') -> Tuple[Modality, bool]:
    """Pick the tuning modality from the visual and textual scores only.

    ``challenging`` takes the lower score, ``easy`` the higher one, ``random`` a
    coin flip. Exact ties under the first two are drawn from ``rng`` and flagged.
    """
    if strategy not in SELECTION_STRATEGIES:
        raise CurationError(f"unknown selection strategy {strategy!r}", stage="config")
    pair = (Modality.VISUAL, Modality.TEXTUAL)
    if strategy == 'random':
        return pair[int(rng.integers(2))], False

    s_vis, s_text = scores.s_vis.value, scores.s_text.value
    if s_vis == s_text:
        return pair[int(rng.integers(2))], True
    visual_wins = s_vis < s_text if strategy == 'challenging' else s_vis > s_text
    return (Modality.VISUAL if visual_wins else Modality.TEXTUAL), False


def _skip_for(qa: QAPair, error: BaseException) -> SkipRecord:
    if not isinstance(error, MragError):
        raise error
    return SkipRecord(id=qa.id, stage=error.stage, reason=str(error))


@dataclass
class RouteDatasetResult:
    examples: List[RouteExample] = field(default_factory=list)
    ledger: List[Dict[str, Any]] = field(default_factory=list)
    skips: List[SkipRecord] = field(default_factory=list)


async def build_route_dataset(qaset: Sequence[QAPair], deps: CurationDeps,
                              tie_order: Sequence[str] = DEFAULT_TIE_ORDER) -> RouteDatasetResult:
    """Self-assess every pair and label it with its best retrieval strategy.

    Every pair ends up either as an example with a ledger row or as a skip record.
    """
    manager = AsyncTaskManager(deps.max_pairs_in_flight)
    results = await manager.run_tasks([self_assess(qa, deps) for qa in qaset])

    dataset = RouteDatasetResult()
    for qa, result in zip(qaset, results):
        if isinstance(result, BaseException):
            dataset.skips.append(_skip_for(qa, result))
            continue
        label = label_route(result, tie_order)
        dataset.examples.append(RouteExample(question=qa.question, label=label))
        dataset.ledger.append({
            'id': qa.id,
            'question': qa.question,
            'metric': deps.metric.value,
            'scores': result.by_strategy(),
            'responses': dict(result.responses),
            'label': label,
        })

    logger.info("Route dataset built", pairs=len(qaset), examples=len(dataset.examples),
                skipped=len(dataset.skips))
    return dataset


@dataclass
class TuningDatasetResult:
    examples: List[TuningExample] = field(default_factory=list)
    skips: List[SkipRecord] = field(default_factory=list)


async def build_tuning_dataset(qaset: Sequence[QAPair], deps: CurationDeps, seed: int,
                               strategy: str = 'challenging') -> TuningDatasetResult:
    """Collect ``{question, top-k docs of the selected modality, first gold}`` examples."""
    if strategy not in SELECTION_STRATEGIES:
        raise CurationError(f"unknown selection strategy {strategy!r}", stage="config")
    manager = AsyncTaskManager(deps.max_pairs_in_flight)
    results = await manager.run_tasks([_assess(qa, deps) for qa in qaset])

    dataset = TuningDatasetResult()
    for qa, result in zip(qaset, results):
        if isinstance(result, BaseException):
            dataset.skips.append(_skip_for(qa, result))
            continue
        modality, tie_broken = select_challenging_modality(
            result.scores, pair_rng(seed, qa.id), strategy)
        docs = result.retrieved[modality]
        if not docs:
            dataset.skips.append(SkipRecord(qa.id, "retrieve", f"no {modality.value} documents"))
            continue
        dataset.examples.append(TuningExample(
            id=qa.id,
            question=qa.question,
            image_path=qa.image_path,
            modality=modality,
            docs=docs,
            answer=qa.golds[0],
            tie_broken=tie_broken,
        ))

    logger.info("Tuning dataset built", pairs=len(qaset), examples=len(dataset.examples),
                skipped=len(dataset.skips), strategy=strategy)
    return dataset


def build_noise_set(qaset: Sequence[QAPair], kb: KnowledgeBase, seed: int) -> List[NoiseRecord]:
    """Pad each pair's gold documents in ``kb`` with random fillers up to five, shuffled.

    Raises:
        NoiseSetError: If a pair has no gold documents or more than two in ``kb``'s
            modality, names one missing from ``kb``, or ``kb`` has too few fillers.
    """
    records = []
    candidates_all = [doc.id for doc in kb.documents]
    for qa in qaset:
        gold_ids = list(dict.fromkeys(qa.gold_doc_ids.get(kb.modality.value, ())))
        if not 1 <= len(gold_ids) <= 2:
            raise NoiseSetError(f"pair {qa.id!r} has {len(gold_ids)} {kb.modality.value} "
                                f"gold documents (expected 1 or 2)")
        missing = [doc_id for doc_id in gold_ids if doc_id not in kb]
        if missing:
            raise NoiseSetError(f"pair {qa.id!r} gold documents {missing} are not in {kb.name!r}")

        needed = NOISE_SET_SIZE - len(gold_ids)
        candidates = [doc_id for doc_id in candidates_all if doc_id not in gold_ids]
        if len(candidates) < needed:
            raise NoiseSetError(f"{kb.name!r} has {len(candidates)} non-gold documents, "
                                f"pair {qa.id!r} needs {needed}")

        rng = pair_rng(seed, qa.id)
        picks = rng.choice(len(candidates), size=needed, replace=False)
        doc_ids = gold_ids + [candidates[i] for i in picks]
        order = rng.permutation(len(doc_ids))
        records.append(NoiseRecord(
            id=qa.id,
            question=qa.question,
            docs=tuple(kb.get(doc_ids[i]) for i in order),
            gold_doc_ids=tuple(gold_ids),
            golds=qa.golds,
            image_path=qa.image_path,
        ))

    logger.info("Noise set built", kb=kb.name, records=len(records))
    return records

