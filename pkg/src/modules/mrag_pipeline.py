"""Route, optionally retrieve, then generate; with per-stage timing and reports."""

import dataclasses
import time
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

from utils.async_helpers import AsyncTaskManager, sync_to_async
from utils.errors import ConfigError, MetricError, MragError, PipelineStageError
from utils.logger import LoggerMixin

from .curation import NoiseRecord, QAPair, SkipRecord
from .embedding import Embedder
from .eval_metrics import Metric, evaluate
from .flat_retriever import DEFAULT_K, IndexedKnowledgeBase, ScoredDoc, check_indexes
from .generation import DatasetStyle, Generator, PromptStyle, render_prompt
from .kb_store import Document, Modality
from .retrieval_router import RetrievalType, RouterModel, route

ROUTER_ROW = "router"
DECISION_SOURCES = ('router', 'override')
STAGES = ('route', 'embed', 'retrieve', 'generate')

# Which knowledge bases each decision retrieves from, in prompt order
RETRIEVAL_BRANCHES: Dict[str, Tuple[Modality, ...]] = {
    RetrievalType.NA.value: (),
    RetrievalType.VISUAL.value: (Modality.VISUAL,),
    RetrievalType.TEXTUAL.value: (Modality.TEXTUAL,),
    RetrievalType.HYBRID.value: (Modality.VISUAL, Modality.TEXTUAL),
}


@dataclass(frozen=True)
class Query:
    text: str
    image_path: Optional[str] = None
    id: Optional[str] = None


@dataclass(frozen=True)
class StageTimings:
    route_ms: float = 0.0
    embed_ms: float = 0.0
    retrieve_ms: float = 0.0
    generate_ms: float = 0.0
    total_ms: float = 0.0

    @property
    def retrieval_ms(self) -> float:
        return self.embed_ms + self.retrieve_ms

    def to_dict(self) -> Dict[str, float]:
        return {'route_ms': self.route_ms, 'embed_ms': self.embed_ms,
                'retrieve_ms': self.retrieve_ms, 'retrieval_ms': self.retrieval_ms,
                'generate_ms': self.generate_ms, 'total_ms': self.total_ms}


@dataclass(frozen=True)
class PipelineTrace:
    query_id: Optional[str]
    decision: str
    decision_source: str
    retrieved: Tuple[ScoredDoc, ...]
    retrieved_from: Tuple[Modality, ...]
    response: str
    timings: StageTimings
    retrieval_calls: int
    token_count: Optional[int] = None

    @property
    def response_tokens(self) -> int:
        return self.token_count if self.token_count is not None else len(self.response.split())

    def to_record(self) -> Dict[str, Any]:
        return {
            'query_id': self.query_id,
            'decision': self.decision,
            'decision_source': self.decision_source,
            'retrieved': [dict(hit.to_dict(), modality=modality.value)
                          for hit, modality in zip(self.retrieved, self.retrieved_from)],
            'response': self.response,
            'timings': self.timings.to_dict(),
            'retrieval_calls': self.retrieval_calls,
        }


@dataclass
class PipelineConfig:
    """A router or a fixed decision, plus the stores and models each branch uses."""

    visual: IndexedKnowledgeBase
    textual: IndexedKnowledgeBase
    embedder: Embedder
    generator: Generator
    router: Optional[RouterModel] = None
    override: Optional[str] = None
    dataset_style: DatasetStyle = DatasetStyle.SENTENCE
    k: int = DEFAULT_K
    metric: Metric = Metric.F1
    enable_hybrid: bool = False
    max_queries_in_flight: int = 4

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("retrieval.k must be >= 1")
        self.dataset_style = DatasetStyle.parse(self.dataset_style)
        self.metric = Metric.parse(self.metric)
        if self.router is None and self.override is None:
            raise ConfigError("pipeline needs a router model or a decision override")
        if self.override is not None and self.override not in self.decisions:
            raise ConfigError(f"override {self.override!r} is not one of {list(self.decisions)}")
        if self.router is not None:
            unknown = [label for label in self.router.label_set if label not in self.decisions]
            if unknown:
                raise ConfigError(f"router labels {unknown} are not enabled decisions "
                                  f"(enable_hybrid={self.enable_hybrid})")
        check_indexes(self.visual, self.textual, self.embedder)

    @property
    def decisions(self) -> Tuple[str, ...]:
        labels = [RetrievalType.NA.value, RetrievalType.VISUAL.value, RetrievalType.TEXTUAL.value]
        if self.enable_hybrid:
            labels.append(RetrievalType.HYBRID.value)
        return tuple(labels)

    @property
    def strategy_name(self) -> str:
        return self.override if self.override is not None else ROUTER_ROW

    def index_for(self, modality: Modality) -> IndexedKnowledgeBase:
        return self.visual if modality is Modality.VISUAL else self.textual

    def with_override(self, decision: Optional[str]) -> "PipelineConfig":
        return dataclasses.replace(self, override=decision)


def _elapsed_ms(start: float) -> float:
    return (time.perf_counter() - start) * 1000.0


def answer(cfg: PipelineConfig, query: Query) -> PipelineTrace:
    """Answer one query through the branch its decision selects.

    The query is embedded only when the decision retrieves.

    Raises:
        PipelineStageError: Naming the stage (input, route, embed, retrieve,
            generate) that failed.
    """
    total_start = time.perf_counter()
    if not isinstance(query.text, str) or not query.text.strip():
        raise PipelineStageError("input", ValueError("query text must be non-empty"))

    start = time.perf_counter()
    try:
        if cfg.override is not None:
            decision, source = cfg.override, 'override'
        else:
            decision, source = route(cfg.router, query.text).label, 'router'
    except Exception as e:
        raise PipelineStageError("route", e) from e
    route_ms = _elapsed_ms(start)

    modalities = RETRIEVAL_BRANCHES[decision]
    embed_ms = retrieve_ms = 0.0
    hits: List[ScoredDoc] = []
    sources: List[Modality] = []
    docs: List[Document] = []
    if modalities:
        start = time.perf_counter()
        try:
            vector = cfg.embedder.embed_text(query.text, query.image_path)
        except Exception as e:
            raise PipelineStageError("embed", e) from e
        embed_ms = _elapsed_ms(start)

        start = time.perf_counter()
        try:
            for modality in modalities:
                for hit, doc in cfg.index_for(modality).search(vector, cfg.k):
                    hits.append(hit)
                    sources.append(modality)
                    docs.append(doc)
        except Exception as e:
            raise PipelineStageError("retrieve", e) from e
        retrieve_ms = _elapsed_ms(start)

    start = time.perf_counter()
    try:
        style = PromptStyle(cfg.dataset_style, bool(docs))
        prompt = render_prompt(query.text, docs or None, style)
        images = ([query.image_path] if query.image_path else []) + [
            doc.image_path for doc in docs if doc.modality is Modality.VISUAL]
        result = cfg.generator.generate(prompt, images)
    except Exception as e:
        raise PipelineStageError("generate", e) from e
    generate_ms = _elapsed_ms(start)

    timings = StageTimings(route_ms=route_ms, embed_ms=embed_ms, retrieve_ms=retrieve_ms,
                           generate_ms=generate_ms, total_ms=_elapsed_ms(total_start))
    return PipelineTrace(
        query_id=query.id,
        decision=decision,
        decision_source=source,
        retrieved=tuple(hits),
        retrieved_from=tuple(sources),
        response=result.text,
        timings=timings,
        retrieval_calls=len(modalities),
        token_count=result.token_count,
    )


@dataclass
class PipelineReport:
    strategy: str
    metric: str
    count: int
    overall: float
    decision_counts: Dict[str, int]
    decision_ratios: Dict[str, float]
    per_decision_metric: Dict[str, Optional[float]]
    per_category_metric: Dict[str, float]
    mean_latency_ms: Dict[str, float]
    retrieval_calls: int
    mean_response_tokens: float
    skips: List[SkipRecord] = field(default_factory=list)
    traces: List[PipelineTrace] = field(default_factory=list, repr=False)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'strategy': self.strategy,
            'metric': self.metric,
            'count': self.count,
            'overall': self.overall,
            'decision_counts': dict(self.decision_counts),
            'decision_ratios': dict(self.decision_ratios),
            'per_decision_metric': dict(self.per_decision_metric),
            'per_category_metric': dict(self.per_category_metric),
            'mean_latency_ms': dict(self.mean_latency_ms),
            'retrieval_calls': self.retrieval_calls,
            'mean_response_tokens': self.mean_response_tokens,
            'skips': [skip.to_record() for skip in self.skips],
        }


class PipelineEvaluator(LoggerMixin):
    """Runs :func:`answer` over a QA set with bounded concurrency and aggregates."""

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg

    async def evaluate(self, qaset: Sequence[QAPair]) -> PipelineReport:
        if not qaset:
            raise MetricError("cannot evaluate an empty query set")
        cfg = self.cfg
        run = sync_to_async(answer)
        manager = AsyncTaskManager(cfg.max_queries_in_flight)
        results = await manager.run_tasks([
            run(cfg, Query(text=qa.question, image_path=qa.image_path, id=qa.id)) for qa in qaset])

        traces: List[PipelineTrace] = []
        skips: List[SkipRecord] = []
        scored: List[Tuple[QAPair, PipelineTrace, float]] = []
        for qa, result in zip(qaset, results):
            if isinstance(result, BaseException):
                if not isinstance(result, MragError):
                    raise result
                skips.append(SkipRecord(id=qa.id, stage=result.stage, reason=str(result)))
                continue
            traces.append(result)
            scored.append((qa, result, evaluate(result.response, qa.golds, cfg.metric).value))

        report = self._aggregate(scored, skips)
        report.traces = traces
        self.logger.info("Pipeline evaluated", strategy=report.strategy, count=report.count,
                         skipped=len(skips), overall=round(report.overall, 6))
        return report

    def _aggregate(self, scored: List[Tuple[QAPair, PipelineTrace, float]],
                   skips: List[SkipRecord]) -> PipelineReport:
        cfg = self.cfg
        count = len(scored)
        by_decision: Dict[str, List[float]] = {label: [] for label in cfg.decisions}
        by_category: Dict[str, List[float]] = defaultdict(list)
        for qa, trace, value in scored:
            by_decision[trace.decision].append(value)
            if qa.category is not None:
                by_category[qa.category].append(value)

        latency_totals: Counter = Counter()
        for _, trace, _ in scored:
            latency_totals.update(trace.timings.to_dict())

        return PipelineReport(
            strategy=cfg.strategy_name,
            metric=cfg.metric.value,
            count=count,
            overall=_mean(value for _, _, value in scored),
            decision_counts={label: len(values) for label, values in by_decision.items()},
            decision_ratios={label: (len(values) / count if count else 0.0)
                             for label, values in by_decision.items()},
            per_decision_metric={label: (_mean(values) if values else None)
                                 for label, values in by_decision.items()},
            per_category_metric={category: _mean(values)
                                 for category, values in sorted(by_category.items())},
            mean_latency_ms={key.replace('_ms', ''): (latency_totals[key] / count if count else 0.0)
                             for key in StageTimings().to_dict()},
            retrieval_calls=sum(trace.retrieval_calls for _, trace, _ in scored),
            mean_response_tokens=_mean(trace.response_tokens for _, trace, _ in scored),
            skips=skips,
        )


def _mean(values) -> float:
    values = list(values)
    return sum(values) / len(values) if values else 0.0


async def evaluate_pipeline(cfg: PipelineConfig, qaset: Sequence[QAPair]) -> PipelineReport:
    """Overall and per-decision metric, decision ratios and mean stage latencies.

    Raises:
        MetricError: For an empty query set.
    """
    return await PipelineEvaluator(cfg).evaluate(qaset)


async def compare_strategies(cfg: PipelineConfig, qaset: Sequence[QAPair]) -> List[PipelineReport]:
    """One report per fixed decision, then one for the router."""
    if cfg.router is None:
        raise ConfigError("comparing strategies needs a router model")
    rows = []
    for decision in cfg.decisions:
        rows.append(await evaluate_pipeline(cfg.with_override(decision), qaset))
    rows.append(await evaluate_pipeline(cfg.with_override(None), qaset))
    return rows


def stage_breakdown(report: PipelineReport) -> List[Dict[str, Any]]:
    """Mean milliseconds and share of total per stage."""
    total = report.mean_latency_ms.get('total', 0.0)
    rows = []
    for stage in STAGES:
        mean_ms = report.mean_latency_ms.get(stage, 0.0)
        rows.append({'stage': stage, 'mean_ms': mean_ms,
                     'share': mean_ms / total if total else 0.0})
    return rows


@dataclass
class NoiseReport:
    """Answer quality when every question is given its gold documents mixed with fillers."""

    metric: str
    count: int
    overall: float
    by_gold_count: Dict[str, float]
    mean_generate_ms: float
    scores: List[Dict[str, Any]] = field(default_factory=list)
    skips: List[SkipRecord] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'metric': self.metric,
            'count': self.count,
            'overall': self.overall,
            'by_gold_count': dict(self.by_gold_count),
            'mean_generate_ms': self.mean_generate_ms,
            'skips': [skip.to_record() for skip in self.skips],
        }


def answer_with_documents(generator: Generator, record: NoiseRecord,
                          dataset_style: DatasetStyle = DatasetStyle.SENTENCE) -> Tuple[str, float]:
    """Generate over the record's five documents in their stored order.

    Returns:
        ``(response, generate_ms)``.
    """
    start = time.perf_counter()
    prompt = render_prompt(record.question, record.docs, PromptStyle(dataset_style, True))
    images = ([record.image_path] if record.image_path else []) + [
        doc.image_path for doc in record.docs if doc.modality is Modality.VISUAL]
    result = generator.generate(prompt, images)
    return result.text, _elapsed_ms(start)


class NoiseEvaluator(LoggerMixin):
    def __init__(self, generator: Generator, metric: Metric = Metric.F1,
                 dataset_style: DatasetStyle = DatasetStyle.SENTENCE, max_in_flight: int = 4):
        self.generator = generator
        self.metric = Metric.parse(metric)
        self.dataset_style = DatasetStyle.parse(dataset_style)
        self.max_in_flight = max_in_flight

    async def evaluate(self, records: Sequence[NoiseRecord]) -> NoiseReport:
        if not records:
            raise MetricError("cannot evaluate an empty noise set")
        run = sync_to_async(answer_with_documents)
        manager = AsyncTaskManager(self.max_in_flight)
        results = await manager.run_tasks([
            run(self.generator, record, self.dataset_style) for record in records])

        scores: List[Dict[str, Any]] = []
        skips: List[SkipRecord] = []
        latencies: List[float] = []
        by_gold_count: Dict[str, List[float]] = defaultdict(list)
        for record, result in zip(records, results):
            if isinstance(result, BaseException):
                if not isinstance(result, MragError):
                    raise result
                skips.append(SkipRecord(id=record.id, stage=result.stage, reason=str(result)))
                continue
            response, generate_ms = result
            value = evaluate(response, record.golds, self.metric).value
            latencies.append(generate_ms)
            by_gold_count[str(len(record.gold_doc_ids))].append(value)
            scores.append({'id': record.id, 'response': response, 'score': value,
                           'gold_doc_ids': list(record.gold_doc_ids)})

        report = NoiseReport(
            metric=self.metric.value,
            count=len(scores),
            overall=_mean(row['score'] for row in scores),
            by_gold_count={key: _mean(values) for key, values in sorted(by_gold_count.items())},
            mean_generate_ms=_mean(latencies),
            scores=scores,
            skips=skips,
        )
        self.logger.info("Noise set evaluated", count=report.count, skipped=len(skips),
                         overall=round(report.overall, 6))
        return report


async def evaluate_noise_set(records: Sequence[NoiseRecord], generator: Generator,
                             metric: Metric = Metric.F1,
                             dataset_style: DatasetStyle = DatasetStyle.SENTENCE,
                             max_in_flight: int = 4) -> NoiseReport:
    """Score answers generated over fixed five-document contexts.

    Raises:
        MetricError: For an empty noise set.
    """
    evaluator = NoiseEvaluator(generator, metric, dataset_style, max_in_flight)
    return await evaluator.evaluate(records)
