"""Command-line entry point for the adaptive MRAG engine."""

import argparse
import asyncio
import json
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

# Add src directory to Python path
sys.path.insert(0, str(Path(__file__).parent))

from modules.curation import (CurationDeps, NoiseRecord, build_noise_set, build_route_dataset,
                              build_tuning_dataset, load_noise_records, load_qa_pairs)
from modules.embedding import Embedder, EmbedderConfig, build_embedder
from modules.eval_metrics import score_predictions
from modules.flat_retriever import (IndexedKnowledgeBase, build_index, load_index,
                                    retrieval_metrics, save_index)
from modules.generation import AnswerKey, Generator, GeneratorConfig, build_generator
from modules.kb_store import Modality, kb_stats, load_kb, save_kb
from modules.mrag_pipeline import (NoiseReport, PipelineConfig, PipelineReport, Query, answer,
                                   compare_strategies, evaluate_noise_set, evaluate_pipeline,
                                   stage_breakdown)
from modules.retrieval_router import (RouterTrainer, TrainConfig, evaluate_router, inspect_model,
                                      load_model, load_route_examples, route, save_model)
from utils.config_loader import get_config_loader, reset_config_loader
from utils.errors import ConfigError, MragError, RecordFormatError
from utils.logger import setup_logging
from utils.records import iter_jsonl, write_jsonl, write_jsonl_async

# Alternate names for the curate subcommands
CURATE_ALIASES = {'windsock': 'routes', 'dance': 'tuning'}


def _print_json(payload: Any) -> None:
    print(json.dumps(payload, sort_keys=True, ensure_ascii=False))


class MragApp:
    """Builds components from one run configuration for a single CLI command."""

    def __init__(self, config_path: Optional[str] = None, overrides: Optional[List[str]] = None):
        """Load configuration and set up logging.

        Args:
            config_path: Optional path to configuration file.
            overrides: ``section.key=value`` expressions applied after loading.
        """
        reset_config_loader()
        self.config_loader = get_config_loader(config_path, overrides or [])
        self.config = self.config_loader.get_config()
        self.logger = setup_logging(self.section('logging'))

    def section(self, name: str) -> Dict[str, Any]:
        value = self.config.get(name) or {}
        if not isinstance(value, dict):
            raise ConfigError(f"configuration section {name!r} must be a mapping")
        return value

    def setting(self, flag_value: Any, section: str, key: str, default: Any = None) -> Any:
        """Flag value if given, else the config value, else ``default``."""
        if flag_value is not None:
            return flag_value
        value = self.section(section).get(key)
        return default if value is None else value

    def required_seed(self, section: str) -> int:
        seed = self.section(section).get('seed')
        if not isinstance(seed, int):
            raise ConfigError(f"{section}.seed is required for this command")
        return seed

    # Components

    def embedder(self) -> Embedder:
        return build_embedder(EmbedderConfig.from_section(self.section('embedder')))

    def generator(self, answer_key: Optional[AnswerKey] = None) -> Generator:
        return build_generator(GeneratorConfig.from_section(self.section('generator')), answer_key)

    def store_path(self, modality: Modality, kind: str) -> str:
        stores = self.section('knowledge_bases').get(modality.value) or {}
        path = stores.get(kind)
        if not path:
            raise ConfigError(f"knowledge_bases.{modality.value}.{kind} is not configured")
        return path

    def indexed(self, modality: Modality) -> IndexedKnowledgeBase:
        kb = load_kb(self.store_path(modality, 'kb'), modality)
        return IndexedKnowledgeBase(kb, load_index(self.store_path(modality, 'index')))

    def model_path(self, flag_value: Optional[str]) -> str:
        path = self.setting(flag_value, 'router', 'model_path')
        if not path:
            raise ConfigError("router.model_path is not configured")
        return path

    def curation_deps(self, answer_key: Optional[AnswerKey]) -> CurationDeps:
        curation = self.section('curation')
        processing = self.section('processing')
        embedder = self.embedder()
        return CurationDeps(
            visual=self.indexed(Modality.VISUAL),
            textual=self.indexed(Modality.TEXTUAL),
            embedder=embedder,
            generator=self.generator(answer_key),
            dataset_style=curation.get('prompt_style', 'sentence-answer'),
            k=int(curation.get('k') or self.section('retrieval').get('k', 3)),
            metric=curation.get('metric', 'f1'),
            max_pairs_in_flight=int(processing.get('max_pairs_in_flight', 4)),
            max_generations_in_flight=int(processing.get('max_generations_in_flight', 3)),
        )

    def pipeline_config(self, args: argparse.Namespace,
                        answer_key: Optional[AnswerKey]) -> PipelineConfig:
        pipeline = self.section('pipeline')
        override = self.setting(getattr(args, 'decision', None), 'pipeline', 'override')
        router = None
        if override is None or getattr(args, 'command', None) == 'compare':
            router = load_model(self.model_path(getattr(args, 'model', None)))
        return PipelineConfig(
            visual=self.indexed(Modality.VISUAL),
            textual=self.indexed(Modality.TEXTUAL),
            embedder=self.embedder(),
            generator=self.generator(answer_key),
            router=router,
            override=override,
            dataset_style=pipeline.get('prompt_style', 'sentence-answer'),
            k=int(self.setting(getattr(args, 'k', None), 'retrieval', 'k', 3)),
            metric=self.setting(getattr(args, 'metric', None), 'pipeline', 'metric', 'f1'),
            enable_hybrid=bool(pipeline.get('enable_hybrid', False)),
            max_queries_in_flight=int(self.section('processing').get('max_queries_in_flight', 4)),
        )


def _answer_key(qa_path: Optional[str]) -> Optional[AnswerKey]:
    return AnswerKey.from_pairs(load_qa_pairs(qa_path)) if qa_path else None


def _noise_answer_key(records: Sequence[NoiseRecord]) -> AnswerKey:
    key = AnswerKey()
    for record in records:
        key.add(record.question, record.golds[0], record.gold_doc_ids)
    return key


# kb / index / search

def cmd_kb(app: MragApp, args: argparse.Namespace) -> int:
    modality = Modality.parse(args.modality)
    source = args.input or app.store_path(modality, 'kb')
    kb = load_kb(source, modality)
    if args.command == 'ingest':
        if not args.output:
            raise ConfigError("kb ingest needs --output")
        save_kb(kb, args.output)
    _print_json(dict(kb_stats(kb).to_dict(), name=kb.name))
    return 0


def cmd_index(app: MragApp, args: argparse.Namespace) -> int:
    modality = Modality.parse(args.modality)
    if args.command == 'build':
        embedder = app.embedder()
        kb = load_kb(args.kb or app.store_path(modality, 'kb'), modality)
        output = args.output or app.store_path(modality, 'index')
        index = build_index(kb, embedder)
        save_index(index, output)
    else:
        index = load_index(args.index or app.store_path(modality, 'index'))
    _print_json(index.manifest())
    return 0


def cmd_search(app: MragApp, args: argparse.Namespace) -> int:
    k = int(app.setting(args.k, 'retrieval', 'k', 3))
    modality = Modality.parse(args.modality)
    indexed = app.indexed(modality)
    embedder = app.embedder()
    if indexed.index.embedder_fingerprint != embedder.fingerprint:
        raise ConfigError(f"index was built with {indexed.index.embedder_fingerprint!r}, "
                          f"configured embedder is {embedder.fingerprint!r}")
    hits = indexed.search(embedder.embed_text(args.query), k)
    print(f"{'rank':>4}  {'score':>8}  id")
    for hit, _ in hits:
        print(f"{hit.rank:>4}  {hit.score:>8.4f}  {hit.id}")
    return 0


# router

def cmd_router(app: MragApp, args: argparse.Namespace) -> int:
    if args.command == 'train':
        app.required_seed('router')
        config = TrainConfig.from_section(app.section('router'))
        output = app.model_path(args.output)
        examples = load_route_examples(args.data)
        trainer = RouterTrainer(config)
        model = trainer.train(examples)
        save_model(model, output)
        print(f"{'epoch':>5}  loss")
        for epoch, loss in enumerate(trainer.trace.epoch_losses, start=1):
            print(f"{epoch:>5}  {loss:.6f}")
        print("class weights: " + ", ".join(
            f"{label}={weight:.4f}" for label, weight in trainer.trace.class_weights.items()))
        return 0

    model = load_model(app.model_path(args.model))
    if args.command == 'route':
        decision = route(model, args.question)
        _print_json({'label': decision.label, 'probabilities': decision.probability_map()})
    elif args.command == 'inspect':
        _print_json(inspect_model(model, top=args.top))
    else:
        _print_json(evaluate_router(model, load_route_examples(args.data)))
    return 0


# curation

async def _curate(app: MragApp, args: argparse.Namespace) -> int:
    curation = app.section('curation')
    qaset = load_qa_pairs(args.qa)

    if args.command == 'noise':
        seed = app.required_seed('curation')
        modality = Modality.parse(args.modality)
        kb = load_kb(app.store_path(modality, 'kb'), modality)
        records = build_noise_set(qaset, kb, seed)
        await write_jsonl_async(args.output, [record.to_record() for record in records])
        print(f"noise records: {len(records)}")
        return 0

    if args.command == 'tuning':
        seed = app.required_seed('curation')
        strategy = app.setting(args.strategy, 'curation', 'strategy', 'challenging')
        deps = app.curation_deps(AnswerKey.from_pairs(qaset))
        tuning = await build_tuning_dataset(qaset, deps, seed, strategy)
        await write_jsonl_async(args.output, [example.to_record() for example in tuning.examples])
        if args.skips:
            await write_jsonl_async(args.skips, [skip.to_record() for skip in tuning.skips])
        print(f"tuning examples: {len(tuning.examples)}  skipped: {len(tuning.skips)}")
        return 0

    tie_order = tuple(curation.get('tie_order') or ('NA', 'Visual', 'Textual'))
    deps = app.curation_deps(AnswerKey.from_pairs(qaset))
    routes = await build_route_dataset(qaset, deps, tie_order)
    if args.command == 'assess':
        await write_jsonl_async(args.output, routes.ledger)
    else:
        await write_jsonl_async(args.output, [example.to_record() for example in routes.examples])
        if args.ledger:
            await write_jsonl_async(args.ledger, routes.ledger)
    if args.skips:
        await write_jsonl_async(args.skips, [skip.to_record() for skip in routes.skips])
    counts: Dict[str, int] = {}
    for example in routes.examples:
        counts[example.label] = counts.get(example.label, 0) + 1
    print(f"labelled: {len(routes.examples)}  skipped: {len(routes.skips)}  " + "  ".join(
        f"{label}={count}" for label, count in sorted(counts.items())))
    return 0


def cmd_curate(app: MragApp, args: argparse.Namespace) -> int:
    args.command = CURATE_ALIASES.get(args.command, args.command)
    return asyncio.run(_curate(app, args))


# evaluation

def cmd_eval(app: MragApp, args: argparse.Namespace) -> int:
    metric = app.setting(args.metric, 'pipeline', 'metric', 'f1')
    rows = [record for _, record in iter_jsonl(args.predictions)]
    result = score_predictions(rows, metric)
    if args.output:
        write_jsonl(args.output, result['scores'])
    _print_json({key: result[key] for key in ('metric', 'count', 'mean')})
    return 0


def cmd_ir_metrics(app: MragApp, args: argparse.Namespace) -> int:
    runs = {}
    for line_no, record in iter_jsonl(args.run):
        if not isinstance(record.get('ranked'), list) or 'query_id' not in record:
            raise RecordFormatError("run record needs 'query_id' and a 'ranked' list",
                                    args.run, line_no)
        runs[record['query_id']] = record['ranked']
    qrels = {}
    for line_no, record in iter_jsonl(args.qrels):
        if not isinstance(record.get('relevant'), list) or 'query_id' not in record:
            raise RecordFormatError("qrels record needs 'query_id' and a 'relevant' list",
                                    args.qrels, line_no)
        qrels[record['query_id']] = set(record['relevant'])
    k = int(app.setting(args.k, 'retrieval', 'k', 3))
    _print_json(retrieval_metrics(runs, qrels, k))
    return 0


# pipeline

def format_compare_table(rows: Sequence[PipelineReport]) -> str:
    decisions = list(rows[0].decision_ratios) if rows else []
    header = (f"{'strategy':<10}{'count':>7}{'metric':>10}"
              + "".join(f"{label:>10}" for label in decisions)
              + f"{'total_ms':>11}{'retr_ms':>10}{'gen_ms':>10}")
    lines = [header]
    for row in rows:
        lines.append(
            f"{row.strategy:<10}{row.count:>7}{row.overall:>10.4f}"
            + "".join(f"{row.decision_ratios[label]:>10.2%}" for label in decisions)
            + f"{row.mean_latency_ms['total']:>11.2f}{row.mean_latency_ms['retrieval']:>10.2f}"
            + f"{row.mean_latency_ms['generate']:>10.2f}")
    return "\n".join(lines)


def format_bench(report: PipelineReport) -> str:
    lines = [f"{'stage':<10}{'mean_ms':>10}{'share':>9}"]
    for row in stage_breakdown(report):
        lines.append(f"{row['stage']:<10}{row['mean_ms']:>10.3f}{row['share']:>9.2%}")
    lines.append(f"{'total':<10}{report.mean_latency_ms['total']:>10.3f}")
    lines.append("")
    lines.append(f"{'decision':<10}{'count':>7}{'ratio':>9}")
    for label, ratio in report.decision_ratios.items():
        lines.append(f"{label:<10}{report.decision_counts[label]:>7}{ratio:>9.2%}")
    return "\n".join(lines)


def format_noise_report(report: NoiseReport) -> str:
    lines = [f"{'golds':<8}{'count':>7}{report.metric:>10}"]
    for gold_count, value in report.by_gold_count.items():
        count = sum(1 for row in report.scores if len(row['gold_doc_ids']) == int(gold_count))
        lines.append(f"{gold_count:<8}{count:>7}{value:>10.4f}")
    lines.append(f"{'all':<8}{report.count:>7}{report.overall:>10.4f}")
    lines.append(f"skipped: {len(report.skips)}  mean generate ms: {report.mean_generate_ms:.2f}")
    return "\n".join(lines)


async def _pipeline(app: MragApp, args: argparse.Namespace) -> int:
    if args.command == 'noise-eval':
        records = load_noise_records(args.noise)
        report = await evaluate_noise_set(
            records, app.generator(_noise_answer_key(records)),
            metric=app.setting(args.metric, 'pipeline', 'metric', 'f1'),
            dataset_style=app.section('pipeline').get('prompt_style', 'sentence-answer'),
            max_in_flight=int(app.section('processing').get('max_queries_in_flight', 4)))
        if args.report:
            await write_jsonl_async(args.report, [report.to_dict()])
        if args.scores:
            await write_jsonl_async(args.scores, report.scores)
        print(format_noise_report(report))
        return 0

    if args.command == 'answer':
        cfg = app.pipeline_config(args, _answer_key(args.answer_key))
        trace = answer(cfg, Query(text=args.question, image_path=args.image))
        _print_json(trace.to_record())
        return 0

    qaset = load_qa_pairs(args.qa)
    cfg = app.pipeline_config(args, AnswerKey.from_pairs(qaset))

    if args.command == 'compare':
        rows = await compare_strategies(cfg, qaset)
        if args.report:
            await write_jsonl_async(args.report, [row.to_dict() for row in rows])
        print(format_compare_table(rows))
        return 0

    report = await evaluate_pipeline(cfg, qaset)
    if args.report:
        await write_jsonl_async(args.report, [report.to_dict()])
    traces_path = args.traces or app.section('pipeline').get('trace_path')
    if traces_path:
        await write_jsonl_async(traces_path, [trace.to_record() for trace in report.traces])
    if args.command == 'bench':
        print(format_bench(report))
    else:
        print(format_compare_table([report]))
    return 0


def cmd_pipeline(app: MragApp, args: argparse.Namespace) -> int:
    return asyncio.run(_pipeline(app, args))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='mrag', description='Adaptive multimodal RAG engine')
    parser.add_argument('--config', type=str, help='Path to configuration file')
    parser.add_argument('--set', dest='overrides', action='append', default=[],
                        metavar='SECTION.KEY=VALUE', help='Override a configuration value')
    groups = parser.add_subparsers(dest='group', required=True)

    kb = groups.add_parser('kb', help='Knowledge base files').add_subparsers(
        dest='command', required=True)
    for name in ('ingest', 'stats'):
        sub = kb.add_parser(name)
        sub.add_argument('--modality', required=True, choices=[m.value for m in Modality])
        sub.add_argument('--input', help='Document records (defaults to the configured kb)')
        if name == 'ingest':
            sub.add_argument('--output', required=True)
        sub.set_defaults(handler=cmd_kb)

    index = groups.add_parser('index', help='Flat vector indexes').add_subparsers(
        dest='command', required=True)
    build = index.add_parser('build')
    build.add_argument('--modality', required=True, choices=[m.value for m in Modality])
    build.add_argument('--kb')
    build.add_argument('--output')
    build.set_defaults(handler=cmd_index)
    info = index.add_parser('info')
    info.add_argument('--modality', required=True, choices=[m.value for m in Modality])
    info.add_argument('--index')
    info.set_defaults(handler=cmd_index)

    search = groups.add_parser('search', help='Top-k search over one index')
    search.add_argument('--query', required=True)
    search.add_argument('--modality', required=True, choices=[m.value for m in Modality])
    search.add_argument('--k', type=int)
    search.set_defaults(handler=cmd_search, command='search')

    router = groups.add_parser('router', help='Retrieval router').add_subparsers(
        dest='command', required=True)
    train = router.add_parser('train')
    train.add_argument('--data', required=True, help='question/label records')
    train.add_argument('--output', help='Model file (defaults to router.model_path)')
    train.set_defaults(handler=cmd_router)
    route_cmd = router.add_parser('route')
    route_cmd.add_argument('--question', required=True)
    route_cmd.add_argument('--model')
    route_cmd.set_defaults(handler=cmd_router)
    inspect = router.add_parser('inspect')
    inspect.add_argument('--model')
    inspect.add_argument('--top', type=int, default=5)
    inspect.set_defaults(handler=cmd_router)
    router_eval = router.add_parser('eval')
    router_eval.add_argument('--data', required=True)
    router_eval.add_argument('--model')
    router_eval.set_defaults(handler=cmd_router)

    curate = groups.add_parser('curate', help='Training data construction').add_subparsers(
        dest='command', required=True)
    for name in ('assess', 'routes', 'tuning', 'noise'):
        aliases = [alias for alias, target in CURATE_ALIASES.items() if target == name]
        sub = curate.add_parser(name, aliases=aliases)
        sub.add_argument('--qa', required=True, help='QA pair records')
        sub.add_argument('--output', required=True)
        if name in ('assess', 'routes', 'tuning'):
            sub.add_argument('--skips', help='Write skipped pairs here')
        if name == 'routes':
            sub.add_argument('--ledger', help='Write per-pair scores and responses here')
        if name == 'tuning':
            sub.add_argument('--strategy', choices=['challenging', 'easy', 'random'])
        if name == 'noise':
            sub.add_argument('--modality', required=True, choices=[m.value for m in Modality])
        sub.set_defaults(handler=cmd_curate)

    score = groups.add_parser('eval', help='Answer scoring').add_subparsers(
        dest='command', required=True)
    score_cmd = score.add_parser('score')
    score_cmd.add_argument('--predictions', required=True)
    score_cmd.add_argument('--metric', choices=['f1', 'em'])
    score_cmd.add_argument('--output', help='Write per-id scores here')
    score_cmd.set_defaults(handler=cmd_eval)

    pipeline = groups.add_parser('pipeline', help='End-to-end answering').add_subparsers(
        dest='command', required=True)
    for name in ('answer', 'eval', 'compare', 'bench'):
        sub = pipeline.add_parser(name)
        if name == 'answer':
            sub.add_argument('--question', required=True)
            sub.add_argument('--image')
            sub.add_argument('--answer-key', help='QA records for the mock generator')
        else:
            sub.add_argument('--qa', required=True)
            sub.add_argument('--report', help='Write the structured report here')
        if name in ('eval', 'bench'):
            sub.add_argument('--traces', help='Write per-query traces here')
        if name != 'compare':
            sub.add_argument('--decision', choices=['NA', 'Visual', 'Textual', 'Hybrid'])
        sub.add_argument('--model')
        sub.add_argument('--k', type=int)
        sub.add_argument('--metric', choices=['f1', 'em'])
        sub.set_defaults(handler=cmd_pipeline)
    noise_eval = pipeline.add_parser('noise-eval', help='Answer over stored five-document contexts')
    noise_eval.add_argument('--noise', required=True, help='Noise records from curate noise')
    noise_eval.add_argument('--metric', choices=['f1', 'em'])
    noise_eval.add_argument('--report', help='Write the structured report here')
    noise_eval.add_argument('--scores', help='Write per-record responses and scores here')
    noise_eval.set_defaults(handler=cmd_pipeline)

    ir = groups.add_parser('ir-metrics', help='Retrieval metrics over run/qrels files')
    ir.add_argument('--run', required=True)
    ir.add_argument('--qrels', required=True)
    ir.add_argument('--k', type=int)
    ir.set_defaults(handler=cmd_ir_metrics, command='ir-metrics')

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point for the CLI."""
    args = build_parser().parse_args(argv)

    try:
        app = MragApp(args.config, args.overrides)
        return args.handler(app, args)
    except MragError as e:
        print(json.dumps({'error': str(e), 'type': type(e).__name__, 'stage': e.stage},
                         sort_keys=True), file=sys.stderr)
        return 1
    except Exception as e:
        print(json.dumps({'error': str(e), 'type': type(e).__name__, 'stage': 'general'},
                         sort_keys=True), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
