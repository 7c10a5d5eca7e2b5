"""Tests for self-assessment, route labels, tuning examples and noise sets."""

import json

import numpy as np
import pytest

from modules.curation import (CurationDeps, QAPair, StrategyScores, build_noise_set,
                              build_route_dataset, build_tuning_dataset, label_route,
                              load_noise_records, load_qa_pairs, select_challenging_modality,
                              self_assess)
from modules.eval_metrics import Metric, Score, evaluate
from modules.flat_retriever import IndexedKnowledgeBase, build_index
from modules.generation import MockGenerator, prompt_question
from modules.kb_store import Document, KnowledgeBase, Modality
from utils.errors import (ConfigError, CurationError, GenerationError, NoiseSetError,
                          RecordFormatError)
from utils.records import write_jsonl

from conftest import curation_fixture


def scores(s_na, s_vis, s_text, metric=Metric.F1):
    return StrategyScores(Score(s_na, metric), Score(s_vis, metric), Score(s_text, metric))


class VisualFailureGenerator(MockGenerator):
    """Fails the visual-context answer for one question."""

    def __init__(self, base, question):
        super().__init__(base.config, base.answer_key)
        self.question = question

    def _complete(self, prompt, image_paths):
        if prompt_question(prompt) == self.question and "(img-" in prompt:
            raise GenerationError("visual backend unavailable")
        return super()._complete(prompt, image_paths)


async def test_route_labels_follow_best_strategy(curation_deps):
    pairs, _, _ = curation_fixture()
    result = await build_route_dataset(pairs, curation_deps)

    assert result.skips == []
    labels = [example.label for example in result.examples]
    assert labels == ["NA"] * 10 + ["Visual"] * 10 + ["Textual"] * 10
    assert [row["id"] for row in result.ledger] == [pair.id for pair in pairs]

    golds = {pair.id: pair.golds for pair in pairs}
    for row in result.ledger:
        assert row["metric"] == "em"
        for strategy, response in row["responses"].items():
            assert evaluate(response, golds[row["id"]], "em").value == row["scores"][strategy]
        assert label_route(scores(row["scores"]["NA"], row["scores"]["Visual"],
                                  row["scores"]["Textual"], Metric.EM)) == row["label"]


async def test_self_assess_scores_each_strategy(curation_deps):
    pairs, _, _ = curation_fixture()
    visual_pair = next(pair for pair in pairs if pair.id == "v03")
    result = await self_assess(visual_pair, curation_deps)
    assert result.by_strategy() == {"NA": 0.0, "Visual": 1.0, "Textual": 0.0}
    assert result.responses["Visual"] == visual_pair.golds[0]
    assert result.responses["NA"] == "unknown"


async def test_generation_failure_becomes_skip(curation_setup, hash_embedder):
    pairs, visual, textual, generator = curation_setup
    chosen = [pairs[0], pairs[12], pairs[25]]
    failing = VisualFailureGenerator(generator, pairs[12].question)
    deps = CurationDeps(visual=visual, textual=textual, embedder=hash_embedder,
                        generator=failing, metric="em")

    result = await build_route_dataset(chosen, deps)
    assert [example.label for example in result.examples] == ["NA", "Textual"]
    assert len(result.skips) == 1
    skip = result.skips[0]
    assert skip.id == pairs[12].id
    assert skip.stage == "generate"
    assert "Visual" in skip.reason

    with pytest.raises(CurationError) as excinfo:
        await self_assess(pairs[12], deps)
    assert set(excinfo.value.strategy_errors) == {"Visual"}


def test_deps_reject_mismatched_index(curation_setup, hash_embedder):
    _, visual, textual, generator = curation_setup
    with pytest.raises(ConfigError):
        CurationDeps(visual=textual, textual=visual, embedder=hash_embedder, generator=generator)


class TestLabelRoute:
    def test_strict_winner(self):
        assert label_route(scores(0.2, 0.9, 0.4)) == "Visual"

    def test_ties_go_to_cheaper_strategy(self):
        assert label_route(scores(0.5, 0.5, 0.5)) == "NA"
        assert label_route(scores(0.1, 0.6, 0.6)) == "Visual"

    def test_custom_tie_order(self):
        assert label_route(scores(0.0, 0.0, 0.0), ("Textual", "Visual", "NA")) == "Textual"

    def test_invalid_tie_order(self):
        with pytest.raises(CurationError):
            label_route(scores(0, 0, 0), ("NA", "Visual"))


class TestSelection:
    def test_challenging_and_easy(self):
        rng = np.random.default_rng(0)
        assert select_challenging_modality(scores(0.5, 0.2, 0.8), rng) == (Modality.VISUAL, False)
        assert select_challenging_modality(scores(0.5, 0.2, 0.8), rng, 'easy') == \
            (Modality.TEXTUAL, False)

    def test_no_retrieval_score_is_ignored(self):
        rng = np.random.default_rng(17)
        for trial in range(1000):
            s_na, s_vis, s_text = (float(x) for x in rng.choice([0.0, 0.25, 0.5, 1.0], size=3))
            perturbed = float(rng.random())
            for strategy in ('challenging', 'easy', 'random'):
                base = select_challenging_modality(scores(s_na, s_vis, s_text),
                                                   np.random.default_rng(trial), strategy)
                moved = select_challenging_modality(scores(perturbed, s_vis, s_text),
                                                    np.random.default_rng(trial), strategy)
                assert base == moved

    def test_ties_are_flagged_and_balanced(self):
        picks = [select_challenging_modality(scores(0.0, 0.4, 0.4), np.random.default_rng(seed))
                 for seed in range(1000)]
        assert all(tie_broken for _, tie_broken in picks)
        visual_share = sum(modality is Modality.VISUAL for modality, _ in picks) / 1000
        assert 0.45 <= visual_share <= 0.55

    def test_random_strategy_never_flags_ties(self):
        modality, tie_broken = select_challenging_modality(
            scores(0, 0.4, 0.4), np.random.default_rng(1), 'random')
        assert modality in (Modality.VISUAL, Modality.TEXTUAL)
        assert tie_broken is False

    def test_unknown_strategy(self):
        with pytest.raises(CurationError):
            select_challenging_modality(scores(0, 0, 0), np.random.default_rng(0), 'hardest')


async def test_tuning_dataset_picks_harder_modality(curation_deps):
    pairs, _, _ = curation_fixture()
    result = await build_tuning_dataset(pairs, curation_deps, seed=42)
    assert result.skips == []
    by_id = {example.id: example for example in result.examples}
    assert len(by_id) == 30

    for i in range(10):
        visual_pair, textual_pair = by_id[f"v{i:02d}"], by_id[f"t{i:02d}"]
        assert visual_pair.modality is Modality.TEXTUAL and not visual_pair.tie_broken
        assert textual_pair.modality is Modality.VISUAL and not textual_pair.tie_broken
        assert by_id[f"p{i:02d}"].tie_broken

    golds = {pair.id: pair.golds[0] for pair in pairs}
    for example in result.examples:
        assert len(example.docs) == 3
        assert all(doc.modality is example.modality for doc in example.docs)
        assert example.answer == golds[example.id]

    again = await build_tuning_dataset(pairs, curation_deps, seed=42)
    assert [e.to_record() for e in again.examples] == [e.to_record() for e in result.examples]


async def test_tuning_dataset_with_small_kb(hash_embedder, curation_setup):
    pairs, visual, textual, generator = curation_setup
    tiny_kb = KnowledgeBase("tiny", Modality.TEXTUAL, textual.kb.documents[:2])
    tiny = IndexedKnowledgeBase(tiny_kb, build_index(tiny_kb, hash_embedder))
    deps = CurationDeps(visual=visual, textual=tiny, embedder=hash_embedder,
                        generator=generator, metric="em")
    result = await build_tuning_dataset([pairs[10]], deps, seed=0)
    assert result.examples[0].modality is Modality.TEXTUAL
    assert len(result.examples[0].docs) == 2


async def test_tuning_dataset_rejects_unknown_strategy(curation_deps):
    with pytest.raises(CurationError):
        await build_tuning_dataset([], curation_deps, seed=0, strategy="hardest")


class TestNoiseSet:
    def textual_pairs(self):
        pairs, _, textual = curation_fixture()
        return [pair for pair in pairs if pair.id.startswith("t")], textual

    def test_five_unique_documents_including_gold(self):
        pairs, kb = self.textual_pairs()
        records = build_noise_set(pairs, kb, seed=3)
        assert len(records) == 10
        for pair, record in zip(pairs, records):
            ids = [doc.id for doc in record.docs]
            assert len(ids) == 5 == len(set(ids))
            assert set(pair.gold_doc_ids["textual"]) <= set(ids)
            assert all(doc_id in kb for doc_id in ids)
            assert len(record.filler_ids) == 4

    def test_two_golds_get_three_fillers(self):
        _, kb = self.textual_pairs()
        pair = QAPair("two", "which two treaties", ("both",),
                      gold_doc_ids={"textual": ("txt-1", "txt-4")})
        (record,) = build_noise_set([pair], kb, seed=9)
        assert len(record.docs) == 5
        assert len(record.filler_ids) == 3
        assert set(record.filler_ids).isdisjoint({"txt-1", "txt-4"})

    def test_deterministic_and_order_independent(self):
        pairs, kb = self.textual_pairs()
        forward = {r.id: r.to_record() for r in build_noise_set(pairs, kb, seed=3)}
        backward = {r.id: r.to_record() for r in build_noise_set(pairs[::-1], kb, seed=3)}
        assert forward == backward
        other = {r.id: r.to_record() for r in build_noise_set(pairs, kb, seed=4)}
        assert other != forward

    def test_pair_without_gold_documents(self):
        pairs, _, textual = curation_fixture()
        with pytest.raises(NoiseSetError):
            build_noise_set([pairs[0]], textual, seed=0)

    def test_too_few_fillers(self):
        pairs, kb = self.textual_pairs()
        small = KnowledgeBase("small", Modality.TEXTUAL, kb.documents[:3])
        with pytest.raises(NoiseSetError):
            build_noise_set([pairs[0]], small, seed=0)

    def test_gold_missing_from_kb(self):
        kb = KnowledgeBase("other", Modality.TEXTUAL, tuple(
            Document(f"o{i}", Modality.TEXTUAL, f"text {i}") for i in range(6)))
        pair = QAPair("x", "q", ("a",), gold_doc_ids={"textual": ("nope",)})
        with pytest.raises(NoiseSetError):
            build_noise_set([pair], kb, seed=0)

    def test_saved_records_load_back(self, tmp_path):
        pairs, kb = self.textual_pairs()
        records = build_noise_set(pairs, kb, seed=3)
        write_jsonl(tmp_path / "noise.jsonl", [record.to_record() for record in records])
        assert load_noise_records(tmp_path / "noise.jsonl") == records

    def test_image_path_is_kept(self, tmp_path):
        _, kb = self.textual_pairs()
        pair = QAPair("img", "what is drawn here", ("a map",), image_path="q/img.png",
                      gold_doc_ids={"textual": ("txt-2",)})
        (record,) = build_noise_set([pair], kb, seed=1)
        assert record.to_record()["image_path"] == "q/img.png"
        write_jsonl(tmp_path / "noise.jsonl", [record.to_record()])
        assert load_noise_records(tmp_path / "noise.jsonl")[0].image_path == "q/img.png"

    @pytest.mark.parametrize("change", [
        {"docs": "txt-1"},
        {"golds": []},
        {"gold_doc_ids": ["txt-missing"]},
    ])
    def test_malformed_record_names_line(self, tmp_path, change):
        pairs, kb = self.textual_pairs()
        good, bad = [record.to_record() for record in build_noise_set(pairs[:2], kb, seed=3)]
        bad.update(change)
        write_jsonl(tmp_path / "noise.jsonl", [good, bad])
        with pytest.raises(RecordFormatError) as excinfo:
            load_noise_records(tmp_path / "noise.jsonl")
        assert excinfo.value.line_no == 2

class TestLoadQaPairs:
    def test_round_trip_fields(self, tmp_path):
        record = {"id": "q1", "question": "Where?", "golds": "Paris",
                  "gold_doc_ids": {"visual": ["v1"]}, "parametric": True, "category": "geo"}
        path = tmp_path / "qa.jsonl"
        path.write_text(json.dumps(record) + "\n", encoding="utf-8")
        (pair,) = load_qa_pairs(path)
        assert pair.golds == ("Paris",)
        assert pair.gold_doc_ids == {"visual": ("v1",)}
        assert pair.to_record()["parametric"] is True

    def test_duplicate_id(self, tmp_path):
        path = tmp_path / "qa.jsonl"
        line = json.dumps({"id": "q1", "question": "Where?", "golds": ["Paris"]})
        path.write_text(line + "\n" + line + "\n", encoding="utf-8")
        with pytest.raises(RecordFormatError) as excinfo:
            load_qa_pairs(path)
        assert excinfo.value.line_no == 2

    def test_missing_golds(self, tmp_path):
        path = tmp_path / "qa.jsonl"
        path.write_text(json.dumps({"id": "q1", "question": "Where?"}) + "\n", encoding="utf-8")
        with pytest.raises(RecordFormatError):
            load_qa_pairs(path)
