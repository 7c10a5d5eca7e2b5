"""Tests for knowledge base loading, validation and persistence."""

import json

import numpy as np
import pytest

from modules.kb_store import Document, KnowledgeBase, Modality, kb_stats, load_kb, save_kb
from utils.errors import KnowledgeBaseError, RecordFormatError


def write_lines(path, records):
    path.write_text("".join(json.dumps(record) + "\n" for record in records), encoding="utf-8")
    return path


def test_load_preserves_file_order(tmp_path):
    path = write_lines(tmp_path / "textual.jsonl", [
        {"id": "b", "modality": "textual", "text": "second"},
        {"id": "a", "modality": "textual", "text": "first"},
    ])
    kb = load_kb(path, "textual")
    assert [doc.id for doc in kb] == ["b", "a"]
    assert kb.name == "textual"
    assert kb.get("a").text == "first"


def test_duplicate_id_names_second_line(tmp_path):
    path = write_lines(tmp_path / "kb.jsonl", [
        {"id": "a", "modality": "textual", "text": "one"},
        {"id": "a", "modality": "textual", "text": "two"},
    ])
    with pytest.raises(RecordFormatError) as excinfo:
        load_kb(path, Modality.TEXTUAL)
    assert excinfo.value.line_no == 2
    assert "first seen at line 1" in str(excinfo.value)


def test_visual_record_without_image_path_is_rejected(tmp_path):
    path = write_lines(tmp_path / "kb.jsonl", [{"id": "v1", "modality": "visual", "text": "a cat"}])
    with pytest.raises(RecordFormatError) as excinfo:
        load_kb(path, "visual")
    assert excinfo.value.line_no == 1


def test_modality_mismatch_is_rejected(tmp_path):
    path = write_lines(tmp_path / "kb.jsonl", [
        {"id": "v1", "modality": "visual", "text": "a cat", "image_path": "cat.jpg"},
    ])
    with pytest.raises(RecordFormatError):
        load_kb(path, "textual")


def test_malformed_json_reports_line(tmp_path):
    path = tmp_path / "kb.jsonl"
    path.write_text('{"id": "a", "modality": "textual", "text": "x"}\n{not json\n', encoding="utf-8")
    with pytest.raises(RecordFormatError) as excinfo:
        load_kb(path, "textual")
    assert excinfo.value.line_no == 2


def test_empty_file_gives_empty_kb(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("", encoding="utf-8")
    kb = load_kb(path, "textual")
    assert len(kb) == 0
    assert kb_stats(kb).count == 0


def test_unknown_fields_are_ignored(tmp_path):
    path = write_lines(tmp_path / "kb.jsonl", [
        {"id": "a", "modality": "textual", "text": "x", "extra": 1},
        {"id": "b", "modality": "textual", "text": "y", "extra": 2},
    ])
    kb = load_kb(path, "textual")
    assert len(kb) == 2
    assert "extra" not in kb.get("a").to_record()


def test_save_then_load_is_identity(tmp_path):
    kb = KnowledgeBase("visual", Modality.VISUAL, (
        Document("v1", Modality.VISUAL, "a red bridge", image_path="img/v1.jpg", source="wiki"),
        Document("v2", Modality.VISUAL, "a grey tower", image_path="img/v2.jpg"),
    ))
    path = tmp_path / "visual.jsonl"
    save_kb(kb, path)
    loaded = load_kb(path, "visual")
    assert loaded.documents == kb.documents
    first_bytes = path.read_bytes()
    save_kb(loaded, path)
    assert path.read_bytes() == first_bytes


def test_stats_counts_utf8_bytes():
    kb = KnowledgeBase("t", Modality.TEXTUAL, (
        Document("a", Modality.TEXTUAL, "abc"),
        Document("b", Modality.TEXTUAL, "é"),
    ))
    stats = kb_stats(kb)
    assert stats.to_dict() == {'count': 2, 'modality': 'textual', 'total_text_bytes': 5}


def test_textual_document_cannot_carry_image():
    with pytest.raises(KnowledgeBaseError):
        Document("t1", Modality.TEXTUAL, "text", image_path="x.jpg")


def test_knowledge_base_rejects_mixed_modalities():
    with pytest.raises(KnowledgeBaseError):
        KnowledgeBase("mixed", Modality.TEXTUAL, (
            Document("v", Modality.VISUAL, "cap", image_path="v.jpg"),))


def test_unknown_modality():
    with pytest.raises(KnowledgeBaseError):
        Modality.parse("audio")


def test_invalid_utf8_reports_line(tmp_path):
    path = tmp_path / "kb.jsonl"
    path.write_bytes(b'{"id": "a", "modality": "textual", "text": "x"}\n'
                     b'{"id": "b", "modality": "textual", "text": "\xff\xfe"}\n')
    with pytest.raises(RecordFormatError) as excinfo:
        load_kb(path, "textual")
    assert excinfo.value.line_no == 2


def test_random_records_respect_image_path_coupling(tmp_path):
    rng = np.random.default_rng(21)
    image_choices = [None, "", "img/x.jpg", "absent"]
    path = tmp_path / "kb.jsonl"
    for trial in range(300):
        modality = str(rng.choice(["visual", "textual"]))
        image_path = image_choices[int(rng.integers(len(image_choices)))]
        record = {"id": f"d{trial}", "modality": modality, "text": "some text"}
        if image_path != "absent":
            record["image_path"] = image_path
        coupled = (bool(record.get("image_path")) if modality == "visual"
                   else record.get("image_path") is None)

        write_lines(path, [record])
        if coupled:
            (doc,) = load_kb(path, modality).documents
            assert doc.modality.value == modality
        else:
            with pytest.raises(RecordFormatError) as excinfo:
                load_kb(path, modality)
            assert excinfo.value.line_no == 1
