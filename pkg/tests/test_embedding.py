"""Tests for the hash and remote embedders."""

from unittest.mock import MagicMock, patch

import numpy as np
import pytest
import requests

from modules.embedding import (EmbedderConfig, RemoteEmbedder, build_embedder, cosine_sim,
                               embed_text, l2_normalize)
from modules.kb_store import Document, Modality
from utils.errors import (ConfigError, DimensionMismatchError, EmbeddingError,
                          RemoteServiceError)


def response(status=200, body=None, text=""):
    mocked = MagicMock()
    mocked.status_code = status
    mocked.text = text
    mocked.json.return_value = body
    return mocked


def remote_config(**overrides):
    values = dict(backend='remote', dim=4, endpoint='http://embed.local/v1', model_name='enc',
                  retries=1, backoff_seconds=0, max_batch=2)
    values.update(overrides)
    return EmbedderConfig(**values)


class TestHashEmbedder:
    def test_unit_norm_and_deterministic(self, hash_embedder):
        first = hash_embedder.embed_text("who painted the mona lisa")
        second = hash_embedder.embed_text("who painted the mona lisa")
        assert np.array_equal(first, second)
        assert abs(np.linalg.norm(first) - 1.0) <= 1e-6

    def test_seed_changes_vector(self):
        a = embed_text(EmbedderConfig(dim=256, seed=1), "bridge at night")
        b = embed_text(EmbedderConfig(dim=256, seed=2), "bridge at night")
        assert not np.array_equal(a, b)

    def test_short_strings_differ(self):
        config = EmbedderConfig(dim=256, seed=7)
        aa, ab = embed_text(config, "aa"), embed_text(config, "ab")
        assert not np.array_equal(aa, ab)
        assert cosine_sim(aa, ab) < 1.0

    @pytest.mark.parametrize("seed", [7, 13])
    def test_every_two_letter_string_embeds(self, seed):
        embedder = build_embedder(EmbedderConfig(dim=256, seed=seed))
        letters = "abcdefghijklmnopqrstuvwxyz"
        for text in (a + b for a in letters for b in letters):
            vector = embedder.embed_text(text)
            assert abs(np.linalg.norm(vector) - 1.0) <= 1e-6
            assert np.array_equal(vector, embedder.embed_text(text))

    def test_empty_text_rejected(self, hash_embedder):
        with pytest.raises(EmbeddingError):
            hash_embedder.embed_text("   ")

    def test_document_embedding_uses_text(self, hash_embedder):
        doc = Document("v1", Modality.VISUAL, "a red bridge", image_path="v1.jpg")
        assert np.array_equal(hash_embedder.embed_document(doc),
                              hash_embedder.embed_text("a red bridge"))

    def test_fingerprint(self, hash_embedder):
        assert hash_embedder.fingerprint == "hash:dim=256:seed=13"


def test_hash_backend_requires_seed():
    with pytest.raises(ConfigError):
        EmbedderConfig(backend='hash', dim=8)


def test_remote_backend_requires_endpoint():
    with pytest.raises(ConfigError):
        EmbedderConfig(backend='remote', dim=8)


def test_from_section_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        EmbedderConfig.from_section({'backend': 'hash', 'seed': 1, 'dims': 3})


class TestNormalizeAndCosine:
    def test_three_four_five(self):
        assert l2_normalize([3, 4]) == pytest.approx([0.6, 0.8])

    def test_unit_vector_unchanged(self):
        unit = l2_normalize([1.0, 2.0, -2.0])
        assert np.max(np.abs(l2_normalize(unit) - unit)) <= 1e-12

    def test_rejects_zero_vector(self):
        with pytest.raises(EmbeddingError):
            l2_normalize([0.0, 0.0])

    def test_fixed_cases(self):
        assert cosine_sim(np.array([0.6, 0.8]), np.array([0.6, 0.8])) == pytest.approx(1.0)
        assert cosine_sim(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0
        assert cosine_sim(np.array([1.0, 0.0]), np.array([-1.0, 0.0])) == -1.0

    def test_symmetric_and_bounded(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            a = l2_normalize(rng.normal(size=16))
            b = l2_normalize(rng.normal(size=16))
            assert cosine_sim(a, b) == cosine_sim(b, a)
            assert -1.0 <= cosine_sim(a, b) <= 1.0

    def test_direction_ignores_scale(self):
        rng = np.random.default_rng(12)
        for _ in range(200):
            v = rng.normal(size=16)
            alpha = float(rng.uniform(1e-3, 1e3))
            assert cosine_sim(l2_normalize(alpha * v), l2_normalize(v)) == \
                pytest.approx(1.0, abs=1e-9)


def test_cosine_dimension_mismatch():
    with pytest.raises(DimensionMismatchError):
        cosine_sim(np.ones(3), np.ones(4))


class TestRemoteEmbedder:
    def test_batches_and_normalizes(self):
        embedder = build_embedder(remote_config())
        assert isinstance(embedder, RemoteEmbedder)
        docs = [Document(f"t{i}", Modality.TEXTUAL, f"text {i}") for i in range(3)]
        replies = [response(body={'vectors': [[3, 4, 0, 0], [0, 0, 2, 0]]}),
                   response(body={'vectors': [[1, 1, 1, 1]]})]
        with patch.object(requests.Session, 'post', side_effect=replies) as post:
            vectors = embedder.embed_documents(docs)
        assert post.call_count == 2
        assert np.allclose(vectors[0], [0.6, 0.8, 0, 0])
        assert np.allclose(vectors[2], [0.5, 0.5, 0.5, 0.5])
        assert post.call_args_list[0].kwargs['json']['inputs'][0] == {'text': 'text 0',
                                                                      'image_path': None}

    def test_wrong_dimension(self):
        embedder = build_embedder(remote_config())
        with patch.object(requests.Session, 'post',
                          return_value=response(body={'vectors': [[1, 2, 3]]})):
            with pytest.raises(DimensionMismatchError):
                embedder.embed_text("hello")

    def test_server_error_retried_then_raised(self):
        embedder = build_embedder(remote_config())
        with patch.object(requests.Session, 'post',
                          return_value=response(status=503, text="overloaded")) as post:
            with pytest.raises(RemoteServiceError) as excinfo:
                embedder.embed_text("hello")
        assert post.call_count == 2
        assert excinfo.value.status == 503

    def test_document_failure_names_document(self):
        embedder = build_embedder(remote_config())
        doc = Document("doc-9", Modality.TEXTUAL, "text")
        with patch.object(requests.Session, 'post',
                          return_value=response(status=400, text="bad input")) as post:
            with pytest.raises(EmbeddingError, match="doc-9"):
                embedder.embed_documents([doc])
        assert post.call_count == 1
