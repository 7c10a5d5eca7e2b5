"""Shared fixtures: hash embedder, mock-answerable QA set and a keyword router."""

import numpy as np
import pytest

from modules.curation import CurationDeps, QAPair
from modules.embedding import EmbedderConfig, HashEmbedder
from modules.flat_retriever import IndexedKnowledgeBase, build_index
from modules.generation import AnswerKey, GeneratorConfig, MockGenerator
from modules.kb_store import Document, KnowledgeBase, Modality
from modules.retrieval_router import RouteExample, TrainConfig, train_router

EMBED_SEED = 13
FILLER_WORDS = (
    "river", "famous", "old", "tower", "king", "red", "music", "year", "team", "ocean",
    "mountain", "film", "author", "green", "city", "war", "queen", "island", "song", "castle",
    "winter", "gold", "silver", "garden", "train", "harbor", "desert", "forest", "statue", "coin",
)
KEYWORDS = {"Visual": "picture", "Textual": "article"}


@pytest.fixture
def hash_embedder():
    return HashEmbedder(EmbedderConfig(backend='hash', dim=256, seed=EMBED_SEED))


def keyword_examples(count, seed):
    """Seven-token questions; the label is fixed by a planted keyword (none for NA)."""
    rng = np.random.default_rng(seed)
    labels = ("NA", "Visual", "Textual")
    examples = []
    for i in range(count):
        label = labels[i % 3]
        words = [str(word) for word in rng.choice(FILLER_WORDS, size=7)]
        if label in KEYWORDS:
            words[int(rng.integers(7))] = KEYWORDS[label]
        examples.append(RouteExample(question=" ".join(words), label=label))
    return examples


@pytest.fixture(scope="session")
def keyword_router():
    """Router trained on 300 keyword questions with the default recipe and 50 epochs."""
    train = keyword_examples(300, seed=1)
    model = train_router(train, TrainConfig(epochs=50))
    return model, train


def _docs(modality, prefix, texts):
    image = (lambda i: f"images/{prefix}{i}.jpg") if modality is Modality.VISUAL else (lambda i: None)
    return [Document(id=f"{prefix}{i}", modality=modality, text=text, image_path=image(i))
            for i, text in enumerate(texts)]


def curation_fixture():
    """30 QA pairs: 10 answerable from memory, 10 from the visual KB, 10 from the textual KB.

    Each gold document's text equals its question, so it ranks first under the hash
    embedder.
    """
    pairs = []
    visual_texts, textual_texts = [], []
    for i in range(10):
        pairs.append(QAPair(id=f"p{i:02d}", question=f"what does everyone remember about {FILLER_WORDS[i]} number {i}",
                            golds=(f"memory answer {FILLER_WORDS[i]}",), parametric=True,
                            category="parametric"))
    for i in range(10):
        question = f"which colour is the {FILLER_WORDS[i + 10]} shown in photo {i}"
        visual_texts.append(question)
        pairs.append(QAPair(id=f"v{i:02d}", question=question,
                            golds=(f"visual answer {FILLER_WORDS[i + 10]}",),
                            gold_doc_ids={'visual': (f"img-{i}",)}, category="visual"))
    for i in range(10):
        question = f"in which year was the {FILLER_WORDS[i + 20]} treaty of chapter {i} signed"
        textual_texts.append(question)
        pairs.append(QAPair(id=f"t{i:02d}", question=question,
                            golds=(f"textual answer {FILLER_WORDS[i + 20]}",),
                            gold_doc_ids={'textual': (f"txt-{i}",)}, category="textual"))

    visual_texts += [f"a wide landscape photograph of distractor scene {i}" for i in range(5)]
    textual_texts += [f"an encyclopedia paragraph describing distractor topic {i}" for i in range(5)]
    visual = KnowledgeBase("visual", Modality.VISUAL,
                           tuple(_docs(Modality.VISUAL, "img-", visual_texts)))
    textual = KnowledgeBase("textual", Modality.TEXTUAL,
                            tuple(_docs(Modality.TEXTUAL, "txt-", textual_texts)))
    return pairs, visual, textual


@pytest.fixture
def curation_setup(hash_embedder):
    pairs, visual_kb, textual_kb = curation_fixture()
    visual = IndexedKnowledgeBase(visual_kb, build_index(visual_kb, hash_embedder))
    textual = IndexedKnowledgeBase(textual_kb, build_index(textual_kb, hash_embedder))
    generator = MockGenerator(GeneratorConfig(backend='mock', mock_seed=7),
                              AnswerKey.from_pairs(pairs))
    return pairs, visual, textual, generator


@pytest.fixture
def curation_deps(curation_setup, hash_embedder):
    pairs, visual, textual, generator = curation_setup
    return CurationDeps(visual=visual, textual=textual, embedder=hash_embedder,
                        generator=generator, metric="em")
