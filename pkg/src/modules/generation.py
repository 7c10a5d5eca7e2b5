"""Prompt rendering and response generation.

Prompts come from four fixed templates: sentence-answer or short-answer, each with
and without retrieved context. Responses come from a remote chat-completion
endpoint or from a deterministic mock used for offline runs.
"""

import os
import re
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, Iterable, List, Optional, Sequence, Set, Union

from utils.async_helpers import sync_to_async
from utils.errors import ConfigError, GenerationError
from utils.http_client import JsonHttpClient
from utils.logger import LoggerMixin

from .kb_store import Document, Modality

DEFAULT_TOKEN_ENV = "MRAG_GENERATOR_TOKEN"
UNKNOWN_ANSWER = "unknown"
BACKENDS = ('remote', 'mock')

_PREAMBLE_CONTEXT = ("You are a helpful question answerer who can provide an answer "
                     "given a question and relevant context.\n\n")
_PREAMBLE_PLAIN = ("You are a helpful question answerer who can provide an answer "
                   "given a question.\n\n")


class DatasetStyle(str, Enum):
    SENTENCE = "sentence-answer"
    SHORT = "short-answer"

    @classmethod
    def parse(cls, value: Union[str, "DatasetStyle"]) -> "DatasetStyle":
        if isinstance(value, DatasetStyle):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            choices = ', '.join(style.value for style in cls)
            raise ConfigError(f"unknown prompt style {value!r} (expected one of: {choices})")


_INSTRUCTION = {
    DatasetStyle.SENTENCE: "Provide a single sentence that answers the question",
    DatasetStyle.SHORT: "Provide a single word or phrase that answers the question",
}

TEMPLATES: Dict[tuple, str] = {}
for _style, _instruction in _INSTRUCTION.items():
    TEMPLATES[(_style, True)] = (_PREAMBLE_CONTEXT
                                 + "Question: [Question] \nContext: [Context] \n"
                                 + f"{_instruction} based on the given context.\n\nAnswer: ")
    TEMPLATES[(_style, False)] = (_PREAMBLE_PLAIN + "Question: [Question] \n"
                                  + f"{_instruction}.\n\nAnswer: ")

_SLOT = re.compile(r"\[(Question|Context)\]")
_QUESTION_LINE = re.compile(r"^Question: (.*) $", re.MULTILINE)
_CONTEXT_DOC = re.compile(r"(?:^|^Context: )Doc \d+ \(([^)]*)\): ", re.MULTILINE)
_GOLD_MARKER = re.compile(r"GOLD\[([^\]]+)\]=([^\n]*)")


@dataclass(frozen=True)
class PromptStyle:
    dataset_style: DatasetStyle = DatasetStyle.SENTENCE
    with_context: bool = False

    def __post_init__(self):
        object.__setattr__(self, 'dataset_style', DatasetStyle.parse(self.dataset_style))

    @property
    def template(self) -> str:
        return TEMPLATES[(self.dataset_style, self.with_context)]

    def with_docs(self, has_docs: bool) -> "PromptStyle":
        return PromptStyle(self.dataset_style, bool(has_docs))


@dataclass(frozen=True)
class GeneratorConfig:
    backend: str = 'mock'
    endpoint: Optional[str] = None
    model_name: Optional[str] = None
    temperature: float = 0.0
    max_tokens: int = 64
    timeout_seconds: float = 60.0
    mock_seed: Optional[int] = None
    auth_token_env: str = DEFAULT_TOKEN_ENV
    retries: int = 2
    backoff_seconds: float = 1.0
    max_in_flight: int = 4

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ConfigError(f"generator.backend must be one of {BACKENDS}, got {self.backend!r}")
        if self.backend == 'remote' and not (self.endpoint and self.model_name):
            raise ConfigError("generator.endpoint and generator.model_name are required "
                              "for the remote backend")
        if self.backend == 'mock' and self.mock_seed is None:
            raise ConfigError("generator.mock_seed is required for the mock backend")
        if self.max_tokens < 1:
            raise ConfigError("generator.max_tokens must be >= 1")
        if self.timeout_seconds <= 0:
            raise ConfigError("generator.timeout_seconds must be > 0")

    @classmethod
    def from_section(cls, section: Dict[str, Any]) -> "GeneratorConfig":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(section) - known)
        if unknown:
            raise ConfigError(f"unknown generator settings: {unknown}")
        return cls(**section)


@dataclass(frozen=True)
class GenerationResult:
    text: str
    latency: float
    token_count: Optional[int]
    backend: str

    def __post_init__(self):
        if self.latency < 0:
            raise GenerationError("latency must be non-negative")


def render_context(docs: Sequence[Document]) -> str:
    blocks = []
    for position, doc in enumerate(docs, start=1):
        if doc.modality is Modality.VISUAL:
            blocks.append(f"Doc {position} ({doc.id}): Image: {doc.image_path}\n{doc.text}")
        else:
            blocks.append(f"Doc {position} ({doc.id}): {doc.text}")
    return "\n\n".join(blocks)


def render_prompt(question: str, docs: Optional[Sequence[Document]], style: PromptStyle) -> str:
    """Fill the template selected by ``style``.

    Substitution is a single pass, so brackets inside the question are kept verbatim.

    Raises:
        GenerationError: For an empty question, or when ``docs`` disagrees with
            ``style.with_context``.
    """
    if not isinstance(question, str) or not question.strip():
        raise GenerationError("cannot render a prompt for an empty question")
    docs = list(docs or [])
    if style.with_context and not docs:
        raise GenerationError("context prompt requested without documents")
    if not style.with_context and docs:
        raise GenerationError("documents given for a no-context prompt")

    values = {'Question': question, 'Context': render_context(docs)}
    return _SLOT.sub(lambda match: values[match.group(1)], style.template)


def prompt_doc_ids(prompt: str) -> List[str]:
    return _CONTEXT_DOC.findall(prompt)


def prompt_question(prompt: str) -> Optional[str]:
    match = _QUESTION_LINE.search(prompt)
    return match.group(1) if match else None


@dataclass(frozen=True)
class MockAnswer:
    answer: str
    doc_ids: frozenset = field(default_factory=frozenset)
    parametric: bool = False


def parse_gold_marker(text: str) -> Optional[tuple]:
    """``GOLD[<doc_id>]=<answer>`` -> ``(doc_id, answer)``, or None."""
    match = _GOLD_MARKER.search(text)
    if not match:
        return None
    return match.group(1), match.group(2).strip()


class AnswerKey:
    """Question-indexed planted answers for the mock generator."""

    def __init__(self):
        self._entries: Dict[str, MockAnswer] = {}

    def __len__(self) -> int:
        return len(self._entries)

    def add(self, question: str, answer: str, doc_ids: Iterable[str] = (),
            parametric: bool = False) -> None:
        self._entries[question] = MockAnswer(answer, frozenset(doc_ids), bool(parametric))

    def lookup(self, question: Optional[str]) -> Optional[MockAnswer]:
        if question is None:
            return None
        return self._entries.get(question)

    @classmethod
    def from_records(cls, records: Iterable[Dict[str, Any]]) -> "AnswerKey":
        """Build from QA records.

        A ``GOLD[doc]=answer`` marker in any metadata value takes precedence; otherwise
        the first gold answer is planted on every ``gold_doc_ids`` entry.
        """
        key = cls()
        for record in records:
            marker = None
            for value in (record.get('metadata') or {}).values():
                if isinstance(value, str):
                    marker = parse_gold_marker(value)
                    if marker:
                        break
            if marker:
                doc_ids: Set[str] = {marker[0]}
                answer = marker[1]
            else:
                golds = record.get('golds') or ['']
                answer = golds[0]
                doc_ids = {doc_id for ids in (record.get('gold_doc_ids') or {}).values()
                           for doc_id in ids}
            key.add(record['question'], answer, doc_ids, bool(record.get('parametric')))
        return key

    @classmethod
    def from_pairs(cls, pairs: Iterable[Any]) -> "AnswerKey":
        return cls.from_records(pair.to_record() for pair in pairs)


class Generator(LoggerMixin):
    """Times one completion per call; subclasses implement :meth:`_complete`."""

    def __init__(self, config: GeneratorConfig):
        self.config = config

    @property
    def backend_name(self) -> str:
        raise NotImplementedError

    def generate(self, prompt: str, image_paths: Optional[Sequence[str]] = None) -> GenerationResult:
        if not isinstance(prompt, str) or not prompt.strip():
            raise GenerationError("prompt must be non-empty")
        start = time.perf_counter()
        text, token_count = self._complete(prompt, list(image_paths or []))
        latency = time.perf_counter() - start
        return GenerationResult(text=text, latency=latency, token_count=token_count,
                                backend=self.backend_name)

    async def agenerate(self, prompt: str,
                        image_paths: Optional[Sequence[str]] = None) -> GenerationResult:
        return await sync_to_async(self.generate)(prompt, image_paths)

    def _complete(self, prompt: str, image_paths: List[str]) -> tuple:
        raise NotImplementedError


class MockGenerator(Generator):
    """Answers the planted gold iff its document is in context.

    Without context it answers only for questions flagged parametric. Anything
    else gets ``"unknown"``.
    """

    def __init__(self, config: GeneratorConfig, answer_key: Optional[AnswerKey] = None):
        super().__init__(config)
        self.answer_key = answer_key or AnswerKey()

    @property
    def backend_name(self) -> str:
        return f"mock:seed={self.config.mock_seed}"

    def _complete(self, prompt: str, image_paths: List[str]) -> tuple:
        context_ids = set(prompt_doc_ids(prompt))
        entry = self.answer_key.lookup(prompt_question(prompt))
        marker = parse_gold_marker(prompt)
        if marker:
            entry = MockAnswer(marker[1], frozenset([marker[0]]),
                               entry.parametric if entry else False)

        text = UNKNOWN_ANSWER
        if entry is not None:
            if context_ids:
                if entry.doc_ids & context_ids:
                    text = entry.answer
            elif entry.parametric:
                text = entry.answer
        return text, len(text.split())


class RemoteGenerator(Generator):
    """Chat-completion client: one round-trip per prompt, greedy by default."""

    def __init__(self, config: GeneratorConfig):
        super().__init__(config)
        headers = {}
        token = os.environ.get(config.auth_token_env) if config.auth_token_env else None
        if token:
            headers['Authorization'] = f"Bearer {token}"
        self.client = JsonHttpClient(
            timeout_seconds=config.timeout_seconds,
            retries=config.retries,
            backoff_seconds=config.backoff_seconds,
            max_in_flight=config.max_in_flight,
            headers=headers,
            stage="generate",
        )

    @property
    def backend_name(self) -> str:
        return f"remote:{self.config.model_name}"

    def _complete(self, prompt: str, image_paths: List[str]) -> tuple:
        content: Any = prompt
        if image_paths:
            content = [{'type': 'text', 'text': prompt}] + [
                {'type': 'image_url', 'image_url': {'url': path}} for path in image_paths]
        payload = {
            'model': self.config.model_name,
            'messages': [{'role': 'user', 'content': content}],
            'temperature': self.config.temperature,
            'max_tokens': self.config.max_tokens,
        }
        body = self.client.post_json(self.config.endpoint, payload)
        try:
            text = body['choices'][0]['message']['content']
        except (KeyError, IndexError, TypeError):
            raise GenerationError("chat-completion response has no choices[0].message.content")
        if not isinstance(text, str):
            raise GenerationError("chat-completion content is not a string")
        usage = body.get('usage') or {}
        token_count = usage.get('completion_tokens') if isinstance(usage, dict) else None
        return text, token_count if isinstance(token_count, int) else None


def build_generator(config: GeneratorConfig, answer_key: Optional[AnswerKey] = None) -> Generator:
    if config.backend == 'mock':
        return MockGenerator(config, answer_key)
    return RemoteGenerator(config)


def generate(config: GeneratorConfig, prompt: str, image_paths: Optional[Sequence[str]] = None,
             answer_key: Optional[AnswerKey] = None) -> GenerationResult:
    return build_generator(config, answer_key).generate(prompt, image_paths)
