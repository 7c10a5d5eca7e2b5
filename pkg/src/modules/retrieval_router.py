"""Trainable router mapping a question to a retrieval type.

The model is a class-weighted multinomial softmax regression over signed,
feature-hashed word unigrams and bigrams. Training uses AdamW with a learning
rate that decays linearly to zero over all optimizer steps.

Model file layout (little-endian)::

    MRAGRTR1                 8-byte magic
    uint64                   header length in bytes
    header                   UTF-8 JSON: label_set, feature_dim, featurizer_seed, version
    float64[C * feature_dim] weights, row-major
    float64[C]               bias
"""

import hashlib
import json
import math
import re
import struct
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from utils.errors import ConfigError, RecordFormatError, RouterError
from utils.logger import LoggerMixin
from utils.records import iter_jsonl

MODEL_MAGIC = b"MRAGRTR1"
MODEL_VERSION = "hashed-softmax-1"
DEFAULT_FEATURE_DIM = 2 ** 18

_TOKEN = re.compile(r"\w+")
# Stands in for questions made only of punctuation or symbols
NO_WORDS_FEATURE = "<no-words>"


class RetrievalType(str, Enum):
    """Routing labels. ``HYBRID`` is only active when present in a label set."""

    NA = "NA"
    VISUAL = "Visual"
    TEXTUAL = "Textual"
    HYBRID = "Hybrid"


DEFAULT_LABELS: Tuple[str, ...] = (RetrievalType.NA.value, RetrievalType.VISUAL.value,
                                   RetrievalType.TEXTUAL.value)
HYBRID_LABELS: Tuple[str, ...] = DEFAULT_LABELS + (RetrievalType.HYBRID.value,)


@dataclass(frozen=True)
class RouteExample:
    question: str
    label: str

    def __post_init__(self):
        if not isinstance(self.question, str) or not self.question.strip():
            raise RouterError("training question must be non-empty")

    def to_record(self) -> Dict[str, str]:
        return {'question': self.question, 'label': self.label}


@dataclass(frozen=True, eq=False)
class SparseFeatures:
    indices: np.ndarray
    values: np.ndarray

    def to_dense(self, dim: int) -> np.ndarray:
        dense = np.zeros(dim, dtype=np.float64)
        dense[self.indices] = self.values
        return dense


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-4
    batch_size: int = 16
    epochs: int = 5
    schedule: str = "linear"
    weight_decay: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    class_weighting: bool = True
    feature_dim: int = DEFAULT_FEATURE_DIM
    featurizer_seed: int = 0
    label_set: Tuple[str, ...] = DEFAULT_LABELS

    def __post_init__(self):
        object.__setattr__(self, 'label_set', tuple(self.label_set))
        if not self.learning_rate > 0:
            raise ConfigError("router.learning_rate must be > 0")
        if self.epochs < 1:
            raise ConfigError("router.epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("router.batch_size must be >= 1")
        if self.schedule != "linear":
            raise ConfigError(f"unsupported learning-rate schedule {self.schedule!r}")
        _check_feature_dim(self.feature_dim)
        _check_label_set(self.label_set)

    @classmethod
    def from_section(cls, section: Dict[str, Any]) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        return cls(**{key: value for key, value in section.items() if key in known})


def _check_feature_dim(feature_dim: int) -> None:
    if not isinstance(feature_dim, int) or feature_dim < 1 or feature_dim & (feature_dim - 1):
        raise ConfigError(f"feature_dim must be a power of two, got {feature_dim!r}")


def _check_label_set(label_set: Sequence[str]) -> None:
    if len(label_set) < 2:
        raise ConfigError("a label set needs at least two labels")
    if len(set(label_set)) != len(label_set):
        raise ConfigError(f"label set has duplicates: {list(label_set)}")


def featurize(question: str, feature_dim: int, seed: int) -> SparseFeatures:
    """Signed hashed counts of lowercase word unigrams and bigrams, L2-normalized.

    A question with no word tokens maps to the single ``NO_WORDS_FEATURE`` gram.

    Raises:
        RouterError: For an empty question.
    """
    if not isinstance(question, str) or not question.strip():
        raise RouterError("cannot featurize an empty question")
    tokens = _TOKEN.findall(question.lower()) or [NO_WORDS_FEATURE]

    grams = tokens + [f"{a} {b}" for a, b in zip(tokens, tokens[1:])]
    key = int(seed).to_bytes(8, 'little', signed=True)
    counts: Counter = Counter()
    unsigned: Counter = Counter()
    for gram in grams:
        value = int.from_bytes(
            hashlib.blake2b(gram.encode('utf-8'), digest_size=8, key=key).digest(), 'little')
        counts[value % feature_dim] += 1.0 if (value >> 63) & 1 == 0 else -1.0
        unsigned[value % feature_dim] += 1.0
    if not any(counts.values()):
        # Every signed gram cancelled; fall back to the unsigned counts
        counts = unsigned

    indices = np.array(sorted(i for i, c in counts.items() if c != 0), dtype=np.int64)
    values = np.array([counts[i] for i in indices], dtype=np.float64)
    norm = float(np.linalg.norm(values))
    return SparseFeatures(indices=indices, values=values / norm)


@dataclass(frozen=True, eq=False)
class RouterModel:
    label_set: Tuple[str, ...]
    feature_dim: int
    featurizer_seed: int
    weights: np.ndarray
    bias: np.ndarray
    version: str = MODEL_VERSION

    def __post_init__(self):
        object.__setattr__(self, 'label_set', tuple(self.label_set))
        _check_label_set(self.label_set)
        _check_feature_dim(self.feature_dim)
        shape = (len(self.label_set), self.feature_dim)
        if self.weights.shape != shape or self.bias.shape != (len(self.label_set),):
            raise RouterError(f"parameter shapes {self.weights.shape}/{self.bias.shape} "
                              f"do not match {shape}")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise RouterError("router parameters must be finite")

    @classmethod
    def zeros(cls, label_set: Sequence[str] = DEFAULT_LABELS,
              feature_dim: int = DEFAULT_FEATURE_DIM, featurizer_seed: int = 0) -> "RouterModel":
        return cls(label_set=tuple(label_set), feature_dim=feature_dim,
                   featurizer_seed=featurizer_seed,
                   weights=np.zeros((len(label_set), feature_dim)),
                   bias=np.zeros(len(label_set)))

    @property
    def num_classes(self) -> int:
        return len(self.label_set)

    def label_index(self, label: str) -> int:
        try:
            return self.label_set.index(label)
        except ValueError:
            raise RouterError(f"label {label!r} is not in label set {list(self.label_set)}")

    def featurize(self, question: str) -> SparseFeatures:
        return featurize(question, self.feature_dim, self.featurizer_seed)

    def logits(self, features: SparseFeatures) -> np.ndarray:
        return self.weights[:, features.indices] @ features.values + self.bias

    def to_bytes(self) -> bytes:
        header = {
            'label_set': list(self.label_set),
            'feature_dim': self.feature_dim,
            'featurizer_seed': self.featurizer_seed,
            'version': self.version,
        }
        header_bytes = json.dumps(header, sort_keys=True).encode('utf-8')
        return (MODEL_MAGIC + struct.pack('<Q', len(header_bytes)) + header_bytes
                + np.ascontiguousarray(self.weights, dtype='<f8').tobytes()
                + np.ascontiguousarray(self.bias, dtype='<f8').tobytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "RouterModel":
        prefix = len(MODEL_MAGIC) + 8
        if len(data) < prefix or data[:len(MODEL_MAGIC)] != MODEL_MAGIC:
            raise RouterError("not a router model file (bad magic header)")
        (header_len,) = struct.unpack('<Q', data[len(MODEL_MAGIC):prefix])
        header = json.loads(data[prefix:prefix + header_len].decode('utf-8'))
        classes, dim = len(header['label_set']), int(header['feature_dim'])
        body = data[prefix + header_len:]
        if len(body) != 8 * classes * (dim + 1):
            raise RouterError("router model file is truncated")
        params = np.frombuffer(body, dtype='<f8').astype(np.float64)
        return cls(label_set=tuple(header['label_set']), feature_dim=dim,
                   featurizer_seed=int(header['featurizer_seed']),
                   weights=params[:classes * dim].reshape(classes, dim),
                   bias=params[classes * dim:], version=header['version'])


def save_model(model: RouterModel, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(model.to_bytes())


def load_model(path: Union[str, Path]) -> RouterModel:
    path = Path(path)
    if not path.exists():
        raise RouterError(f"router model not found: {path}")
    return RouterModel.from_bytes(path.read_bytes())


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits)
    return shifted - math.log(float(np.sum(np.exp(shifted))))


def class_weights(labels: Sequence[str], label_set: Sequence[str] = DEFAULT_LABELS) -> np.ndarray:
    """Balanced weights ``n / (C * n_c)`` aligned with ``label_set``.

    Raises:
        RouterError: If a registered class has no examples or a label is unregistered.
    """
    counts = Counter(labels)
    unknown = sorted(set(counts) - set(label_set))
    if unknown:
        raise RouterError(f"labels {unknown} are not in label set {list(label_set)}")
    missing = [label for label in label_set if counts[label] == 0]
    if missing:
        raise RouterError(f"classes {missing} have no training examples")
    n, num_classes = len(labels), len(label_set)
    return np.array([n / (num_classes * counts[label]) for label in label_set])


def loss_and_grad(model: RouterModel,
                  batch: Sequence[Tuple[SparseFeatures, int]],
                  weights: np.ndarray,
                  weight_decay: float = 0.0) -> Tuple[float, np.ndarray, np.ndarray]:
    """Class-weighted mean cross-entropy plus ``weight_decay/2 * |W|^2``.

    Args:
        model: Current parameters.
        batch: ``(features, label_index)`` pairs.
        weights: Per-class loss weights aligned with the label set.
        weight_decay: L2 coefficient on the weight matrix (bias excluded).

    Returns:
        ``(loss, grad_weights, grad_bias)``.
    """
    if not batch:
        raise RouterError("empty batch")
    grad_w = np.zeros_like(model.weights)
    grad_b = np.zeros_like(model.bias)
    loss = 0.0
    scale = 1.0 / len(batch)
    for features, label in batch:
        if not 0 <= label < model.num_classes:
            raise RouterError(f"label index {label} outside the label set")
        logits = model.logits(features)
        if not np.all(np.isfinite(logits)):
            raise RouterError("non-finite logits")
        log_probs = _log_softmax(logits)
        loss -= scale * weights[label] * log_probs[label]
        delta = np.exp(log_probs)
        delta[label] -= 1.0
        delta *= scale * weights[label]
        grad_w[:, features.indices] += np.outer(delta, features.values)
        grad_b += delta
    if weight_decay:
        loss += 0.5 * weight_decay * float(np.sum(model.weights ** 2))
        grad_w += weight_decay * model.weights
    return float(loss), grad_w, grad_b


@dataclass
class TrainTrace:
    """Learning rate and loss per optimizer step, mean loss per epoch."""

    total_steps: int = 0
    learning_rates: List[float] = field(default_factory=list)
    step_losses: List[float] = field(default_factory=list)
    epoch_losses: List[float] = field(default_factory=list)
    class_weights: Dict[str, float] = field(default_factory=dict)


class RouterTrainer(LoggerMixin):
    """Single-threaded, seed-deterministic AdamW training of a :class:`RouterModel`."""

    def __init__(self, config: TrainConfig):
        self.config = config
        self.trace = TrainTrace()

    def train(self, dataset: Sequence[RouteExample]) -> RouterModel:
        cfg = self.config
        if not dataset:
            raise RouterError("cannot train on an empty dataset")
        labels = [example.label for example in dataset]
        unknown = sorted(set(labels) - set(cfg.label_set))
        if unknown:
            raise RouterError(f"labels {unknown} are not in label set {list(cfg.label_set)}")

        loss_weights = (class_weights(labels, cfg.label_set) if cfg.class_weighting
                        else np.ones(len(cfg.label_set)))
        self.trace = TrainTrace(class_weights=dict(zip(cfg.label_set, loss_weights.tolist())))

        model = RouterModel.zeros(cfg.label_set, cfg.feature_dim, cfg.featurizer_seed)
        examples = [(model.featurize(example.question), cfg.label_set.index(example.label))
                    for example in dataset]

        rng = np.random.default_rng(cfg.seed)
        m_w, v_w = np.zeros_like(model.weights), np.zeros_like(model.weights)
        m_b, v_b = np.zeros_like(model.bias), np.zeros_like(model.bias)
        beta1, beta2 = cfg.adam_beta1, cfg.adam_beta2
        steps_per_epoch = math.ceil(len(examples) / cfg.batch_size)
        total_steps = cfg.epochs * steps_per_epoch
        self.trace.total_steps = total_steps

        step = 0
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(examples))
            epoch_loss = 0.0
            for start in range(0, len(examples), cfg.batch_size):
                batch = [examples[i] for i in order[start:start + cfg.batch_size]]
                lr = cfg.learning_rate * (1.0 - step / total_steps)
                # Weight decay is applied decoupled below, not through the loss
                loss, grad_w, grad_b = loss_and_grad(model, batch, loss_weights)
                step += 1

                m_w *= beta1
                m_w += (1 - beta1) * grad_w
                v_w *= beta2
                v_w += (1 - beta2) * grad_w ** 2
                m_b = beta1 * m_b + (1 - beta1) * grad_b
                v_b = beta2 * v_b + (1 - beta2) * grad_b ** 2
                correction1 = 1 - beta1 ** step
                correction2 = 1 - beta2 ** step

                # The model is frozen; its arrays are updated in place
                weights, bias = model.weights, model.bias
                weights *= 1 - lr * cfg.weight_decay
                weights -= lr * (m_w / correction1) / (np.sqrt(v_w / correction2) + cfg.adam_eps)
                bias -= lr * (m_b / correction1) / (np.sqrt(v_b / correction2) + cfg.adam_eps)

                self.trace.learning_rates.append(lr)
                self.trace.step_losses.append(loss)
                epoch_loss += loss * len(batch)

            self.trace.epoch_losses.append(epoch_loss / len(examples))
            self.logger.info("Router epoch finished", epoch=epoch + 1,
                             loss=round(self.trace.epoch_losses[-1], 6), steps=step)

        return RouterModel(label_set=model.label_set, feature_dim=model.feature_dim,
                           featurizer_seed=model.featurizer_seed,
                           weights=model.weights.copy(), bias=model.bias.copy())


def train_router(dataset: Sequence[RouteExample], config: TrainConfig) -> RouterModel:
    return RouterTrainer(config).train(dataset)


@dataclass(frozen=True)
class RouteDecision:
    label: str
    probabilities: Tuple[float, ...]
    label_set: Tuple[str, ...]

    def probability_map(self) -> Dict[str, float]:
        return dict(zip(self.label_set, self.probabilities))


def route(model: RouterModel, question: str) -> RouteDecision:
    """Softmax over the logits; argmax with ties resolved by label-set order."""
    logits = model.logits(model.featurize(question))
    probabilities = np.exp(_log_softmax(logits))
    best = int(np.argmax(probabilities))
    return RouteDecision(label=model.label_set[best],
                         probabilities=tuple(float(p) for p in probabilities),
                         label_set=model.label_set)


def load_route_examples(path: Union[str, Path]) -> List[RouteExample]:
    examples = []
    for line_no, record in iter_jsonl(path):
        if not isinstance(record.get('question'), str) or not isinstance(record.get('label'), str):
            raise RecordFormatError("record needs string 'question' and 'label'", str(path), line_no)
        try:
            examples.append(RouteExample(question=record['question'], label=record['label']))
        except RouterError as e:
            raise RecordFormatError(str(e), str(path), line_no)
    return examples


def evaluate_router(model: RouterModel, examples: Sequence[RouteExample]) -> Dict[str, Any]:
    """Accuracy, per-class accuracy and a confusion matrix (rows gold, columns predicted)."""
    size = model.num_classes
    confusion = np.zeros((size, size), dtype=np.int64)
    for example in examples:
        gold = model.label_index(example.label)
        predicted = model.label_index(route(model, example.question).label)
        confusion[gold, predicted] += 1
    totals = confusion.sum(axis=1)
    correct = int(np.trace(confusion))
    return {
        'count': int(confusion.sum()),
        'accuracy': correct / int(confusion.sum()) if confusion.sum() else 0.0,
        'per_class_accuracy': {label: (int(confusion[i, i]) / int(totals[i]) if totals[i] else None)
                               for i, label in enumerate(model.label_set)},
        'confusion': {'labels': list(model.label_set), 'matrix': confusion.tolist()},
    }


def inspect_model(model: RouterModel, top: int = 5) -> Dict[str, Any]:
    top_buckets = {}
    for i, label in enumerate(model.label_set):
        order = np.argsort(-model.weights[i], kind='stable')[:top]
        top_buckets[label] = [[int(j), float(model.weights[i, j])] for j in order]
    return {
        'version': model.version,
        'label_set': list(model.label_set),
        'feature_dim': model.feature_dim,
        'featurizer_seed': model.featurizer_seed,
        'nonzero_weights': int(np.count_nonzero(model.weights)),
        'bias': dict(zip(model.label_set, model.bias.tolist())),
        'top_buckets': top_buckets,
    }
