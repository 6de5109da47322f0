"""Synthetic topic and sentiment corpora over a closed word-level vocabulary.

Sentences open with two topic-neutral words (a fixed opener followed by a
word from a neutral Markov chain). Remaining slots mix neutral words with
topic bag words (topic corpus) or sentiment marker words (sentiment corpus).
Each topic also has a few related words outside its bag; they only occur in
that topic's sentences, which is what test-bag expansion picks up.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DomainError

PAD = "<pad>"
END = "<end>"


@dataclass(frozen=True)
class WordBag:
    name: str
    ids: frozenset[int]

    def __post_init__(self):
        if not self.ids:
            raise DomainError(f"word bag {self.name!r} is empty")

    def check(self, vocab_size: int) -> WordBag:
        if max(self.ids) >= vocab_size or min(self.ids) < 0:
            raise DomainError(f"word bag {self.name!r} has ids outside [0, {vocab_size})")
        return self

    def mask(self, vocab_size: int) -> np.ndarray:
        m = np.zeros(vocab_size, dtype=bool)
        m[sorted(self.ids)] = True
        return m


@dataclass(frozen=True)
class CorpusSpec:
    topics: tuple[str, ...] = ("science", "military", "legal", "technology")
    bag_size: int = 24
    related_per_topic: int = 6
    shared_per_bag: int = 0
    n_neutral: int = 48
    n_openers: int = 6
    lexicon_size: int = 16
    min_len: int = 8
    max_len: int = 14
    topic_rate: float = 0.45
    related_rate: float = 0.06
    marker_rate: float = 0.4
    min_attribute_rate: float = 0.3
    seed: int = 0

    def validate(self) -> CorpusSpec:
        if len(self.topics) < 2 or len(set(self.topics)) != len(self.topics):
            raise ConfigError("need at least two distinct topics")
        if not 24 <= self.bag_size <= 40:
            raise ConfigError("bag_size must be within 24..40")
        if self.shared_per_bag > 0.1 * self.bag_size:
            raise ConfigError("bags may share at most 10% of their tokens")
        if not 3 <= self.min_len <= self.max_len:
            raise ConfigError("need 3 <= min_len <= max_len")
        for rate in (self.topic_rate, self.related_rate, self.marker_rate, self.min_attribute_rate):
            if not 0.0 <= rate <= 1.0:
                raise ConfigError("rates must lie in [0, 1]")
        if self.topic_rate + self.related_rate > 1.0:
            raise ConfigError("topic_rate + related_rate must be <= 1")
        if self.n_neutral < 4 or self.n_openers < 1 or self.lexicon_size < 1:
            raise ConfigError("word inventory too small")
        return self

    # word inventories (strings) ------------------------------------------------
    def openers(self) -> list[str]:
        return [f"o{i}" for i in range(self.n_openers)]

    def neutral(self) -> list[str]:
        return [f"w{i:02d}" for i in range(self.n_neutral)]

    def shared(self) -> list[str]:
        return [f"shared{i}" for i in range(self.shared_per_bag)]

    def bag_words(self, topic: str) -> list[str]:
        own = [f"{topic}{i:02d}" for i in range(self.bag_size - self.shared_per_bag)]
        return own + self.shared()

    def related_words(self, topic: str) -> list[str]:
        return [f"{topic}~{i}" for i in range(self.related_per_topic)]

    def lexicon(self, polarity: str) -> list[str]:
        return [f"{polarity[:3]}{i:02d}" for i in range(self.lexicon_size)]


class Vocab:
    """Ordered token list with reserved ``<pad>`` (id 0) and ``<end>`` (id 1)."""

    def __init__(self, tokens: Sequence[str]):
        if len(set(tokens)) != len(tokens):
            raise ConfigError("vocab tokens must be unique")
        if list(tokens[:2]) != [PAD, END]:
            raise ConfigError("vocab must start with <pad>, <end>")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    pad_id = 0
    end_id = 1

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def ids(self, words: Iterable[str]) -> list[int]:
        return [self.index[w] for w in words]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> Vocab:
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


def build_vocab(spec: CorpusSpec) -> Vocab:
    spec.validate()
    tokens = [PAD, END] + spec.openers() + spec.neutral() + spec.shared()
    for topic in spec.topics:
        tokens += [w for w in spec.bag_words(topic) if w not in spec.shared()]
        tokens += spec.related_words(topic)
    tokens += spec.lexicon("negative") + spec.lexicon("positive")
    return Vocab(tokens)


def topic_bags(spec: CorpusSpec, vocab: Vocab) -> list[WordBag]:
    return [WordBag(t, frozenset(vocab.ids(spec.bag_words(t)))).check(len(vocab))
            for t in spec.topics]


def sentiment_lexicons(spec: CorpusSpec, vocab: Vocab) -> list[WordBag]:
    """Marker sets indexed by class label: 0 = negative, 1 = positive."""
    return [WordBag(p, frozenset(vocab.ids(spec.lexicon(p)))) for p in ("negative", "positive")]


SENTIMENT_CLASSES = ("negative", "positive")


def tokenize(text: str, vocab: Vocab) -> list[int]:
    out = []
    for w in text.split():
        if w not in vocab.index:
            raise DomainError(f"unknown word {w!r}")
        out.append(vocab.index[w])
    return out


def detokenize(ids: Iterable[int], vocab: Vocab) -> str:
    return " ".join(vocab.tokens[int(i)] for i in ids)


@dataclass
class Example:
    tokens: list[int]
    label: int
    topic: str | None = None
    text: str = ""

    def to_json(self) -> dict:
        d = {"text": self.text, "label": self.label}
        if self.topic is not None:
            d["topic"] = self.topic
        return d


def _neutral_chain(spec: CorpusSpec) -> np.ndarray:
    """Fixed successor table: each neutral word has three likely successors."""
    rng = np.random.default_rng([spec.seed, 7919])
    return np.stack([rng.choice(spec.n_neutral, size=3, replace=False)
                     for _ in range(spec.n_neutral)])


def _sentence(spec: CorpusSpec, rng: np.random.Generator, succ: np.ndarray,
              attr_words: list[str], rate: float, related: list[str]) -> list[str]:
    n = int(rng.integers(spec.min_len, spec.max_len + 1))
    neutral = spec.neutral()
    words = [spec.openers()[int(rng.integers(spec.n_openers))]]
    state = int(rng.integers(spec.n_neutral))
    words.append(neutral[state])
    slots = n - 2
    n_attr = max(math.ceil(spec.min_attribute_rate * n), int(rng.binomial(slots, rate)))
    n_attr = min(n_attr, slots)
    attr_pos = set(rng.choice(slots, size=n_attr, replace=False).tolist())
    rel_rate = spec.related_rate / max(1e-12, 1.0 - rate) if related else 0.0
    for j in range(slots):
        if j in attr_pos:
            words.append(attr_words[int(rng.integers(len(attr_words)))])
        elif related and rng.random() < rel_rate:
            words.append(related[int(rng.integers(len(related)))])
        else:
            state = int(succ[state, int(rng.integers(3))])
            words.append(neutral[state])
    return words


def neutral_sequence(spec: CorpusSpec, vocab: Vocab, length: int,
                     rng: np.random.Generator) -> list[int]:
    """An opener followed by a walk on the neutral chain; carries no attribute."""
    succ = _neutral_chain(spec)
    words = [spec.openers()[int(rng.integers(spec.n_openers))]]
    state = int(rng.integers(spec.n_neutral))
    for _ in range(length - 1):
        words.append(spec.neutral()[state])
        state = int(succ[state, int(rng.integers(3))])
    return vocab.ids(words[:length])


def generate_topic_corpus(spec: CorpusSpec, size: int, vocab: Vocab | None = None,
                          offset: int = 0) -> list[Example]:
    """``size`` topic sentences; sentence ``i`` is drawn from its own seeded stream.

    ``offset`` shifts the per-sentence seeds so disjoint splits can be drawn.
    """
    spec.validate()
    if size <= 0:
        raise ConfigError("size must be > 0")
    vocab = vocab or build_vocab(spec)
    succ = _neutral_chain(spec)
    out = []
    for i in range(offset, offset + size):
        rng = np.random.default_rng([spec.seed, 1, i])
        label = int(rng.integers(len(spec.topics)))
        topic = spec.topics[label]
        words = _sentence(spec, rng, succ, spec.bag_words(topic), spec.topic_rate,
                          spec.related_words(topic))
        out.append(Example(vocab.ids(words) + [vocab.end_id], label, topic, " ".join(words)))
    return out


def generate_sentiment_corpus(spec: CorpusSpec, size: int, vocab: Vocab | None = None,
                              offset: int = 0) -> list[Example]:
    spec.validate()
    if size <= 0:
        raise ConfigError("size must be > 0")
    vocab = vocab or build_vocab(spec)
    succ = _neutral_chain(spec)
    out = []
    for i in range(offset, offset + size):
        rng = np.random.default_rng([spec.seed, 2, i])
        label = int(rng.integers(2))
        words = _sentence(spec, rng, succ, spec.lexicon(SENTIMENT_CLASSES[label]),
                          spec.marker_rate, [])
        out.append(Example(vocab.ids(words) + [vocab.end_id], label, None, " ".join(words)))
    return out


def prompts_from(examples: Sequence[Example], length: int = 2) -> np.ndarray:
    """The first ``length`` (topic-neutral) tokens of each example."""
    return np.array([ex.tokens[:length] for ex in examples], dtype=np.int64)


def write_jsonl(path, examples: Iterable[Example]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_json(), sort_keys=True) + "\n")


def read_jsonl(path, vocab: Vocab) -> list[Example]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            d = json.loads(line)
            out.append(Example(tokenize(d["text"], vocab) + [vocab.end_id], d["label"],
                               d.get("topic"), d["text"]))
    return out


def pad_batch(seqs: Sequence[Sequence[int]], length: int, pad_id: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad / truncate to ``length``; returns (ids, mask)."""
    ids = np.full((len(seqs), length), pad_id, dtype=np.int64)
    mask = np.zeros((len(seqs), length), dtype=np.float64)
    for r, s in enumerate(seqs):
        s = list(s)[:length]
        ids[r, :len(s)] = s
        mask[r, :len(s)] = 1.0
    return ids, mask
