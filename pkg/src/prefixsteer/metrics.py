"""Evaluation metrics: oracle-label perplexity, distinct-n, topic coverage and
judged sentiment accuracy, plus JSON/CSV report writers."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .attribute import Discriminator
from .corpus import WordBag
from .errors import DomainError
from .lm import LanguageModel


@dataclass
class MetricsReport:
    model: str
    oracle_ppl: float
    dist: dict[int, float]
    attribute_score: float
    sample_count: int
    seed: int = 0
    config_hash: str = ""
    attribute: str = "topic"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.oracle_ppl >= 1.0:
            raise DomainError(f"oracle_ppl {self.oracle_ppl} < 1")
        if any(not 0.0 < v <= 1.0 for v in self.dist.values()):
            raise DomainError("dist values must lie in (0, 1]")
        if not 0.0 <= self.attribute_score <= 1.0:
            raise DomainError("attribute_score must lie in [0, 1]")

    def to_json(self) -> dict:
        d = asdict(self)
        d["dist"] = {str(k): v for k, v in sorted(self.dist.items())}
        return d

    def row(self) -> list[str]:
        return [self.model, _fmt(self.oracle_ppl), _fmt(self.attribute_score)] + \
            [_fmt(self.dist[n]) for n in (1, 2, 3)]


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def _greedy_labels(judge: LanguageModel, tokens: np.ndarray) -> np.ndarray:
    with T.no_grad():
        logits, _ = judge.forward(tokens[None, :-1])
    return np.argmax(logits.data[0], axis=-1)


def oracle_nll(judge: LanguageModel, tokens, evaluated, n_eval: int | None = None) -> np.ndarray:
    """Per-position ``-log P_evaluated(L_i | x_<i)`` where ``L_i`` is the
    judge's greedy next token.

    ``evaluated`` is either a model (scored on every position, or the last
    ``n_eval``) or an ``(n, vocab)`` array of the distributions the evaluated
    system actually used for the final ``n`` positions of ``tokens``.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or len(tokens) < 2:
        raise DomainError("oracle_ppl needs a sequence of at least 2 tokens")
    if evaluated is judge:
        raise DomainError("judge and evaluated model must be distinct instances")
    labels = _greedy_labels(judge, tokens)
    if isinstance(evaluated, LanguageModel):
        with T.no_grad():
            logits, _ = evaluated.forward(tokens[None, :-1])
        logp = T.log_softmax(logits, axis=-1).data[0]
        n = len(labels) if n_eval is None else n_eval
        logp, labels = logp[-n:], labels[-n:]
        picked = logp[np.arange(n), labels]
    else:
        probs = np.asarray(evaluated, dtype=np.float64)
        n = probs.shape[0]
        if probs.ndim != 2 or not 1 <= n <= len(labels):
            raise DomainError(f"need (n, vocab) distributions with 1 <= n <= {len(labels)}")
        labels = labels[-n:]
        with np.errstate(divide="ignore"):
            picked = np.log(probs[np.arange(n), labels])
    return np.maximum(-picked, 0.0)


def oracle_ppl(judge: LanguageModel, tokens, evaluated, n_eval: int | None = None) -> float:
    """exp of the mean oracle-label negative log-likelihood; always >= 1."""
    return float(np.exp(oracle_nll(judge, tokens, evaluated, n_eval).mean()))


def corpus_oracle_ppl(judge: LanguageModel, samples: Sequence[np.ndarray],
                      step_probs: Sequence[np.ndarray]) -> float:
    """Oracle perplexity pooled over every generated position of every sample."""
    nll = [oracle_nll(judge, s, p) for s, p in zip(samples, step_probs) if len(p)]
    if not nll:
        raise DomainError("no generated positions to score")
    return float(np.exp(np.concatenate(nll).mean()))


def ngrams(text: Sequence[int], n: int) -> list[tuple[int, ...]]:
    text = list(text)
    return [tuple(text[i:i + n]) for i in range(len(text) - n + 1)]


def dist_n(text: Sequence[int], n: int) -> float:
    """Distinct n-grams over total n-grams."""
    if n < 1:
        raise DomainError("n must be >= 1")
    if len(text) < n:
        raise DomainError(f"text of length {len(text)} shorter than n={n}")
    grams = ngrams(text, n)
    return len(set(grams)) / len(grams)


def dist_n_corpus(texts: Sequence[Sequence[int]], n: int) -> float:
    """Corpus-level distinct-n; n-grams never span two samples."""
    grams = [g for t in texts for g in ngrams(t, n)]
    if not grams:
        raise DomainError(f"no sample has length >= {n}")
    return len(set(grams)) / len(grams)


def topic_score(text: Sequence[int], test_bag: WordBag) -> float:
    """Fraction of token occurrences that belong to the bag."""
    if len(text) == 0:
        raise DomainError("empty text")
    ids = test_bag.ids
    return sum(1 for t in text if int(t) in ids) / len(text)


def topic_score_corpus(texts: Sequence[Sequence[int]], bags: Sequence[WordBag]) -> float:
    """Token-weighted topic score over samples, each with its own bag."""
    hits = sum(sum(1 for t in text if int(t) in bag.ids) for text, bag in zip(texts, bags))
    total = sum(len(t) for t in texts)
    if total == 0:
        raise DomainError("empty texts")
    return hits / total


def sentiment_accuracy(texts: Sequence[Sequence[int]], targets: Sequence[int],
                       judge: Discriminator) -> float:
    if len(texts) != len(targets):
        raise DomainError(f"{len(texts)} texts but {len(targets)} targets")
    if not texts:
        raise DomainError("no texts to judge")
    pred = np.argmax(judge.predict_proba(texts), axis=1)
    return float((pred == np.asarray(targets)).mean())


def build_test_bag(bag: WordBag, sentences: Sequence[Sequence[int]], threshold: float = 0.5,
                   exclude: Sequence[int] = (0, 1)) -> WordBag:
    """Expand ``bag`` with tokens that mostly occur alongside it.

    A token joins when the fraction of sentences containing it that also
    contain a bag token exceeds ``threshold``. Expansion is repeated until no
    token joins, so the result is a fixpoint.
    """
    sets = [frozenset(int(t) for t in s) for s in sentences]
    counts: dict[int, int] = {}
    for s in sets:
        for t in s:
            counts[t] = counts.get(t, 0) + 1
    skip = set(exclude)
    cur = set(bag.ids)
    while True:
        with_bag: dict[int, int] = {}
        for s in sets:
            if s & cur:
                for t in s:
                    with_bag[t] = with_bag.get(t, 0) + 1
        new = {t for t, c in with_bag.items()
               if t not in cur and t not in skip and c / counts[t] > threshold}
        if not new:
            return WordBag(bag.name, frozenset(cur))
        cur |= new


COLUMNS = ("Model", "Perplexity", "{attr}", "Dist1", "Dist2", "Dist3")


def write_csv(path, reports: Sequence[MetricsReport]) -> None:
    attr = "Sentiment-acc" if reports and reports[0].attribute == "sentiment" else "Topic"
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([c.format(attr=attr) for c in COLUMNS])
        for r in reports:
            w.writerow(r.row())


def write_json(path, reports: Sequence[MetricsReport]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([r.to_json() for r in reports], fh, sort_keys=True, indent=2)
        fh.write("\n")
