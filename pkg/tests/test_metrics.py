import csv
import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prefixsteer import tensor as T
from prefixsteer.attribute import Discriminator
from prefixsteer.corpus import WordBag
from prefixsteer.errors import DomainError
from prefixsteer.metrics import (MetricsReport, build_test_bag, corpus_oracle_ppl, dist_n,
                                 dist_n_corpus, oracle_nll, oracle_ppl, sentiment_accuracy,
                                 topic_score, topic_score_corpus, write_csv, write_json)


class TestDist:
    def test_examples(self):
        assert dist_n([1, 1, 1, 1], 1) == 0.25
        assert dist_n([1, 2, 3, 4], 2) == 1.0
        assert dist_n([1, 2, 1, 2], 2) == pytest.approx(2 / 3)

    def test_errors(self):
        with pytest.raises(DomainError):
            dist_n([1, 2], 3)
        with pytest.raises(DomainError):
            dist_n([1, 2], 0)
        with pytest.raises(DomainError):
            dist_n_corpus([[1], [2]], 2)

    def test_corpus_never_spans_samples(self):
        # joined, [1, 2] + [3, 4] would add the bigram (2, 3)
        assert dist_n_corpus([[1, 2], [3, 4]], 2) == 1.0
        assert dist_n_corpus([[1, 2], [1, 2]], 2) == 0.5

    @given(st.lists(st.integers(0, 4), min_size=3, max_size=12), st.integers(1, 3))
    @settings(max_examples=80, deadline=None)
    def test_brute_force(self, text, n):
        grams = [tuple(text[i:i + n]) for i in range(len(text) - n + 1)]
        seen = []
        for g in grams:
            if g not in seen:
                seen.append(g)
        assert dist_n(text, n) == len(seen) / len(grams)
        assert 0.0 < dist_n(text, n) <= 1.0


class TestTopicScore:
    bag = WordBag("b", frozenset({3, 4}))

    def test_examples(self):
        assert topic_score([3, 4, 3], self.bag) == 1.0
        assert topic_score([1, 2], self.bag) == 0.0
        assert topic_score([3, 1, 2, 4], self.bag) == 0.5

    def test_empty(self):
        with pytest.raises(DomainError):
            topic_score([], self.bag)

    def test_corpus_token_weighted(self):
        other = WordBag("o", frozenset({1}))
        assert topic_score_corpus([[3], [1, 2, 2]], [self.bag, other]) == 0.5


class TestOraclePPL:
    def test_uniform_is_vocab_size(self, tiny_lm):
        tokens = np.array([1, 2, 3, 4, 5, 6])
        probs = np.full((5, 11), 1 / 11)
        assert abs(oracle_ppl(tiny_lm, tokens, probs) - 11.0) < 1e-9

    def test_self_judge_recomputation(self, tiny_lm):
        tokens = np.array([1, 5, 2, 7, 3])
        other = tiny_lm.clone()
        with T.no_grad():
            logits, _ = tiny_lm.forward(tokens[None, :-1])
        lp = T.log_softmax(logits, axis=-1).data[0]
        greedy = lp.argmax(axis=1)
        want = np.exp(-lp[np.arange(4), greedy].mean())
        assert oracle_ppl(tiny_lm, tokens, other) == pytest.approx(want, rel=1e-12)
        assert oracle_ppl(tiny_lm, tokens, other) >= 1.0

    def test_judge_must_differ(self, tiny_lm):
        with pytest.raises(DomainError):
            oracle_ppl(tiny_lm, [1, 2, 3], tiny_lm)

    def test_array_matches_model(self, tiny_lm):
        tokens = np.array([1, 5, 2, 7, 3])
        ev = tiny_lm.clone()
        ev.params["out.b"].data = ev.params["out.b"].data + np.linspace(0, 1, 11)
        with T.no_grad():
            logits, _ = ev.forward(tokens[None, :-1])
        probs = T.softmax(logits, axis=-1).data[0, -2:]
        np.testing.assert_allclose(oracle_nll(tiny_lm, tokens, probs),
                                   oracle_nll(tiny_lm, tokens, ev, n_eval=2), atol=1e-12)

    def test_corpus_pooling(self, tiny_lm):
        samples = [np.array([1, 2, 3]), np.array([4, 5, 6, 7])]
        r = np.random.default_rng(0)
        probs = [r.dirichlet(np.ones(11), size=1), r.dirichlet(np.ones(11), size=3)]
        nll = np.concatenate([oracle_nll(tiny_lm, s, p) for s, p in zip(samples, probs)])
        assert corpus_oracle_ppl(tiny_lm, samples, probs) == pytest.approx(np.exp(nll.mean()))

    def test_short_sequence(self, tiny_lm):
        with pytest.raises(DomainError):
            oracle_ppl(tiny_lm, [1], np.ones((1, 11)) / 11)


class TestSentimentAccuracy:
    @pytest.fixture
    def judge(self, tiny_lm, rng):
        return Discriminator(rng.normal(size=(8, 2)), rng.normal(size=2), ["neg", "pos"], tiny_lm)

    def test_manual(self, judge):
        texts = [[1, 2, 3], [4, 5, 6], [7, 8, 9], [2, 4, 6]]
        pred = np.argmax(judge.predict_proba(texts), axis=1)
        assert sentiment_accuracy(texts, list(pred), judge) == 1.0
        flipped = [1 - p for p in pred]
        assert sentiment_accuracy(texts, flipped, judge) == 0.0
        mixed = [pred[0], 1 - pred[1], pred[2], pred[3]]
        assert sentiment_accuracy(texts, mixed, judge) == 0.75

    def test_complement(self, judge):
        texts = [[1, 2, 3], [4, 5, 6], [7, 8, 9]]
        targets = [0, 1, 0]
        acc = sentiment_accuracy(texts, targets, judge)
        assert acc + sentiment_accuracy(texts, [1 - t for t in targets], judge) == pytest.approx(1)

    def test_errors(self, judge):
        with pytest.raises(DomainError):
            sentiment_accuracy([[1, 2]], [0, 1], judge)
        with pytest.raises(DomainError):
            sentiment_accuracy([], [], judge)


class TestTestBag:
    bag = WordBag("b", frozenset({5}))

    def test_threshold_one_adds_nothing(self):
        sents = [[5, 6], [5, 6, 7], [7, 8]]
        assert build_test_bag(self.bag, sents, threshold=1.0).ids == {5}

    def test_co_occurring_token_joins(self):
        sents = [[5, 6], [5, 6, 7], [7, 8], [8, 9]]
        out = build_test_bag(self.bag, sents, threshold=0.5)
        assert 6 in out.ids and 9 not in out.ids and 7 not in out.ids

    def test_reserved_ids_skipped(self):
        assert 1 not in build_test_bag(self.bag, [[5, 1], [5, 1]]).ids

    def test_idempotent(self):
        r = np.random.default_rng(0)
        sents = [list(r.integers(2, 12, size=5)) for _ in range(40)]
        once = build_test_bag(self.bag, sents)
        assert build_test_bag(once, sents) == once

    def test_superset(self):
        r = np.random.default_rng(1)
        sents = [list(r.integers(2, 12, size=4)) for _ in range(20)]
        assert self.bag.ids <= build_test_bag(self.bag, sents).ids


class TestReport:
    def _report(self, **kw):
        base = dict(model="m", oracle_ppl=5.0, dist={1: 0.5, 2: 0.7, 3: 0.9},
                    attribute_score=0.4, sample_count=10)
        base.update(kw)
        return MetricsReport(**base)

    def test_validation(self):
        with pytest.raises(DomainError):
            self._report(oracle_ppl=0.9)
        with pytest.raises(DomainError):
            self._report(dist={1: 0.0, 2: 0.5, 3: 0.5})
        with pytest.raises(DomainError):
            self._report(attribute_score=1.5)

    def test_csv_shape(self, tmp_path):
        write_csv(tmp_path / "r.csv", [self._report(), self._report(model="n")])
        rows = list(csv.reader(open(tmp_path / "r.csv")))
        assert rows[0] == ["Model", "Perplexity", "Topic", "Dist1", "Dist2", "Dist3"]
        assert len(rows) == 3 and all(len(r) == 6 for r in rows)

    def test_sentiment_header(self, tmp_path):
        write_csv(tmp_path / "r.csv", [self._report(attribute="sentiment")])
        assert open(tmp_path / "r.csv").readline().split(",")[2] == "Sentiment-acc"

    def test_json(self, tmp_path):
        write_json(tmp_path / "r.json", [self._report()])
        back = json.load(open(tmp_path / "r.json"))
        assert back[0]["dist"] == {"1": 0.5, "2": 0.7, "3": 0.9}


def test_dist_product_exhaustive():
    # every length-4 text over 2 symbols
    for text in itertools.product([0, 1], repeat=4):
        assert dist_n(text, 4) == 1.0
        assert dist_n(text, 1) == len(set(text)) / 4
