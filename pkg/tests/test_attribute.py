import warnings
from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import numeric_grad, rel_error
from prefixsteer import tensor as T
from prefixsteer.attribute import (AttributeTarget, BagOfWordsAttribute, BagUnderflowWarning,
                                   DiscTrainConfig, Discriminator, bow_log_likelihood, bow_loss,
                                   discriminator_loss, train_discriminator)
from prefixsteer.corpus import Example, WordBag
from prefixsteer.errors import DataError, DomainError
from prefixsteer.lm import LMConfig, PrefixState, init_model
from prefixsteer.tensor import Tensor

getcontext().prec = 40


def _bag(*ids):
    return WordBag("t", frozenset(ids))


class TestTargets:
    def test_exactly_one_variant(self):
        with pytest.raises(DomainError):
            AttributeTarget()
        with pytest.raises(DomainError):
            AttributeTarget(bag=_bag(1), label=0)

    def test_keys(self):
        assert AttributeTarget.topic(_bag(1)).key == "topic:t"
        assert AttributeTarget.of_class(1).key == "label:1"

    def test_empty_bag(self):
        with pytest.raises(DomainError):
            WordBag("x", frozenset())


class TestBowLikelihood:
    def test_uniform(self):
        assert bow_log_likelihood(np.full(100, 0.01), _bag(*range(10))) == pytest.approx(np.log(0.1))

    def test_certain(self):
        p = np.zeros(5)
        p[3] = 1.0
        assert bow_log_likelihood(p, _bag(3)) == 0.0

    def test_extended_precision(self, rng):
        for _ in range(10):
            p = rng.dirichlet(np.ones(30))
            ids = set(rng.choice(30, size=7, replace=False).tolist())
            exact = sum(Decimal(float(p[i])) for i in ids).ln()
            assert abs(bow_log_likelihood(p, _bag(*ids)) - float(exact)) < 1e-10

    def test_zero_mass_floor(self):
        p = np.array([1.0, 0.0])
        with pytest.warns(BagUnderflowWarning):
            assert bow_log_likelihood(p, _bag(1)) == pytest.approx(np.log(1e-12))

    def test_not_normalised(self):
        with pytest.raises(DomainError):
            bow_log_likelihood(np.array([0.5, 0.6]), _bag(0))

    @given(st.integers(0, 2 ** 31), st.floats(0.0, 1.0))
    @settings(max_examples=60, deadline=None)
    def test_monotone(self, seed, frac):
        r = np.random.default_rng(seed)
        p = r.dirichlet(np.ones(8))
        bag = _bag(0, 1, 2)
        moved = p.copy()
        amount = frac * moved[5]
        moved[5] -= amount
        moved[1] += amount
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", BagUnderflowWarning)
            assert bow_log_likelihood(moved, bag) >= bow_log_likelihood(p, bag) - 1e-12

    def test_bow_loss_matches_likelihood(self, rng):
        logits = rng.normal(size=(3, 9))
        masks = np.zeros((3, 9), dtype=bool)
        masks[:, [1, 4]] = True
        got = bow_loss(Tensor(logits), masks).data
        p = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
        for r in range(3):
            assert got[r] == pytest.approx(-bow_log_likelihood(p[r], _bag(1, 4)), abs=1e-12)


def _disc(rng, d=8, c=2, lm=None):
    return Discriminator(rng.normal(size=(d, c)), rng.normal(size=c), [str(i) for i in range(c)], lm)


class TestClassify:
    def test_pure_and_normalised(self, tiny_lm, rng):
        disc = _disc(rng)
        _, cache = tiny_lm.forward([[1, 2, 3, 4]])
        a, b = disc.classify(cache).data, disc.classify(cache).data
        assert np.array_equal(a, b)
        assert a.sum() == pytest.approx(1.0, abs=1e-9)

    def test_manual_pooling(self, tiny_lm, rng):
        disc = _disc(rng)
        _, cache = tiny_lm.forward([[1, 2, 3, 4, 5]], PrefixState(rng.normal(size=(2, 2, 3, 8))))
        h = cache.final.data[0, :3]
        z = h.mean(axis=0) @ disc.weight.data + disc.bias.data
        want = np.exp(z - z.max()) / np.exp(z - z.max()).sum()
        assert np.abs(disc.classify(cache, upto=3).data[0] - want).max() < 1e-10

    def test_position_range(self, tiny_lm, rng):
        disc = _disc(rng)
        _, cache = tiny_lm.forward([[1, 2]])
        with pytest.raises(IndexError):
            disc.classify(cache, upto=3)
        with pytest.raises(IndexError):
            disc.classify(cache, upto=0)

    def test_prefix_values_irrelevant_without_slots(self, rng):
        cfg = LMConfig(vocab_size=11, d_model=8, n_heads=2, context_len=16, prefix_len=0)
        lm = init_model(cfg, 0)
        disc = _disc(rng)
        _, a = lm.forward([[1, 2, 3]], PrefixState.zeros(cfg))
        _, b = lm.forward([[1, 2, 3]])
        assert np.array_equal(disc.classify(a).data, disc.classify(b).data)

    def test_gradient_reaches_prefix(self, tiny_lm, rng):
        disc = _disc(rng)
        tiny_lm.set_trainable(False)
        base = rng.normal(size=(1, 2, 2, 3, 8))

        def loss_of(p):
            _, cache = tiny_lm.forward([[1, 2, 3]], p)
            return discriminator_loss(disc.classify(cache), AttributeTarget.of_class(1), "sum")

        p = Tensor(base.copy(), requires_grad=True)
        loss_of(p).backward()
        assert np.abs(p.grad).max() > 0

        def f():
            with T.no_grad():
                return loss_of(Tensor(base)).item()

        assert rel_error(p.grad, numeric_grad(f, base)) < 1e-3


class TestDiscriminatorLoss:
    def test_onehot(self):
        assert discriminator_loss(Tensor([0.0, 1.0]), AttributeTarget.of_class(1)).item() == 0.0

    def test_uniform(self):
        loss = discriminator_loss(Tensor([0.5, 0.5]), AttributeTarget.of_class(0)).item()
        assert loss == pytest.approx(np.log(2))

    def test_wrong_variant(self):
        with pytest.raises(DomainError):
            discriminator_loss(Tensor([0.5, 0.5]), AttributeTarget.topic(_bag(0)))

    def test_gradient_wrt_head_output(self, rng):
        for _ in range(10):
            z = rng.normal(size=4)
            leaf = Tensor(z, requires_grad=True)
            discriminator_loss(T.softmax(leaf), AttributeTarget.of_class(2)).sum().backward()
            want = np.exp(z) / np.exp(z).sum()
            want[2] -= 1
            np.testing.assert_allclose(leaf.grad, want, atol=1e-8)

    @given(st.integers(0, 2 ** 31))
    @settings(max_examples=40, deadline=None)
    def test_nonnegative(self, seed):
        d = np.random.default_rng(seed).dirichlet(np.ones(3))
        assert discriminator_loss(Tensor(d), AttributeTarget.of_class(1)).item() >= 0.0


def _marker_corpus(rng, n=200, shuffle=False):
    out = []
    for _ in range(n):
        label = int(rng.integers(2))
        toks = list(rng.integers(3, 11, size=5))
        toks[int(rng.integers(5))] = 2 if label else 1
        out.append(Example(toks, label))
    if shuffle:
        labels = rng.permutation([ex.label for ex in out])
        out = [Example(ex.tokens, int(y)) for ex, y in zip(out, labels)]
    return out


class TestTraining:
    def test_separable(self):
        # d_model 8 is too narrow for the pooled marker to stay linearly separable
        lm = init_model(LMConfig(vocab_size=11, d_model=16, n_layers=1, n_heads=2,
                                 context_len=16, prefix_len=0), 0)
        corpus = _marker_corpus(np.random.default_rng(0), 300)
        disc = train_discriminator(lm, corpus, DiscTrainConfig(epochs=300, lr=0.1))
        assert disc.heldout_accuracy >= 0.95
        assert disc.history and disc.history[-1]["loss"] < disc.history[0]["loss"]

    def test_shuffled_labels(self, tiny_lm):
        corpus = _marker_corpus(np.random.default_rng(1), 400, shuffle=True)
        disc = train_discriminator(tiny_lm, corpus,
                                   DiscTrainConfig(epochs=100, lr=0.1, heldout_frac=0.5))
        assert abs(disc.heldout_accuracy - 0.5) <= 0.1

    def test_deterministic(self, tiny_lm):
        corpus = _marker_corpus(np.random.default_rng(0), 100)
        a = train_discriminator(tiny_lm, corpus, DiscTrainConfig(epochs=20))
        b = train_discriminator(tiny_lm, corpus, DiscTrainConfig(epochs=20))
        assert np.array_equal(a.weight.data, b.weight.data)

    def test_single_class(self, tiny_lm):
        with pytest.raises(DataError):
            train_discriminator(tiny_lm, [Example([1, 2], 0), Example([2, 3], 0)])

    def test_lm_frozen(self, tiny_lm):
        before = {k: v.data.copy() for k, v in tiny_lm.params.items()}
        train_discriminator(tiny_lm, _marker_corpus(np.random.default_rng(0), 50),
                            DiscTrainConfig(epochs=5))
        assert all(np.array_equal(before[k], tiny_lm.params[k].data) for k in before)

    def test_checkpoint_roundtrip(self, tiny_lm, tmp_path, rng):
        disc = _disc(rng, lm=tiny_lm)
        disc.save(tmp_path / "d.ckpt", config_hash="abc")
        back = Discriminator.load(tmp_path / "d.ckpt", tiny_lm)
        assert np.array_equal(back.weight.data, disc.weight.data)
        assert back.class_names == disc.class_names


def test_bag_mass_matches_probs(tiny_lm):
    seqs = np.array([[1, 2, 3, 4]])
    target = AttributeTarget.topic(_bag(5, 6))
    got = BagOfWordsAttribute(tiny_lm).mean_bag_mass(seqs, [target], 2)
    with T.no_grad():
        logits, _ = tiny_lm.forward(seqs)
    p = T.softmax(logits).data[0, -2:]
    assert got[0] == pytest.approx(p[:, [5, 6]].sum(axis=1).mean(), abs=1e-14)
