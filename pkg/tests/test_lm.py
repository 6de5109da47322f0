from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prefixsteer import checkpoint
from prefixsteer import tensor as T
from prefixsteer.errors import CapacityError, ConfigError, NumericError
from prefixsteer.lm import (DecodeConfig, LMConfig, PrefixState, attach_prefix, fit_null_prefix,
                            init_model, init_prefix, load_model, next_token_probs, sample_next,
                            save_model)
from prefixsteer.tensor import Tensor

getcontext().prec = 40


class TestConfig:
    def test_heads_must_divide(self):
        with pytest.raises(ConfigError):
            LMConfig(d_model=10, n_heads=4).validate()

    def test_negative_prefix(self):
        with pytest.raises(ConfigError):
            LMConfig(prefix_len=-1).validate()

    def test_decode_validation(self):
        with pytest.raises(ConfigError):
            DecodeConfig(temperature=0.0).validate()
        with pytest.raises(ConfigError):
            DecodeConfig(k=0).validate()


class TestInit:
    def test_deterministic(self, tiny_config):
        a, b = init_model(tiny_config, 5), init_model(tiny_config, 5)
        for name in a.params:
            assert np.array_equal(a.params[name].data, b.params[name].data)

    def test_output_width(self):
        lm = init_model(LMConfig(vocab_size=17, d_model=8, n_heads=2, context_len=8, prefix_len=2))
        assert lm.params["out.w"].shape[1] == 17

    def test_seeds_differ(self, tiny_config):
        a, b = init_model(tiny_config, 0), init_model(tiny_config, 1)
        assert any(not np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)

    def test_invalid_config(self):
        with pytest.raises(ConfigError):
            init_model(LMConfig(d_model=6, n_heads=4))


class TestPrefix:
    def test_zero_length_is_bare_model(self):
        cfg = LMConfig(vocab_size=9, d_model=8, n_heads=2, context_len=10, prefix_len=0)
        lm = init_model(cfg, 2)
        toks = np.array([[1, 4, 2, 7]])
        bare, _ = lm.forward(toks)
        view, _ = attach_prefix(lm, PrefixState.zeros(cfg)).forward(toks)
        assert np.array_equal(bare.data, view.data)

    def test_span_covers_all_slots(self, tiny_config, rng):
        # every prefix slot's value reaches every content position
        cfg = LMConfig(vocab_size=11, d_model=8, n_heads=2, context_len=20, prefix_len=10)
        lm = init_model(cfg, 0)
        toks = np.array([[1, 2, 3, 4, 5]])
        base = rng.normal(size=(cfg.n_layers, 2, 10, 8))
        ref, _ = lm.forward(toks, PrefixState(base))
        for slot in range(10):
            moved = base.copy()
            moved[0, 1, slot] += 1.0
            out, _ = lm.forward(toks, PrefixState(moved))
            assert (np.abs(out.data - ref.data).max(axis=-1) > 0).all()

    def test_zero_prefix_differs_from_absent(self, tiny_lm):
        toks = np.array([[1, 2, 3]])
        bare, _ = tiny_lm.forward(toks)
        pre, _ = tiny_lm.forward(toks, PrefixState.zeros(tiny_lm.config))
        assert not np.allclose(bare.data, pre.data)

    def test_shape_mismatch(self, tiny_lm):
        with pytest.raises(ConfigError):
            attach_prefix(tiny_lm, PrefixState(np.zeros((1, 2, 3, 8))))
        with pytest.raises(ConfigError):
            tiny_lm.forward([[1, 2]], PrefixState(np.zeros((2, 2, 5, 8))))

    def test_init_prefix_shape(self, tiny_lm, rng):
        p = init_prefix(tiny_lm, rng, 0.1, tokens=[1, 2, 3])
        assert p.values.shape == (2, 2, 3, 8)
        assert np.isfinite(p.values).all()
        with pytest.raises(ConfigError):
            init_prefix(tiny_lm, rng, tokens=[1, 2])

    def test_null_prefix_fit_reduces_kl(self, tiny_lm, rng):
        sents = [list(rng.integers(2, 11, size=6)) for _ in range(20)]
        start = init_prefix(tiny_lm, rng, 0.5)
        ids = np.array(sents)

        def kl(p):
            with T.no_grad():
                a, _ = tiny_lm.forward(ids)
                b, _ = tiny_lm.forward(ids, p)
                return T.kl_divergence(a, b).mean().item()

        fitted = fit_null_prefix(tiny_lm, start, sents, steps=30, lr=0.05, batch=8, rng=rng)
        assert kl(fitted) < kl(start)
        assert all(p.requires_grad for p in tiny_lm.parameters())


class TestForward:
    def test_causality(self, tiny_lm, rng):
        toks = rng.integers(0, 11, size=(1, 8))
        fixed = PrefixState(rng.normal(size=(2, 2, 3, 8)))
        ref, _ = tiny_lm.forward(toks, fixed)
        for t in range(7):
            other = toks.copy()
            other[0, t + 1:] = (other[0, t + 1:] + 1) % 11
            out, _ = tiny_lm.forward(other, fixed)
            assert np.array_equal(out.data[0, :t + 1], ref.data[0, :t + 1])

    def test_rows_normalise(self, tiny_lm, rng):
        logits, _ = tiny_lm.forward(rng.integers(0, 11, size=(2, 6)))
        np.testing.assert_allclose(T.softmax(logits).data.sum(-1), 1.0, atol=1e-9)

    def test_capacity(self, tiny_lm):
        with pytest.raises(CapacityError):
            tiny_lm.forward(np.zeros((1, 14), dtype=int), PrefixState.zeros(tiny_lm.config))

    def test_bad_token(self, tiny_lm):
        with pytest.raises(IndexError):
            tiny_lm.forward([[0, 11]])

    def test_cache_matches_full_recompute(self, tiny_lm, rng):
        toks = rng.integers(0, 11, size=(2, 7))
        pre = PrefixState(rng.normal(size=(2, 2, 3, 8)))
        full, full_cache = tiny_lm.forward(toks, pre)
        _, cache = tiny_lm.forward(toks[:, :4], pre)
        steps = []
        for j in range(4, 7):
            lg, cache = tiny_lm.forward(toks[:, j:j + 1], pre, cache)
            steps.append(lg.data[:, 0])
        np.testing.assert_allclose(np.stack(steps, 1), full.data[:, 4:], atol=1e-12)
        np.testing.assert_allclose(cache.final.data, full_cache.final.data, atol=1e-12)

    def test_incremental_greedy_same_tokens(self, tiny_lm):
        greedy = DecodeConfig(strategy="greedy")
        seq = [1, 2]
        for _ in range(5):
            seq.append(sample_next(tiny_lm.forward([seq])[0].data[0, -1], greedy))
        inc = [1, 2]
        logits, cache = tiny_lm.forward([inc[:-1]])
        last = inc[-1]
        for _ in range(5):
            lg, cache = tiny_lm.forward([[last]], None, cache)
            last = sample_next(lg.data[0, -1], greedy)
            inc.append(last)
        assert seq == inc

    def test_deterministic(self, tiny_lm):
        a, _ = tiny_lm.forward([[1, 2, 3]])
        b, _ = tiny_lm.forward([[1, 2, 3]])
        assert np.array_equal(a.data, b.data)

    def test_hand_rolled_reference(self, rng):
        """One layer, d_model=4, two heads, a one-slot prefix and two tokens,
        recomputed with Decimal arithmetic."""
        cfg = LMConfig(vocab_size=5, d_model=4, n_layers=1, n_heads=2, context_len=4, prefix_len=1)
        lm = init_model(cfg, 11)
        for p in lm.params.values():
            p.data = rng.normal(scale=0.5, size=p.shape)
        prefix = rng.normal(size=(1, 2, 1, 4))
        toks = [3, 1]
        got, _ = lm.forward([toks], PrefixState(prefix))
        want = _reference_logits({k: v.data for k, v in lm.params.items()}, prefix, toks)
        assert np.abs(got.data[0] - want).max() < 1e-10


def _D(x):
    return Decimal(float(x))


def _ln(v, g, b):
    n = len(v)
    mu = sum(v) / n
    var = sum((x - mu) ** 2 for x in v) / n
    inv = 1 / (var + Decimal("1e-5")).sqrt()
    return [(x - mu) * inv * _D(gg) + _D(bb) for x, gg, bb in zip(v, g, b)]


def _vecmat(v, m):
    return [sum(v[i] * _D(m[i, j]) for i in range(len(v))) for j in range(m.shape[1])]


def _gelu(x):
    c = (Decimal(2) / _pi()).sqrt()
    inner = c * (x + Decimal("0.044715") * x ** 3)
    e = (2 * inner).exp()
    return Decimal("0.5") * x * (1 + (e - 1) / (e + 1))


def _pi():
    # Machin's formula, enough digits for the 40-digit context
    def arctan_inv(n):
        total, term, k = Decimal(0), Decimal(1) / n, 0
        while term != 0:
            total += term / (2 * k + 1) * (-1) ** k
            term /= n * n
            k += 1
        return total
    return 4 * (4 * arctan_inv(5) - arctan_inv(239))


def _reference_logits(P, prefix, toks):
    d, H = 4, 2
    hd = d // H
    xs = [[_D(P["tok_emb"][t, j]) + _D(P["pos_emb"][i, j]) for j in range(d)]
          for i, t in enumerate(toks)]
    hs = [_ln(x, P["h0.ln1.g"], P["h0.ln1.b"]) for x in xs]
    q = [_vecmat(h, P["h0.wq"]) for h in hs]
    k = [[_D(v) for v in prefix[0, 0, 0]]] + [_vecmat(h, P["h0.wk"]) for h in hs]
    v = [[_D(x) for x in prefix[0, 1, 0]]] + [_vecmat(h, P["h0.wv"]) for h in hs]
    scale = 1 / Decimal(hd).sqrt()
    out = []
    for i, x in enumerate(xs):
        att = []
        for head in range(H):
            sl = slice(head * hd, (head + 1) * hd)
            span = i + 2  # prefix slot plus content positions 0..i
            scores = [sum(a * b for a, b in zip(q[i][sl], k[j][sl])) * scale for j in range(span)]
            m = max(scores)
            w = [(s - m).exp() for s in scores]
            z = sum(w)
            att += [sum(w[j] / z * v[j][sl][c] for j in range(span)) for c in range(hd)]
        x = [a + b for a, b in zip(x, _vecmat(att, P["h0.wo"]))]
        h2 = _ln(x, P["h0.ln2.g"], P["h0.ln2.b"])
        f = [_gelu(a + _D(b)) for a, b in zip(_vecmat(h2, P["h0.ff1.w"]), P["h0.ff1.b"])]
        x = [a + b + _D(c) for a, b, c in zip(x, _vecmat(f, P["h0.ff2.w"]), P["h0.ff2.b"])]
        hf = _ln(x, P["ln_f.g"], P["ln_f.b"])
        out.append([float(a + _D(b)) for a, b in zip(_vecmat(hf, P["out.w"]), P["out.b"])])
    return np.array(out)


class TestSampling:
    def test_greedy_tie_break(self):
        assert sample_next(np.array([0.0, 5.0, 5.0]), DecodeConfig(strategy="greedy")) == 1

    def test_top1_is_greedy(self, rng):
        for _ in range(20):
            row = rng.normal(size=9)
            assert sample_next(row, DecodeConfig(k=1), rng) == int(np.argmax(row))

    def test_nan(self):
        with pytest.raises(NumericError):
            sample_next(np.array([np.nan, 1.0]), DecodeConfig(), np.random.default_rng(0))

    def test_top2_frequencies(self):
        rng = np.random.default_rng(0)
        dec = DecodeConfig(k=2, temperature=0.7)
        n = 100_000
        draws = np.array([sample_next(np.array([2.0, 1.0, 0.0]), dec, rng) for _ in range(n)])
        p = np.exp(np.array([2.0, 1.0]) / 0.7)
        p /= p.sum()
        assert not (draws == 2).any()
        sigma = np.sqrt(p[0] * (1 - p[0]) / n)
        assert abs((draws == 0).mean() - p[0]) < 3 * sigma

    def test_reproducible(self):
        row = np.linspace(0, 1, 6)
        a = [sample_next(row, DecodeConfig(), np.random.default_rng(4)) for _ in range(3)]
        assert len(set(a)) == 1

    @given(st.lists(st.floats(-20, 20), min_size=2, max_size=12), st.integers(0, 2 ** 31))
    @settings(max_examples=50, deadline=None)
    def test_topk_sample_in_topk(self, row, seed):
        row = np.array(row)
        dec = DecodeConfig(k=2)
        tok = sample_next(row, dec, np.random.default_rng(seed))
        top = np.argsort(-row, kind="stable")[:2]
        assert tok in top


class TestCheckpoint:
    def test_roundtrip_bytes(self, tiny_lm, tmp_path):
        save_model(tiny_lm, tmp_path / "a.ckpt")
        loaded = load_model(tmp_path / "a.ckpt")
        save_model(loaded, tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
        header, _ = checkpoint.load(tmp_path / "a.ckpt")
        assert header["format_version"] == checkpoint.FORMAT_VERSION
        assert header["lm_config"]["prefix_len"] == 3 and header["seed"] == 3

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x").write_bytes(b"nope")
        with pytest.raises(checkpoint.CheckpointError):
            checkpoint.load(tmp_path / "x")

    def test_wrong_kind(self, tmp_path):
        checkpoint.save(tmp_path / "d", {"kind": "discriminator"}, {"w": np.zeros(2)})
        with pytest.raises(checkpoint.CheckpointError):
            load_model(tmp_path / "d")


def test_next_token_probs(tiny_lm):
    p = next_token_probs(tiny_lm, [1, 2, 3])
    assert p.shape == (3, 11)
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-12)


def test_clone_independent(tiny_lm):
    c = tiny_lm.clone()
    c.params["out.b"].data = c.params["out.b"].data + 1.0
    assert not np.array_equal(c.params["out.b"].data, tiny_lm.params["out.b"].data)


def test_prefix_gradient_flows(tiny_lm, rng):
    p = Tensor(rng.normal(size=(2, 2, 3, 8)), requires_grad=True)
    logits, _ = tiny_lm.forward([[1, 2]], p)
    logits.sum().backward()
    assert p.grad is not None and np.abs(p.grad).max() > 0
