"""Tiny decoder-only transformer with per-layer key/value prefix slots.

The prefix is not a sequence of input embeddings: each layer receives ``l``
extra key and value vectors that content queries attend to. Prefix slots have
no token identity and no positional embedding, and nothing is predicted at
them. Content keys/values are cached in :class:`HiddenCache` so decoding can
proceed one token at a time.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import checkpoint
from . import tensor as T
from .errors import CapacityError, ConfigError, NumericError
from .tensor import Tensor


@dataclass(frozen=True)
class LMConfig:
    vocab_size: int = 256
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    context_len: int = 64
    prefix_len: int = 10

    def validate(self) -> LMConfig:
        if min(self.vocab_size, self.d_model, self.n_layers, self.n_heads, self.context_len) < 1:
            raise ConfigError(f"all sizes must be positive: {self}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.prefix_len < 0:
            raise ConfigError("prefix_len must be >= 0")
        if self.context_len < self.prefix_len + 2:
            raise ConfigError("context_len must be at least prefix_len + 2")
        return self


@dataclass(frozen=True)
class DecodeConfig:
    strategy: str = "top-k"
    k: int = 10
    temperature: float = 1.0
    max_new_tokens: int = 12
    seed: int = 0

    def validate(self) -> DecodeConfig:
        if self.strategy not in ("greedy", "top-k"):
            raise ConfigError(f"unknown decoding strategy {self.strategy!r}")
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.max_new_tokens < 0:
            raise ConfigError("max_new_tokens must be >= 0")
        return self


@dataclass
class PrefixState:
    """Per-layer key/value prefix activations.

    ``values`` has shape ``(n_layers, 2, l, d_model)``; index 0 on the second
    axis holds keys, index 1 values. A leading batch axis is allowed.
    """

    values: np.ndarray
    trainable: bool = True

    @property
    def length(self) -> int:
        return self.values.shape[-2]

    def copy(self) -> PrefixState:
        return PrefixState(self.values.copy(), self.trainable)

    @classmethod
    def zeros(cls, config: LMConfig, length: int | None = None) -> PrefixState:
        n = config.prefix_len if length is None else length
        return cls(np.zeros((config.n_layers, 2, n, config.d_model)))


@dataclass
class HiddenCache:
    """Cached content activations: per-layer keys and values, plus the
    final-layer hidden states used by the discriminator.

    All tensors are ``(batch, positions, d_model)``. Prefix slots are not
    stored here; ``prefix_len`` records how many were attended over.
    """

    keys: list[Tensor]
    values: list[Tensor]
    final: Tensor
    prefix_len: int = 0

    @property
    def length(self) -> int:
        return self.final.shape[1]

    @property
    def positions(self) -> int:
        return self.prefix_len + self.length

    @property
    def batch(self) -> int:
        return self.final.shape[0]

    def detach(self) -> HiddenCache:
        return HiddenCache([Tensor(k.data) for k in self.keys],
                           [Tensor(v.data) for v in self.values],
                           Tensor(self.final.data), self.prefix_len)

    def snapshot(self) -> list[np.ndarray]:
        return [k.data.copy() for k in self.keys] + [v.data.copy() for v in self.values] \
            + [self.final.data.copy()]

    def rows(self, idx) -> HiddenCache:
        idx = np.asarray(idx)
        return HiddenCache([Tensor(k.data[idx]) for k in self.keys],
                           [Tensor(v.data[idx]) for v in self.values],
                           Tensor(self.final.data[idx]), self.prefix_len)


def _param_shapes(cfg: LMConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_model, 4 * cfg.d_model
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (cfg.vocab_size, d),
        "pos_emb": (cfg.context_len, d),
    }
    for i in range(cfg.n_layers):
        p = f"h{i}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "wq": (d, d), p + "wk": (d, d), p + "wv": (d, d), p + "wo": (d, d),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "ff1.w": (d, f), p + "ff1.b": (f,),
            p + "ff2.w": (f, d), p + "ff2.b": (d,),
        })
    shapes.update({"ln_f.g": (d,), "ln_f.b": (d,), "out.w": (d, cfg.vocab_size),
                   "out.b": (cfg.vocab_size,)})
    return shapes


class LanguageModel:
    """Parameters plus the forward pass. ``adapter`` (optional) adds low-rank
    updates to the attention projections."""

    def __init__(self, config: LMConfig, params: dict[str, Tensor], seed: int = 0):
        self.config = config.validate()
        expected = _param_shapes(config)
        if set(params) != set(expected):
            raise ConfigError("parameter names do not match config")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ConfigError(f"{name}: shape {params[name].shape} != {shape}")
        self.params = {name: params[name] for name in expected}
        self.seed = seed
        self.adapter = None
        self.forward_count = 0

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def set_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag
            p.grad = None

    def clone(self) -> LanguageModel:
        params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad)
                  for k, v in self.params.items()}
        out = LanguageModel(self.config, params, self.seed)
        out.adapter = copy.deepcopy(self.adapter)
        return out

    # -- forward ------------------------------------------------------------
    def _proj(self, h: Tensor, layer: int, name: str) -> Tensor:
        out = h @ self.params[f"h{layer}.{name}"]
        if self.adapter is not None:
            delta = self.adapter.delta(h, layer, name)
            if delta is not None:
                out = out + delta
        return out

    def _split_heads(self, x: Tensor, B: int, S: int) -> Tensor:
        H = self.config.n_heads
        return T.transpose(x.reshape(B, S, H, self.config.d_model // H), (0, 2, 1, 3))

    def forward(self, tokens, prefix=None, cache: HiddenCache | None = None):
        """Run ``tokens`` (shape ``(B, T)`` or ``(T,)``) through the model.

        ``prefix`` is a :class:`PrefixState`, or a Tensor of shape
        ``([B,] n_layers, 2, l, d_model)`` when gradients to the prefix are
        wanted. ``cache`` holds earlier content positions.

        Returns ``(logits, cache)`` where logits are ``(B, T, vocab)`` and the
        returned cache covers the old positions followed by the new ones.
        """
        cfg = self.config
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        B, n_new = tokens.shape
        if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
            raise IndexError(f"token id out of range [0, {cfg.vocab_size})")
        past = cache.length if cache is not None else 0
        if cache is not None and cache.batch != B:
            raise ConfigError(f"cache batch {cache.batch} != token batch {B}")

        pre = self._prepare_prefix(prefix, B)
        plen = 0 if pre is None else pre.shape[3]
        if plen + past + n_new > cfg.context_len:
            raise CapacityError(
                f"{plen} prefix + {past} cached + {n_new} new positions exceed "
                f"context_len={cfg.context_len}")
        self.forward_count += 1

        d, H = cfg.d_model, cfg.n_heads
        x = T.embedding(self.params["tok_emb"], tokens) + self.params["pos_emb"][past:past + n_new]
        S = plen + past + n_new
        mask = None
        if n_new > 1:
            q_pos = plen + past + np.arange(n_new)[:, None]
            mask = np.arange(S)[None, :] > q_pos
        scale = 1.0 / math.sqrt(d // H)
        new_keys, new_vals = [], []
        for i in range(cfg.n_layers):
            p = f"h{i}."
            h = T.layer_norm(x, self.params[p + "ln1.g"], self.params[p + "ln1.b"])
            q = self._proj(h, i, "wq")
            k = self._proj(h, i, "wk")
            v = self._proj(h, i, "wv")
            new_keys.append(k)
            new_vals.append(v)
            k_parts, v_parts = [k], [v]
            if cache is not None and past:
                k_parts.insert(0, cache.keys[i])
                v_parts.insert(0, cache.values[i])
            if pre is not None:
                k_parts.insert(0, pre[:, i, 0])
                v_parts.insert(0, pre[:, i, 1])
            keys = k_parts[0] if len(k_parts) == 1 else T.concat(k_parts, axis=1)
            vals = v_parts[0] if len(v_parts) == 1 else T.concat(v_parts, axis=1)

            qh = self._split_heads(q, B, n_new)
            kh = T.transpose(keys.reshape(B, S, H, d // H), (0, 2, 3, 1))
            vh = self._split_heads(vals, B, S)
            scores = (qh @ kh) * scale
            if mask is not None:
                scores = T.masked_fill(scores, mask, -np.inf)
            att = T.softmax(scores, axis=-1) @ vh
            att = T.transpose(att, (0, 2, 1, 3)).reshape(B, n_new, d)
            x = x + self._proj(att, i, "wo")

            h2 = T.layer_norm(x, self.params[p + "ln2.g"], self.params[p + "ln2.b"])
            ff = T.gelu(h2 @ self.params[p + "ff1.w"] + self.params[p + "ff1.b"])
            x = x + (ff @ self.params[p + "ff2.w"] + self.params[p + "ff2.b"])

        hf = T.layer_norm(x, self.params["ln_f.g"], self.params["ln_f.b"])
        logits = hf @ self.params["out.w"] + self.params["out.b"]

        if cache is not None and past:
            out_cache = HiddenCache(
                [T.concat([cache.keys[i], new_keys[i]], axis=1) for i in range(cfg.n_layers)],
                [T.concat([cache.values[i], new_vals[i]], axis=1) for i in range(cfg.n_layers)],
                T.concat([cache.final, hf], axis=1), plen)
        else:
            out_cache = HiddenCache(new_keys, new_vals, hf, plen)
        return logits, out_cache

    def _prepare_prefix(self, prefix, B: int) -> Tensor | None:
        if prefix is None:
            return None
        if isinstance(prefix, PrefixState):
            prefix = Tensor(prefix.values)
        cfg = self.config
        if prefix.ndim == 4:
            prefix = T.broadcast_to(prefix, (B,) + prefix.shape)
        if prefix.ndim != 5 or prefix.shape[0] != B or prefix.shape[1:3] != (cfg.n_layers, 2) \
                or prefix.shape[4] != cfg.d_model:
            raise ConfigError(
                f"prefix shape {prefix.shape} incompatible with "
                f"(batch={B}, n_layers={cfg.n_layers}, 2, l, d_model={cfg.d_model})")
        if prefix.shape[3] != cfg.prefix_len:
            raise ConfigError(f"prefix length {prefix.shape[3]} != prefix_len {cfg.prefix_len}")
        return prefix

    def __call__(self, tokens, prefix=None, cache=None):
        return self.forward(tokens, prefix, cache)


class PrefixedModel:
    """A model view that always attends over a fixed prefix."""

    def __init__(self, model: LanguageModel, prefix):
        values = prefix.values if isinstance(prefix, PrefixState) else prefix.data
        model._prepare_prefix(prefix, values.shape[0] if values.ndim == 5 else 1)
        self.model = model
        self.config = model.config
        self.prefix = prefix

    def forward(self, tokens, cache: HiddenCache | None = None):
        return self.model.forward(tokens, self.prefix, cache)

    __call__ = forward


def attach_prefix(model: LanguageModel, prefix) -> PrefixedModel:
    return PrefixedModel(model, prefix)


def init_model(config: LMConfig, seed: int = 0) -> LanguageModel:
    """Scaled-normal initialisation, reproducible from ``seed``."""
    config.validate()
    rng = np.random.default_rng(seed)
    resid_std = 0.02 / math.sqrt(2 * config.n_layers)
    params = {}
    for name, shape in _param_shapes(config).items():
        if name.endswith(".g"):
            arr = np.ones(shape)
        elif name.endswith(".b"):
            arr = np.zeros(shape)
        elif name.endswith("wo") or name.endswith("ff2.w"):
            arr = rng.normal(0.0, resid_std, shape)
        else:
            arr = rng.normal(0.0, 0.02, shape)
        params[name] = Tensor(arr, requires_grad=True, name=name)
    return LanguageModel(config, params, seed)


def init_prefix(model: LanguageModel, rng: np.random.Generator, scale: float = 0.5,
                tokens=None) -> PrefixState:
    """Prefix whose slots look like the model's own key/value activations.

    Slots are the keys/values of ``tokens`` (random ids when omitted),
    perturbed by ``scale``-sized noise relative to their typical magnitude.
    """
    cfg = model.config
    if tokens is None:
        ids = rng.integers(0, cfg.vocab_size, size=cfg.prefix_len)
    else:
        ids = np.asarray(tokens, dtype=np.int64)
        if ids.shape != (cfg.prefix_len,):
            raise ConfigError(f"need {cfg.prefix_len} prefix tokens, got {ids.shape}")
    vals = np.zeros((cfg.n_layers, 2, cfg.prefix_len, cfg.d_model))
    if cfg.prefix_len:
        with T.no_grad():
            _, cache = model.forward(ids[None, :])
        for i in range(cfg.n_layers):
            for j, src in enumerate((cache.keys[i], cache.values[i])):
                base = src.data[0]
                noise = rng.normal(0.0, 1.0, base.shape) * base.std()
                vals[i, j] = base + scale * noise
    return PrefixState(vals)


def fit_null_prefix(model: LanguageModel, prefix: PrefixState, sentences, steps: int = 200,
                    lr: float = 0.01, batch: int = 32,
                    rng: np.random.Generator | None = None) -> PrefixState:
    """Adjust ``prefix`` so the frozen model behaves as if there were none.

    Minimises the mean KL from the prefix-free next-token distribution to
    the prefixed one over random corpus sentences.
    """
    rng = rng or np.random.default_rng(0)
    p = Tensor(prefix.values.copy(), requires_grad=True)
    opt = T.Adam([p], lr=lr)
    flags = [q.requires_grad for q in model.parameters()]
    model.set_trainable(False)
    try:
        for _ in range(steps):
            rows = [sentences[int(i)] for i in rng.integers(0, len(sentences), size=batch)]
            n = min(len(r) for r in rows) - 1
            ids = np.array([r[:n] for r in rows], dtype=np.int64)
            with T.no_grad():
                ref, _ = model.forward(ids)
            out, _ = model.forward(ids, p)
            loss = T.kl_divergence(ref.data, out).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
    finally:
        for q, f in zip(model.parameters(), flags):
            q.requires_grad = f
    return PrefixState(p.data.copy(), prefix.trainable)


def sample_next(logits_row, decode: DecodeConfig, rng: np.random.Generator | None = None) -> int:
    """Pick the next token from one row of logits.

    Greedy takes the argmax, ties resolved toward the lowest id. Top-k keeps
    the ``k`` largest logits (lowest ids first on ties), rescales by the
    temperature and samples by inverse CDF with a single uniform draw.
    """
    row = np.asarray(logits_row.data if isinstance(logits_row, Tensor) else logits_row,
                     dtype=np.float64)
    if np.isnan(row).any():
        raise NumericError("sample_next: NaN logits")
    if decode.strategy == "greedy":
        return int(np.argmax(row))
    k = min(decode.k, row.shape[0])
    top = np.argsort(-row, kind="stable")[:k]
    z = row[top] / decode.temperature
    p = np.exp(z - z.max())
    cdf = np.cumsum(p / p.sum())
    u = rng.random()
    return int(top[min(np.searchsorted(cdf, u, side="right"), k - 1)])


def next_token_probs(model: LanguageModel, tokens, prefix=None) -> np.ndarray:
    """Softmax of the model's logits at every position of a single sequence."""
    with T.no_grad():
        logits, _ = model.forward(np.asarray(tokens)[None, :], prefix)
    return T.softmax(logits, axis=-1).data[0]


# -- persistence --------------------------------------------------------------

def model_header(model: LanguageModel, kind: str = "lm", **meta) -> dict:
    return {"kind": kind, "lm_config": asdict(model.config), "seed": model.seed, **meta}


def save_model(model: LanguageModel, path, **meta) -> None:
    checkpoint.save(path, model_header(model, **meta),
                    {k: v.data for k, v in model.params.items()})


def model_from_blobs(header: dict, blobs: dict[str, np.ndarray]) -> LanguageModel:
    cfg = LMConfig(**header["lm_config"])
    params = {k: Tensor(blobs[k], requires_grad=True, name=k) for k in _param_shapes(cfg)}
    return LanguageModel(cfg, params, header.get("seed", 0))


def load_model(path) -> LanguageModel:
    header, blobs = checkpoint.load(path)
    if header.get("kind") not in ("lm", "adapted-lm"):
        raise checkpoint.CheckpointError(f"not a language model checkpoint: {header.get('kind')}")
    return model_from_blobs(header, blobs)
