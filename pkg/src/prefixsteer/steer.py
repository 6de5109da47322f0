"""Decode-time steering by gradient updates to prefix activations.

Before each token is emitted the prefix is updated ``m`` times by descending
the attribute loss, then the token is sampled from a forward pass with the
final prefix. Content positions already decoded live in a
:class:`~prefixsteer.lm.HiddenCache` that steering never writes to; only the
newest token is recomputed under each candidate prefix. The ``kv-steer`` mode
instead perturbs every cached key/value activation and writes the result
back into the cache.

Everything runs on a batch of independent streams: the loss is a sum of
per-row losses, so each row's gradient only depends on its own row.
"""

from __future__ import annotations

import contextlib
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .attribute import AttributeTarget, Discriminator, bag_masks, bow_loss
from .errors import CapacityError, ConfigError, DomainError, NumericError, ShapeError
from .lm import DecodeConfig, HiddenCache, LanguageModel, PrefixState, sample_next
from .tensor import Tensor

MODES = ("prefix-steer", "kv-steer", "no-steer")


@dataclass(frozen=True)
class SteerConfig:
    m: int = 5
    alpha: float = 0.3
    mode: str = "prefix-steer"
    persist_prefix: bool = True
    clip_norm: float = 1.0

    def validate(self) -> SteerConfig:
        if self.mode not in MODES:
            raise ConfigError(f"unknown steering mode {self.mode!r}")
        if self.m < 0:
            raise ConfigError("m must be >= 0")
        if self.m > 0 and self.alpha <= 0:
            raise ConfigError("alpha must be > 0 when m > 0")
        if self.clip_norm <= 0:
            raise ConfigError("clip_norm must be > 0")
        return self

    @property
    def iterations(self) -> int:
        return 0 if self.mode == "no-steer" else self.m


@dataclass
class SteerRecord:
    token: int
    iteration: int
    row: int
    loss_before: float
    loss_after: float
    delta_norm: float
    grad_norm: float
    skipped: bool = False


@dataclass
class SteerTrace:
    records: list[SteerRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def for_row(self, row: int) -> list[SteerRecord]:
        return [r for r in self.records if r.row == row]

    def to_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records:
                fh.write(json.dumps(asdict(rec), sort_keys=True) + "\n")

    @staticmethod
    def read_jsonl(path) -> SteerTrace:
        with open(path, encoding="utf-8") as fh:
            return SteerTrace([SteerRecord(**json.loads(line)) for line in fh])


def update_prefix(prefix: PrefixState, grad, alpha: float) -> PrefixState:
    """One descent step on the attribute loss: ``prefix - alpha * grad``.

    Only prefix values change; the step length is ``alpha * ||grad||``.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != prefix.values.shape:
        raise ShapeError(f"gradient shape {grad.shape} != prefix shape {prefix.values.shape}")
    if not np.isfinite(grad).all():
        raise NumericError("non-finite prefix gradient")
    if alpha == 0.0 or not grad.any():
        return prefix.copy()
    return PrefixState(prefix.values - alpha * grad, prefix.trainable)


@contextlib.contextmanager
def frozen(lm: LanguageModel):
    """Temporarily stop gradient flow into every model and adapter parameter."""
    params = lm.parameters() + (lm.adapter.parameters() if lm.adapter is not None else [])
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, f in zip(params, flags):
            p.requires_grad = f


def attribute_loss(logits_last: Tensor, cache: HiddenCache,
                   targets: Sequence[AttributeTarget], disc: Discriminator | None) -> Tensor:
    """Per-row steering loss.

    Topic targets: ``-log`` of the next-token mass on the bag. Class targets:
    cross-entropy of the discriminator on the pooled content states.
    """
    if all(t.is_topic for t in targets):
        return bow_loss(logits_last, bag_masks(targets, logits_last.shape[-1]))
    if any(t.is_topic for t in targets):
        raise DomainError("a batch must not mix topic and class targets")
    if disc is None:
        raise DomainError("class targets need a discriminator")
    labels = np.array([t.label for t in targets], dtype=np.int64)
    return T.cross_entropy(disc.logits(cache), labels, reduction="none")


def _row_norms(grads: Sequence[np.ndarray]) -> np.ndarray:
    sq = sum((g.reshape(g.shape[0], -1) ** 2).sum(axis=1) for g in grads)
    return np.sqrt(sq)


def _clip_scale(norms: np.ndarray, clip: float) -> np.ndarray:
    return np.where(norms > clip, clip / np.maximum(norms, 1e-300), 1.0)


@dataclass
class StepResult:
    tokens: np.ndarray
    prefix: np.ndarray | None
    cache: HiddenCache
    probs: np.ndarray
    losses_before: np.ndarray
    losses_after: np.ndarray
    logits: np.ndarray | None = None


def _sample_rows(logits: np.ndarray, decode: DecodeConfig, rngs) -> np.ndarray:
    return np.array([sample_next(logits[r], decode, rngs[r]) for r in range(len(logits))],
                    dtype=np.int64)


def steer_step(lm: LanguageModel, disc: Discriminator | None, last: np.ndarray,
               cache: HiddenCache | None, prefix: np.ndarray | None,
               targets: Sequence[AttributeTarget], cfg: SteerConfig, decode: DecodeConfig,
               rngs, trace: SteerTrace | None = None, token_index: int = 0,
               active: np.ndarray | None = None,
               on_update: Callable | None = None) -> StepResult:
    """Steer and emit one token for every row of a batch.

    ``last`` holds the newest token of each row; ``cache`` covers the
    positions before it and is not modified. ``prefix`` is a
    ``(B, n_layers, 2, l, d)`` array (``None`` for no prefix). Exactly
    ``m + 1`` forward passes are made.
    """
    cfg.validate()
    last = np.asarray(last, dtype=np.int64).reshape(-1, 1)
    B = last.shape[0]
    active = np.ones(B, dtype=bool) if active is None else active
    iters = cfg.iterations
    before = np.zeros((iters, B))
    deltas = np.zeros((iters, B))
    gnorms = np.zeros((iters, B))
    skipped = np.zeros((iters, B), dtype=bool)
    kv = cfg.mode == "kv-steer"
    if kv:
        prefix = None

    with frozen(lm):
        for it in range(iters):
            try:
                if kv:
                    steer_keys = [Tensor(k.data, requires_grad=True) for k in cache.keys] \
                        if cache is not None else []
                    steer_vals = [Tensor(v.data, requires_grad=True) for v in cache.values] \
                        if cache is not None else []
                    cur = HiddenCache(steer_keys, steer_vals, cache.final, cache.prefix_len) \
                        if cache is not None else None
                    logits, full = lm.forward(last, None, cur)
                else:
                    p_t = Tensor(prefix, requires_grad=True) if prefix is not None else None
                    logits, full = lm.forward(last, p_t, cache)
                losses = attribute_loss(logits[:, -1], full, targets, disc)
            except NumericError as exc:
                raise NumericError(f"steering iteration {it}: {exc}") from exc
            before[it] = losses.data
            if not np.isfinite(losses.data).all():
                raise NumericError(f"steering iteration {it}: non-finite attribute loss")
            params = (steer_keys + steer_vals) if kv else ([p_t] if p_t is not None else [])
            if not params or not losses.requires_grad:
                continue
            losses.sum().backward()
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
            norms = _row_norms(grads)
            bad = ~np.isfinite(norms)
            scale = _clip_scale(np.where(bad, 0.0, norms), cfg.clip_norm)
            gnorms[it] = norms
            skipped[it] = bad
            for r in range(B):
                if bad[r]:
                    continue
                if not kv:
                    new = update_prefix(PrefixState(prefix[r]), grads[0][r] * scale[r], cfg.alpha)
                    deltas[it, r] = np.linalg.norm(new.values - prefix[r])
                    prefix[r] = new.values
            if kv:
                step = np.where(bad, 0.0, cfg.alpha * scale)
                for src, g in zip(cache.keys + cache.values, grads):
                    src.data = src.data - step[:, None, None] * np.where(
                        bad[:, None, None], 0.0, g)
                deltas[it] = np.where(bad, 0.0, cfg.alpha * np.minimum(norms, cfg.clip_norm))
            if on_update is not None:
                on_update(it, cache, prefix)

        with T.no_grad():
            logits, new_cache = lm.forward(last, prefix if prefix is None else Tensor(prefix),
                                           cache)
            final_loss = attribute_loss(logits[:, -1], new_cache, targets, disc).data \
                if targets is not None and iters else np.zeros(B)
    row_logits = logits.data[:, -1]
    tokens = _sample_rows(row_logits, decode, rngs)
    z = row_logits - row_logits.max(axis=1, keepdims=True)
    probs = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)

    after = np.vstack([before[1:], final_loss[None]]) if iters else before
    if trace is not None:
        for it in range(iters):
            for r in np.flatnonzero(active):
                trace.records.append(SteerRecord(
                    token_index, it, int(r), float(before[it, r]), float(after[it, r]),
                    float(deltas[it, r]), float(gnorms[it, r]), bool(skipped[it, r])))
    return StepResult(tokens, prefix, new_cache, probs,
                      before[0] if iters else final_loss, final_loss, row_logits)


def _as_batch_prefix(prefix, B: int) -> np.ndarray | None:
    if prefix is None:
        return None
    vals = prefix.values if isinstance(prefix, PrefixState) else np.asarray(prefix)
    if vals.ndim == 4:
        vals = np.broadcast_to(vals, (B,) + vals.shape)
    return np.array(vals, dtype=np.float64)


def _encode_context(lm: LanguageModel, context: np.ndarray, prefix: np.ndarray | None):
    """Cache for all but the last context token."""
    if context.shape[1] < 2:
        return None
    with T.no_grad(), frozen(lm):
        _, cache = lm.forward(context[:, :-1], None if prefix is None else Tensor(prefix))
    return cache


def steer_token(lm: LanguageModel, disc: Discriminator | None, context, prefix,
                target: AttributeTarget, cfg: SteerConfig, decode: DecodeConfig,
                rng: np.random.Generator):
    """Steer the prefix for one sequence and emit one token.

    Returns ``(token, PrefixState, records)``.
    """
    context = np.asarray(context, dtype=np.int64).reshape(1, -1)
    if context.shape[1] == 0:
        raise DomainError("context must be nonempty")
    pre = _as_batch_prefix(prefix, 1)
    cache = _encode_context(lm, context, pre)
    trace = SteerTrace()
    res = steer_step(lm, disc, context[:, -1], cache, pre, [target], cfg, decode, [rng], trace)
    out = PrefixState(res.prefix[0]) if res.prefix is not None else None
    return int(res.tokens[0]), out, trace.records


def kv_steer_token(lm: LanguageModel, disc: Discriminator | None, context,
                   target: AttributeTarget, cfg: SteerConfig, decode: DecodeConfig,
                   rng: np.random.Generator, cache: HiddenCache | None = None):
    """PPC-KV step: steer every cached key/value activation, content included.

    Unlike prefix steering this deliberately rewrites the cached content
    states. Returns ``(token, cache, records)`` where the cache includes the
    perturbed past plus the newest token.
    """
    if cfg.mode != "kv-steer":
        raise ConfigError("kv_steer_token requires mode='kv-steer'")
    context = np.asarray(context, dtype=np.int64).reshape(1, -1)
    if cache is None:
        cache = _encode_context(lm, context, None)
    trace = SteerTrace()
    res = steer_step(lm, disc, context[:, -1], cache, None, [target], cfg, decode, [rng], trace)
    return int(res.tokens[0]), res.cache, trace.records


@dataclass
class Generation:
    sequences: list[np.ndarray]
    trace: SteerTrace
    step_probs: list[np.ndarray]
    prompt_len: int
    final_prefix: np.ndarray | None = None

    def generated(self, row: int, strip_end: bool = True, end_id: int = 1) -> np.ndarray:
        g = self.sequences[row][self.prompt_len:]
        if strip_end and len(g) and g[-1] == end_id:
            g = g[:-1]
        return g


def row_rngs(seed: int, rows: Sequence[int]) -> list[np.random.Generator]:
    return [np.random.default_rng([seed, int(r)]) for r in rows]


def generate_batch(lm: LanguageModel, disc: Discriminator | None, prompts,
                   targets: Sequence[AttributeTarget], prefix_init, cfg: SteerConfig,
                   decode: DecodeConfig, rngs=None, end_id: int | None = 1,
                   on_update: Callable | None = None) -> Generation:
    """Steered decoding for a batch of equal-length prompts.

    ``prefix_init`` is a PrefixState (shared), a ``(B, ...)`` array (one per
    row) or ``None`` to decode without any prefix. Rows stop at ``end_id``;
    stopped rows keep being computed but their output is discarded.
    """
    cfg.validate()
    decode.validate()
    prompts = np.atleast_2d(np.asarray(prompts, dtype=np.int64))
    B, n = prompts.shape
    if n == 0:
        raise DomainError("prompt must be nonempty")
    if len(targets) != B:
        raise DomainError("one target per prompt")
    plen = 0 if prefix_init is None or cfg.mode == "kv-steer" else lm.config.prefix_len
    if plen + n + decode.max_new_tokens > lm.config.context_len + 1:
        raise CapacityError(
            f"prompt of {n} + {decode.max_new_tokens} new tokens + {plen} prefix slots exceed "
            f"context_len={lm.config.context_len}")
    rngs = rngs if rngs is not None else row_rngs(decode.seed, range(B))
    init = None if cfg.mode == "kv-steer" else _as_batch_prefix(prefix_init, B)
    prefix = None if init is None else init.copy()
    cache = _encode_context(lm, prompts, prefix)
    seqs = [list(p) for p in prompts]
    done = np.zeros(B, dtype=bool)
    trace = SteerTrace()
    probs = []
    last = prompts[:, -1]
    for t in range(decode.max_new_tokens):
        if done.all():
            break
        res = steer_step(lm, disc, last, cache, prefix, targets, cfg, decode, rngs, trace,
                         token_index=t, active=~done, on_update=on_update)
        cache = res.cache
        if res.prefix is not None:
            prefix = res.prefix if cfg.persist_prefix else init.copy()
        probs.append(res.probs)
        for r in np.flatnonzero(~done):
            seqs[r].append(int(res.tokens[r]))
            if end_id is not None and res.tokens[r] == end_id:
                done[r] = True
        last = res.tokens
    step_probs = [np.array([probs[t][r] for t in range(len(seqs[r]) - n)]).reshape(-1, lm.config.vocab_size)
                  for r in range(B)]
    return Generation([np.array(s, dtype=np.int64) for s in seqs], trace, step_probs, n, prefix)


def generate(lm: LanguageModel, disc: Discriminator | None, prompt,
             target: AttributeTarget, prefix_init, cfg: SteerConfig, decode: DecodeConfig,
             end_id: int | None = 1):
    """Single-prompt steered decoding. Returns ``(tokens, SteerTrace)``."""
    prompt = np.asarray(prompt, dtype=np.int64).reshape(1, -1)
    gen = generate_batch(lm, disc, prompt, [target], prefix_init, cfg, decode, end_id=end_id)
    return gen.sequences[0], gen.trace
