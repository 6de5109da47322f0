"""Reinforcement fine-tuning of a low-rank adapter under dynamic prefix steering.

The policy is the base model plus a low-rank adapter on the attention
projections and a bank of trainable initial prefixes, one per attribute
target. Rollouts decode ``k`` tokens with steering active; the segment reward
is the attribute reward plus a KL fluency penalty against the frozen base
model, and it is assigned to every token of the segment. Updates use a
clipped importance-ratio surrogate (or plain REINFORCE).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import checkpoint
from . import tensor as T
from .attribute import AttributeTarget, BagOfWordsAttribute, Discriminator
from .errors import CapacityError, ConfigError, DomainError, NumericError, ShapeError
from .lm import DecodeConfig, LanguageModel, PrefixState, model_from_blobs, model_header
from .steer import SteerConfig, frozen, row_rngs, steer_step
from .tensor import Tensor

log = logging.getLogger(__name__)

ADAPTED = ("wq", "wk", "wv", "wo")


@dataclass(frozen=True)
class RLDAFConfig:
    k: int = 3
    beta: float = 0.1
    clip_eps: float = 0.2
    lr: float = 1e-3
    episodes: int = 100
    lora_rank: int = 4
    batch: int = 16
    seed: int = 0
    algorithm: str = "ppo"
    ppo_epochs: int = 1
    baseline_momentum: float = 0.9
    max_grad_norm: float = 1.0
    checkpoint_every: int = 0

    def validate(self) -> RLDAFConfig:
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        if not 0.0 < self.clip_eps < 1.0:
            raise ConfigError("clip_eps must lie in (0, 1)")
        if self.lora_rank < 1:
            raise ConfigError("lora_rank must be >= 1")
        if self.lr <= 0 or self.batch < 1 or self.episodes < 0 or self.ppo_epochs < 1:
            raise ConfigError("lr, batch, episodes and ppo_epochs must be positive")
        if self.algorithm not in ("ppo", "reinforce"):
            raise ConfigError(f"unknown algorithm {self.algorithm!r}")
        if not 0.0 <= self.baseline_momentum < 1.0:
            raise ConfigError("baseline_momentum must lie in [0, 1)")
        return self


class LoraAdapter:
    """Low-rank factors ``A (d x r)``, ``B (r x d)`` per adapted matrix.

    The projection ``h @ W`` becomes ``h @ W + scale * (h @ A) @ B``.
    """

    def __init__(self, factors: dict[str, tuple[Tensor, Tensor]], scale: float = 1.0):
        self.factors = factors
        self.scale = scale

    @classmethod
    def create(cls, d_model: int, n_layers: int, rank: int, seed: int = 0,
               names: Sequence[str] = ADAPTED, scale: float = 1.0) -> LoraAdapter:
        if not 1 <= rank <= d_model:
            raise ConfigError(f"lora rank {rank} must lie in [1, d_model={d_model}]")
        rng = np.random.default_rng(seed)
        factors = {}
        for i in range(n_layers):
            for name in names:
                a = Tensor(rng.normal(0.0, 1.0 / math.sqrt(d_model), (d_model, rank)),
                           requires_grad=True, name=f"lora.h{i}.{name}.A")
                b = Tensor(np.zeros((rank, d_model)), requires_grad=True,
                           name=f"lora.h{i}.{name}.B")
                factors[f"h{i}.{name}"] = (a, b)
        return cls(factors, scale)

    @property
    def rank(self) -> int:
        return next(iter(self.factors.values()))[0].shape[1]

    def parameters(self) -> list[Tensor]:
        return [t for pair in self.factors.values() for t in pair]

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def delta(self, h: Tensor, layer: int, name: str) -> Tensor | None:
        pair = self.factors.get(f"h{layer}.{name}")
        if pair is None:
            return None
        out = (h @ pair[0]) @ pair[1]
        return out * self.scale if self.scale != 1.0 else out

    def blobs(self) -> dict[str, np.ndarray]:
        out = {}
        for key, (a, b) in self.factors.items():
            out[f"lora.{key}.A"] = a.data
            out[f"lora.{key}.B"] = b.data
        return out


class AdaptedLM:
    """Policy (base weights frozen + adapter), the untouched reference model,
    and the trainable initial-prefix bank.

    During rollouts the reference attends over the same prefix the policy
    used at each step, so the fluency penalty measures what the adapter
    changed.
    """

    def __init__(self, policy: LanguageModel, reference: LanguageModel,
                 prefixes: dict[str, Tensor]):
        self.policy = policy
        self.reference = reference
        self.prefixes = prefixes
        self.baselines: dict[str, float] = {}
        self.optimizer: T.Adam | None = None

    @property
    def adapter(self) -> LoraAdapter:
        return self.policy.adapter

    @property
    def config(self):
        return self.policy.config

    def trainable(self) -> list[Tensor]:
        return self.adapter.parameters() + [self.prefixes[k] for k in sorted(self.prefixes)]

    def prefix_for(self, target: AttributeTarget) -> PrefixState | None:
        if self.config.prefix_len == 0:
            return None
        if target.key not in self.prefixes:
            raise DomainError(f"no prefix for target {target.key!r}")
        return PrefixState(self.prefixes[target.key].data.copy())

    def prefix_batch(self, targets: Sequence[AttributeTarget]) -> np.ndarray | None:
        if self.config.prefix_len == 0:
            return None
        return np.stack([self.prefix_for(t).values for t in targets])

    def save(self, path, **meta) -> None:
        blobs = {k: v.data for k, v in self.policy.params.items()}
        blobs.update(self.adapter.blobs())
        blobs.update({f"prefix.{k}": v.data for k, v in self.prefixes.items()})
        header = model_header(self.policy, kind="adapted-lm", lora_rank=self.adapter.rank,
                              lora_scale=self.adapter.scale,
                              adapted=sorted(self.adapter.factors),
                              prefix_keys=sorted(self.prefixes),
                              baselines=self.baselines, **meta)
        checkpoint.save(path, header, blobs)

    @classmethod
    def load(cls, path) -> AdaptedLM:
        header, blobs = checkpoint.load(path)
        if header.get("kind") != "adapted-lm":
            raise checkpoint.CheckpointError("not an adapted-lm checkpoint")
        base = model_from_blobs(header, blobs)
        policy = base.clone()
        policy.set_trainable(False)
        base.set_trainable(False)
        factors = {key: (Tensor(blobs[f"lora.{key}.A"], requires_grad=True),
                         Tensor(blobs[f"lora.{key}.B"], requires_grad=True))
                   for key in header["adapted"]}
        policy.adapter = LoraAdapter(factors, header.get("lora_scale", 1.0))
        prefixes = {k: Tensor(blobs[f"prefix.{k}"], requires_grad=True)
                    for k in header["prefix_keys"]}
        out = cls(policy, base, prefixes)
        out.baselines = dict(header.get("baselines", {}))
        return out


def lora_wrap(lm: LanguageModel, rank: int, targets: Sequence[AttributeTarget] = (),
              prefix_init: PrefixState | None = None, seed: int = 0,
              scale: float = 1.0) -> AdaptedLM:
    """Freeze a copy of ``lm`` and attach a zero-initialised adapter.

    ``lm`` itself becomes the frozen reference. Each target gets its own
    trainable copy of ``prefix_init``.
    """
    cfg = lm.config
    adapter = LoraAdapter.create(cfg.d_model, cfg.n_layers, rank, seed, scale=scale)
    policy = lm.clone()
    policy.set_trainable(False)
    policy.adapter = adapter
    lm.set_trainable(False)
    prefixes = {}
    init = None
    if cfg.prefix_len:
        init = np.array(prefix_init.values if prefix_init is not None else
                        np.zeros((cfg.n_layers, 2, cfg.prefix_len, cfg.d_model)),
                        dtype=np.float64)
        for t in targets:
            prefixes[t.key] = Tensor(init.copy(), requires_grad=True, name=f"prefix.{t.key}")
    return AdaptedLM(policy, lm, prefixes)


@dataclass
class Trajectory:
    context: np.ndarray
    tokens: np.ndarray
    policy_logp: np.ndarray
    ref_logp: np.ndarray
    policy_logits: np.ndarray
    ref_logits: np.ndarray
    prefixes: np.ndarray | None
    target: AttributeTarget
    R_d: float = 0.0
    R_f: float = 0.0
    R: float = 0.0

    @property
    def sequence(self) -> np.ndarray:
        return np.concatenate([self.context, self.tokens])

    @property
    def kl(self) -> np.ndarray:
        return _kl_rows(self.policy_logits, self.ref_logits)


def _log_softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _kl_rows(p_logits: np.ndarray, q_logits: np.ndarray) -> np.ndarray:
    lp, lq = _log_softmax_np(p_logits), _log_softmax_np(q_logits)
    return np.maximum((np.exp(lp) * (lp - lq)).sum(axis=-1), 0.0)


# -- rewards -----------------------------------------------------------------

def control_reward(disc, sequence, target: AttributeTarget, k: int = 3) -> float:
    """Attribute reward in [0, 1] for one sequence (the k new tokens included)."""
    return float(control_rewards(disc, np.asarray(sequence)[None, :], [target], k)[0])


def control_rewards(disc, seqs: np.ndarray, targets: Sequence[AttributeTarget],
                    k: int) -> np.ndarray:
    """Class targets: the discriminator's probability of the target class.
    Topic targets: mean bag mass of the frozen model's next-token
    distributions over the final ``k`` positions."""
    seqs = np.asarray(seqs, dtype=np.int64)
    topic = [t.is_topic for t in targets]
    if all(topic):
        if isinstance(disc, LanguageModel):
            disc = BagOfWordsAttribute(disc)
        if not isinstance(disc, BagOfWordsAttribute):
            raise DomainError("topic targets need a bag-of-words attribute model")
        return np.clip(disc.mean_bag_mass(seqs, targets, min(k, seqs.shape[1])), 0.0, 1.0)
    if any(topic):
        raise DomainError("a batch must not mix topic and class targets")
    if not isinstance(disc, Discriminator):
        raise DomainError("class targets need a discriminator")
    labels = np.array([t.label for t in targets])
    if labels.max() >= disc.n_classes:
        raise DomainError(f"label outside the discriminator's {disc.n_classes} classes")
    probs = disc.predict_proba(seqs)
    return probs[np.arange(len(labels)), labels]


def fluency_reward(policy_logits, ref_logits, beta: float, k: int | None = None) -> float:
    """``-(beta / k) * sum_j KL(policy_j || ref_j)``; never positive."""
    p = np.asarray(policy_logits, dtype=np.float64)
    q = np.asarray(ref_logits, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 2:
        raise ShapeError(f"logit shapes {p.shape} and {q.shape} must match as (k, vocab)")
    if beta < 0:
        raise DomainError("beta must be >= 0")
    k = p.shape[0] if k is None else k
    if k != p.shape[0]:
        raise ShapeError(f"k={k} but {p.shape[0]} logit rows")
    if beta == 0.0:
        return 0.0
    return -(beta / k) * float(_kl_rows(p, q).sum())


def total_reward(r_d: float, r_f: float) -> float:
    if not (math.isfinite(r_d) and math.isfinite(r_f)):
        raise NumericError("rewards must be finite")
    return r_d + r_f


# -- rollouts ----------------------------------------------------------------

def rollout_batch(model: AdaptedLM, disc, contexts, targets: Sequence[AttributeTarget],
                  steer: SteerConfig, k: int, rngs, beta: float = 0.1,
                  decode: DecodeConfig = DecodeConfig(),
                  reward_fn: Callable | None = None,
                  steer_disc: Discriminator | None = None) -> list[Trajectory]:
    """Decode ``k`` steered tokens per row and score the segments.

    ``disc`` scores the segment; ``steer_disc`` (default: ``disc`` when it is
    a Discriminator) drives steering for class targets. ``reward_fn(seqs,
    targets)`` replaces the control reward when given.
    """
    contexts = np.atleast_2d(np.asarray(contexts, dtype=np.int64))
    B, n = contexts.shape
    cfg = model.config
    if (cfg.prefix_len if steer.mode != "kv-steer" else 0) + n + k > cfg.context_len:
        raise CapacityError(f"context {n} + k={k} exceeds context_len={cfg.context_len}")
    if steer_disc is None and isinstance(disc, Discriminator):
        steer_disc = disc
    policy, ref = model.policy, model.reference
    kv = steer.mode == "kv-steer"
    prefix = None if kv else model.prefix_batch(targets)
    decode = DecodeConfig(decode.strategy, decode.k, decode.temperature, k, decode.seed)

    with T.no_grad(), frozen(policy):
        cache = rcache = None
        if n > 1:
            pre_t = None if prefix is None else Tensor(prefix)
            _, cache = policy.forward(contexts[:, :-1], pre_t)
            _, rcache = ref.forward(contexts[:, :-1], pre_t)
    last = contexts[:, -1]
    toks, plog, rlog, used = [], [], [], []
    for _ in range(k):
        res = steer_step(policy, steer_disc, last, cache, prefix, targets, steer, decode, rngs)
        cache = res.cache
        prefix = res.prefix
        with T.no_grad():
            rl, rcache = ref.forward(last[:, None], None if prefix is None else Tensor(prefix),
                                     rcache)
        toks.append(res.tokens)
        plog.append(res.logits)
        rlog.append(rl.data[:, -1])
        used.append(None if prefix is None else prefix.copy())
        last = res.tokens
    tokens = np.stack(toks, axis=1)
    p_logits = np.stack(plog, axis=1)
    r_logits = np.stack(rlog, axis=1)
    seqs = np.concatenate([contexts, tokens], axis=1)
    r_d = reward_fn(seqs, targets) if reward_fn is not None else \
        control_rewards(disc, seqs, targets, k)
    idx = np.arange(k)
    out = []
    for r in range(B):
        lp = _log_softmax_np(p_logits[r])[idx, tokens[r]]
        lq = _log_softmax_np(r_logits[r])[idx, tokens[r]]
        r_f = fluency_reward(p_logits[r], r_logits[r], beta, k)
        pre_r = None if used[0] is None else np.stack([u[r] for u in used])
        rd = float(r_d[r])
        out.append(Trajectory(contexts[r].copy(), tokens[r], lp, lq, p_logits[r], r_logits[r],
                              pre_r, targets[r], rd, r_f, total_reward(rd, r_f)))
    return out


def rollout(model: AdaptedLM, disc, context, target: AttributeTarget, steer: SteerConfig,
            k: int, rng: np.random.Generator, beta: float = 0.1,
            decode: DecodeConfig = DecodeConfig(), **kw) -> Trajectory:
    return rollout_batch(model, disc, np.asarray(context)[None, :], [target], steer, k,
                         [rng], beta, decode, **kw)[0]


# -- policy update -------------------------------------------------------------

def ppo_surrogate(ratio, advantage, clip_eps: float) -> Tensor:
    """Per-token clipped objective ``min(r * A, clip(r, 1-eps, 1+eps) * A)``."""
    ratio = T.as_tensor(ratio)
    adv = np.broadcast_to(np.asarray(advantage, dtype=np.float64), ratio.shape)
    return T.minimum(ratio * adv, T.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv)


def _group(trajs: Sequence[Trajectory]) -> list[list[int]]:
    groups: dict[tuple, list[int]] = {}
    for i, t in enumerate(trajs):
        groups.setdefault((len(t.context), t.prefixes is None), []).append(i)
    return list(groups.values())


def replay(model: AdaptedLM, trajs: Sequence[Trajectory]) -> tuple[Tensor, Tensor]:
    """Differentiable ``(B, k)`` log-probs of the sampled tokens and
    ``(B, k, vocab)`` logits under the current policy, replaying each
    trajectory with the prefixes it used.

    Gradients reach the initial prefix bank through the offset
    ``used - init``, which is held constant.
    """
    policy = model.policy
    B, k = len(trajs), len(trajs[0].tokens)
    ctx = np.stack([t.context for t in trajs])
    toks = np.stack([t.tokens for t in trajs])
    n = ctx.shape[1]
    init = None
    if trajs[0].prefixes is not None:
        init = T.stack([model.prefixes[t.target.key] for t in trajs])
    cache = None
    if n > 1:
        _, cache = policy.forward(ctx[:, :-1], init)
    inputs = np.concatenate([ctx[:, -1:], toks[:, :-1]], axis=1)
    out, steps = [], []
    for j in range(k):
        pre = None
        if init is not None:
            used = np.stack([t.prefixes[j] for t in trajs])
            pre = init + (used - init.data)
        logits, cache = policy.forward(inputs[:, j:j + 1], pre, cache)
        steps.append(logits[:, 0])
        out.append(T.pick(T.log_softmax(logits[:, 0], axis=-1), toks[:, j]))
    return T.stack(out, axis=1), T.stack(steps, axis=1)


def replay_logp(model: AdaptedLM, trajs: Sequence[Trajectory]) -> Tensor:
    return replay(model, trajs)[0]


@dataclass
class UpdateStats:
    mean_R: float
    mean_R_d: float
    mean_R_f: float
    mean_KL: float
    clip_fraction: float
    loss: float
    grad_norm: float


def advantages(model: AdaptedLM, trajs: Sequence[Trajectory], momentum: float) -> np.ndarray:
    """``R - baseline`` with a per-target running-mean baseline, which is
    then moved toward this batch's mean reward."""
    R = np.array([t.R for t in trajs])
    keys = [t.target.key for t in trajs]
    adv = np.empty_like(R)
    for key in sorted(set(keys)):
        rows = [i for i, k_ in enumerate(keys) if k_ == key]
        batch_mean = float(R[rows].mean())
        base = model.baselines.get(key, batch_mean)
        adv[rows] = R[rows] - base
        model.baselines[key] = momentum * base + (1.0 - momentum) * batch_mean
    return adv


def ppo_update(model: AdaptedLM, trajs: Sequence[Trajectory], cfg: RLDAFConfig,
               adv: np.ndarray | None = None) -> UpdateStats:
    """One optimiser step on the adapter and prefix bank.

    Raises :class:`NumericError` naming the first trajectory whose loss term
    is not finite; parameters are left untouched in that case.
    """
    if not trajs:
        raise DomainError("empty trajectory batch")
    cfg.validate()
    if model.optimizer is None:
        model.optimizer = T.Adam(model.trainable(), lr=cfg.lr)
    opt = model.optimizer
    if adv is None:
        adv = advantages(model, trajs, cfg.baseline_momentum)
    adv = np.asarray(adv, dtype=np.float64)
    old = np.stack([t.policy_logp for t in trajs])
    idx_of = {id(t): i for i, t in enumerate(trajs)}
    clipped = 0.0
    loss_val = 0.0
    gnorm = 0.0
    for _ in range(cfg.ppo_epochs):
        opt.zero_grad()
        total = None
        n_tok = old.size
        for group in _group(trajs):
            sub = [trajs[i] for i in group]
            new, logits = replay(model, sub)
            a = adv[group][:, None]
            if cfg.algorithm == "reinforce":
                obj = new * np.broadcast_to(a, new.shape)
            else:
                ratio = T.exp(new - old[group])
                obj = ppo_surrogate(ratio, a, cfg.clip_eps)
                r = ratio.data
                clipped += float(((r < 1 - cfg.clip_eps) | (r > 1 + cfg.clip_eps)).sum())
            bad = ~np.isfinite(obj.data).all(axis=1)
            if bad.any():
                i = idx_of[id(sub[int(np.argmax(bad))])]
                raise NumericError(f"non-finite loss in trajectory {i}")
            part = -obj.sum()
            if cfg.beta > 0:
                # R_f depends on the policy directly, not only through the
                # sampled tokens; this is its pathwise gradient.
                ref = np.stack([t.ref_logits for t in sub])
                part = part + cfg.beta * T.kl_divergence(logits, ref).sum()
            total = part if total is None else total + part
        loss = total * (1.0 / n_tok)
        loss.backward()
        for p in opt.params:
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise NumericError("non-finite gradient in policy update")
        gnorm = T.clip_grad_norm(opt.params, cfg.max_grad_norm)
        opt.step()
        loss_val = loss.item()
    kl = np.concatenate([t.kl for t in trajs])
    return UpdateStats(
        mean_R=float(np.mean([t.R for t in trajs])),
        mean_R_d=float(np.mean([t.R_d for t in trajs])),
        mean_R_f=float(np.mean([t.R_f for t in trajs])),
        mean_KL=float(kl.mean()),
        clip_fraction=clipped / (old.size * cfg.ppo_epochs),
        loss=loss_val, grad_norm=gnorm)


# -- training loop ---------------------------------------------------------------

@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.records])

    def write_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")


def train(model: AdaptedLM, disc, prompts: np.ndarray,
          target_sampler: Callable[[np.random.Generator, int], list[AttributeTarget]],
          cfg: RLDAFConfig, steer: SteerConfig = SteerConfig(),
          decode: DecodeConfig = DecodeConfig(), log_path=None, checkpoint_dir=None,
          reward_fn: Callable | None = None,
          steer_disc: Discriminator | None = None) -> tuple[AdaptedLM, TrainLog]:
    """Episodes of sample prompts and targets, roll out, score, update.

    One episode is one batch of ``cfg.batch`` rollouts followed by one
    update. Errors are re-raised with the episode index.
    """
    cfg.validate()
    prompts = np.atleast_2d(np.asarray(prompts, dtype=np.int64))
    rng = np.random.default_rng([cfg.seed, 0])
    tlog = TrainLog()
    for ep in range(cfg.episodes):
        try:
            rows = rng.integers(0, len(prompts), size=cfg.batch)
            targets = target_sampler(rng, cfg.batch)
            rngs = row_rngs(int(rng.integers(2 ** 31)), range(cfg.batch))
            trajs = rollout_batch(model, disc, prompts[rows], targets, steer, cfg.k, rngs,
                                  cfg.beta, decode, reward_fn=reward_fn, steer_disc=steer_disc)
            stats = ppo_update(model, trajs, cfg)
        except (NumericError, DomainError, ShapeError, CapacityError) as exc:
            raise type(exc)(f"episode {ep}: {exc}") from exc
        rec = {"episode": ep, "mean_R": stats.mean_R, "mean_R_d": stats.mean_R_d,
               "mean_R_f": stats.mean_R_f, "mean_KL": stats.mean_KL,
               "clip_fraction": stats.clip_fraction, "seed": cfg.seed}
        tlog.records.append(rec)
        log.debug("episode %d R_d %.3f KL %.4f", ep, stats.mean_R_d, stats.mean_KL)
        if checkpoint_dir is not None and cfg.checkpoint_every and \
                (ep + 1) % cfg.checkpoint_every == 0:
            Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
            model.save(Path(checkpoint_dir) / f"rldaf_ep{ep + 1:05d}.ckpt", episode=ep + 1)
    if log_path is not None:
        tlog.write_jsonl(log_path)
    return model, tlog
