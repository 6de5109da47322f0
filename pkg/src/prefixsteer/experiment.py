"""End-to-end pipeline: pretrain, fit discriminators, RLDAF, generate, evaluate
and the ablation suite. Every stage is a pure function of the config."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint
from . import tensor as T
from .attribute import AttributeTarget, BagOfWordsAttribute, Discriminator, train_discriminator
from .config import ExperimentConfig, apply_overrides, config_hash, stream, stream_seed
from .corpus import (SENTIMENT_CLASSES, Example, Vocab, build_vocab, generate_sentiment_corpus,
                     generate_topic_corpus, neutral_sequence, pad_batch, prompts_from, topic_bags)
from .errors import ConfigError
from .lm import (LanguageModel, PrefixState, fit_null_prefix, init_model, init_prefix,
                 load_model, save_model)
from .metrics import (MetricsReport, build_test_bag, dist_n_corpus, corpus_oracle_ppl,
                      sentiment_accuracy, topic_score_corpus)
from .rldaf import AdaptedLM, TrainLog, lora_wrap, train
from .steer import Generation, generate_batch, row_rngs

log = logging.getLogger(__name__)

VARIANTS: dict[str, dict] = {
    "prompt-ppc": {},
    "ppc-kv": {"steer.mode": "kv-steer"},
    "ppc-prefix": {"use_rldaf": False},
    "plm-rl": {"steer.m": 0},
    "ppc-fluency": {"rldaf.beta": 0.0},
    "plain-lm": {"steer.mode": "no-steer", "use_rldaf": False, "use_prefix": False},
}

# corpus offsets keep the splits disjoint
PRETRAIN_OFFSET = 0
DISC_OFFSET = 100_000
JUDGE_OFFSET = 200_000
PROMPT_OFFSET = 300_000


def variant_config(cfg: ExperimentConfig, name: str) -> ExperimentConfig:
    if name not in VARIANTS:
        raise ConfigError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}")
    return apply_overrides(cfg, VARIANTS[name])


# -- pretraining ----------------------------------------------------------------

@dataclass
class PretrainResult:
    lm: LanguageModel
    losses: list[float]
    heldout_loss: float
    unigram_entropy: float


def pretrain_corpus(cfg: ExperimentConfig, vocab: Vocab) -> list[Example]:
    n = cfg.pretrain.corpus_size
    return generate_topic_corpus(cfg.corpus, n, vocab, PRETRAIN_OFFSET) + \
        generate_sentiment_corpus(cfg.corpus, n, vocab, PRETRAIN_OFFSET)


def _context_prefix(lm: LanguageModel, ctx: np.ndarray) -> T.Tensor:
    """Differentiable prefix built from the model's own keys/values of ``ctx``."""
    _, cache = lm.forward(ctx)
    layers = [T.stack([cache.keys[i], cache.values[i]], axis=1)
              for i in range(lm.config.n_layers)]
    return T.stack(layers, axis=1)


def _lm_loss(lm: LanguageModel, seqs: Sequence[Sequence[int]], prefix=None) -> T.Tensor:
    length = max(len(s) for s in seqs)
    ids, mask = pad_batch(seqs, length)
    logits, _ = lm.forward(ids[:, :-1], prefix)
    return T.cross_entropy(logits, ids[:, 1:], weights=mask[:, 1:])


def unigram_entropy(seqs: Sequence[Sequence[int]], vocab_size: int) -> float:
    """Entropy (nats) of the next-token unigram distribution."""
    counts = np.bincount(np.concatenate([np.asarray(s[1:]) for s in seqs]),
                         minlength=vocab_size).astype(np.float64)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def _prefix_context(cfg: ExperimentConfig, vocab: Vocab, examples: list[Example], groups: dict,
                    idx: np.ndarray, length: int, rng: np.random.Generator) -> np.ndarray:
    """``length`` context tokens per row: a neutral word walk with probability
    ``neutral_prefix_prob``, otherwise other sentences sharing the row's label."""
    out = np.empty((len(idx), length), dtype=np.int64)
    for r, i in enumerate(idx):
        if rng.random() < cfg.pretrain.neutral_prefix_prob:
            out[r] = neutral_sequence(cfg.corpus, vocab, length, rng)
            continue
        pool = groups[_label_key(examples[i])]
        toks: list[int] = []
        while len(toks) < length:
            toks += examples[pool[int(rng.integers(len(pool)))]].tokens
        out[r] = toks[:length]
    return out


def _label_key(ex: Example) -> tuple:
    return (ex.topic is not None, ex.label)


def pretrain(cfg: ExperimentConfig) -> PretrainResult:
    """Next-token cross-entropy on the union of both synthetic corpora.

    On a ``prefix_prob`` share of steps the batch also attends over a prefix
    made of the model's own keys/values for some context (same-label
    sentences or a neutral walk), so prefix slots are in-distribution the way
    earlier document context is for a large pretrained model.
    """
    vocab = build_vocab(cfg.corpus)
    examples = pretrain_corpus(cfg, vocab)
    rng = stream(cfg.seed, "pretrain")
    order = rng.permutation(len(examples))
    held = [examples[i].tokens for i in order[:cfg.pretrain.heldout]]
    train_ex = [examples[i] for i in order[cfg.pretrain.heldout:]]
    groups: dict = {}
    for j, ex in enumerate(train_ex):
        groups.setdefault(_label_key(ex), []).append(j)
    lm = init_model(cfg.lm, stream_seed(cfg.seed, "init"))
    opt = T.Adam(lm.parameters(), lr=cfg.pretrain.lr)
    plen = cfg.lm.prefix_len
    losses = []
    window = []
    for step in range(cfg.pretrain.steps):
        idx = rng.integers(0, len(train_ex), size=cfg.pretrain.batch)
        opt.zero_grad()
        prefix = None
        if plen and rng.random() < cfg.pretrain.prefix_prob:
            ctx = _prefix_context(cfg, vocab, train_ex, groups, idx, plen, rng)
            prefix = _context_prefix(lm, ctx)
        loss = _lm_loss(lm, [train_ex[i].tokens for i in idx], prefix)
        loss.backward()
        T.clip_grad_norm(opt.params, 1.0)
        opt.step()
        window.append(loss.item())
        if (step + 1) % cfg.pretrain.log_every == 0:
            losses.append(float(np.mean(window)))
            window = []
    with T.no_grad():
        held_loss = _lm_loss(lm, held).item()
    return PretrainResult(lm, losses, held_loss,
                          unigram_entropy([ex.tokens for ex in train_ex], cfg.lm.vocab_size))


# -- discriminators ---------------------------------------------------------------

def task_corpus(cfg: ExperimentConfig, vocab: Vocab, size: int, offset: int) -> list[Example]:
    if cfg.eval.task == "topic":
        return generate_topic_corpus(cfg.corpus, size, vocab, offset)
    return generate_sentiment_corpus(cfg.corpus, size, vocab, offset)


def class_names(cfg: ExperimentConfig) -> list[str]:
    return list(cfg.corpus.topics) if cfg.eval.task == "topic" else list(SENTIMENT_CLASSES)


def train_discs(cfg: ExperimentConfig, lm: LanguageModel) -> tuple[Discriminator, Discriminator]:
    """Steering/reward discriminator and an independent judge (disjoint split,
    different seed)."""
    vocab = build_vocab(cfg.corpus)
    names = class_names(cfg)
    disc = train_discriminator(lm, task_corpus(cfg, vocab, cfg.disc.train_size, DISC_OFFSET),
                               cfg.disc.train_config(stream_seed(cfg.seed, "disc")), names)
    judge = train_discriminator(lm, task_corpus(cfg, vocab, cfg.disc.judge_size, JUDGE_OFFSET),
                                cfg.disc.train_config(stream_seed(cfg.seed, "judge")), names)
    return disc, judge


# -- targets and prompts ---------------------------------------------------------

def all_targets(cfg: ExperimentConfig) -> list[AttributeTarget]:
    if cfg.eval.task == "topic":
        return [AttributeTarget.topic(b) for b in topic_bags(cfg.corpus, build_vocab(cfg.corpus))]
    return [AttributeTarget.of_class(i) for i in range(len(SENTIMENT_CLASSES))]


def base_prefix(cfg: ExperimentConfig, lm: LanguageModel) -> PrefixState:
    """Starting prefix: keys/values of a neutral word sequence, then fitted so
    the frozen model with the prefix matches the model without one."""
    rng = stream(cfg.seed, "prefix")
    vocab = build_vocab(cfg.corpus)
    tokens = neutral_sequence(cfg.corpus, vocab, lm.config.prefix_len, rng)
    prefix = init_prefix(lm, rng, cfg.eval.prefix_init_scale, tokens)
    if cfg.eval.null_prefix_steps:
        sents = [ex.tokens for ex in pretrain_corpus(cfg, vocab)]
        prefix = fit_null_prefix(lm, prefix, sents, cfg.eval.null_prefix_steps, rng=rng)
    return prefix


def eval_prompts(cfg: ExperimentConfig) -> tuple[np.ndarray, list[AttributeTarget]]:
    vocab = build_vocab(cfg.corpus)
    ex = task_corpus(cfg, vocab, cfg.eval.n_prompts, PROMPT_OFFSET)
    targets = all_targets(cfg)
    return prompts_from(ex, cfg.eval.prompt_len), \
        [targets[i % len(targets)] for i in range(cfg.eval.n_prompts)]


def train_prompts(cfg: ExperimentConfig) -> np.ndarray:
    vocab = build_vocab(cfg.corpus)
    return prompts_from(task_corpus(cfg, vocab, cfg.disc.train_size, DISC_OFFSET),
                        cfg.eval.prompt_len)


# -- RLDAF ------------------------------------------------------------------------

def reward_model(cfg: ExperimentConfig, lm: LanguageModel, disc: Discriminator):
    return BagOfWordsAttribute(lm) if cfg.eval.task == "topic" else disc


def run_rldaf(cfg: ExperimentConfig, lm: LanguageModel, disc: Discriminator,
              prefix: PrefixState | None = None, log_path=None,
              checkpoint_dir=None) -> tuple[AdaptedLM, TrainLog]:
    targets = all_targets(cfg)
    prefix = prefix if prefix is not None else base_prefix(cfg, lm)
    model = lora_wrap(lm.clone(), cfg.rldaf.lora_rank, targets, prefix,
                      seed=stream_seed(cfg.seed, "lora"))
    rcfg = replace(cfg.rldaf, seed=stream_seed(cfg.seed, "rollout"))

    def sampler(rng, n):
        return [targets[int(i)] for i in rng.integers(0, len(targets), size=n)]

    return train(model, reward_model(cfg, model.reference, disc), train_prompts(cfg), sampler,
                 rcfg, cfg.rollout_steer, cfg.decode, log_path, checkpoint_dir,
                 steer_disc=disc if cfg.eval.task == "sentiment" else None)


def _key(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()


def pretrain_key(cfg: ExperimentConfig) -> str:
    d = cfg.to_dict()
    return _key({k: d[k] for k in ("seed", "lm", "corpus", "pretrain")})


def disc_key(cfg: ExperimentConfig) -> str:
    return _key({"pretrain": pretrain_key(cfg), "disc": cfg.to_dict()["disc"],
                 "task": cfg.eval.task})


def prefix_key(cfg: ExperimentConfig) -> str:
    return _key({"pretrain": pretrain_key(cfg), "scale": cfg.eval.prefix_init_scale,
                 "steps": cfg.eval.null_prefix_steps})


def rldaf_key(cfg: ExperimentConfig) -> str:
    """Hash of everything an RLDAF run depends on."""
    d = cfg.to_dict()
    return _key({"disc": disc_key(cfg), "prefix": prefix_key(cfg), "rldaf": d["rldaf"],
                 "rollout_steer": d["rollout_steer"], "decode": d["decode"],
                 "prompt_len": cfg.eval.prompt_len})


# -- generation and scoring --------------------------------------------------------

@dataclass
class Artifacts:
    """Shared, lazily built models for one base config.

    With ``out`` set, each stage is cached on disk under a key covering only
    the settings it depends on, so variants and reruns reuse it.
    """

    cfg: ExperimentConfig
    out: Path | None = None
    lm: LanguageModel | None = None
    disc: Discriminator | None = None
    judge: Discriminator | None = None
    pretrain_result: PretrainResult | None = None
    prefix: PrefixState | None = None
    adapted: dict[str, AdaptedLM] = field(default_factory=dict)
    logs: dict[str, TrainLog] = field(default_factory=dict)

    def _path(self, name: str) -> Path:
        out = Path(self.out)
        out.mkdir(parents=True, exist_ok=True)
        return out / name

    def _cached(self, name: str, key: str) -> Path | None:
        if self.out is None or not (Path(self.out) / name).exists():
            return None
        path = Path(self.out) / name
        header, _ = checkpoint.load(path)
        return path if header.get("stage_key") == key else None

    def _meta(self, key: str) -> dict:
        return {"stage_key": key, "config_hash": config_hash(self.cfg)}

    def ensure_lm(self) -> LanguageModel:
        if self.lm is None:
            key = pretrain_key(self.cfg)
            path = self._cached("lm.ckpt", key)
            if path is not None:
                self.lm = load_model(path)
            else:
                self.pretrain_result = pretrain(self.cfg)
                self.lm = self.pretrain_result.lm
                if self.out is not None:
                    save_model(self.lm, self._path("lm.ckpt"), **self._meta(key))
                    _write_records(self._path("pretrain_log.jsonl"),
                                   [{"step": (i + 1) * self.cfg.pretrain.log_every, "loss": v}
                                    for i, v in enumerate(self.pretrain_result.losses)])
            self.lm.set_trainable(False)
        return self.lm

    def ensure_discs(self) -> tuple[Discriminator, Discriminator]:
        if self.disc is None:
            lm = self.ensure_lm()
            key = disc_key(self.cfg)
            if self._cached("disc.ckpt", key) and self._cached("judge.ckpt", key):
                self.disc = Discriminator.load(self._path("disc.ckpt"), lm)
                self.judge = Discriminator.load(self._path("judge.ckpt"), lm)
            else:
                self.disc, self.judge = train_discs(self.cfg, lm)
                if self.out is not None:
                    self.disc.save(self._path("disc.ckpt"), **self._meta(key))
                    self.judge.save(self._path("judge.ckpt"), **self._meta(key))
        return self.disc, self.judge

    def ensure_prefix(self) -> PrefixState:
        if self.prefix is None:
            lm = self.ensure_lm()
            key = prefix_key(self.cfg)
            path = self._cached("prefix.ckpt", key)
            if path is not None:
                self.prefix = PrefixState(checkpoint.load(path)[1]["prefix"])
            else:
                self.prefix = base_prefix(self.cfg, lm)
                if self.out is not None:
                    checkpoint.save(self._path("prefix.ckpt"), {"kind": "prefix", **self._meta(key)},
                                    {"prefix": self.prefix.values})
        return self.prefix

    def ensure(self) -> Artifacts:
        self.ensure_lm()
        self.ensure_discs()
        self.ensure_prefix()
        return self

    def adapted_for(self, cfg: ExperimentConfig) -> AdaptedLM:
        self.ensure()
        key = rldaf_key(cfg)
        if key not in self.adapted:
            name = f"adapted-{key[:12]}.ckpt"
            path = self._cached(name, key)
            if path is not None:
                self.adapted[key] = AdaptedLM.load(path)
            else:
                log_path = None if self.out is None else self._path(f"rldaf-{key[:12]}.jsonl")
                self.adapted[key], self.logs[key] = run_rldaf(cfg, self.lm, self.disc,
                                                              self.prefix, log_path)
                if self.out is not None:
                    self.adapted[key].save(self._path(name), stage_key=key,
                                           config_hash=config_hash(cfg))
        return self.adapted[key]


def _write_records(path, records: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def generate_variant(cfg: ExperimentConfig, art: Artifacts, prompts: np.ndarray,
                     targets: Sequence[AttributeTarget], rows: Sequence[int] | None = None,
                     end_id: int | None = 1) -> Generation:
    """Decode with the variant's model and steering. ``rows`` names the decode
    stream of each prompt, so a single prompt can reproduce its batch row."""
    art.ensure()
    disc = art.disc if cfg.eval.task == "sentiment" else None
    if cfg.use_rldaf:
        model = art.adapted_for(cfg)
        lm = model.policy
        prefix = model.prefix_batch(targets) if cfg.use_prefix else None
    else:
        lm = art.lm
        prefix = art.prefix if cfg.use_prefix else None
    rows = range(len(prompts)) if rows is None else rows
    rngs = row_rngs(stream_seed(cfg.seed, "decode"), rows)
    return generate_batch(lm, disc, prompts, targets, prefix, cfg.steer, cfg.decode, rngs, end_id)


def score(cfg: ExperimentConfig, art: Artifacts, gen: Generation,
          targets: Sequence[AttributeTarget], name: str) -> MetricsReport:
    judge_lm = art.lm.clone()
    texts = [list(gen.generated(r)) for r in range(len(gen.sequences))]
    ppl = corpus_oracle_ppl(judge_lm, gen.sequences, gen.step_probs)
    dist = {n: _safe_dist(texts, n) for n in (1, 2, 3)}
    if cfg.eval.task == "topic":
        sents = [ex.tokens for ex in generate_topic_corpus(
            cfg.corpus, cfg.disc.train_size, build_vocab(cfg.corpus), DISC_OFFSET)]
        test = {t.key: build_test_bag(t.bag, sents, cfg.eval.test_bag_threshold)
                for t in set(targets)}
        attr = topic_score_corpus(texts, [test[t.key] for t in targets])
        kind = "topic"
    else:
        attr = sentiment_accuracy([list(s) for s in gen.sequences], [t.label for t in targets],
                                  art.judge)
        kind = "sentiment"
    return MetricsReport(name, ppl, dist, attr, len(texts), cfg.seed, config_hash(cfg), kind)


def _safe_dist(texts, n: int) -> float:
    usable = [t for t in texts if len(t) >= n]
    return dist_n_corpus(usable, n) if usable else 1.0


def evaluate(cfg: ExperimentConfig, art: Artifacts | None = None,
             name: str = "model") -> tuple[MetricsReport, Generation]:
    art = art or Artifacts(cfg)
    prompts, targets = eval_prompts(cfg)
    gen = generate_variant(cfg, art, prompts, targets)
    return score(cfg, art, gen, targets, name), gen


@dataclass
class AblationResult:
    reports: list[MetricsReport]
    generations: dict[str, Generation]
    orderings: dict[str, bool]
    artifacts: Artifacts


def ablate(cfg: ExperimentConfig, variants: Sequence[str] = tuple(VARIANTS),
           art: Artifacts | None = None) -> AblationResult:
    """Run each variant on the same prompts, targets and decode seeds."""
    art = art or Artifacts(cfg)
    reports, gens = [], {}
    for name in variants:
        vcfg = variant_config(cfg, name)
        rep, gen = evaluate(vcfg, art, name)
        reports.append(rep)
        gens[name] = gen
    by = {r.model: r for r in reports}
    orderings = {}
    if "plain-lm" in by:
        for name in variants:
            if name != "plain-lm":
                orderings[f"{name} attribute > plain-lm"] = \
                    by[name].attribute_score > by["plain-lm"].attribute_score
    if {"ppc-kv", "prompt-ppc"} <= set(by):
        orderings["ppc-kv ppl > prompt-ppc ppl"] = by["ppc-kv"].oracle_ppl > by["prompt-ppc"].oracle_ppl
    return AblationResult(reports, gens, orderings, art)
