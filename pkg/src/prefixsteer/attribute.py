"""Attribute models: bag-of-words likelihood and a pooled-hidden-state classifier."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import checkpoint
from . import tensor as T
from .corpus import Example, WordBag, pad_batch
from .errors import DataError, DomainError
from .lm import HiddenCache, LanguageModel
from .tensor import Tensor

log = logging.getLogger(__name__)

UNDERFLOW_FLOOR = math.log(1e-12)


class BagUnderflowWarning(RuntimeWarning):
    """The bag received exactly zero probability mass; the floor was returned."""


@dataclass(frozen=True)
class AttributeTarget:
    """Either a topic (word bag) or a class label, never both."""

    bag: WordBag | None = None
    label: int | None = None

    def __post_init__(self):
        if (self.bag is None) == (self.label is None):
            raise DomainError("AttributeTarget needs exactly one of bag / label")

    @property
    def is_topic(self) -> bool:
        return self.bag is not None

    @property
    def key(self) -> str:
        return f"topic:{self.bag.name}" if self.is_topic else f"label:{self.label}"

    @classmethod
    def topic(cls, bag: WordBag) -> AttributeTarget:
        return cls(bag=bag)

    @classmethod
    def of_class(cls, label: int) -> AttributeTarget:
        return cls(label=label)


def bow_log_likelihood(next_token_probs, bag) -> float:
    """log of the total next-token probability on the bag's tokens.

    Returns ``ln(1e-12)`` and emits :class:`BagUnderflowWarning` when the
    bag mass is exactly zero.
    """
    probs = np.asarray(next_token_probs, dtype=np.float64)
    ids = sorted(bag.ids if isinstance(bag, WordBag) else set(bag))
    if not ids:
        raise DomainError("empty word bag")
    if abs(probs.sum() - 1.0) > 1e-6:
        raise DomainError(f"probabilities sum to {probs.sum()!r}, expected 1")
    # sort before summing so the result does not depend on set iteration order
    mass = float(np.sort(probs[ids]).sum())
    if mass <= 0.0:
        warnings.warn("zero probability mass on bag", BagUnderflowWarning, stacklevel=2)
        return UNDERFLOW_FLOOR
    return min(0.0, math.log(mass))


def bag_masks(targets: Sequence[AttributeTarget], vocab_size: int) -> np.ndarray:
    return np.stack([t.bag.mask(vocab_size) for t in targets])


def bow_loss(logits: Tensor, masks: np.ndarray) -> Tensor:
    """Per-row ``-log sum_{w in bag} softmax(logits)[w]`` computed as a
    difference of log-sum-exps, so it never underflows."""
    inside = T.masked_fill(logits, ~masks, -np.inf)
    return T.logsumexp(logits, axis=-1) - T.logsumexp(inside, axis=-1)


def discriminator_loss(d: Tensor, target, reduction: str = "none") -> Tensor:
    """``-log d[target]`` for a class distribution ``d`` (rows sum to one).

    ``target`` is an :class:`AttributeTarget` (or a sequence of them, one per
    row) carrying a class label.
    """
    targets = [target] if isinstance(target, AttributeTarget) else list(target)
    if any(t.label is None for t in targets):
        raise DomainError("discriminator_loss needs class-label targets")
    d = T.as_tensor(d)
    labels = np.array([t.label for t in targets], dtype=np.int64)
    if d.ndim == 1:
        if len(labels) != 1:
            raise DomainError("one target per distribution row")
        loss = -T.log(T.pick(d, labels[0]))
    else:
        loss = -T.log(T.pick(d, labels))
    if reduction == "sum":
        return loss.sum()
    if reduction == "mean":
        return loss.mean()
    return loss


class Discriminator:
    """Linear head over the mean of final-layer content hidden states.

    ``lm`` is the frozen model whose hidden states the head was fit on; it
    is needed to score raw token sequences, not to classify a given cache.
    """

    def __init__(self, weight: np.ndarray, bias: np.ndarray,
                 class_names: Sequence[str], lm: LanguageModel | None = None):
        self.weight = Tensor(weight)
        self.bias = Tensor(bias)
        self.class_names = list(class_names)
        self.lm = lm
        self.history: list[dict] = []
        self.heldout_accuracy: float | None = None
        if self.weight.shape != (weight.shape[0], len(self.class_names)):
            raise DomainError("head width does not match class count")

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def pooled(self, cache: HiddenCache, upto: int | None = None) -> Tensor:
        upto = cache.length if upto is None else upto
        if not 1 <= upto <= cache.length:
            raise IndexError(f"upto_position {upto} outside content range 1..{cache.length}")
        return T.mean(cache.final[:, :upto], axis=1)

    def logits(self, cache: HiddenCache, upto: int | None = None) -> Tensor:
        return self.pooled(cache, upto) @ self.weight + self.bias

    def classify(self, cache: HiddenCache, upto: int | None = None) -> Tensor:
        """Class distribution per batch row, differentiable back to the cache."""
        return T.softmax(self.logits(cache, upto), axis=-1)

    def features(self, seqs: Sequence[Sequence[int]], batch: int = 128) -> np.ndarray:
        return pooled_features(self.lm, seqs, batch)

    def predict_proba(self, seqs: Sequence[Sequence[int]]) -> np.ndarray:
        f = self.features(seqs)
        z = f @ self.weight.data + self.bias.data
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def save(self, path, **meta) -> None:
        header = {"kind": "discriminator", "class_names": self.class_names,
                  "pooling": "mean-final-content", "d_model": int(self.weight.shape[0]),
                  "heldout_accuracy": self.heldout_accuracy, **meta}
        checkpoint.save(path, header, {"head.w": self.weight.data, "head.b": self.bias.data})

    @classmethod
    def load(cls, path, lm: LanguageModel | None = None) -> Discriminator:
        header, blobs = checkpoint.load(path)
        if header.get("kind") != "discriminator":
            raise checkpoint.CheckpointError("not a discriminator checkpoint")
        disc = cls(blobs["head.w"], blobs["head.b"], header["class_names"], lm)
        disc.heldout_accuracy = header.get("heldout_accuracy")
        return disc


def _strip_end(seq: Sequence[int], end_id: int = 1) -> list[int]:
    seq = list(seq)
    return seq[:-1] if len(seq) > 1 and seq[-1] == end_id else seq


def pooled_features(lm: LanguageModel, seqs: Sequence[Sequence[int]], batch: int = 128) -> np.ndarray:
    """Mean of the frozen model's final-layer states over each sequence."""
    feats = []
    for start in range(0, len(seqs), batch):
        chunk = [list(s) for s in seqs[start:start + batch]]
        length = max(len(s) for s in chunk)
        ids, mask = pad_batch(chunk, length)
        with T.no_grad():
            _, cache = lm.forward(ids)
        h = cache.final.data
        feats.append((h * mask[..., None]).sum(axis=1) / mask.sum(axis=1, keepdims=True))
    return np.concatenate(feats, axis=0)


@dataclass(frozen=True)
class DiscTrainConfig:
    epochs: int = 300
    lr: float = 0.05
    heldout_frac: float = 0.2
    weight_decay: float = 0.0
    seed: int = 0
    log_every: int = 25


def train_discriminator(lm: LanguageModel, corpus: Sequence[Example],
                        cfg: DiscTrainConfig = DiscTrainConfig(),
                        class_names: Sequence[str] | None = None) -> Discriminator:
    """Fit the linear head on pooled states of ``lm`` (kept frozen).

    A seeded ``heldout_frac`` split is held out; its accuracy is stored on the
    returned discriminator together with the logged training curve.
    """
    labels = np.array([ex.label for ex in corpus], dtype=np.int64)
    present = np.unique(labels)
    if len(present) < 2:
        raise DataError("discriminator training needs at least two classes")
    n_classes = int(labels.max()) + 1
    names = list(class_names) if class_names is not None else [str(i) for i in range(n_classes)]

    feats = pooled_features(lm, [_strip_end(ex.tokens) for ex in corpus])
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(corpus))
    n_held = max(1, int(round(cfg.heldout_frac * len(corpus))))
    held, train = order[:n_held], order[n_held:]

    d = feats.shape[1]
    w = Tensor(rng.normal(0.0, 0.01, (d, len(names))), requires_grad=True)
    b = Tensor(np.zeros(len(names)), requires_grad=True)
    opt = T.Adam([w, b], lr=cfg.lr, weight_decay=cfg.weight_decay)
    x_tr, y_tr = Tensor(feats[train]), labels[train]
    history = []
    for epoch in range(cfg.epochs):
        opt.zero_grad()
        loss = T.cross_entropy(x_tr @ w + b, y_tr)
        loss.backward()
        opt.step()
        if epoch % cfg.log_every == 0 or epoch == cfg.epochs - 1:
            history.append({"epoch": epoch, "loss": loss.item()})
            log.debug("disc epoch %d loss %.4f", epoch, loss.item())

    disc = Discriminator(w.data.copy(), b.data.copy(), names, lm)
    pred = np.argmax(feats[held] @ disc.weight.data + disc.bias.data, axis=1)
    disc.heldout_accuracy = float((pred == labels[held]).mean())
    disc.history = history
    return disc


class BagOfWordsAttribute:
    """Scores topic targets by the bag mass of a frozen model's next-token
    distribution."""

    def __init__(self, lm: LanguageModel):
        self.lm = lm

    def mean_bag_mass(self, seqs: np.ndarray, targets: Sequence[AttributeTarget],
                      last: int) -> np.ndarray:
        """Average over the final ``last`` positions of each row of the
        probability the model puts on the row's bag for the next token."""
        seqs = np.asarray(seqs, dtype=np.int64)
        with T.no_grad():
            logits, _ = self.lm.forward(seqs)
        probs = T.softmax(logits[:, -last:], axis=-1).data
        masks = bag_masks(targets, self.lm.config.vocab_size)
        return (probs * masks[:, None, :]).sum(axis=-1).mean(axis=1)
