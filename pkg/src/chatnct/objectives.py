"""Training losses, their weighted combination and the decay schedule."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import PAD_ID, GenExample, PairSample, Vocabulary, pair_inputs
from .model import ChatTranslator, pad_sequences


class ScheduleMode(str, enum.Enum):
    LINEAR = "linear"
    ALGORITHM1_LITERAL = "algorithm1"
    FIXED = "fixed"


@dataclass(frozen=True)
class Schedule:
    """Balancing-factor trajectory over ``T2`` fine-tuning steps.

    ``linear``: ``max(0, 1 - t/T2)``.  ``algorithm1``: the per-step recurrence
    ``a <- max(0, a - a*t/T2)`` run for ``t = 1..t2``, evaluated as
    ``a * (1 - t/T2)`` so the last step lands on exactly zero.  ``fixed``:
    ``alpha0`` throughout.
    """

    T2: int
    mode: ScheduleMode = ScheduleMode.LINEAR
    alpha0: float = 1.0

    def __post_init__(self):
        if self.T2 <= 0:
            raise ValueError(f"T2 must be positive, got {self.T2}")
        object.__setattr__(self, "mode", ScheduleMode(self.mode))
        if self.alpha0 < 0:
            raise ValueError("alpha0 must be >= 0")


def schedule_step(s: Schedule, t2: int) -> tuple[float, float]:
    if not 0 <= t2 <= s.T2:
        raise ValueError(f"step {t2} outside 0..{s.T2}")
    if s.mode is ScheduleMode.FIXED:
        a = s.alpha0
    elif s.mode is ScheduleMode.LINEAR:
        a = max(0.0, s.alpha0 * (1.0 - t2 / s.T2))
    else:
        a = s.alpha0
        for t in range(1, t2 + 1):
            a = max(0.0, a * (1.0 - t / s.T2))
    return a, a


@dataclass
class LossBundle:
    l_nct: Tensor
    l_mrg: Tensor | None
    l_crg: Tensor | None
    l_nud: Tensor | None
    l_si: Tensor | None
    joint: Tensor
    alpha: float
    beta: float

    def values(self) -> dict:
        def v(t):
            return None if t is None else t.item()
        return {"l_nct": v(self.l_nct), "l_mrg": v(self.l_mrg), "l_crg": v(self.l_crg),
                "l_nud": v(self.l_nud), "l_si": v(self.l_si), "joint": v(self.joint)}


def joint(l_nct, l_mrg, l_crg, l_nud, l_si, alpha: float, beta: float):
    """``l_nct + alpha*(l_mrg + l_crg + l_nud) + beta*l_si``.

    Accepts floats or scalar tensors.  Terms with a zero weight are dropped,
    so ``alpha = beta = 0`` returns ``l_nct`` itself.
    """
    if alpha < 0 or beta < 0:
        raise ValueError(f"balancing weights must be >= 0, got alpha={alpha} beta={beta}")
    tensors = isinstance(l_nct, Tensor)
    total = l_nct
    if alpha:
        group = [t for t in (l_mrg, l_crg, l_nud) if t is not None]
        if group:
            s = group[0]
            for t in group[1:]:
                s = ad.add(s, t) if tensors else s + t
            total = ad.add(total, ad.scale(s, alpha)) if tensors else total + alpha * s
    if beta and l_si is not None:
        total = ad.add(total, ad.scale(l_si, beta)) if tensors else total + beta * l_si
    return total


# ----------------------------------------------------------- generation losses


def generation_loss(model: ChatTranslator, examples: Sequence[GenExample], head: str = "main",
                    smoothing: float = 0.0) -> Tensor:
    """Label-smoothed token cross-entropy averaged over the non-pad target tokens."""
    if not examples:
        raise ValueError("empty batch")
    logits = model.generation_logits([e.enc for e in examples], [e.dec_in for e in examples], head)
    targets = pad_sequences([e.dec_out for e in examples])
    return ad.cross_entropy_label_smoothed(logits, targets, smoothing, PAD_ID)


def loss_nct(examples, model, smoothing=0.0) -> Tensor:
    return generation_loss(model, examples, "main", smoothing)


def loss_mrg(examples, model, smoothing=0.0) -> Tensor:
    return generation_loss(model, examples, "mrg", smoothing)


def loss_crg(examples, model, smoothing=0.0) -> Tensor:
    return generation_loss(model, examples, "crg", smoothing)


# -------------------------------------------------------------- pair losses


@dataclass
class EncodedPair:
    """A positive/negative pair turned into encoder inputs."""

    pos: tuple
    neg: tuple


def encode_pair(pos: PairSample, neg: PairSample, vocab: Vocabulary, max_turns: int = 10, stats=None) -> EncodedPair:
    if pos.label != 1 or neg.label != 0:
        raise ValueError("pair must be (label 1, label 0)")
    return EncodedPair(pair_inputs(pos, vocab, max_turns, stats), pair_inputs(neg, vocab, max_turns, stats))


def pair_log_probs(model: ChatTranslator, samples: Sequence[tuple], head: str) -> Tensor:
    """``log p(label | C, Y)`` columns ``[N, 2]`` for encoded samples."""
    h_y, h_c = model.pair_representations([s[0] for s in samples], [s[1] for s in samples],
                                          [s[2] for s in samples])
    return ad.log_softmax(model.classifier_logits(h_y, h_c, head), axis=-1)


def pair_loss(pairs: Sequence[EncodedPair], model: ChatTranslator, head: str) -> Tensor:
    """``-log p(1|pos) - log p(0|neg)`` averaged over pairs."""
    if not pairs:
        raise ValueError("empty batch of pairs")
    P = len(pairs)
    logp = pair_log_probs(model, [p.pos for p in pairs] + [p.neg for p in pairs], head)
    pick = np.zeros(logp.shape, dtype=logp.data.dtype)
    pick[:P, 1] = 1.0
    pick[P:, 0] = 1.0
    return ad.scale(ad.sum_all(ad.mul(logp, Tensor(pick))), -1.0 / P)


def loss_nud(pairs: Sequence[EncodedPair], model: ChatTranslator) -> Tensor:
    return pair_loss(pairs, model, "nud")


def loss_si(pairs: Sequence[EncodedPair], model: ChatTranslator) -> Tensor:
    return pair_loss(pairs, model, "si")


def pair_accuracy(pairs: Sequence[EncodedPair], model: ChatTranslator, head: str, batch_size: int = 64) -> float:
    """Fraction of samples (both members of every pair) classified correctly."""
    correct = total = 0
    with ad.no_grad():
        for i in range(0, len(pairs), batch_size):
            chunk = pairs[i: i + batch_size]
            logp = pair_log_probs(model, [p.pos for p in chunk] + [p.neg for p in chunk], head).data
            pred = logp.argmax(axis=1)
            labels = np.array([1] * len(chunk) + [0] * len(chunk))
            correct += int((pred == labels).sum())
            total += len(labels)
    return correct / total if total else float("nan")


# ---------------------------------------------------------------- the bundle


@dataclass
class ChatBatch:
    nct: list
    mrg: list
    crg: list
    nud: list
    si: list

    @property
    def tokens(self) -> int:
        return sum(e.size for e in self.nct)


def compute_losses(batch: ChatBatch, model: ChatTranslator, alpha: float, beta: float,
                   smoothing: float = 0.0) -> LossBundle:
    """All five losses for one batch; zero-weight auxiliary terms are not evaluated."""
    l_nct = loss_nct(batch.nct, model, smoothing)
    l_mrg = l_crg = l_nud = l_si = None
    if alpha > 0:
        l_mrg = loss_mrg(batch.mrg, model, smoothing)
        l_crg = loss_crg(batch.crg, model, smoothing)
        if batch.nud:
            l_nud = loss_nud(batch.nud, model)
    if beta > 0 and batch.si:
        l_si = loss_si(batch.si, model)
    return LossBundle(l_nct, l_mrg, l_crg, l_nud, l_si,
                      joint(l_nct, l_mrg, l_crg, l_nud, l_si, alpha, beta), alpha, beta)
