"""Two-stage training: sentence-level pretraining, then multi-task chat fine-tuning."""

from __future__ import annotations

import json
import logging
import math
import warnings
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .checkpoint import save_checkpoint, save_theta
from .corpus import (Dialogue, UtterancePool, Vocabulary, make_context_view, make_crg_example, make_mrg_example,
                     make_nct_example, make_nud_samples, make_sentence_example, make_si_samples, truncate_example)
from .model import ChatTranslator, ModelConfig
from .objectives import ChatBatch, Schedule, compute_losses, encode_pair, loss_nct, schedule_step

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Raised when a loss or gradient becomes non-finite; parameters hold the last good state."""

    def __init__(self, message, step):
        super().__init__(message)
        self.step = step


@dataclass
class TrainConfig:
    T1: int = 2000
    T2: int = 1000
    batch_tokens: int = 4096
    adam_beta1: float = 0.9
    adam_beta2: float = 0.998
    adam_eps: float = 1e-9
    lr_scale: float = 1.0
    warmup_steps: int = 4000
    finetune_warmup_steps: int = 500
    label_smoothing: float = 0.1
    dropout: float | None = None
    seed: int = 0
    grad_clip: float | None = 5.0
    context_window: int = 3
    schedule_mode: str = "linear"
    alpha0: float = 1.0
    eval_every: int = 0

    def __post_init__(self):
        if self.T1 <= 0 or self.T2 <= 0:
            raise ValueError(f"T1 and T2 must be positive, got T1={self.T1} T2={self.T2}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError(f"label_smoothing must be in [0, 1), got {self.label_smoothing}")
        if self.batch_tokens <= 0:
            raise ValueError("batch_tokens must be positive")
        if self.warmup_steps <= 0 or self.finetune_warmup_steps <= 0:
            raise ValueError("warmup steps must be positive")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive or None")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in names})


# --------------------------------------------------------------------- optimizer


def noam_lr(step: int, d_model: int, warmup: int, scale: float = 1.0) -> float:
    """``scale * d^-0.5 * min(step^-0.5, step * warmup^-1.5)`` for ``step >= 1``."""
    if step < 1:
        raise ValueError("step counts from 1")
    return scale * d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def for_params(cls, params: dict) -> "OptimizerState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()})


def clip_global_norm(grads: dict, max_norm: float | None) -> float:
    """Rescale ``grads`` in place so their joint L2 norm is at most ``max_norm``; returns the norm before."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm is not None and norm > max_norm:
        f = max_norm / norm
        for g in grads.values():
            g *= f
    return norm


def adam_update(params: dict, grads: dict, state: OptimizerState, lr: float,
                beta1: float = 0.9, beta2: float = 0.998, eps: float = 1e-9) -> None:
    """One bias-corrected Adam step over the parameters tracked by ``state``.

    A parameter missing from ``grads`` is treated as having zero gradient.
    """
    for name, g in grads.items():
        if name not in state.m:
            raise KeyError(f"no optimizer state for {name!r}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name!r}")
    state.step += 1
    t = state.step
    c1, c2 = 1.0 - beta1 ** t, 1.0 - beta2 ** t
    for name, m in state.m.items():
        p = params[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter {p.data.shape}")
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------------- batching


def token_batches(sizes: Sequence[int], batch_tokens: int, rng: np.random.Generator) -> list[list[int]]:
    """Index batches whose summed size fits ``batch_tokens``.

    Items are packed longest first, so every batch except the remainder holds
    more than half the budget.  Full batches come in random order; the
    remainder batch is last.
    """
    order = sorted(range(len(sizes)), key=lambda i: (-sizes[i], i))
    batches, cur, used = [], [], 0
    for i in order:
        s = sizes[i]
        if s > batch_tokens:
            raise ValueError(f"example {i} has {s} tokens, more than batch_tokens={batch_tokens}")
        if used + s > batch_tokens:
            batches.append(cur)
            cur, used = [], 0
        cur.append(i)
        used += s
    if cur:
        batches.append(cur)
    if len(batches) > 1 and sum(sizes[i] for i in batches[-1]) * 2 <= batch_tokens:
        head, tail = batches[:-1], [batches[-1]]
    else:
        head, tail = batches, []
    perm = rng.permutation(len(head))
    return [head[j] for j in perm] + tail


def _cycle_batches(sizes, batch_tokens, rng):
    while True:
        yield from token_batches(sizes, batch_tokens, rng)


# ----------------------------------------------------------------------- logging


@dataclass
class TrainResult:
    model: ChatTranslator
    records: list = field(default_factory=list)
    best_score: float | None = None
    best_step: int | None = None
    stats: Counter = field(default_factory=Counter)


def _record(step, stage, values: dict, alpha, beta, lr, tokens) -> dict:
    rec = {"step": step, "stage": stage}
    for k in ("l_nct", "l_mrg", "l_crg", "l_nud", "l_si"):
        rec[k] = values.get(k)
    rec.update(alpha=alpha, beta=beta, lr=lr, tokens=tokens)
    return rec


class _Logger:
    def __init__(self, fp):
        self.fp = fp
        self.records = []

    def __call__(self, rec):
        self.records.append(rec)
        if self.fp is not None:
            self.fp.write(json.dumps(rec) + "\n")
            self.fp.flush()


def _apply_dropout(model: ChatTranslator, cfg: TrainConfig):
    if cfg.dropout is not None:
        if not 0.0 <= cfg.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {cfg.dropout}")
        model.config.dropout = cfg.dropout


def _step(model, loss, active: dict, state, lr, cfg: TrainConfig, step: int, checkpoint_path):
    """Backward, NaN guard, clipping and one Adam update on ``active``."""
    value = loss.item()
    if not math.isfinite(value):
        _abort(model, checkpoint_path, step, f"loss became {value} at step {step}")
    model.zero_grad()
    ad.backward(loss)
    grads = {k: p.grad.copy() for k, p in active.items() if p.grad is not None}
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        _abort(model, checkpoint_path, step, f"non-finite gradient at step {step}")
    clip_global_norm(grads, cfg.grad_clip)
    adam_update(active, grads, state, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    model.zero_grad()
    return value


def _abort(model, checkpoint_path, step, message):
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model, extra={"aborted_at": step})
        message += f"; last good parameters written to {checkpoint_path}"
    log.error(message)
    raise TrainingDiverged(message, step)


def _maybe_eval(step, cfg, evaluate, model, result, best_path):
    if not (evaluate and cfg.eval_every and step % cfg.eval_every == 0):
        return
    model.eval()
    score = float(evaluate(model))
    model.train()
    log.info("step %d: dev score %.3f", step, score)
    if result.best_score is None or score > result.best_score:
        result.best_score, result.best_step = score, step
        if best_path is not None:
            save_checkpoint(best_path, model, extra={"step": step, "dev_score": score})


# ------------------------------------------------------------------------ stage 1


def sentence_examples(pairs, vocab: Vocabulary, cfg: ModelConfig, stats=None):
    return [truncate_example(make_sentence_example(s, t, vocab, cfg.max_turns, stats), cfg.max_pos)
            for s, t in pairs]


def pretrain(pairs: Sequence[tuple], vocab: Vocabulary, model: ChatTranslator, cfg: TrainConfig,
             log_fp=None, evaluate: Callable | None = None, checkpoint_path=None,
             best_path=None) -> TrainResult:
    """Stage 1: ``T1`` Adam steps on sentence pairs, encoder input ``[cls] X``.

    Only the translation parameters are updated.  ``evaluate(model)`` (a dev
    score, higher is better) runs every ``eval_every`` steps when given.
    """
    if not pairs:
        raise ValueError("parallel corpus is empty")
    _apply_dropout(model, cfg)
    stats = Counter()
    examples = sentence_examples(pairs, vocab, model.config, stats)
    if stats["unk"]:
        log.info("%d tokens mapped to [unk]", stats["unk"])
    data_rng = np.random.default_rng([cfg.seed, 1])
    batches = _cycle_batches([e.size for e in examples], cfg.batch_tokens, data_rng)
    active = model.theta()
    state = OptimizerState.for_params(active)
    logger = _Logger(log_fp)
    result = TrainResult(model, logger.records, stats=stats)
    model.train()
    for step in range(1, cfg.T1 + 1):
        batch = [examples[i] for i in next(batches)]
        lr = noam_lr(step, model.config.d_model, cfg.warmup_steps, cfg.lr_scale)
        loss = loss_nct(batch, model, cfg.label_smoothing)
        value = _step(model, loss, active, state, lr, cfg, step, checkpoint_path)
        logger(_record(step, "pretrain", {"l_nct": value}, None, None, lr, sum(e.size for e in batch)))
        _maybe_eval(step, cfg, evaluate, model, result, best_path)
    model.eval()
    if checkpoint_path is not None:
        save_theta(checkpoint_path, model, extra={"stage": "pretrain", "steps": cfg.T1})
    return result


# ------------------------------------------------------------------------ stage 2


@dataclass
class TurnUnit:
    """Everything stage 2 needs for one (dialogue, turn) position."""

    dialogue_index: int
    turn: int
    view: object
    nct: object
    mrg: object
    crg: object
    si: object          # EncodedPair or None


def build_turn_units(dialogues: Sequence[Dialogue], vocab: Vocabulary, cfg: ModelConfig, k: int,
                     stats: Counter | None = None) -> list[TurnUnit]:
    units = []
    for i, d in enumerate(dialogues):
        for u in range(1, len(d) + 1):
            view = make_context_view(d, u, k)
            nct = truncate_example(make_nct_example(view, d, u, vocab, cfg.max_turns, stats), cfg.max_pos)
            mrg = truncate_example(make_mrg_example(view, d, u, vocab, cfg.max_turns, stats), cfg.max_pos)
            crg = truncate_example(make_crg_example(view, d, u, vocab, cfg.max_turns, stats), cfg.max_pos)
            si = make_si_samples(view, d, u)
            si = _fit(encode_pair(*si, vocab, cfg.max_turns, stats), cfg.max_pos, stats) if si else None
            units.append(TurnUnit(i, u, view, nct, mrg, crg, si))
    return units


def _fit(pair, max_pos, stats):
    if max(len(pair.pos[0]), len(pair.neg[0])) > max_pos:
        if stats is not None:
            stats["pair_too_long"] += 1
        return None
    return pair


def nud_pair(unit: TurnUnit, dialogues, pool, vocab, cfg: ModelConfig, rng, stats=None):
    d = dialogues[unit.dialogue_index]
    samples = make_nud_samples(unit.view, d, unit.turn, pool, rng, unit.dialogue_index, stats)
    if samples is None:
        return None
    return _fit(encode_pair(*samples, vocab, cfg.max_turns, stats), cfg.max_pos, stats)


def finetune(dialogues: Sequence[Dialogue], vocab: Vocabulary, model: ChatTranslator, cfg: TrainConfig,
             log_fp=None, evaluate: Callable | None = None, checkpoint_path=None, best_path=None,
             nct_only: bool = False) -> TrainResult:
    """Stage 2: ``T2`` Adam steps on the joint objective over all parameters.

    Step ``t2`` (0-based) uses the balancing weights ``schedule_step(t2)``; a
    closing record at step ``T2`` logs the final weights.  ``nct_only`` trains
    on the translation loss alone.
    """
    if not dialogues:
        raise ValueError("chat corpus is empty")
    _apply_dropout(model, cfg)
    stats = Counter()
    mcfg = model.config
    units = build_turn_units(dialogues, vocab, mcfg, cfg.context_window, stats)
    pool = UtterancePool(dialogues)
    data_rng = np.random.default_rng([cfg.seed, 2])
    nud_rng = np.random.default_rng([cfg.seed, 3])
    sizes = [u.nct.size for u in units]
    n_batches = len(token_batches(sizes, cfg.batch_tokens, np.random.default_rng(0)))
    batches = _cycle_batches(sizes, cfg.batch_tokens, data_rng)
    schedule = Schedule(cfg.T2, cfg.schedule_mode, cfg.alpha0)
    active = model.params
    state = OptimizerState.for_params(active)
    logger = _Logger(log_fp)
    result = TrainResult(model, logger.records, stats=stats)
    epoch_has_si = False
    model.train()
    for t2 in range(cfg.T2):
        step = t2 + 1
        if t2 and t2 % n_batches == 0:
            if not epoch_has_si and not nct_only:
                warnings.warn("no speaker-identification pair in this epoch; the SI term contributes 0",
                              RuntimeWarning)
            epoch_has_si = False
        alpha, beta = (0.0, 0.0) if nct_only else schedule_step(schedule, t2)
        chosen = [units[i] for i in next(batches)]
        nud = []
        if alpha > 0:
            nud = [p for p in (nud_pair(u, dialogues, pool, vocab, mcfg, nud_rng, stats) for u in chosen) if p]
        si = [u.si for u in chosen if u.si is not None]
        epoch_has_si = epoch_has_si or bool(si)
        batch = ChatBatch([u.nct for u in chosen], [u.mrg for u in chosen], [u.crg for u in chosen], nud, si)
        lr = noam_lr(step, mcfg.d_model, cfg.finetune_warmup_steps, cfg.lr_scale)
        losses = compute_losses(batch, model, alpha, beta, cfg.label_smoothing)
        _step(model, losses.joint, active, state, lr, cfg, step, checkpoint_path)
        vals = losses.values()
        logger({**_record(step, "finetune", vals, alpha, beta, lr, batch.tokens), "t2": t2})
        _maybe_eval(step, cfg, evaluate, model, result, best_path)
    end_alpha, end_beta = (0.0, 0.0) if nct_only else schedule_step(schedule, cfg.T2)
    logger({**_record(cfg.T2, "end", {}, end_alpha, end_beta, None, 0), "t2": cfg.T2})
    model.eval()
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model, extra={"stage": "finetune", "steps": cfg.T2})
    return result
