"""Beam-search decoding of conversations with source-side history."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import (BOS_ID, CLS_ID, EOS_ID, PAD_ID, SEP_ID, UNK_ID, Dialogue, EncoderInput, GenExample,
                     Utterance, Vocabulary, context_segment, joint_input, truncate_example, utterance_segment)
from .model import ChatTranslator, EncoderOutput, pad_encoder_inputs


@dataclass
class BeamConfig:
    beam_size: int = 4
    length_penalty: float = 0.6
    max_len: int = 64
    eos_id: int = EOS_ID
    banned_ids: tuple = ()

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")


TRANSLATION_BANNED = (PAD_ID, BOS_ID, CLS_ID, SEP_ID, UNK_ID)


def length_penalty(length: int, alpha: float) -> float:
    return ((5.0 + length) / 6.0) ** alpha


@dataclass
class Hypothesis:
    tokens: tuple          # generated ids, including the final eos when finished by eos
    logp: float
    finished: bool = False

    def score(self, alpha: float) -> float:
        return self.logp / length_penalty(len(self.tokens), alpha)


@dataclass
class BeamResult:
    tokens: tuple          # without the trailing eos
    score: float
    logp: float
    truncated: bool
    pruned: list = field(default_factory=list)   # (step, worst kept logp, best pruned logp)


def _rank_key(h: Hypothesis, alpha: float):
    return (-h.score(alpha), len(h.tokens), h.tokens)


def _expand(enc: EncoderOutput, n: int) -> EncoderOutput:
    if n == enc.states.shape[0]:
        return enc
    rep = lambda a: np.repeat(a, n, axis=0)  # noqa: E731
    return EncoderOutput(Tensor(rep(enc.states.data)), rep(enc.flags), rep(enc.valid), rep(enc.ids))


def next_token_log_probs(model: ChatTranslator, enc: EncoderOutput, prefixes: Sequence[tuple]) -> np.ndarray:
    dec = np.array([(BOS_ID,) + tuple(p) for p in prefixes], dtype=np.int64)
    h = model.decode(dec, _expand(enc, len(prefixes)))
    logits = model.project(h[:, -1:, :], "main")
    return ad.log_softmax(logits, axis=-1).data[:, 0, :]


def beam_search(enc: EncoderOutput, model: ChatTranslator, cfg: BeamConfig) -> BeamResult:
    """Beam search over one encoded source (batch of 1).

    Finished hypotheses (eos, or ``max_len`` tokens) leave the beam and are
    scored ``logP / ((5+len)/6)**length_penalty``.  Search ends when no live
    hypothesis can still beat the best finished score.
    """
    if enc.states.shape[0] != 1:
        raise ValueError("beam_search decodes one source at a time")
    alpha = cfg.length_penalty
    alive = [Hypothesis((), 0.0)]
    finished: list[Hypothesis] = []
    pruned_log = []
    lp_max = length_penalty(cfg.max_len, alpha)
    with ad.no_grad():
        for step in range(cfg.max_len):
            logp = next_token_log_probs(model, enc, [h.tokens for h in alive])
            if cfg.banned_ids:
                logp[:, list(cfg.banned_ids)] = -np.inf
            cands = []
            for i, h in enumerate(alive):
                for v in np.nonzero(np.isfinite(logp[i]))[0]:
                    cands.append(Hypothesis(h.tokens + (int(v),), h.logp + float(logp[i, v])))
            cands.sort(key=lambda c: (-c.logp, len(c.tokens), c.tokens))
            kept, dropped = cands[: cfg.beam_size], cands[cfg.beam_size:]
            if dropped:
                pruned_log.append((step, kept[-1].logp, dropped[0].logp))
            alive = []
            for c in kept:
                if c.tokens[-1] == cfg.eos_id or len(c.tokens) >= cfg.max_len:
                    c.finished = True
                    finished.append(c)
                else:
                    alive.append(c)
            if not alive:
                break
            if finished:
                best = max(h.score(alpha) for h in finished)
                if all(h.logp / lp_max < best for h in alive):
                    break
    pool = finished or alive
    best = min(pool, key=lambda h: _rank_key(h, alpha))
    ended_by_eos = bool(best.tokens) and best.tokens[-1] == cfg.eos_id
    toks = best.tokens[:-1] if ended_by_eos else best.tokens
    return BeamResult(toks, best.score(alpha), best.logp, not ended_by_eos, pruned_log)


def greedy_search(enc: EncoderOutput, model: ChatTranslator, max_len: int, eos_id: int = EOS_ID,
                  banned_ids=()) -> tuple:
    toks = ()
    with ad.no_grad():
        for _ in range(max_len):
            logp = next_token_log_probs(model, enc, [toks])[0]
            if banned_ids:
                logp[list(banned_ids)] = -np.inf
            v = int(np.argmax(logp))
            toks += (v,)
            if v == eos_id:
                return toks[:-1]
    return toks


def source_input(d: Dialogue, u: int, k: int, vocab: Vocabulary, max_turns: int, max_pos: int) -> EncoderInput:
    """``[C_Xu ; X_u]`` built from source-side utterances only."""
    history = tuple(range(max(1, u - k), u))
    utt = d[u]
    enc = joint_input(context_segment(d, history, "source"),
                      utterance_segment(utt.source_tokens, utt.speaker, u), vocab, max_turns)
    empty = np.zeros(0, dtype=np.int64)
    return truncate_example(GenExample(enc, empty, empty), max_pos).enc


def encode_one(model: ChatTranslator, enc_input: EncoderInput) -> EncoderOutput:
    with ad.no_grad():
        return model.encode(pad_encoder_inputs([enc_input]))


def translate_dialogue(d: Dialogue, model: ChatTranslator, vocab: Vocabulary, k: int = 3,
                       cfg: BeamConfig | None = None) -> list[BeamResult]:
    """Translate every turn of ``d`` in order; results carry token strings."""
    cfg = cfg or BeamConfig(banned_ids=TRANSLATION_BANNED)
    if cfg.max_len >= model.config.max_pos:
        cfg = replace(cfg, max_len=model.config.max_pos - 1)
    model.eval()
    out = []
    for u in range(1, len(d) + 1):
        enc_in = source_input(d, u, k, vocab, model.config.max_turns, model.config.max_pos)
        res = beam_search(encode_one(model, enc_in), model, cfg)
        res.tokens = tuple(vocab.decode(res.tokens))
        out.append(res)
    return out


def translate_corpus(dialogues: Sequence[Dialogue], model: ChatTranslator, vocab: Vocabulary, k: int = 3,
                     cfg: BeamConfig | None = None):
    """Returns ``(filled dialogues, score records)``."""
    filled, scores = [], []
    for d in dialogues:
        results = translate_dialogue(d, model, vocab, k, cfg)
        utts = tuple(Utterance(u.turn, u.speaker, u.source_tokens, r.tokens) for u, r in zip(d.utterances, results))
        filled.append(Dialogue(d.dialogue_id, utts))
        for u, r in zip(d.utterances, results):
            scores.append({"dialogue_id": d.dialogue_id, "turn": u.turn, "score": r.score,
                           "logp": r.logp, "truncated": r.truncated})
    return filled, scores


def write_scores(scores, fp) -> None:
    for rec in scores:
        fp.write(json.dumps(rec) + "\n")
