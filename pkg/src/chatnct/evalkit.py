"""Corpus BLEU, TER and word-vector coherence between utterances.

All scorers take pre-tokenized input (lists of tokens).
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels

MAX_ORDER = 4
TER_MAX_SHIFT_DIST = 10
TER_EXACT_MAX_LEN = 6


@dataclass
class BleuReport:
    score: float
    precisions: list
    bp: float
    hyp_len: int
    ref_len: int
    correct: list = field(default_factory=list)
    total: list = field(default_factory=list)


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu_statistics(hyps, refs):
    correct = [0] * MAX_ORDER
    total = [0] * MAX_ORDER
    hyp_len = ref_len = 0
    for h, r in zip(hyps, refs):
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, MAX_ORDER + 1):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            correct[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            total[n - 1] += max(0, len(h) - n + 1)
    return correct, total, hyp_len, ref_len


def corpus_bleu(hyps: Sequence[Sequence[str]], refs: Sequence[Sequence[str]], smoothing: str = "exp") -> BleuReport:
    """Corpus BLEU-4 against one reference per segment, as a 0..100 score.

    ``smoothing="exp"`` replaces the k-th zero n-gram precision by
    ``1 / (2**k * total)``, even when no n-gram matches at all.  Orders for
    which the hypotheses contain no n-grams (every segment shorter than n)
    are left out of the geometric mean.
    """
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    if not hyps:
        raise ValueError("empty hypothesis set")
    if smoothing not in ("none", "exp"):
        raise ValueError(f"unknown smoothing {smoothing!r}")
    correct, total, hyp_len, ref_len = bleu_statistics(hyps, refs)

    precisions = [0.0] * MAX_ORDER
    order = 0
    invcnt = 1.0
    for n in range(MAX_ORDER):
        if total[n] == 0:
            break
        order = n + 1
        if correct[n] == 0 and smoothing == "exp":
            invcnt *= 2.0
            precisions[n] = 100.0 / (invcnt * total[n])
        else:
            precisions[n] = 100.0 * correct[n] / total[n]

    if hyp_len == 0:
        bp = 0.0
    elif hyp_len < ref_len:
        bp = math.exp(1.0 - ref_len / hyp_len)
    else:
        bp = 1.0
    used = precisions[:order]
    if not used or min(used) <= 0.0 or bp == 0.0:
        score = 0.0
    else:
        score = bp * math.exp(sum(math.log(p / 100.0) for p in used) / order) * 100.0
    return BleuReport(score, precisions, bp, hyp_len, ref_len, correct, total)


def _as_ids(hyp, ref):
    table = {}
    h = [table.setdefault(t, len(table)) for t in hyp]
    r = [table.setdefault(t, len(table)) for t in ref]
    return h, r


def ter_edits(hyp: Sequence[str], ref: Sequence[str], max_shift_dist: int = TER_MAX_SHIFT_DIST,
              exact_max_len: int = TER_EXACT_MAX_LEN) -> tuple[int, int]:
    """``(shifts, residual_edits)`` for one segment.

    Hypotheses of at most ``exact_max_len`` tokens get the optimal shift
    sequence; longer ones use the greedy loop with shifts capped at
    ``max_shift_dist`` positions.
    """
    h, r = _as_ids(hyp, ref)
    if len(h) <= exact_max_len:
        return kernels.exact_shift_search(h, r)
    return kernels.shift_search(h, r, max_shift_dist, max_shift_dist)


def ter(hyp: Sequence[str], ref: Sequence[str], **kwargs) -> float:
    """Translation edit rate in percent: (shifts + edits) / |ref| * 100."""
    if not ref:
        raise ValueError("TER needs a non-empty reference")
    shifts, edits = ter_edits(hyp, ref, **kwargs)
    return 100.0 * (shifts + edits) / len(ref)


def ter_without_shifts(hyp, ref) -> float:
    if not ref:
        raise ValueError("TER needs a non-empty reference")
    h, r = _as_ids(hyp, ref)
    return 100.0 * kernels.edit_distance(h, r) / len(ref)


def corpus_ter(hyps, refs, **kwargs) -> float:
    """Total edits over total reference length, in percent."""
    if len(hyps) != len(refs) or not hyps:
        raise ValueError("need equally many, and at least one, hypotheses and references")
    edits = length = 0
    for h, r in zip(hyps, refs):
        if not r:
            raise ValueError("TER needs non-empty references")
        s, e = ter_edits(h, r, **kwargs)
        edits += s + e
        length += len(r)
    return 100.0 * edits / length


# ------------------------------------------------------------------ coherence


class WordVectorTable:
    def __init__(self, vectors: dict, dim: int):
        if not vectors:
            raise ValueError("word-vector table is empty")
        for w, v in vectors.items():
            if len(v) != dim:
                raise ValueError(f"vector for {w!r} has {len(v)} dims, expected {dim}")
        self.dim = dim
        self.vectors = {w: np.asarray(v, dtype=np.float64) for w, v in vectors.items()}

    def __len__(self):
        return len(self.vectors)

    def __contains__(self, word):
        return word in self.vectors

    def __getitem__(self, word) -> np.ndarray:
        return self.vectors[word]


class VectorFileError(ValueError):
    pass


def load_word_vectors(path, dim: int = 100) -> WordVectorTable:
    """Text vectors, ``word v1 ... vd`` per line, with an optional ``count dim`` header."""
    vectors = {}
    with open(path, encoding="utf-8") as fp:
        for lineno, line in enumerate(fp, start=1):
            parts = line.rstrip("\n").split(" ")
            parts = [p for p in parts if p]
            if not parts:
                continue
            if lineno == 1 and len(parts) == 2 and all(p.isdigit() for p in parts):
                continue
            if len(parts) != dim + 1:
                raise VectorFileError(f"line {lineno}: expected {dim + 1} fields, found {len(parts)}")
            try:
                vectors[parts[0]] = [float(x) for x in parts[1:]]
            except ValueError:
                raise VectorFileError(f"line {lineno}: non-numeric vector component") from None
    return WordVectorTable(vectors, dim)


def sentence_vector(tokens: Sequence[str], table: WordVectorTable):
    """Mean vector of the in-vocabulary words, or None if every word is unknown."""
    known = [table[w] for w in tokens if w in table]
    if not known:
        return None
    return np.mean(known, axis=0)


def coherence_sim(s1: Sequence[str], s2: Sequence[str], table: WordVectorTable):
    """Cosine between mean word vectors; None when either side has no known word."""
    a, b = sentence_vector(s1, table), sentence_vector(s2, table)
    if a is None or b is None:
        return None
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return None
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def coherence_report(translations, dialogues, table: WordVectorTable, max_n: int = 3) -> dict:
    """Mean similarity of each translation to the n-th preceding reference utterance.

    ``translations[i][u-1]`` is the output for turn ``u`` of ``dialogues[i]``.
    Returns ``{"n1": ..., "n2": ..., "skipped": count}``; a row with no valid
    pair is None.
    """
    sums = [0.0] * max_n
    counts = [0] * max_n
    skipped = 0
    for hyp_turns, d in zip(translations, dialogues):
        if len(hyp_turns) != len(d):
            raise ValueError(f"dialogue {d.dialogue_id!r}: {len(hyp_turns)} translations for {len(d)} turns")
        for u in range(1, len(d) + 1):
            for n in range(1, max_n + 1):
                if u - n < 1:
                    continue
                sim = coherence_sim(hyp_turns[u - 1], d[u - n].target_tokens, table)
                if sim is None:
                    skipped += 1
                    continue
                sums[n - 1] += sim
                counts[n - 1] += 1
    report = {f"n{n}": (sums[n - 1] / counts[n - 1] if counts[n - 1] else None) for n in range(1, max_n + 1)}
    report["skipped"] = skipped
    return report
