"""Bilingual dialogues, the shared vocabulary, history contexts and training samples."""

from __future__ import annotations

import enum
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

PAD, UNK, BOS, EOS, CLS, SEP = "[pad]", "[unk]", "[bos]", "[eos]", "[cls]", "[sep]"
RESERVED = (PAD, UNK, BOS, EOS, CLS, SEP)
PAD_ID, UNK_ID, BOS_ID, EOS_ID, CLS_ID, SEP_ID = range(len(RESERVED))

NEGATIVE_RETRIES = 10


class Speaker(enum.IntEnum):
    SX = 0
    SY = 1

    @classmethod
    def parse(cls, text: str) -> "Speaker":
        try:
            return {"sx": cls.SX, "sy": cls.SY}[text]
        except KeyError:
            raise ValueError(f"unknown speaker {text!r} (expected 'sx' or 'sy')") from None

    @property
    def label(self) -> str:
        return self.name.lower()

    @property
    def other(self) -> "Speaker":
        return Speaker(1 - self)


class CorpusError(ValueError):
    """A record failed validation; ``lineno`` is 1-based when known."""

    def __init__(self, message, lineno=None):
        self.lineno = lineno
        prefix = f"line {lineno}: " if lineno is not None else ""
        super().__init__(prefix + message)


@dataclass(frozen=True)
class Utterance:
    turn: int
    speaker: Speaker
    source_tokens: tuple
    target_tokens: tuple


@dataclass(frozen=True)
class Dialogue:
    dialogue_id: str
    utterances: tuple

    def __len__(self):
        return len(self.utterances)

    def __getitem__(self, turn: int) -> Utterance:
        """1-based turn lookup."""
        if not 1 <= turn <= len(self.utterances):
            raise IndexError(f"turn {turn} out of range 1..{len(self.utterances)}")
        return self.utterances[turn - 1]


def speaker_of_turn(turn: int) -> Speaker:
    return Speaker.SX if turn % 2 == 1 else Speaker.SY


def validate_dialogue(d: Dialogue, require_target=True) -> None:
    if not d.utterances:
        raise CorpusError(f"dialogue {d.dialogue_id!r} has no turns")
    for i, utt in enumerate(d.utterances, start=1):
        if utt.turn != i:
            raise CorpusError(f"dialogue {d.dialogue_id!r}: turn gap, expected turn {i} got {utt.turn}")
        if utt.speaker != speaker_of_turn(i):
            raise CorpusError(f"dialogue {d.dialogue_id!r}: speakers do not alternate at turn {i}")
        if not utt.source_tokens:
            raise CorpusError(f"dialogue {d.dialogue_id!r}: empty source text at turn {i}")
        if require_target and not utt.target_tokens:
            raise CorpusError(f"dialogue {d.dialogue_id!r}: empty target text at turn {i}")


def dialogue_from_record(record: dict, require_target=True) -> Dialogue:
    try:
        did = record["dialogue_id"]
        turns = record["turns"]
    except (KeyError, TypeError) as exc:
        raise CorpusError(f"missing field {exc}") from None
    if not isinstance(did, str) or not isinstance(turns, list):
        raise CorpusError("dialogue_id must be a string and turns a list")
    utts = []
    for t in turns:
        try:
            target = t.get("target") or ""
            utts.append(Utterance(
                turn=int(t["turn"]),
                speaker=Speaker.parse(t["speaker"]),
                source_tokens=tuple(t["source"].split()),
                target_tokens=tuple(target.split()),
            ))
        except (KeyError, TypeError, AttributeError, ValueError) as exc:
            raise CorpusError(f"dialogue {did!r}: bad turn record ({exc})") from None
    d = Dialogue(did, tuple(utts))
    validate_dialogue(d, require_target=require_target)
    return d


def parse_dialogue_corpus(lines: Iterable[str], *, skip_invalid=False, require_target=True,
                          errors: list | None = None) -> list[Dialogue]:
    """Parse line-delimited JSON dialogues.

    In fail-fast mode (default) the first bad record raises :class:`CorpusError`.
    With ``skip_invalid`` bad records are dropped and their errors appended to
    ``errors`` (and logged).
    """
    out = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"invalid JSON ({exc.msg})") from None
            out.append(dialogue_from_record(record, require_target=require_target))
        except CorpusError as exc:
            err = CorpusError(str(exc), lineno)
            if not skip_invalid:
                raise err from None
            log.warning("skipping record: %s", err)
            if errors is not None:
                errors.append(err)
    return out


def dialogue_to_record(d: Dialogue) -> dict:
    return {
        "dialogue_id": d.dialogue_id,
        "turns": [
            {"turn": u.turn, "speaker": u.speaker.label,
             "source": " ".join(u.source_tokens), "target": " ".join(u.target_tokens)}
            for u in d.utterances
        ],
    }


def serialize_dialogue(d: Dialogue) -> str:
    return json.dumps(dialogue_to_record(d), ensure_ascii=False)


def write_dialogue_corpus(dialogues: Iterable[Dialogue], fp) -> None:
    for d in dialogues:
        fp.write(serialize_dialogue(d) + "\n")


def read_dialogue_file(path, **kwargs) -> list[Dialogue]:
    with open(path, encoding="utf-8") as fp:
        return parse_dialogue_corpus(fp, **kwargs)


def parse_parallel_corpus(lines: Iterable[str]) -> list[tuple[tuple, tuple]]:
    """Sentence pairs from ``source<TAB>target`` lines."""
    pairs = []
    for lineno, line in enumerate(lines, start=1):
        line = line.rstrip("\n")
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise CorpusError("expected exactly one tab separator", lineno)
        src, tgt = parts[0].split(), parts[1].split()
        if not src or not tgt:
            raise CorpusError("empty side in sentence pair", lineno)
        pairs.append((tuple(src), tuple(tgt)))
    return pairs


def read_parallel_file(path) -> list[tuple[tuple, tuple]]:
    with open(path, encoding="utf-8") as fp:
        return parse_parallel_corpus(fp)


# ------------------------------------------------------------------ vocabulary


class Vocabulary:
    """Token <-> id bijection with the reserved markers at ids 0..5."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[: len(RESERVED)]) != RESERVED:
            raise ValueError("vocabulary must start with the reserved tokens " + " ".join(RESERVED))
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}
        if len(self.index) != len(tokens):
            raise ValueError("duplicate token in vocabulary")

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id(self, token: str, stats: Counter | None = None) -> int:
        i = self.index.get(token)
        if i is None:
            if stats is not None:
                stats["unk"] += 1
            return UNK_ID
        return i

    def encode(self, tokens: Iterable[str], stats: Counter | None = None) -> list[int]:
        return [self.id(t, stats) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        """Ids to tokens; stops at [eos], drops [pad]/[bos]."""
        out = []
        for i in ids:
            i = int(i)
            if i == EOS_ID:
                break
            if i in (PAD_ID, BOS_ID):
                continue
            out.append(self.tokens[i])
        return out

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fp:
            for t in self.tokens:
                fp.write(t + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fp:
            return cls([line.rstrip("\n") for line in fp if line.rstrip("\n")])


def build_vocabulary(dialogues: Iterable[Dialogue] = (), max_size: int = 32000, min_count: int = 1,
                     sentences: Iterable[Sequence[str]] = ()) -> Vocabulary:
    """Most frequent tokens over both language sides; ties go to the smaller string."""
    if max_size <= len(RESERVED):
        raise ValueError(f"max_size must exceed the {len(RESERVED)} reserved tokens")
    counts = Counter()
    for d in dialogues:
        for u in d.utterances:
            counts.update(u.source_tokens)
            counts.update(u.target_tokens)
    for s in sentences:
        counts.update(s)
    if not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    for t in RESERVED:
        counts.pop(t, None)
    ranked = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    return Vocabulary(list(RESERVED) + ranked[: max_size - len(RESERVED)])


# --------------------------------------------------------------------- context


@dataclass(frozen=True)
class Segment:
    """A token run with per-token speaker and (unclipped) turn metadata."""

    tokens: tuple
    speakers: tuple
    turns: tuple

    def __len__(self):
        return len(self.tokens)

    def __add__(self, other: "Segment") -> "Segment":
        return Segment(self.tokens + other.tokens, self.speakers + other.speakers, self.turns + other.turns)


def utterance_segment(tokens: Sequence[str], speaker: Speaker, turn: int) -> Segment:
    n = len(tokens)
    return Segment(tuple(tokens), (int(speaker),) * n, (turn,) * n)


def context_segment(d: Dialogue, turns: Sequence[int], side: str) -> Segment:
    """``[cls] U1 [sep] U2 ...`` over the given turns.

    [cls] gets speaker SX and turn 0; each [sep] takes the speaker and turn of
    the utterance before it.
    """
    toks, spk, trn = [CLS], [int(Speaker.SX)], [0]
    for i, t in enumerate(turns):
        utt = d[t]
        if i:
            prev = d[turns[i - 1]]
            toks.append(SEP)
            spk.append(int(prev.speaker))
            trn.append(prev.turn)
        words = utt.source_tokens if side == "source" else utt.target_tokens
        toks.extend(words)
        spk.extend([int(utt.speaker)] * len(words))
        trn.extend([utt.turn] * len(words))
    return Segment(tuple(toks), tuple(spk), tuple(trn))


@dataclass(frozen=True)
class ContextView:
    u: int
    history: tuple      # turns inside the window, ascending
    cx: tuple
    cy: tuple
    cy_sx: tuple
    cy_sy: tuple

    @property
    def sx_turns(self) -> tuple:
        return tuple(t for t in self.history if speaker_of_turn(t) == Speaker.SX)

    @property
    def sy_turns(self) -> tuple:
        return tuple(t for t in self.history if speaker_of_turn(t) == Speaker.SY)

    def speaker_turns(self, s: Speaker) -> tuple:
        return self.sx_turns if s == Speaker.SX else self.sy_turns


def make_context_view(d: Dialogue, u: int, k: int) -> ContextView:
    if not 1 <= u <= len(d):
        raise IndexError(f"turn {u} out of range 1..{len(d)}")
    if k < 0:
        raise ValueError("context window must be >= 0")
    history = tuple(range(max(1, u - k), u))
    sx = tuple(t for t in history if speaker_of_turn(t) == Speaker.SX)
    sy = tuple(t for t in history if speaker_of_turn(t) == Speaker.SY)
    return ContextView(
        u=u,
        history=history,
        cx=context_segment(d, history, "source").tokens,
        cy=context_segment(d, history, "target").tokens,
        cy_sx=context_segment(d, sx, "target").tokens,
        cy_sy=context_segment(d, sy, "target").tokens,
    )


# ------------------------------------------------------------------- examples


def clip_turns(turns: Sequence[int], max_turns: int) -> np.ndarray:
    return np.minimum(np.asarray(turns, dtype=np.int64), max_turns - 1)


@dataclass
class EncoderInput:
    """Encoder ids plus aligned speaker/turn ids and current-utterance flags."""

    ids: np.ndarray
    speakers: np.ndarray
    turns: np.ndarray
    flags: np.ndarray   # True where the position belongs to the current utterance

    def __len__(self):
        return len(self.ids)


@dataclass
class GenExample:
    """One sequence-to-sequence example (NCT, MRG, CRG or sentence-level)."""

    enc: EncoderInput
    dec_in: np.ndarray
    dec_out: np.ndarray
    task: str = "nct"

    @property
    def size(self) -> int:
        return len(self.enc) + len(self.dec_in)


def encoder_input(segment: Segment, flags, vocab: Vocabulary, max_turns: int, stats=None) -> EncoderInput:
    return EncoderInput(
        ids=np.asarray(vocab.encode(segment.tokens, stats), dtype=np.int64),
        speakers=np.asarray(segment.speakers, dtype=np.int64),
        turns=clip_turns(segment.turns, max_turns),
        flags=np.asarray(flags, dtype=bool),
    )


def joint_input(context: Segment, current: Segment, vocab, max_turns, stats=None) -> EncoderInput:
    """``[context ; current]``; an empty context ([cls] alone) joins the current segment."""
    if len(context) == 1:
        flags = [True] * (len(context) + len(current))
    else:
        flags = [False] * len(context) + [True] * len(current)
    return encoder_input(context + current, flags, vocab, max_turns, stats)


def decoder_ids(tokens: Sequence[str], vocab: Vocabulary, stats=None):
    ids = vocab.encode(tokens, stats)
    return np.asarray([BOS_ID] + ids, dtype=np.int64), np.asarray(ids + [EOS_ID], dtype=np.int64)


def make_nct_example(view: ContextView, d: Dialogue, u: int, vocab: Vocabulary, max_turns: int = 10,
                     stats: Counter | None = None) -> GenExample:
    if view.u != u:
        raise ValueError(f"view built for turn {view.u}, not {u}")
    utt = d[u]
    ctx = context_segment(d, view.history, "source")
    enc = joint_input(ctx, utterance_segment(utt.source_tokens, utt.speaker, u), vocab, max_turns, stats)
    dec_in, dec_out = decoder_ids(utt.target_tokens, vocab, stats)
    return GenExample(enc, dec_in, dec_out, "nct")


def _context_only(segment: Segment, vocab, max_turns, stats) -> EncoderInput:
    return encoder_input(segment, [True] * len(segment), vocab, max_turns, stats)


def make_mrg_example(view: ContextView, d: Dialogue, u: int, vocab: Vocabulary, max_turns: int = 10,
                     stats=None) -> GenExample:
    """Encoder sees the target-side history alone; decoder predicts Y_u."""
    enc = _context_only(context_segment(d, view.history, "target"), vocab, max_turns, stats)
    dec_in, dec_out = decoder_ids(d[u].target_tokens, vocab, stats)
    return GenExample(enc, dec_in, dec_out, "mrg")


def make_crg_example(view: ContextView, d: Dialogue, u: int, vocab: Vocabulary, max_turns: int = 10,
                     stats=None) -> GenExample:
    """Encoder sees the source-side history alone; decoder predicts Y_u."""
    enc = _context_only(context_segment(d, view.history, "source"), vocab, max_turns, stats)
    dec_in, dec_out = decoder_ids(d[u].target_tokens, vocab, stats)
    return GenExample(enc, dec_in, dec_out, "crg")


def make_sentence_example(src: Sequence[str], tgt: Sequence[str], vocab: Vocabulary, max_turns: int = 10,
                          stats=None) -> GenExample:
    """Stage-1 example: ``[cls] X`` as a single segment (speaker SX, turn 1)."""
    ctx = Segment((CLS,), (int(Speaker.SX),), (0,))
    enc = joint_input(ctx, utterance_segment(src, Speaker.SX, 1), vocab, max_turns, stats)
    dec_in, dec_out = decoder_ids(tgt, vocab, stats)
    return GenExample(enc, dec_in, dec_out, "nct")


def truncate_example(ex: GenExample, max_pos: int) -> GenExample:
    """Fit encoder and decoder into ``max_pos`` positions.

    Context is dropped first (keeping [cls]), then the utterance tail.
    """
    enc = ex.enc
    n = len(enc)
    if n > max_pos:
        log.warning("encoder input of %d tokens exceeds max_pos=%d; truncating", n, max_pos)
        keep = np.ones(n, dtype=bool)
        excess = n - max_pos
        ctx_pos = [i for i in range(1, n) if not enc.flags[i]]
        for i in ctx_pos[:excess]:
            keep[i] = False
        excess -= min(excess, len(ctx_pos))
        if excess:
            cur = np.nonzero(keep)[0]
            keep[cur[len(cur) - excess:]] = False
        enc = EncoderInput(enc.ids[keep], enc.speakers[keep], enc.turns[keep], enc.flags[keep])
        if not enc.flags.any():
            enc.flags[:] = True
    dec_in, dec_out = ex.dec_in, ex.dec_out
    if len(dec_in) > max_pos:
        log.warning("target of %d tokens exceeds max_pos=%d; truncating", len(dec_in), max_pos)
        dec_in, dec_out = dec_in[:max_pos], dec_out[:max_pos]
    return GenExample(enc, dec_in, dec_out, ex.task)


# ---------------------------------------------------------- NUD / SI samples


@dataclass(frozen=True)
class PairSample:
    """A (context, candidate utterance, label) pair for the binary tasks.

    The candidate is placed in the slot of turn ``turn`` spoken by ``speaker``.
    """

    context: Segment
    candidate_tokens: tuple
    label: int
    speaker: Speaker
    turn: int
    task: str

    @property
    def context_tokens(self) -> tuple:
        return self.context.tokens

    def to_record(self) -> dict:
        return {"task": self.task, "context": " ".join(self.context.tokens),
                "candidate": " ".join(self.candidate_tokens), "label": self.label,
                "speaker": self.speaker.label, "turn": self.turn}


NudSample = SiSample = PairSample


@dataclass
class UtterancePool:
    """All target utterances of a corpus, addressable as (dialogue index, turn)."""

    dialogues: Sequence[Dialogue]
    keys: list = field(init=False)
    position: dict = field(init=False)

    def __post_init__(self):
        self.keys = [(i, u.turn) for i, d in enumerate(self.dialogues) for u in d.utterances]
        self.position = {k: j for j, k in enumerate(self.keys)}

    def __len__(self):
        return len(self.keys)

    def tokens(self, j: int) -> tuple:
        i, t = self.keys[j]
        return self.dialogues[i][t].target_tokens


def draw_negative(pool: UtterancePool, own_index: int, own_tokens: tuple, rng: np.random.Generator,
                  stats: Counter | None = None):
    """Uniform over every pool entry except ``own_index``; token-identical draws are retried."""
    n = len(pool)
    if n < 2:
        if stats is not None:
            stats["nud_no_negative"] += 1
        return None
    for _ in range(NEGATIVE_RETRIES):
        j = int(rng.integers(n - 1))
        if j >= own_index:
            j += 1
        cand = pool.tokens(j)
        if cand != own_tokens:
            return cand
        if stats is not None:
            stats["nud_collision"] += 1
    if stats is not None:
        stats["nud_skipped"] += 1
    return None


def make_nud_samples(view: ContextView, d: Dialogue, u: int, pool: UtterancePool, rng: np.random.Generator,
                     dialogue_index: int | None = None, stats: Counter | None = None):
    """``(positive, negative)`` over C_Yu, or ``None`` when no negative can be drawn."""
    utt = d[u]
    if dialogue_index is None:
        dialogue_index = next(i for i, x in enumerate(pool.dialogues) if x is d)
    own = pool.position[(dialogue_index, u)]
    neg = draw_negative(pool, own, utt.target_tokens, rng, stats)
    if neg is None:
        return None
    ctx = context_segment(d, view.history, "target")
    pos = PairSample(ctx, utt.target_tokens, 1, utt.speaker, u, "nud")
    return pos, PairSample(ctx, tuple(neg), 0, utt.speaker, u, "nud")


def make_si_samples(view: ContextView, d: Dialogue, u: int):
    """``(positive, negative)`` speaker pairs for Y_u, or ``None`` if either history is empty."""
    utt = d[u]
    same, other = view.speaker_turns(utt.speaker), view.speaker_turns(utt.speaker.other)
    if not same or not other:
        return None
    pos = PairSample(context_segment(d, same, "target"), utt.target_tokens, 1, utt.speaker, u, "si")
    neg = PairSample(context_segment(d, other, "target"), utt.target_tokens, 0, utt.speaker, u, "si")
    return pos, neg


def pair_inputs(sample: PairSample, vocab: Vocabulary, max_turns: int = 10, stats=None):
    """Encoder inputs for a pair: joint ``[C ; Y]`` plus the standalone pieces.

    Returns ``(joint, context_alone, candidate_alone)``.
    """
    cand = utterance_segment(sample.candidate_tokens, sample.speaker, sample.turn)
    joint = encoder_input(sample.context + cand, [False] * len(sample.context) + [True] * len(cand),
                          vocab, max_turns, stats)
    ctx = _context_only(sample.context, vocab, max_turns, stats)
    alone = _context_only(cand, vocab, max_turns, stats)
    return joint, ctx, alone
