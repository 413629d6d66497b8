"""Synthetic bilingual chat corpora with a known translation and known dialogue structure.

Every source word translates to exactly one target word.  A dialogue has a
few topic words (two by default) that close every utterance, and one persona
word per speaker that opens each of that speaker's utterances.  The content words of turn
``u`` are a fixed function of the content words of turn ``u - 1``, so the next
utterance is predictable from the history, and only a dialogue's first
utterance opens with the greeting word.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import Dialogue, Speaker, Utterance, speaker_of_turn


@dataclass(frozen=True)
class Lexicon:
    content: tuple
    topics: tuple
    personas: tuple
    greeting: str
    table: dict             # source word -> target word

    @property
    def source_words(self) -> tuple:
        return self.content + self.topics + self.personas + (self.greeting,)

    def translate(self, tokens) -> tuple:
        return tuple(self.table[t] for t in tokens)

    def successor(self, index: int) -> int:
        n = len(self.content)
        return (7 * index + 3) % n


def make_lexicon(n_content: int = 30, n_topics: int = 40, n_personas: int = 20, seed: int = 0) -> Lexicon:
    if n_content < 2 or n_topics < 1 or n_personas < 2:
        raise ValueError("need >= 2 content words, >= 1 topic and >= 2 personas")
    if np.gcd(7, n_content) != 1:
        raise ValueError("n_content must be coprime with 7 so the successor map is a bijection")
    content = tuple(f"c{i}" for i in range(n_content))
    topics = tuple(f"t{i}" for i in range(n_topics))
    personas = tuple(f"p{i}" for i in range(n_personas))
    src = content + topics + personas + ("hi",)
    perm = np.random.default_rng(seed).permutation(len(src))
    table = {w: f"y{int(j)}" for w, j in zip(src, perm)}
    return Lexicon(content, topics, personas, "hi", table)


def make_dialogue(lex: Lexicon, rng: np.random.Generator, dialogue_id: str, min_turns: int = 4,
                  max_turns: int = 7, min_words: int = 2, max_words: int = 3, n_topic: int = 2) -> Dialogue:
    n_turns = int(rng.integers(min_turns, max_turns + 1))
    topic = tuple(lex.topics[int(i)] for i in rng.choice(len(lex.topics), size=n_topic, replace=False))
    pa, pb = rng.choice(len(lex.personas), size=2, replace=False)
    persona = {Speaker.SX: lex.personas[int(pa)], Speaker.SY: lex.personas[int(pb)]}
    words = list(rng.integers(len(lex.content), size=int(rng.integers(min_words, max_words + 1))))
    utts = []
    for u in range(1, n_turns + 1):
        if u > 1:
            words = [lex.successor(int(w)) for w in words]
        spk = speaker_of_turn(u)
        opener = (lex.greeting,) if u == 1 else ()
        src = opener + (persona[spk],) + tuple(lex.content[int(w)] for w in words) + topic
        utts.append(Utterance(u, spk, src, lex.translate(src)))
    return Dialogue(dialogue_id, tuple(utts))


def make_chat_corpus(n_dialogues: int, seed: int, lex: Lexicon | None = None, prefix: str = "d",
                     **kwargs) -> list[Dialogue]:
    lex = lex or make_lexicon()
    rng = np.random.default_rng(seed)
    return [make_dialogue(lex, rng, f"{prefix}{i}", **kwargs) for i in range(n_dialogues)]


def make_parallel_corpus(n_pairs: int, seed: int, lex: Lexicon | None = None, min_len: int = 3,
                         max_len: int = 6) -> list[tuple]:
    """Random source sentences over the whole lexicon with their word-by-word translations."""
    lex = lex or make_lexicon()
    rng = np.random.default_rng(seed)
    words = lex.source_words
    pairs = []
    for _ in range(n_pairs):
        n = int(rng.integers(min_len, max_len + 1))
        src = tuple(words[int(i)] for i in rng.integers(len(words), size=n))
        pairs.append((src, lex.translate(src)))
    return pairs


def make_word_vectors(words, dim: int, seed: int) -> dict:
    rng = np.random.default_rng(seed)
    return {w: rng.standard_normal(dim) for w in words}
