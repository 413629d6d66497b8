import numpy as np
import pytest

from chatnct import synthetic as S
from chatnct.corpus import Speaker, validate_dialogue


def test_lexicon_is_a_bijection():
    lex = S.make_lexicon(seed=3)
    targets = [lex.table[w] for w in lex.source_words]
    assert len(set(targets)) == len(targets) == len(lex.source_words)
    assert not set(targets) & set(lex.source_words)


def test_successor_is_a_permutation():
    lex = S.make_lexicon(n_content=30)
    assert sorted(lex.successor(i) for i in range(30)) == list(range(30))
    with pytest.raises(ValueError):
        S.make_lexicon(n_content=14)


def test_dialogue_structure():
    lex = S.make_lexicon(seed=0)
    for d in S.make_chat_corpus(30, 5, lex):
        validate_dialogue(d)
        assert 4 <= len(d) <= 7
        topic = d[1].source_tokens[-2:]
        personas = {Speaker.SX: d[1].source_tokens[1], Speaker.SY: d[2].source_tokens[0]}
        assert d[1].source_tokens[0] == lex.greeting
        for u in d.utterances:
            assert u.target_tokens == lex.translate(u.source_tokens)
            assert u.source_tokens[-2:] == topic
            body = u.source_tokens[1:] if u.turn == 1 else u.source_tokens
            assert body[0] == personas[u.speaker]
            assert (lex.greeting in u.source_tokens) == (u.turn == 1)


def test_next_utterance_follows_from_history():
    lex = S.make_lexicon(seed=0)
    idx = {w: i for i, w in enumerate(lex.content)}
    for d in S.make_chat_corpus(20, 2, lex):
        for u in range(2, len(d) + 1):
            prev = [idx[w] for w in d[u - 1].source_tokens if w in idx]
            cur = [idx[w] for w in d[u].source_tokens if w in idx]
            assert cur == [lex.successor(i) for i in prev]


def test_reproducible_per_seed():
    lex = S.make_lexicon(seed=1)
    assert S.make_chat_corpus(5, 9, lex) == S.make_chat_corpus(5, 9, lex)
    assert S.make_chat_corpus(5, 9, lex) != S.make_chat_corpus(5, 10, lex)
    assert S.make_parallel_corpus(4, 2, lex) == S.make_parallel_corpus(4, 2, lex)


def test_parallel_corpus_and_vectors():
    lex = S.make_lexicon(seed=2)
    for src, tgt in S.make_parallel_corpus(50, 0, lex, min_len=2, max_len=4):
        assert 2 <= len(src) <= 4 and tgt == lex.translate(src)
    vecs = S.make_word_vectors(["a", "b"], 5, 0)
    assert set(vecs) == {"a", "b"} and all(v.shape == (5,) for v in vecs.values())
    np.testing.assert_array_equal(vecs["a"], S.make_word_vectors(["a", "b"], 5, 0)["a"])
