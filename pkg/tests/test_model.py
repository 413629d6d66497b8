import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chatnct import autodiff as ad
from chatnct.autodiff import Tensor
from chatnct.corpus import CLS_ID, EncoderInput
from oracles import decoder_ref, encoder_ref
from chatnct.model import (ChatTranslator, ModelConfig, cross_mask, encoder_masks, parameter_shapes,
                           pad_encoder_inputs, sinusoidal_positions)


def tiny(seed=0, **kw):
    cfg = dict(vocab_size=11, layers=2, d_model=8, d_ff=12, heads=2, max_turns=4, max_pos=16, dropout=0.0,
               init_std=0.4)
    cfg.update(kw)
    model = ChatTranslator(ModelConfig(**cfg), seed=seed)
    rng = np.random.default_rng(seed + 99)
    for p in model.params.values():
        if p.data.ndim == 1:
            p.data += rng.normal(0, 0.2, p.data.shape)
    return model


def enc_input(ids, flags, speakers=None, turns=None):
    n = len(ids)
    return EncoderInput(np.asarray(ids), np.asarray(speakers or [0] * n), np.asarray(turns or [1] * n),
                        np.asarray(flags, dtype=bool))


def test_encoder_matches_reference_two_layers():
    model = tiny(1)
    ids, spk, trn = np.array([CLS_ID, 7, 8]), np.array([0, 1, 1]), np.array([0, 2, 2])
    flags = np.array([False, True, True])
    out = model.encode([EncoderInput(ids, spk, trn, flags)]).states.data[0]
    np.testing.assert_allclose(out, encoder_ref(model, ids, spk, trn, flags), atol=1e-10, rtol=0)


def test_decoder_matches_reference_one_layer():
    model = tiny(2, layers=1)
    ids, flags = np.array([CLS_ID, 6, 9, 7]), np.array([False, False, True, True])
    enc = model.encode([EncoderInput(ids, np.zeros(4, int), np.array([0, 1, 2, 2]), flags)])
    dec = np.array([2, 6, 10])
    out = model.decode(dec, enc).data[0]
    ref = decoder_ref(model, dec, enc.states.data[0], flags)
    np.testing.assert_allclose(out, ref, atol=1e-10, rtol=0)


def test_padding_does_not_change_outputs():
    model = tiny(3)
    a = enc_input([CLS_ID, 6, 7], [False, True, True])
    b = enc_input([CLS_ID, 8, 6, 9, 10, 7], [False, False, False, True, True, True])
    batched = model.encode([a, b]).states.data
    alone = model.encode([a]).states.data
    np.testing.assert_allclose(batched[0, :3], alone[0], atol=1e-12)


# ------------------------------------------------------------------- embedding


def test_embed_zero_tables_and_one_hot():
    model = tiny(0, d_model=16, vocab_size=16, heads=2)
    for k in ("emb.word", "emb.speaker", "emb.turn"):
        model.params[k].data[:] = 0
    model._pe[:] = 0
    assert np.all(model.embed([[3, 4]], None, [[0, 1]], [[1, 2]]).data == 0)
    model.params["emb.word"].data[:] = np.eye(16)
    np.testing.assert_array_equal(model.embed([[5]]).data[0, 0], np.eye(16)[5])


def test_embed_row_sum_oracle():
    model = tiny(4)
    P = model.params
    out = model.embed([[9]], [[0]], [[0]], [[1]]).data[0, 0]
    expected = P["emb.word"].data[9] + sinusoidal_positions(16, 8)[0] + P["emb.speaker"].data[0] + P["emb.turn"].data[1]
    np.testing.assert_allclose(out, expected, atol=1e-15)


def test_embed_out_of_range():
    model = tiny()
    with pytest.raises(IndexError):
        model.embed([[11]])
    with pytest.raises(IndexError):
        model.embed([[1]], [[16]])


def test_empty_sequence_rejected():
    model = tiny()
    with pytest.raises(ValueError):
        model.encode([enc_input([], [])])
    enc = model.encode([enc_input([CLS_ID, 5], [True, True])])
    with pytest.raises(ValueError):
        model.decode(np.zeros((1, 0), int), enc)


# ----------------------------------------------------------------------- masks


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 4), st.integers(1, 9), st.integers(1, 4), st.data())
def test_mask_structure(B, T, layers, data):
    flags = np.array(data.draw(st.lists(st.lists(st.booleans(), min_size=T, max_size=T), min_size=B, max_size=B)))
    lengths = data.draw(st.lists(st.integers(1, T), min_size=B, max_size=B))
    valid = np.arange(T)[None, :] < np.array(lengths)[:, None]
    masks = encoder_masks(flags, valid, layers)
    assert len(masks) == layers
    for b in range(B):
        for i in range(lengths[b]):
            for j in range(lengths[b]):
                assert masks[0][b, i, j]
                for m in masks[1:]:
                    assert m[b, i, j] == (flags[b, i] == flags[b, j])
            for m in masks:
                assert not m[b, i, lengths[b]:].any()
    cm = cross_mask(flags, valid, 3)
    np.testing.assert_array_equal(cm, np.broadcast_to((flags & valid)[:, None, :], (B, 3, T)))


def test_context_reaches_utterance_only_through_layer_one():
    model = tiny(5)
    base = [CLS_ID, 6, 7, 8]
    flags = [False, False, True, True]
    h0 = model.encode([enc_input(base, flags)]).states.data
    h1 = model.encode([enc_input([CLS_ID, 9, 7, 8], flags)]).states.data
    assert not np.allclose(h0[0, 2:], h1[0, 2:])   # layer-1 mixing is present
    masks = model.encoder_masks(pad_encoder_inputs([enc_input(base, flags)]))
    assert masks[0][0, 2:, :2].all() and not masks[1][0, 2:, :2].any() and not masks[1][0, :2, 2:].any()


def test_cross_attention_ignores_context_states():
    model = tiny(6)
    flags = [False, False, True, True]
    enc = model.encode([enc_input([CLS_ID, 6, 7, 8], flags)])
    out = model.decode([[2, 5]], enc).data
    enc.states.data[0, :2] += 100.0
    np.testing.assert_array_equal(model.decode([[2, 5]], enc).data, out)


def test_decoder_is_causal():
    model = tiny(7)
    enc = model.encode([enc_input([CLS_ID, 6, 7], [True] * 3)])
    a = model.project(model.decode([[2, 6, 7, 8]], enc)).data
    b = model.project(model.decode([[2, 6, 9, 10]], enc)).data
    np.testing.assert_allclose(a[0, :2], b[0, :2], atol=1e-14)
    assert model.decode([[2]], enc).shape == (1, 1, 8)


# ------------------------------------------------------------------------ heads


def test_project_zero_head_is_uniform():
    model = tiny()
    model.params["head.main.w"].data[:] = 0
    model.params["head.main.b"].data[:] = 0
    logits = model.project(Tensor(np.random.default_rng(0).normal(size=(1, 3, 8))))
    np.testing.assert_allclose(ad.softmax(logits).data, 1 / 11)


def test_heads_are_distinct_unless_shared():
    model = tiny()
    h = Tensor(np.random.default_rng(1).normal(size=(1, 2, 8)))
    assert not np.allclose(model.project(h, "main").data, model.project(h, "mrg").data)
    shared = tiny(share_aux_heads_with_main=True)
    np.testing.assert_array_equal(shared.project(h, "crg").data, shared.project(h, "main").data)
    with pytest.raises(ValueError):
        model.project(h, "nud")


def test_project_dot_product_oracle():
    model = tiny(vocab_size=5, heads=2)
    h = np.random.default_rng(2).normal(size=8)
    W, b = model.params["head.mrg.w"].data, model.params["head.mrg.b"].data
    got = model.project(Tensor(h[None, :]), "mrg").data[0]
    assert got == pytest.approx([sum(W[v, i] * h[i] for i in range(8)) + b[v] for v in range(5)], abs=1e-12)


def test_pool_and_cls():
    rng = np.random.default_rng(3)
    s = rng.normal(size=(1, 4, 8))
    one = ChatTranslator.pool_utterance(Tensor(s), np.array([[False, True, False, False]])).data
    np.testing.assert_array_equal(one[0], s[0, 1])
    three = ChatTranslator.pool_utterance(Tensor(s), np.array([[False, True, True, True]])).data
    np.testing.assert_allclose(three[0], (s[0, 1] + s[0, 2] + s[0, 3]) / 3, atol=1e-15)
    model = tiny()
    enc = model.encode([enc_input([CLS_ID, 6, 7], [False, True, True])])
    np.testing.assert_array_equal(model.cls_state(enc).data[0], enc.states.data[0, 0])
    with pytest.raises(ValueError):
        model.cls_state(model.encode([enc_input([6, 7], [True, True])]))


def test_classify():
    model = tiny()
    rng = np.random.default_rng(4)
    hy, hc = Tensor(rng.normal(size=(5, 8))), Tensor(rng.normal(size=(5, 8)))
    p = model.classify(hy, hc, "nud").data
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-9)
    W, b = model.params["cls.si.w"].data, model.params["cls.si.b"].data
    z = np.concatenate([hy.data[0], hc.data[0]])
    logits = [float(np.dot(W[c], z) + b[c]) for c in range(2)]
    oracle = np.exp(logits) / np.sum(np.exp(logits))
    np.testing.assert_allclose(model.classify(hy, hc, "si").data[0], oracle, atol=1e-14)
    model.params["cls.nud.w"].data[:] = 0
    model.params["cls.nud.b"].data[:] = 0
    np.testing.assert_allclose(model.classify(hy, hc, "nud").data, 0.5)


# ---------------------------------------------------------------- parameter sets


def test_theta_is_strict_subset_and_shapes_match():
    model = tiny()
    shapes = parameter_shapes(model.config)
    assert set(model.params) == set(shapes)
    assert all(model.params[k].shape == s for k, s in shapes.items())
    aux = set(model.aux())
    assert aux == {"head.mrg.w", "head.mrg.b", "head.crg.w", "head.crg.b", "cls.nud.w", "cls.nud.b",
                   "cls.si.w", "cls.si.b"}
    assert set(model.theta()) | aux == set(model.params) and not set(model.theta()) & aux


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=10, d_model=10, heads=3)
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=10, max_turns=0)
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=10, dropout=1.0)
    cfg = ModelConfig(vocab_size=10)
    assert ModelConfig.from_dict(cfg.to_dict() | {"unrelated": 1}) == cfg


def test_default_init_convention():
    model = ChatTranslator(ModelConfig(vocab_size=50, d_model=32, heads=4), seed=0)
    w = model.params["enc.0.self.wq"].data
    assert np.abs(w).max() <= 0.04 + 1e-12 and 0.012 < w.std() < 0.02
    assert np.all(model.params["enc.0.self.bq"].data == 0)
    assert np.all(model.params["enc.0.ln1.g"].data == 1)


def test_dropout_only_in_training():
    model = tiny(dropout=0.5)
    x = [enc_input([CLS_ID, 6, 7], [True] * 3)]
    a = model.encode(x).states.data
    np.testing.assert_array_equal(model.encode(x).states.data, a)
    model.train()
    assert not np.allclose(model.encode(x).states.data, a)


def test_pair_encodings():
    model = tiny()
    ctx = enc_input([CLS_ID, 6, 7], [True] * 3)
    cand = enc_input([8, 9], [True] * 2)
    joint = enc_input([CLS_ID, 6, 7, 8, 9], [False, False, False, True, True])
    hy, hc = model.pair_representations([joint], [ctx], [cand])
    enc = model.encode([joint]).states.data[0]
    np.testing.assert_allclose(hy.data[0], enc[3:].mean(0), atol=1e-14)
    np.testing.assert_array_equal(hc.data[0], enc[0])
    sep = tiny(pair_encoding="separate")
    hy, hc = sep.pair_representations([joint], [ctx], [cand])
    np.testing.assert_allclose(hy.data[0], sep.encode([cand]).states.data[0].mean(0), atol=1e-14)
    np.testing.assert_array_equal(hc.data[0], sep.encode([ctx]).states.data[0, 0])
