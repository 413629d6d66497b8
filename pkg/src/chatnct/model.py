"""Context-gated transformer translator with response-generation and classifier heads.

Layer layout is pre-norm: ``z = SelfAtt(LN(h)) + h; h' = FFN(LN(z)) + z``, so
the residual stream follows the plain sum form and a final layer norm closes
each stack.  Weight matrices are stored ``[out, in]``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import CLS_ID, PAD_ID, EncoderInput

HEADS = ("main", "mrg", "crg")
CLASSIFIERS = ("nud", "si")
AUX_PREFIXES = ("head.mrg.", "head.crg.", "cls.nud.", "cls.si.")
NEG_INF = -1e30


@dataclass
class ModelConfig:
    vocab_size: int
    layers: int = 2
    d_model: int = 32
    d_ff: int = 64
    heads: int = 4
    max_turns: int = 10
    max_pos: int = 128
    dropout: float = 0.1
    share_aux_heads_with_main: bool = False
    cross_attend_context: bool = False
    pair_encoding: str = "joint"
    init_std: float = 0.02
    emb_init_std: float | None = None
    ln_eps: float = 1e-6
    dtype: str = "float64"

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.max_turns < 1 or self.layers < 1 or self.vocab_size < 1:
            raise ValueError("max_turns, layers and vocab_size must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.pair_encoding not in ("joint", "separate"):
            raise ValueError(f"pair_encoding must be 'joint' or 'separate', got {self.pair_encoding!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in names})


def is_aux(name: str) -> bool:
    return name.startswith(AUX_PREFIXES)


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def parameter_shapes(cfg: ModelConfig) -> dict:
    d, f, V = cfg.d_model, cfg.d_ff, cfg.vocab_size
    shapes = {"emb.word": (V, d), "emb.speaker": (2, d), "emb.turn": (cfg.max_turns, d)}

    def attn(prefix):
        for m in ("q", "k", "v", "o"):
            shapes[f"{prefix}.w{m}"] = (d, d)
            shapes[f"{prefix}.b{m}"] = (d,)

    def ln(prefix):
        shapes[f"{prefix}.g"] = (d,)
        shapes[f"{prefix}.b"] = (d,)

    def ffn(prefix):
        shapes.update({f"{prefix}.w1": (f, d), f"{prefix}.b1": (f,), f"{prefix}.w2": (d, f), f"{prefix}.b2": (d,)})

    for l in range(cfg.layers):
        ln(f"enc.{l}.ln1"); attn(f"enc.{l}.self"); ln(f"enc.{l}.ln2"); ffn(f"enc.{l}.ffn")
    ln("enc.ln_f")
    for l in range(cfg.layers):
        ln(f"dec.{l}.ln1"); attn(f"dec.{l}.self"); ln(f"dec.{l}.ln2"); attn(f"dec.{l}.cross")
        ln(f"dec.{l}.ln3"); ffn(f"dec.{l}.ffn")
    ln("dec.ln_f")
    heads = HEADS if not cfg.share_aux_heads_with_main else ("main",)
    for h in heads:
        shapes[f"head.{h}.w"] = (V, d)
        shapes[f"head.{h}.b"] = (V,)
    for c in CLASSIFIERS:
        shapes[f"cls.{c}.w"] = (2, 2 * d)
        shapes[f"cls.{c}.b"] = (2,)
    return shapes


def init_parameter(name: str, shape, cfg: ModelConfig, rng: np.random.Generator) -> np.ndarray:
    if name.endswith(".g") and len(shape) == 1:
        return np.ones(shape)
    if len(shape) == 1:
        return np.zeros(shape)
    std = cfg.init_std
    if name.startswith("emb.") and cfg.emb_init_std is not None:
        std = cfg.emb_init_std
    return truncated_normal(rng, shape, std)


def init_parameters(cfg: ModelConfig, rng: np.random.Generator, names: Sequence[str] | None = None) -> dict:
    dtype = np.dtype(cfg.dtype)
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        if names is not None and name not in names:
            continue
        params[name] = Tensor(init_parameter(name, shape, cfg, rng).astype(dtype), requires_grad=True, name=name)
    return params


# ------------------------------------------------------------------- batching


@dataclass
class EncoderBatch:
    ids: np.ndarray       # [B, T]
    speakers: np.ndarray
    turns: np.ndarray
    flags: np.ndarray     # current-utterance positions
    valid: np.ndarray     # non-pad positions

    @property
    def shape(self):
        return self.ids.shape


def pad_encoder_inputs(items: Sequence[EncoderInput]) -> EncoderBatch:
    if not items:
        raise ValueError("empty batch")
    T = max(len(x) for x in items)
    if T == 0:
        raise ValueError("empty encoder sequence")
    B = len(items)
    ids = np.full((B, T), PAD_ID, dtype=np.int64)
    spk = np.zeros((B, T), dtype=np.int64)
    trn = np.zeros((B, T), dtype=np.int64)
    flags = np.zeros((B, T), dtype=bool)
    valid = np.zeros((B, T), dtype=bool)
    for b, x in enumerate(items):
        n = len(x)
        if n == 0:
            raise ValueError("empty encoder sequence")
        ids[b, :n], spk[b, :n], trn[b, :n], flags[b, :n] = x.ids, x.speakers, x.turns, x.flags
        valid[b, :n] = True
    return EncoderBatch(ids, spk, trn, flags, valid)


def pad_sequences(seqs: Sequence[np.ndarray], pad=PAD_ID) -> np.ndarray:
    T = max(len(s) for s in seqs)
    out = np.full((len(seqs), T), pad, dtype=np.int64)
    for b, s in enumerate(seqs):
        out[b, : len(s)] = s
    return out


# ---------------------------------------------------------------------- masks


def encoder_masks(flags: np.ndarray, valid: np.ndarray, layers: int) -> list:
    """Per-layer visibility ``[B, T, T]`` (query, key); True means the edge exists.

    Layer 1 sees every non-pad key.  From layer 2 on, queries only see keys of
    their own segment (context vs current utterance).  Padded queries see all
    non-pad keys; their outputs are never read.
    """
    keys = valid[:, None, :]
    full = np.broadcast_to(keys, valid.shape + (valid.shape[1],))
    same = flags[:, :, None] == flags[:, None, :]
    gated = keys & np.where(valid[:, :, None], same, True)
    return [full] + [gated] * (layers - 1)


def cross_mask(flags: np.ndarray, valid: np.ndarray, tq: int, include_context=False) -> np.ndarray:
    """Decoder-to-encoder visibility ``[B, tq, T]``."""
    keys = valid if include_context else (valid & flags)
    return np.broadcast_to(keys[:, None, :], (keys.shape[0], tq, keys.shape[1]))


def causal_mask(dec_ids: np.ndarray) -> np.ndarray:
    B, t = dec_ids.shape
    tri = np.tril(np.ones((t, t), dtype=bool))
    keys = dec_ids != PAD_ID
    keys[:, 0] = True
    return tri[None, :, :] & keys[:, None, :]


@dataclass
class EncoderOutput:
    states: Tensor        # [B, T, d] top-layer states
    flags: np.ndarray
    valid: np.ndarray
    ids: np.ndarray


class ChatTranslator:
    """The translation model plus auxiliary heads.

    ``params`` maps names to leaf tensors.  Dropout draws from ``self.rng``
    and is active only while ``self.training`` is true.
    """

    def __init__(self, config: ModelConfig, params: dict | None = None, seed: int = 0):
        self.config = config
        self.dtype = np.dtype(config.dtype)
        self.params = params if params is not None else init_parameters(config, np.random.default_rng(seed))
        self.training = False
        self.rng = np.random.default_rng(seed + 1)
        self._pe = sinusoidal_positions(config.max_pos, config.d_model).astype(self.dtype)

    # -- parameter sets -----------------------------------------------------

    def theta(self) -> dict:
        return {k: v for k, v in self.params.items() if not is_aux(k)}

    def aux(self) -> dict:
        return {k: v for k, v in self.params.items() if is_aux(k)}

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def train(self, mode=True):
        self.training = mode
        return self

    def eval(self):
        return self.train(False)

    # -- building blocks -----------------------------------------------------

    def _p(self, name) -> Tensor:
        return self.params[name]

    def _linear(self, x: Tensor, prefix_w: str, prefix_b: str) -> Tensor:
        return ad.linear(x, self._p(prefix_w), self._p(prefix_b))

    def _ln(self, x: Tensor, prefix: str) -> Tensor:
        return ad.layer_norm(x, self._p(prefix + ".g"), self._p(prefix + ".b"), self.config.ln_eps)

    def _dropout(self, x: Tensor) -> Tensor:
        return ad.dropout(x, self.config.dropout, self.rng, self.training)

    def _attention(self, prefix: str, xq: Tensor, xkv: Tensor, visible: np.ndarray) -> Tensor:
        cfg = self.config
        B, tq, d = xq.shape
        tk = xkv.shape[1]
        H, dh = cfg.heads, d // cfg.heads

        def split(x, t):
            return ad.transpose(ad.reshape(x, (B, t, H, dh)), (0, 2, 1, 3))

        q = split(self._linear(xq, prefix + ".wq", prefix + ".bq"), tq)
        k = split(self._linear(xkv, prefix + ".wk", prefix + ".bk"), tk)
        v = split(self._linear(xkv, prefix + ".wv", prefix + ".bv"), tk)
        scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(dh))
        bias = np.where(visible, 0.0, NEG_INF).astype(self.dtype)[:, None, :, :]
        scores = ad.add(scores, Tensor(np.broadcast_to(bias, scores.shape)))
        weights = self._dropout(ad.softmax(scores, axis=-1))
        ctx = ad.reshape(ad.transpose(ad.matmul(weights, v), (0, 2, 1, 3)), (B, tq, d))
        return self._linear(ctx, prefix + ".wo", prefix + ".bo")

    def _ffn(self, prefix: str, x: Tensor) -> Tensor:
        h = ad.relu(self._linear(x, prefix + ".w1", prefix + ".b1"))
        return self._linear(self._dropout(h), prefix + ".w2", prefix + ".b2")

    # -- public operations ----------------------------------------------------

    def embed(self, ids, positions=None, speaker_ids=None, turn_ids=None) -> Tensor:
        """``WE[id] + PE[pos] + SE[speaker] + TE[turn]``; SE/TE are skipped when None."""
        ids = np.asarray(ids, dtype=np.int64)
        if positions is None:
            positions = np.broadcast_to(np.arange(ids.shape[-1]), ids.shape)
        positions = np.asarray(positions)
        if positions.max(initial=0) >= self.config.max_pos:
            raise IndexError(f"position {positions.max()} exceeds max_pos={self.config.max_pos}")
        x = ad.embedding(self._p("emb.word"), ids)
        x = ad.add(x, Tensor(self._pe[positions]))
        if speaker_ids is not None:
            x = ad.add(x, ad.embedding(self._p("emb.speaker"), speaker_ids))
        if turn_ids is not None:
            x = ad.add(x, ad.embedding(self._p("emb.turn"), turn_ids))
        return self._dropout(x)

    def encoder_masks(self, batch: EncoderBatch) -> list:
        return encoder_masks(batch.flags, batch.valid, self.config.layers)

    def encode(self, batch: EncoderBatch | Sequence[EncoderInput]) -> EncoderOutput:
        if not isinstance(batch, EncoderBatch):
            batch = pad_encoder_inputs(batch)
        if batch.ids.shape[1] == 0:
            raise ValueError("cannot encode an empty sequence")
        h = self.embed(batch.ids, None, batch.speakers, batch.turns)
        for l, visible in enumerate(self.encoder_masks(batch)):
            p = f"enc.{l}"
            x = self._ln(h, p + ".ln1")
            z = ad.add(h, self._dropout(self._attention(p + ".self", x, x, visible)))
            h = ad.add(z, self._dropout(self._ffn(p + ".ffn", self._ln(z, p + ".ln2"))))
        return EncoderOutput(self._ln(h, "enc.ln_f"), batch.flags, batch.valid, batch.ids)

    def decode(self, dec_ids, enc: EncoderOutput) -> Tensor:
        dec_ids = np.asarray(dec_ids, dtype=np.int64)
        if dec_ids.ndim == 1:
            dec_ids = dec_ids[None, :]
        if dec_ids.shape[1] == 0:
            raise ValueError("decoder prefix must be non-empty")
        t = dec_ids.shape[1]
        self_vis = causal_mask(dec_ids)
        cross_vis = cross_mask(enc.flags, enc.valid, t, self.config.cross_attend_context)
        h = self.embed(dec_ids)
        for l in range(self.config.layers):
            p = f"dec.{l}"
            x = self._ln(h, p + ".ln1")
            z = ad.add(h, self._dropout(self._attention(p + ".self", x, x, self_vis)))
            c = ad.add(z, self._dropout(self._attention(p + ".cross", self._ln(z, p + ".ln2"), enc.states, cross_vis)))
            h = ad.add(c, self._dropout(self._ffn(p + ".ffn", self._ln(c, p + ".ln3"))))
        return self._ln(h, "dec.ln_f")

    def project(self, states: Tensor, head: str = "main") -> Tensor:
        if head not in HEADS:
            raise ValueError(f"unknown head {head!r}; expected one of {HEADS}")
        if self.config.share_aux_heads_with_main:
            head = "main"
        return self._linear(states, f"head.{head}.w", f"head.{head}.b")

    @staticmethod
    def pool_utterance(states: Tensor, mask) -> Tensor:
        """Mean of the top-layer states over the utterance positions -> [B, d]."""
        return ad.masked_mean(states, mask)

    @staticmethod
    def cls_state(enc: EncoderOutput) -> Tensor:
        if not np.all(enc.ids[:, 0] == CLS_ID):
            raise ValueError("cls_state: input does not begin with [cls]")
        return enc.states[:, 0, :]

    def classifier_logits(self, h_y: Tensor, h_c: Tensor, head: str) -> Tensor:
        if head not in CLASSIFIERS:
            raise ValueError(f"unknown classifier {head!r}; expected one of {CLASSIFIERS}")
        return self._linear(ad.concat([h_y, h_c], axis=-1), f"cls.{head}.w", f"cls.{head}.b")

    def classify(self, h_y: Tensor, h_c: Tensor, head: str) -> Tensor:
        """``softmax(W [H_Y; H_C] + b)`` -> ``[B, 2]`` with columns (p(0), p(1))."""
        return ad.softmax(self.classifier_logits(h_y, h_c, head), axis=-1)

    def pair_representations(self, joint: Sequence[EncoderInput], context: Sequence[EncoderInput],
                             candidate: Sequence[EncoderInput]):
        """``(H_Y, H_C)`` for a batch of context/candidate pairs."""
        if self.config.pair_encoding == "joint":
            batch = pad_encoder_inputs(joint)
            enc = self.encode(batch)
            return self.pool_utterance(enc.states, batch.flags & batch.valid), self.cls_state(enc)
        enc_c = self.encode(context)
        cand = pad_encoder_inputs(candidate)
        enc_y = self.encode(cand)
        return self.pool_utterance(enc_y.states, cand.valid), self.cls_state(enc_c)

    def generation_logits(self, enc_inputs: Sequence[EncoderInput], dec_in: Sequence[np.ndarray],
                          head: str = "main") -> Tensor:
        enc = self.encode(enc_inputs)
        return self.project(self.decode(pad_sequences(dec_in), enc), head)
