"""Finite-difference check of the joint training objective on a toy model."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import synthetic
from .corpus import UtterancePool, build_vocabulary
from .model import ChatTranslator, ModelConfig
from .objectives import ChatBatch, compute_losses
from .trainer import build_turn_units, nud_pair


@dataclass
class GradcheckReport:
    seed: int
    max_rel_error: float
    worst_param: str
    n_params: int
    n_checked: int
    seconds: float
    per_param: dict


def toy_problem(seed: int):
    """A float64 model under 5k parameters plus one batch exercising all five losses."""
    rng = np.random.default_rng(seed)
    lex = synthetic.make_lexicon(n_content=3, n_topics=2, n_personas=2, seed=seed)
    dialogues = synthetic.make_chat_corpus(3, seed, lex, min_turns=3, max_turns=4, min_words=1, max_words=2,
                                           n_topic=1)
    vocab = build_vocabulary(dialogues)
    cfg = ModelConfig(vocab_size=len(vocab), layers=2, d_model=8, d_ff=16, heads=2, max_turns=4, max_pos=32,
                      dropout=0.0, init_std=0.5, dtype="float64")
    model = ChatTranslator(cfg, seed=seed)
    for p in model.params.values():      # non-trivial biases and gains
        if p.data.ndim == 1:
            p.data += rng.normal(0.0, 0.1, p.data.shape)
    units = build_turn_units(dialogues, vocab, cfg, k=2)
    pool = UtterancePool(dialogues)
    chosen = [units[i] for i in sorted(rng.choice(len(units), size=min(4, len(units)), replace=False))]
    nud = [p for p in (nud_pair(u, dialogues, pool, vocab, cfg, rng) for u in chosen) if p]
    si = [u.si for u in units if u.si is not None][:2]
    batch = ChatBatch([u.nct for u in chosen], [u.mrg for u in chosen], [u.crg for u in chosen], nud, si)
    alpha, beta = (float(x) for x in rng.uniform(0.2, 1.0, size=2))
    return model, batch, alpha, beta


def run_gradcheck(seed: int, step: float = 1e-5, max_coords: int | None = 4, smoothing: float = 0.1,
                  floor: float = 1e-6) -> GradcheckReport:
    """Compare backprop and central differences of J on sampled coordinates of every tensor.

    ``max_coords=None`` checks every coordinate.
    """
    t0 = time.perf_counter()
    model, batch, alpha, beta = toy_problem(seed)
    model.eval()

    def J():
        return compute_losses(batch, model, alpha, beta, smoothing).joint

    loss = J()
    model.zero_grad()
    ad.backward(loss)
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in model.params.items()}
    rng = np.random.default_rng(seed + 1000)
    per_param, checked = {}, 0
    with ad.no_grad():
        for name, p in model.params.items():
            flat = p.data.reshape(-1)
            n = flat.size
            idx = np.arange(n) if max_coords is None or n <= max_coords else rng.choice(n, max_coords, replace=False)
            num = np.empty(len(idx))
            for j, i in enumerate(idx):
                old = flat[i]
                flat[i] = old + step
                up = J().item()
                flat[i] = old - step
                down = J().item()
                flat[i] = old
                num[j] = (up - down) / (2 * step)
            per_param[name] = ad.relative_error(analytic[name].reshape(-1)[idx], num, floor)
            checked += len(idx)
    worst = max(per_param, key=per_param.get)
    return GradcheckReport(seed, per_param[worst], worst, model.num_parameters(), checked,
                           time.perf_counter() - t0, per_param)
