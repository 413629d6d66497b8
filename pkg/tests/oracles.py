"""Slow, independent reference computations used by several test modules."""

from functools import lru_cache
from itertools import product

import numpy as np

from chatnct.model import sinusoidal_positions


def levenshtein(a, b):
    """Full-table dynamic program (no row reuse)."""
    table = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(len(a) + 1):
        table[i][0] = i
    for j in range(len(b) + 1):
        table[0][j] = j
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            table[i][j] = min(table[i - 1][j] + 1, table[i][j - 1] + 1,
                              table[i - 1][j - 1] + (a[i - 1] != b[j - 1]))
    return table[len(a)][len(b)]


def all_block_shifts(seq):
    """Every sequence reachable from ``seq`` by moving one contiguous block."""
    n = len(seq)
    out = set()
    for i in range(n):
        for j in range(i + 1, n + 1):
            block, rest = seq[i:j], seq[:i] + seq[j:]
            for k in range(len(rest) + 1):
                cand = rest[:k] + block + rest[k:]
                if cand != seq:
                    out.add(cand)
    return out


@lru_cache(maxsize=None)
def shift_distances(seq):
    """Minimum number of block shifts to reach each reordering of ``seq`` (plain BFS)."""
    dist = {seq: 0}
    frontier = [seq]
    while frontier:
        nxt = []
        for s in frontier:
            for c in all_block_shifts(s):
                if c not in dist:
                    dist[c] = dist[s] + 1
                    nxt.append(c)
        frontier = nxt
    return dist


def exhaustive_ter_edits(hyp, ref):
    """min over every shift sequence of (number of shifts + Levenshtein distance to ``ref``)."""
    return min(k + levenshtein(s, ref) for s, k in shift_distances(tuple(hyp)).items())


def enumerate_sequences(V, max_len, eos):
    """All token sequences a decoder could emit: eos-terminated ones of length <= max_len
    plus eos-free ones of exactly max_len."""
    non_eos = [v for v in range(V) if v != eos]
    for n in range(0, max_len):
        for body in product(non_eos, repeat=n):
            yield body + (eos,)
    yield from product(non_eos, repeat=max_len)


# Straight-line transformer reference: plain numpy, one sequence at a time, masks
# written out as boolean matrices.


def ln_ref(x, g, b, eps):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return g * (x - mu) / np.sqrt(var + eps) + b


def attn_ref(P, prefix, xq, xk, visible, heads):
    d = xq.shape[-1]
    dh = d // heads
    q = xq @ P[prefix + ".wq"].T + P[prefix + ".bq"]
    k = xk @ P[prefix + ".wk"].T + P[prefix + ".bk"]
    v = xk @ P[prefix + ".wv"].T + P[prefix + ".bv"]
    out = np.zeros((len(xq), d))
    for h in range(heads):
        s = slice(h * dh, (h + 1) * dh)
        scores = q[:, s] @ k[:, s].T / np.sqrt(dh)
        scores = np.where(visible, scores, -np.inf)
        w = np.exp(scores - scores.max(-1, keepdims=True))
        w /= w.sum(-1, keepdims=True)
        out[:, s] = w @ v[:, s]
    return out @ P[prefix + ".wo"].T + P[prefix + ".bo"]


def ffn_ref(P, prefix, x):
    return np.maximum(x @ P[prefix + ".w1"].T + P[prefix + ".b1"], 0) @ P[prefix + ".w2"].T + P[prefix + ".b2"]


def encoder_ref(model, ids, speakers, turns, flags):
    P = {k: v.data for k, v in model.params.items()}
    cfg = model.config
    n = len(ids)
    h = P["emb.word"][ids] + sinusoidal_positions(cfg.max_pos, cfg.d_model)[:n] + P["emb.speaker"][speakers] \
        + P["emb.turn"][turns]
    for l in range(cfg.layers):
        vis = np.ones((n, n), bool) if l == 0 else flags[:, None] == flags[None, :]
        x = ln_ref(h, P[f"enc.{l}.ln1.g"], P[f"enc.{l}.ln1.b"], cfg.ln_eps)
        z = h + attn_ref(P, f"enc.{l}.self", x, x, vis, cfg.heads)
        h = z + ffn_ref(P, f"enc.{l}.ffn", ln_ref(z, P[f"enc.{l}.ln2.g"], P[f"enc.{l}.ln2.b"], cfg.ln_eps))
    return ln_ref(h, P["enc.ln_f.g"], P["enc.ln_f.b"], cfg.ln_eps)


def decoder_ref(model, dec_ids, enc_states, flags):
    P = {k: v.data for k, v in model.params.items()}
    cfg = model.config
    t = len(dec_ids)
    h = P["emb.word"][dec_ids] + sinusoidal_positions(cfg.max_pos, cfg.d_model)[:t]
    causal = np.tril(np.ones((t, t), bool))
    cross = np.broadcast_to(flags[None, :], (t, len(flags)))
    for l in range(cfg.layers):
        p = f"dec.{l}"
        x = ln_ref(h, P[p + ".ln1.g"], P[p + ".ln1.b"], cfg.ln_eps)
        z = h + attn_ref(P, p + ".self", x, x, causal, cfg.heads)
        c = z + attn_ref(P, p + ".cross", ln_ref(z, P[p + ".ln2.g"], P[p + ".ln2.b"], cfg.ln_eps), enc_states,
                         cross, cfg.heads)
        h = c + ffn_ref(P, p + ".ffn", ln_ref(c, P[p + ".ln3.g"], P[p + ".ln3.b"], cfg.ln_eps))
    return ln_ref(h, P["dec.ln_f.g"], P["dec.ln_f.b"], cfg.ln_eps)
