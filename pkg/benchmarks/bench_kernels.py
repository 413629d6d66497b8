"""Compiled vs pure-Python TER kernels.

    python benchmarks/bench_kernels.py [--repeat 5]

Times each kernel on random id sequences of several lengths and prints
per-call milliseconds for both backends plus the speedup.  Both backends
are imported directly, so ``CHATNCT_PURE_PYTHON`` has no effect here.
"""

import argparse
import timeit

import numpy as np

from chatnct import _kernels_py

try:
    from chatnct import _kernels as _compiled
except ImportError:
    _compiled = None


def cases(rng, length, n, vocab=8):
    """Hypothesis/reference pairs where the hypothesis is a noisy, partly reordered reference."""
    out = []
    for _ in range(n):
        ref = rng.integers(vocab, size=length)
        hyp = ref.copy()
        flip = rng.random(length) < 0.2
        hyp[flip] = rng.integers(vocab, size=int(flip.sum()))
        if length > 3:
            i = int(rng.integers(0, length - 2))
            hyp = np.concatenate([hyp[i:i + 2], hyp[:i], hyp[i + 2:]])
        out.append((hyp.tolist(), ref.tolist()))
    return out


def time_kernel(fn, pairs, repeat):
    per_run = min(timeit.repeat(lambda: [fn(h, r) for h, r in pairs], number=1, repeat=repeat))
    return 1000.0 * per_run / len(pairs)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    if _compiled is None:
        print("compiled extension not built; run `pip install --no-build-isolation -e .` first")
        return 1
    rng = np.random.default_rng(args.seed)
    plan = [
        ("edit_distance", lambda m: m.edit_distance, [8, 32, 128], 100),
        ("shift_search", lambda m: lambda h, r: m.shift_search(h, r, 10, 10), [8, 12, 16], 5),
        ("exact_shift_search", lambda m: m.exact_shift_search, [4, 6], 50),
    ]
    print(f"{'kernel':<20}{'len':>6}{'python ms':>12}{'compiled ms':>14}{'speedup':>10}", flush=True)
    for name, get, lengths, n in plan:
        for length in lengths:
            pairs = cases(rng, length, n)
            assert all(get(_kernels_py)(h, r) == get(_compiled)(h, r) for h, r in pairs)
            py = time_kernel(get(_kernels_py), pairs, args.repeat)
            cy = time_kernel(get(_compiled), pairs, args.repeat)
            print(f"{name:<20}{length:>6}{py:>12.4f}{cy:>14.4f}{py / cy:>9.1f}x", flush=True)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
