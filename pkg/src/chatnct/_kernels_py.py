"""Pure-Python edit-distance kernels (fallback for the compiled ``_kernels``).

Sequences are lists of ints.  Both implementations must return identical
results; ``tests/test_kernels.py`` cross-checks them.
"""


def edit_distance(a, b):
    """Levenshtein distance with unit insert/delete/substitute costs."""
    n, m = len(a), len(b)
    prev = list(range(m + 1))
    for i in range(1, n + 1):
        cur = [i] + [0] * m
        ai = a[i - 1]
        for j in range(1, m + 1):
            sub = prev[j - 1] + (ai != b[j - 1])
            dele = prev[j] + 1
            ins = cur[j - 1] + 1
            best = sub if sub < dele else dele
            cur[j] = best if best < ins else ins
        prev = cur
    return prev[m]


def _moved(seq, start, length, dest):
    phrase = seq[start:start + length]
    rest = seq[:start] + seq[start + length:]
    return rest[:dest] + phrase + rest[dest:]


def _moves(n, max_dist, max_len):
    for start in range(n):
        for length in range(1, min(max_len, n - start) + 1):
            for dest in range(n - length + 1):
                if dest != start and abs(dest - start) <= max_dist:
                    yield start, length, dest


def shift_search(hyp, ref, max_dist=10, max_len=10):
    """Greedy block shifting; returns ``(shifts, residual_edits)``.

    Each round tries every move of a block of up to ``max_len`` tokens by at
    most ``max_dist`` positions and keeps the one with the smallest remaining
    edit distance (first found on ties).  A move is taken only if that distance
    drops strictly below the current one.
    """
    cur = list(hyp)
    ref = list(ref)
    ed = edit_distance(cur, ref)
    shifts = 0
    while ed > 0:
        best_ed, best_seq = ed, None
        for start, length, dest in _moves(len(cur), max_dist, max_len):
            cand = _moved(cur, start, length, dest)
            e = edit_distance(cand, ref)
            if e < best_ed:
                best_ed, best_seq = e, cand
        if best_seq is None:
            break
        cur, ed = best_seq, best_ed
        shifts += 1
    return shifts, ed


def _bag_bound(hyp, ref):
    """Lower bound on edit distance that no reordering of ``hyp`` can beat."""
    counts = {}
    for t in ref:
        counts[t] = counts.get(t, 0) + 1
    common = 0
    for t in hyp:
        if counts.get(t, 0) > 0:
            counts[t] -= 1
            common += 1
    return max(len(hyp), len(ref)) - common


def exact_shift_search(hyp, ref):
    """Minimum of ``shifts + edit_distance`` over all block-shift sequences.

    Breadth-first over distinct reorderings of ``hyp``; stops once the shift
    count plus the reorder-invariant bound cannot improve on the best total.
    Returns ``(shifts, residual_edits)`` of an optimal sequence.
    """
    ref = list(ref)
    start = tuple(hyp)
    n = len(start)
    bound = _bag_bound(start, ref)
    best_total = edit_distance(list(start), ref)
    best = (0, best_total)
    seen = {start}
    frontier = [start]
    depth = 0
    while frontier and depth + 1 + bound < best_total:
        depth += 1
        nxt = []
        for state in frontier:
            seq = list(state)
            for s, length, dest in _moves(n, n, n):
                cand = tuple(_moved(seq, s, length, dest))
                if cand in seen:
                    continue
                seen.add(cand)
                nxt.append(cand)
                e = edit_distance(list(cand), ref)
                if depth + e < best_total:
                    best_total, best = depth + e, (depth, e)
        frontier = nxt
    return best
