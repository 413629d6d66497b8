# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled edit-distance kernels; same contract as ``_kernels_py``."""

from libc.stdlib cimport malloc, free


cdef int _lev(const int* a, int n, const int* b, int m, int* buf) nogil:
    cdef int* prev = buf
    cdef int* cur = buf + (m + 1)
    cdef int* tmp
    cdef int i, j, sub, dele, ins, best
    for j in range(m + 1):
        prev[j] = j
    for i in range(1, n + 1):
        cur[0] = i
        for j in range(1, m + 1):
            sub = prev[j - 1] + (a[i - 1] != b[j - 1])
            dele = prev[j] + 1
            ins = cur[j - 1] + 1
            best = sub if sub < dele else dele
            cur[j] = best if best < ins else ins
        tmp = prev
        prev = cur
        cur = tmp
    return prev[m]


cdef void _move(const int* src, int n, int start, int length, int dest, int* out) nogil:
    # rest = src without [start, start+length); out = rest[:dest] + phrase + rest[dest:]
    cdef int i, k = 0, r = 0
    for i in range(n):
        if i >= start and i < start + length:
            continue
        if r == dest:
            break
        out[k] = src[i]
        k += 1
        r += 1
    for i in range(length):
        out[k] = src[start + i]
        k += 1
    r = 0
    for i in range(n):
        if i >= start and i < start + length:
            continue
        if r >= dest:
            out[k] = src[i]
            k += 1
        r += 1


cdef int* _to_c(seq, int* n_out) except NULL:
    cdef int n = len(seq)
    cdef int* arr = <int*> malloc((n + 1) * sizeof(int))
    if arr == NULL:
        raise MemoryError()
    for i in range(n):
        arr[i] = seq[i]
    n_out[0] = n
    return arr


def edit_distance(a, b):
    cdef int n, m, out
    cdef int* ca = _to_c(a, &n)
    cdef int* cb = _to_c(b, &m)
    cdef int* buf = <int*> malloc(2 * (m + 1) * sizeof(int))
    try:
        out = _lev(ca, n, cb, m, buf)
    finally:
        free(ca); free(cb); free(buf)
    return out


def shift_search(hyp, ref, int max_dist=10, int max_len=10):
    cdef int n, m, ed, best_ed, e, start, length, dest, shifts = 0, lim
    cdef int* cur = _to_c(hyp, &n)
    cdef int* cr = _to_c(ref, &m)
    cdef int* cand = <int*> malloc((n + 1) * sizeof(int))
    cdef int* best = <int*> malloc((n + 1) * sizeof(int))
    cdef int* buf = <int*> malloc(2 * (m + 1) * sizeof(int))
    cdef int* tmp
    cdef bint found
    try:
        with nogil:
            ed = _lev(cur, n, cr, m, buf)
            while ed > 0:
                best_ed = ed
                found = False
                for start in range(n):
                    lim = n - start
                    if max_len < lim:
                        lim = max_len
                    for length in range(1, lim + 1):
                        for dest in range(n - length + 1):
                            if dest == start or dest - start > max_dist or start - dest > max_dist:
                                continue
                            _move(cur, n, start, length, dest, cand)
                            e = _lev(cand, n, cr, m, buf)
                            if e < best_ed:
                                best_ed = e
                                found = True
                                tmp = best; best = cand; cand = tmp
                if not found:
                    break
                tmp = cur; cur = best; best = tmp
                ed = best_ed
                shifts += 1
    finally:
        free(cur); free(cr); free(cand); free(best); free(buf)
    return shifts, ed


def exact_shift_search(hyp, ref):
    cdef int n, m, depth = 0, e, start, length, dest, best_total, best_shifts, best_ed, bound
    cdef int* ch = _to_c(hyp, &n)
    cdef int* cr = _to_c(ref, &m)
    cdef int* cand = <int*> malloc((n + 1) * sizeof(int))
    cdef int* src = <int*> malloc((n + 1) * sizeof(int))
    cdef int* buf = <int*> malloc(2 * (m + 1) * sizeof(int))
    cdef int i
    try:
        counts = {}
        for t in ref:
            counts[t] = counts.get(t, 0) + 1
        common = 0
        for t in hyp:
            if counts.get(t, 0) > 0:
                counts[t] -= 1
                common += 1
        bound = max(n, m) - common
        best_total = _lev(ch, n, cr, m, buf)
        best_shifts, best_ed = 0, best_total
        start_key = tuple(hyp)
        seen = {start_key}
        frontier = [start_key]
        while frontier and depth + 1 + bound < best_total:
            depth += 1
            nxt = []
            for state in frontier:
                for i in range(n):
                    src[i] = state[i]
                for start in range(n):
                    for length in range(1, n - start + 1):
                        for dest in range(n - length + 1):
                            if dest == start:
                                continue
                            _move(src, n, start, length, dest, cand)
                            key = tuple([cand[i] for i in range(n)])
                            if key in seen:
                                continue
                            seen.add(key)
                            nxt.append(key)
                            e = _lev(cand, n, cr, m, buf)
                            if depth + e < best_total:
                                best_total = depth + e
                                best_shifts, best_ed = depth, e
            frontier = nxt
    finally:
        free(ch); free(cr); free(cand); free(src); free(buf)
    return best_shifts, best_ed
