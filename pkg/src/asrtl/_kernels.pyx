# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled dynamic-programming kernels; semantics mirror asrtl._kernels_py."""

import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()


def forced_viterbi(loglik, self_lp, next_lp):
    cdef double[:, ::1] ll = np.ascontiguousarray(loglik, dtype=np.float64)
    cdef double[::1] sl = np.ascontiguousarray(self_lp, dtype=np.float64)
    cdef double[::1] nl = np.ascontiguousarray(next_lp, dtype=np.float64)
    cdef Py_ssize_t T = ll.shape[0], S = ll.shape[1], t, s
    path_arr = np.zeros(T, dtype=np.int64)
    if T < S or S == 0:
        return path_arr, -INFINITY
    cdef long long[::1] path = path_arr
    cdef double[::1] cur = np.full(S, -INFINITY)
    cdef double[::1] nxt = np.empty(S)
    cdef cnp.int8_t[:, ::1] back = np.zeros((T, S), dtype=np.int8)
    cdef double stay, adv
    cur[0] = ll[0, 0]
    for t in range(1, T):
        for s in range(S):
            stay = cur[s] + sl[s]
            if s > 0:
                adv = cur[s - 1] + nl[s - 1]
            else:
                adv = -INFINITY
            if adv > stay:
                back[t, s] = 1
                nxt[s] = adv + ll[t, s]
            else:
                nxt[s] = stay + ll[t, s]
        cur, nxt = nxt, cur
    s = S - 1
    for t in range(T - 1, -1, -1):
        path[t] = s
        if t > 0 and back[t, s]:
            s -= 1
    return path_arr, float(cur[S - 1])


def edit_ops(ref, hyp):
    cdef long long[::1] r = np.ascontiguousarray(ref, dtype=np.int64)
    cdef long long[::1] h = np.ascontiguousarray(hyp, dtype=np.int64)
    cdef Py_ssize_t n = r.shape[0], m = h.shape[0], i, j
    cdef long long[:, ::1] d = np.zeros((n + 1, m + 1), dtype=np.int64)
    cdef long long c, sub
    for i in range(n + 1):
        d[i, 0] = i
    for j in range(m + 1):
        d[0, j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            c = d[i - 1, j - 1] + (0 if r[i - 1] == h[j - 1] else 1)
            if d[i - 1, j] + 1 < c:
                c = d[i - 1, j] + 1
            if d[i, j - 1] + 1 < c:
                c = d[i, j - 1] + 1
            d[i, j] = c
    cdef long long S = 0, D = 0, I = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0:
            sub = 0 if r[i - 1] == h[j - 1] else 1
            if d[i, j] == d[i - 1, j - 1] + sub:
                S += sub
                i -= 1
                j -= 1
                continue
        if i > 0 and d[i, j] == d[i - 1, j] + 1:
            D += 1
            i -= 1
        else:
            I += 1
            j -= 1
    return int(S), int(D), int(I)


cdef inline void _insert(double* sc, long long* tag, int K, double v, long long g) noexcept nogil:
    # keep sc[0..K) sorted descending; equal scores keep arrival order
    cdef int p
    if not (v > sc[K - 1]):
        return
    p = K - 1
    while p > 0 and v > sc[p - 1]:
        sc[p] = sc[p - 1]
        tag[p] = tag[p - 1]
        p -= 1
    sc[p] = v
    tag[p] = g


def token_pass(am, pdf, self_lp, next_lp, chain_start, chain_end, cross,
               start_w, final_w, double beam, int nbest):
    cdef double[:, ::1] A = np.ascontiguousarray(am, dtype=np.float64)
    cdef long long[::1] P = np.ascontiguousarray(pdf, dtype=np.int64)
    cdef double[::1] SL = np.ascontiguousarray(self_lp, dtype=np.float64)
    cdef double[::1] NL = np.ascontiguousarray(next_lp, dtype=np.float64)
    cdef long long[::1] CS = np.ascontiguousarray(chain_start, dtype=np.int64)
    cdef long long[::1] CE = np.ascontiguousarray(chain_end, dtype=np.int64)
    cdef double[:, ::1] X = np.ascontiguousarray(cross, dtype=np.float64)
    cdef double[::1] SW = np.ascontiguousarray(start_w, dtype=np.float64)
    cdef double[::1] FW = np.ascontiguousarray(final_w, dtype=np.float64)
    cdef Py_ssize_t T = A.shape[0], NS = P.shape[0], C = CS.shape[0]
    cdef int K = nbest
    cdef Py_ssize_t t, s, c, c2, k, j
    cdef double best, v, ex

    chain_of = np.zeros(NS, dtype=np.int64)
    for c in range(C):
        chain_of[CS[c]:CE[c]] = c
    cdef long long[::1] chof = chain_of

    cdef double[:, ::1] sc = np.full((NS, K), -INFINITY)
    cdef long long[:, ::1] lk = np.full((NS, K), -1, dtype=np.int64)
    cdef double[:, ::1] nsc = np.empty((NS, K))
    cdef long long[:, ::1] nlk = np.empty((NS, K), dtype=np.int64)
    cdef double[:, ::1] esc = np.empty((C, K))
    cdef long long[:, ::1] etag = np.empty((C, K), dtype=np.int64)
    cdef double[::1] tmp_s = np.empty(2 * K)
    cdef long long[::1] tmp_t = np.empty(2 * K, dtype=np.int64)

    cap = max(16, C * K * 4)
    lchain_arr = np.empty(cap, dtype=np.int64)
    lprev_arr = np.empty(cap, dtype=np.int64)
    cdef long long[::1] lchain = lchain_arr
    cdef long long[::1] lprev = lprev_arr
    cdef Py_ssize_t nlinks = 0

    for c in range(C):
        if SW[c] > -INFINITY:
            lchain[nlinks] = c
            lprev[nlinks] = -1
            sc[CS[c], 0] = SW[c]
            lk[CS[c], 0] = nlinks
            nlinks += 1
    best = -INFINITY
    for s in range(NS):
        for k in range(K):
            sc[s, k] += A[0, P[s]]
            if sc[s, k] > best:
                best = sc[s, k]
    _prune(sc, best, beam)

    for t in range(1, T):
        # entries: candidates ordered by (source chain, source rank)
        for c2 in range(C):
            for k in range(K):
                esc[c2, k] = -INFINITY
                etag[c2, k] = -1
        for c in range(C):
            s = CE[c] - 1
            for k in range(K):
                ex = sc[s, k] + NL[s]
                if ex == -INFINITY:
                    continue
                for c2 in range(C):
                    v = ex + X[c, c2]
                    _insert(&esc[c2, 0], &etag[c2, 0], K, v, c * K + k)

        if nlinks + C * K > lchain.shape[0]:
            cap = 2 * (nlinks + C * K)
            lchain_arr = np.resize(lchain_arr, cap)
            lprev_arr = np.resize(lprev_arr, cap)
            lchain = lchain_arr
            lprev = lprev_arr

        best = -INFINITY
        for s in range(NS):
            c = chof[s]
            for j in range(2 * K):
                tmp_s[j] = -INFINITY
                tmp_t[j] = -1
            # stay candidates first (tag = k), then incoming (tag = K + k)
            for k in range(K):
                _insert(&tmp_s[0], &tmp_t[0], K, sc[s, k] + SL[s], k)
            if s == CS[c]:
                for k in range(K):
                    _insert(&tmp_s[0], &tmp_t[0], K, esc[c, k], K + k)
            else:
                for k in range(K):
                    _insert(&tmp_s[0], &tmp_t[0], K, sc[s - 1, k] + NL[s - 1], K + k)
            for j in range(K):
                v = tmp_s[j]
                nsc[s, j] = v
                if tmp_t[j] < 0:
                    nlk[s, j] = -1
                elif tmp_t[j] < K:
                    nlk[s, j] = lk[s, tmp_t[j]]
                elif s == CS[c]:
                    k = tmp_t[j] - K
                    lchain[nlinks] = c
                    lprev[nlinks] = lk[CE[etag[c, k] // K] - 1, etag[c, k] % K]
                    nlk[s, j] = nlinks
                    nlinks += 1
                else:
                    nlk[s, j] = lk[s - 1, tmp_t[j] - K]
                if v > -INFINITY:
                    v = v + A[t, P[s]]
                    nsc[s, j] = v
                    if v > best:
                        best = v
        sc, nsc = nsc, sc
        lk, nlk = nlk, lk
        _prune(sc, best, beam)

    fin_s = np.full(C * K, -INFINITY)
    for c in range(C):
        s = CE[c] - 1
        for k in range(K):
            fin_s[c * K + k] = sc[s, k] + NL[s] + FW[c]
    order = np.argsort(-fin_s, kind="stable")[:K]
    out = []
    for o in order:
        if fin_s[o] == -INFINITY:
            break
        c = o // K
        k = o % K
        l = lk[CE[c] - 1, k]
        seq = []
        while l >= 0:
            seq.append(int(lchain[l]))
            l = lprev[l]
        out.append((float(fin_s[o]), seq[::-1]))
    return out


cdef void _prune(double[:, ::1] sc, double best, double beam):
    cdef Py_ssize_t s, k
    if best == -INFINITY or beam == INFINITY:
        return
    for s in range(sc.shape[0]):
        for k in range(sc.shape[1]):
            if sc[s, k] < best - beam:
                sc[s, k] = -INFINITY
