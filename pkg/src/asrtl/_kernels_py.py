"""Pure-Python/numpy implementations of the dynamic-programming kernels.

These define the reference semantics; the Cython module ``_kernels`` must
agree with them (scores exactly, paths up to tie-breaking on exact ties).
"""

import numpy as np

NEG_INF = -np.inf


def forced_viterbi(loglik, self_lp, next_lp):
    """Best path through a linear left-to-right chain of S states.

    loglik is T x S. The path starts in state 0 at frame 0 and ends in state
    S-1 at frame T-1; each step either stays (self_lp[s]) or advances
    (next_lp[s]). Returns (state path, score); score is -inf if T < S.
    """
    loglik = np.asarray(loglik, dtype=np.float64)
    T, S = loglik.shape
    if T < S or S == 0:
        return np.zeros(T, dtype=np.int64), NEG_INF
    self_lp = np.asarray(self_lp, dtype=np.float64)
    next_lp = np.asarray(next_lp, dtype=np.float64)
    back = np.zeros((T, S), dtype=np.int8)
    score = np.full(S, NEG_INF)
    score[0] = loglik[0, 0]
    for t in range(1, T):
        stay = score + self_lp
        adv = np.full(S, NEG_INF)
        adv[1:] = score[:-1] + next_lp[:-1]
        take = adv > stay
        back[t] = take
        score = np.where(take, adv, stay) + loglik[t]
    path = np.empty(T, dtype=np.int64)
    s = S - 1
    for t in range(T - 1, -1, -1):
        path[t] = s
        if t > 0 and back[t, s]:
            s -= 1
    return path, float(score[S - 1])


def edit_ops(ref, hyp):
    """Minimal unit-cost edit alignment; returns (S, D, I).

    Among optimal alignments the backtrace prefers a diagonal step
    (match/substitution), then deletion, then insertion.
    """
    n, m = len(ref), len(hyp)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        d[i][0] = i
    for j in range(m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        ri = ref[i - 1]
        row, prev = d[i], d[i - 1]
        for j in range(1, m + 1):
            c = prev[j - 1] + (0 if ri == hyp[j - 1] else 1)
            if prev[j] + 1 < c:
                c = prev[j] + 1
            if row[j - 1] + 1 < c:
                c = row[j - 1] + 1
            row[j] = c
    i, j = n, m
    S = D = I = 0
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i][j] == d[i - 1][j - 1] + (0 if ref[i - 1] == hyp[j - 1] else 1):
            if ref[i - 1] != hyp[j - 1]:
                S += 1
            i -= 1
            j -= 1
        elif i > 0 and d[i][j] == d[i - 1][j] + 1:
            D += 1
            i -= 1
        else:
            I += 1
            j -= 1
    return S, D, I


def _topk(scores, k):
    """Indices of the k best scores along axis 0, stable on ties."""
    order = np.argsort(-scores, axis=0, kind="stable")
    return order[:k]


def token_pass(am, pdf, self_lp, next_lp, chain_start, chain_end, cross,
               start_w, final_w, beam, nbest):
    """Frame-synchronous token passing over a set of HMM chains.

    am: T x P scaled acoustic scores. Emitting states are numbered so chain c
    owns [chain_start[c], chain_end[c]). next_lp of a chain's last state is
    its exit weight. cross[a, b] weights leaving chain a into chain b,
    start_w/final_w enter at frame 0 and leave after the last frame.
    Keeps the nbest tokens per state. Returns a list of (score, chains)
    sorted best first; chains is the sequence of chains entered.
    """
    am = np.asarray(am, dtype=np.float64)
    T = am.shape[0]
    NS = len(pdf)
    C = len(chain_start)
    K = int(nbest)
    chain_start = np.asarray(chain_start, dtype=np.int64)
    last = np.asarray(chain_end, dtype=np.int64) - 1
    is_start = np.zeros(NS, dtype=bool)
    is_start[chain_start] = True
    # within-chain predecessor (state - 1) valid only for non-start states
    has_pred = ~is_start

    link_chain = []
    link_prev = []

    score = np.full((NS, K), NEG_INF)
    link = np.full((NS, K), -1, dtype=np.int64)
    # frame 0: enter every chain with its start weight
    for c in range(C):
        if start_w[c] > NEG_INF:
            link_chain.append(c)
            link_prev.append(-1)
            score[chain_start[c], 0] = start_w[c]
            link[chain_start[c], 0] = len(link_chain) - 1
    score += am[0, pdf][:, None]
    score = _prune(score, beam)

    for t in range(1, T):
        stay = score + self_lp[:, None]
        adv = np.full((NS, K), NEG_INF)
        adv[1:] = score[:-1] + next_lp[:-1, None]
        adv[~has_pred] = NEG_INF
        adv_link = np.full((NS, K), -1, dtype=np.int64)
        adv_link[1:] = link[:-1]

        # chain exits -> entries
        exits = score[last] + next_lp[last][:, None]          # C x K
        cand = exits.reshape(C * K, 1) + np.repeat(cross, K, axis=0)  # (C*K) x C
        sel = _topk(cand, K)                                   # K x C
        ent_score = np.take_along_axis(cand, sel, axis=0).T    # C x K
        src = sel.T                                            # C x K, index into C*K
        src_chain, src_k = src // K, src % K
        ent_prev = link[last[src_chain], src_k]

        # merge stay with advance / entry candidates, stable: stay first
        inc_score = adv
        inc_link = adv_link
        inc_score[chain_start] = ent_score
        inc_link[chain_start] = -2  # placeholder; real links allocated below
        both = np.concatenate([stay, inc_score], axis=1)
        both_link = np.concatenate([link, inc_link], axis=1)
        order = np.argsort(-both, axis=1, kind="stable")[:, :K]
        new_score = np.take_along_axis(both, order, axis=1)
        new_link = np.take_along_axis(both_link, order, axis=1)

        # allocate links for entry tokens that survived
        for c in range(C):
            s = chain_start[c]
            for j in range(K):
                o = order[s, j]
                if o >= K and new_score[s, j] > NEG_INF:
                    e = o - K
                    link_chain.append(c)
                    link_prev.append(int(ent_prev[c, e]))
                    new_link[s, j] = len(link_chain) - 1
        score = new_score + am[t, pdf][:, None]
        link = new_link
        score = _prune(score, beam)

    fin = score[last] + next_lp[last][:, None] + np.asarray(final_w)[:, None]  # C x K
    flat = fin.ravel()
    order = np.argsort(-flat, kind="stable")[:K]
    out = []
    for o in order:
        if flat[o] == NEG_INF:
            break
        c, j = divmod(int(o), K)
        lk = int(link[last[c], j])
        seq = []
        while lk >= 0:
            seq.append(link_chain[lk])
            lk = link_prev[lk]
        out.append((float(flat[o]), seq[::-1]))
    return out


def _prune(score, beam):
    best = score.max()
    if best == NEG_INF or beam == np.inf:
        return score
    return np.where(score >= best - beam, score, NEG_INF)
