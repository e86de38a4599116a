"""Token-passing Viterbi decoding over a lexicon word loop, and WER/CER scoring."""

import math
from dataclasses import dataclass

import numpy as np

from .gmm import NUM_STATES
from .kernels import NEG_INF, edit_ops, token_pass
from .lexlm import BOS, EOS, SIL_PHONE

ACOUSTIC_SCALE = 0.1
BEAM = 16.0
LM_SCALE = 1.0
SIL_PROB = 0.5
NBEST = 10


def _log(p):
    return math.log(p) if p > 0 else NEG_INF


@dataclass
class DecodeGraph:
    pdf: np.ndarray          # per emitting state
    self_lp: np.ndarray
    next_lp: np.ndarray      # last state of a chain: exit weight
    chain_start: np.ndarray
    chain_end: np.ndarray
    chain_word: list         # word for word chains, None for silence
    chain_ctx: list          # LM history word carried by the chain
    cross: np.ndarray
    start_w: np.ndarray
    final_w: np.ndarray
    lm_scale: float
    sil_prob: float
    lm: object = None

    @property
    def num_states(self):
        return len(self.pdf)

    @property
    def num_chains(self):
        return len(self.chain_start)

    def chain_length(self, c):
        return int(self.chain_end[c] - self.chain_start[c])


def build_graph(lexicon, lm, self_loop, lm_scale=LM_SCALE, sil_prob=SIL_PROB, words=None):
    """Word loop with one HMM chain per pronunciation and per-history silence chains.

    self_loop is the (num_phones x 3) self-loop probability table of the HMM
    topology; phone indices follow lexicon.phones. LM weights are bigram
    probabilities p(w | previous word) scaled by lm_scale. sil_prob=0
    disables optional silence.
    """
    words = sorted(lexicon.words) if words is None else list(words)
    if not words:
        raise ValueError("empty lexicon")
    self_loop = np.asarray(self_loop, dtype=np.float64)
    pdf, sl, nl, starts, ends, cw, cc = [], [], [], [], [], [], []

    def add_chain(phones, word, ctx):
        starts.append(len(pdf))
        for p in phones:
            pi = lexicon.phone_index[p]
            for s in range(NUM_STATES):
                pdf.append(pi * NUM_STATES + s)
                sl.append(math.log(self_loop[pi, s]))
                nl.append(math.log1p(-self_loop[pi, s]))
        ends.append(len(pdf))
        cw.append(word)
        cc.append(ctx)

    for w in words:
        for pron in lexicon.pronunciations(w):
            add_chain(pron, w, w)
    use_sil = sil_prob > 0
    if use_sil:
        for ctx in [BOS] + words:
            add_chain([SIL_PHONE], None, ctx)

    C = len(starts)
    lsil = _log(sil_prob)
    lnosil = _log(1.0 - sil_prob) if use_sil else 0.0
    cross = np.full((C, C), NEG_INF)
    start_w = np.full(C, NEG_INF)
    final_w = np.full(C, NEG_INF)
    word_chains = [c for c in range(C) if cw[c] is not None]
    sil_of = {cc[c]: c for c in range(C) if cw[c] is None}
    lmcache = {}

    def lmw(w, h):
        key = (w, h)
        if key not in lmcache:
            lmcache[key] = lm_scale * lm.logprob(w, (h,))
        return lmcache[key]

    for c in range(C):
        h = cc[c]
        is_word = cw[c] is not None
        for d in word_chains:
            cross[c, d] = lmw(cw[d], h) + (lnosil if is_word else 0.0)
        if is_word and use_sil:
            cross[c, sil_of[h]] = lsil
        if h != BOS:
            final_w[c] = lmw(EOS, h) + (lnosil if is_word else 0.0)
    for d in word_chains:
        start_w[d] = lmw(cw[d], BOS) + lnosil
    if use_sil:
        start_w[sil_of[BOS]] = lsil
        final_w[sil_of[BOS]] = lmw(EOS, BOS)

    return DecodeGraph(np.array(pdf, dtype=np.int64), np.array(sl), np.array(nl),
                       np.array(starts, dtype=np.int64), np.array(ends, dtype=np.int64),
                       cw, cc, cross, start_w, final_w, lm_scale, sil_prob, lm)


@dataclass
class Hypothesis:
    words: list
    score: float
    chains: list


def decode_nbest(graph, loglik, beam=BEAM, acoustic_scale=ACOUSTIC_SCALE, nbest=1):
    loglik = np.asarray(loglik, dtype=np.float64)
    if loglik.ndim != 2 or loglik.shape[0] == 0:
        raise ValueError("decode needs at least one frame")
    res = token_pass(acoustic_scale * loglik, graph.pdf, graph.self_lp, graph.next_lp,
                     graph.chain_start, graph.chain_end, graph.cross, graph.start_w,
                     graph.final_w, float(beam), int(nbest))
    out = []
    seen = set()
    for score, chains in res:
        words = [graph.chain_word[c] for c in chains if graph.chain_word[c] is not None]
        key = tuple(words)
        if key in seen:
            continue
        seen.add(key)
        out.append(Hypothesis(words, score, chains))
    return out


def decode(graph, loglik, beam=BEAM, acoustic_scale=ACOUSTIC_SCALE, rescore_lm=None, nbest=NBEST):
    """Best word sequence; with rescore_lm, the n-best list is rescored with it."""
    if rescore_lm is None:
        hyps = decode_nbest(graph, loglik, beam, acoustic_scale, 1)
        return hyps[0].words if hyps else []
    hyps = decode_nbest(graph, loglik, beam, acoustic_scale, nbest)
    if not hyps:
        return []
    best, best_score = None, NEG_INF
    for h in hyps:
        s = h.score - graph.lm_scale * bigram_score(graph, h.words) \
            + graph.lm_scale * rescore_lm.sentence_logprob(h.words)
        if s > best_score:
            best, best_score = h, s
    return best.words


def bigram_score(graph, words):
    """Unscaled bigram log-probability the graph assigns to a word sequence."""
    total = 0.0
    prev = BOS
    for w in list(words) + [EOS]:
        total += graph.lm.logprob(w, (prev,))
        prev = w
    return total


def pdf_log_priors(alignments, num_pdfs, floor=1e-8):
    counts = np.zeros(num_pdfs)
    for al in alignments:
        counts += np.bincount(np.asarray(al.pdfs if hasattr(al, "pdfs") else al), minlength=num_pdfs)
    p = np.maximum(counts / max(counts.sum(), 1.0), floor)
    return np.log(p / p.sum())


def nnet_loglik(log_post, log_priors):
    """Scaled likelihoods log p(x|s) ~ log p(s|x) - log p(s)."""
    return np.asarray(log_post) - log_priors[None, :]


# ---- scoring ----------------------------------------------------------------------

@dataclass(frozen=True)
class ErrorCounts:
    S: int
    D: int
    I: int
    N: int

    @property
    def errors(self):
        return self.S + self.D + self.I

    @property
    def rate(self):
        return self.errors / self.N

    def __add__(self, other):
        return ErrorCounts(self.S + other.S, self.D + other.D, self.I + other.I, self.N + other.N)


def _units(tokens, unit):
    if isinstance(tokens, str):
        tokens = tokens.split()
    if unit == "character":
        return [ch for t in tokens for ch in t]
    if unit == "word":
        return list(tokens)
    raise ValueError("unit must be 'word' or 'character'")


def score_errors(ref, hyp, unit="word"):
    r = _units(ref, unit)
    h = _units(hyp, unit)
    if not r:
        raise ValueError("empty reference")
    ids = {}
    ri = np.array([ids.setdefault(t, len(ids)) for t in r], dtype=np.int64)
    hi = np.array([ids.setdefault(t, len(ids)) for t in h], dtype=np.int64)
    S, D, I = edit_ops(ri, hi)
    return ErrorCounts(S, D, I, len(r))


def score_corpus(refs, hyps):
    """Per-utterance (word, char) counts plus aggregates; missing hyps count as empty."""
    rows = []
    wtot = ErrorCounts(0, 0, 0, 0)
    ctot = ErrorCounts(0, 0, 0, 0)
    for utt in sorted(refs):
        hyp = hyps.get(utt, [])
        w = score_errors(refs[utt], hyp, "word")
        c = score_errors(refs[utt], hyp, "character")
        rows.append((utt, w, c))
        wtot, ctot = wtot + w, ctot + c
    return rows, wtot, ctot


def write_score_report(path, rows, wtot, ctot):
    with open(path, "w", encoding="utf-8") as f:
        f.write("%-24s %5s %5s %5s %5s %8s %5s %5s %5s %5s %8s\n"
                % ("utt", "S", "D", "I", "N", "WER", "cS", "cD", "cI", "cN", "CER"))
        for utt, w, c in rows:
            f.write("%-24s %5d %5d %5d %5d %8.4f %5d %5d %5d %5d %8.4f\n"
                    % (utt, w.S, w.D, w.I, w.N, w.rate, c.S, c.D, c.I, c.N, c.rate))
        f.write("%-24s %5d %5d %5d %5d %8.4f %5d %5d %5d %5d %8.4f\n"
                % ("TOTAL", wtot.S, wtot.D, wtot.I, wtot.N, wtot.rate,
                   ctot.S, ctot.D, ctot.I, ctot.N, ctot.rate))


def write_hypotheses(path, hyps):
    with open(path, "w", encoding="utf-8") as f:
        for utt in sorted(hyps):
            f.write(" ".join([utt] + list(hyps[utt])) + "\n")


def read_hypotheses(path):
    out = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            parts = line.split()
            if parts:
                out[parts[0]] = parts[1:]
    return out
