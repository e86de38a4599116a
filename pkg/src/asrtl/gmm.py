"""Diagonal GMMs, monophone GMM-HMM training, forced alignment and LDA."""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh
from scipy.special import logsumexp

from . import serial
from .kernels import forced_viterbi

log = logging.getLogger(__name__)

LOG_2PI = np.log(2 * np.pi)
VAR_FLOOR_SCALE = 1e-4
NUM_STATES = 3
MIN_OCC = 1e-10


@dataclass(frozen=True)
class DiagGmm:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if abs(w.sum() - 1.0) > 1e-8 or np.any(w < 0):
            raise ValueError("GMM weights must be nonnegative and sum to 1")
        if np.any(np.asarray(self.variances) <= 0):
            raise ValueError("GMM variances must be positive")

    @property
    def num_components(self):
        return len(self.weights)

    @property
    def dim(self):
        return self.means.shape[1]

    def component_loglik(self, x):
        """T x K log(w_k N(x_t; mu_k, var_k))."""
        x = np.atleast_2d(x)
        inv = 1.0 / self.variances
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        const = logw - 0.5 * (self.dim * LOG_2PI + np.sum(np.log(self.variances), axis=1)
                              + np.sum(self.means ** 2 * inv, axis=1))
        return const - 0.5 * ((x ** 2) @ inv.T) + x @ (self.means * inv).T

    def loglik(self, x):
        return logsumexp(self.component_loglik(x), axis=1)

    def posteriors(self, x):
        c = self.component_loglik(x)
        return np.exp(c - logsumexp(c, axis=1, keepdims=True))


def variance_floor(data):
    return VAR_FLOOR_SCALE * np.maximum(np.var(data, axis=0), 1e-12)


def _kmeanspp(data, K, rng):
    n = len(data)
    centers = [data[rng.integers(n)]]
    d2 = np.sum((data - centers[0]) ** 2, axis=1)
    for _ in range(1, K):
        tot = d2.sum()
        if tot <= 0:
            i = rng.integers(n)
        else:
            i = int(np.searchsorted(np.cumsum(d2), rng.uniform(0, tot), side="right"))
            i = min(i, n - 1)
        centers.append(data[i])
        d2 = np.minimum(d2, np.sum((data - data[i]) ** 2, axis=1))
    return np.array(centers)


def em_step(gmm, data, floor, weights=None):
    """One EM update; returns (new gmm, log-likelihood of data under the old gmm)."""
    comp = gmm.component_loglik(data)
    ll = logsumexp(comp, axis=1)
    post = np.exp(comp - ll[:, None])
    if weights is not None:
        post = post * weights[:, None]
        total = float(np.dot(weights, ll))
    else:
        total = float(ll.sum())
    occ = post.sum(axis=0)
    ok = occ > MIN_OCC
    means = gmm.means.copy()
    variances = gmm.variances.copy()
    first = post.T @ data
    second = post.T @ (data ** 2)
    means[ok] = first[ok] / occ[ok, None]
    variances[ok] = second[ok] / occ[ok, None] - means[ok] ** 2
    variances = np.maximum(variances, floor)
    w = np.where(ok, occ, 0.0)
    return DiagGmm(w / w.sum(), means, variances), total


def fit_gmm_em(data, K, iters=10, seed=0, floor=None, return_history=False):
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or len(data) == 0:
        raise ValueError("empty data")
    if K > len(data):
        raise ValueError("K=%d exceeds the %d available frames" % (K, len(data)))
    if floor is None:
        floor = variance_floor(data)
    rng = np.random.default_rng(seed)
    centers = _kmeanspp(data, K, rng)
    var = np.maximum(np.var(data, axis=0), floor)
    gmm = DiagGmm(np.full(K, 1.0 / K), centers, np.tile(var, (K, 1)))
    history = []
    for _ in range(iters):
        gmm, ll = em_step(gmm, data, floor)
        history.append(ll)
    if return_history:
        history.append(float(gmm.loglik(data).sum()))
        return gmm, history
    return gmm


def split_gmm(gmm, n_new, perturb=0.2):
    """Split the n_new heaviest components along +-perturb standard deviations."""
    order = np.argsort(-gmm.weights, kind="stable")[:n_new]
    w = gmm.weights.copy()
    means = gmm.means.copy()
    var = gmm.variances.copy()
    add_w, add_m, add_v = [], [], []
    for k in order:
        d = perturb * np.sqrt(var[k])
        w[k] *= 0.5
        add_w.append(w[k])
        add_m.append(means[k] - d)
        add_v.append(var[k])
        means[k] = means[k] + d
    return DiagGmm(np.concatenate([w, add_w]), np.vstack([means, add_m]), np.vstack([var, add_v]))


# ---- HMM acoustic model -----------------------------------------------------

@dataclass
class Alignment:
    utt_id: str
    phones: np.ndarray
    states: np.ndarray
    pdfs: np.ndarray
    score: float = 0.0

    def __len__(self):
        return len(self.pdfs)


class InfeasibleAlignmentError(ValueError):
    pass


class AcousticModelGmm:
    """Monophone GMM-HMM: 3-state left-to-right phones, one GMM per state.

    pdf-id of (phone p, state s) is 3p + s.
    """

    def __init__(self, phones, gmms, self_loop):
        self.phones = list(phones)
        self.gmms = list(gmms)
        self.self_loop = np.asarray(self_loop, dtype=np.float64).reshape(len(self.phones), NUM_STATES)
        if len(self.gmms) != self.num_pdfs:
            raise ValueError("need one GMM per pdf")
        self._pack()

    @property
    def num_pdfs(self):
        return len(self.phones) * NUM_STATES

    @property
    def dim(self):
        return self.gmms[0].dim

    @property
    def num_gauss(self):
        return sum(g.num_components for g in self.gmms)

    def pdf_id(self, phone, state):
        return phone * NUM_STATES + state

    def _pack(self):
        means = np.vstack([g.means for g in self.gmms])
        var = np.vstack([g.variances for g in self.gmms])
        inv = 1.0 / var
        with np.errstate(divide="ignore"):
            logw = np.concatenate([np.log(g.weights) for g in self.gmms])
        self._const = logw - 0.5 * (means.shape[1] * LOG_2PI + np.sum(np.log(var), axis=1)
                                    + np.sum(means ** 2 * inv, axis=1))
        self._inv = inv
        self._lin = means * inv
        counts = [g.num_components for g in self.gmms]
        self._offsets = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.int64)

    def pdf_loglik(self, x):
        """T x num_pdfs emission log-likelihoods."""
        x = np.atleast_2d(x)
        comp = self._const - 0.5 * ((x ** 2) @ self._inv.T) + x @ self._lin.T
        m = np.maximum.reduceat(comp, self._offsets, axis=1)
        m = np.where(np.isfinite(m), m, 0.0)
        rep = np.repeat(m, np.diff(np.append(self._offsets, comp.shape[1])), axis=1)
        return m + np.log(np.add.reduceat(np.exp(comp - rep), self._offsets, axis=1))

    def expand(self, phone_seq):
        """State-level chain for a phone sequence: (phones, states, pdfs, self_lp, next_lp)."""
        ph = np.repeat(np.asarray(phone_seq, dtype=np.int64), NUM_STATES)
        st = np.tile(np.arange(NUM_STATES), len(phone_seq))
        sl = self.self_loop[ph, st]
        return ph, st, ph * NUM_STATES + st, np.log(sl), np.log1p(-sl)

    def transition_logprobs(self):
        return np.log(self.self_loop), np.log1p(-self.self_loop)

    def save(self, path):
        arrays = [("self_loop", self.self_loop),
                  ("num_comp", np.array([g.num_components for g in self.gmms], dtype=np.int64)),
                  ("weights", np.concatenate([g.weights for g in self.gmms])),
                  ("means", np.vstack([g.means for g in self.gmms])),
                  ("variances", np.vstack([g.variances for g in self.gmms]))]
        serial.dump(path, "AMG", 1, arrays, {"phones": self.phones})

    @classmethod
    def load(cls, path):
        a, meta = serial.load(path, "AMG", 1)
        gmms = []
        pos = 0
        for n in a["num_comp"]:
            sl = slice(pos, pos + int(n))
            w = a["weights"][sl]
            gmms.append(DiagGmm(w / w.sum(), a["means"][sl], a["variances"][sl]))
            pos += int(n)
        return cls(meta["phones"], gmms, a["self_loop"])


def viterbi_align(am, fm, phone_seq, utt_id=""):
    values = fm.values if hasattr(fm, "values") else np.asarray(fm)
    T = len(values)
    if NUM_STATES * len(phone_seq) > T or len(phone_seq) == 0:
        raise InfeasibleAlignmentError(
            "%s: %d phones need at least %d frames, have %d"
            % (utt_id, len(phone_seq), NUM_STATES * len(phone_seq), T))
    ph, st, pdfs, sl, nl = am.expand(phone_seq)
    ll = am.pdf_loglik(values)[:, pdfs]
    path, score = forced_viterbi(ll, sl, nl)
    return Alignment(utt_id, ph[path], st[path], pdfs[path], score)


def flat_alignment(phone_seq, T, utt_id=""):
    n = NUM_STATES * len(phone_seq)
    if n > T or n == 0:
        raise InfeasibleAlignmentError("%s: cannot spread %d states over %d frames" % (utt_id, n, T))
    idx = (np.arange(T) * n) // T
    ph = np.repeat(np.asarray(phone_seq, dtype=np.int64), NUM_STATES)[idx]
    st = np.tile(np.arange(NUM_STATES), len(phone_seq))[idx]
    return Alignment(utt_id, ph, st, ph * NUM_STATES + st, 0.0)


def alignment_to_targets(al):
    return np.asarray(al.pdfs, dtype=np.int64).copy()


def _transition_counts(alignments, num_phones):
    stay = np.zeros((num_phones, NUM_STATES))
    leave = np.zeros((num_phones, NUM_STATES))
    for al in alignments:
        if len(al) < 2:
            continue
        p, s = al.phones[:-1], al.states[:-1]
        same = (al.pdfs[1:] == al.pdfs[:-1])
        # consecutive repeats of one phone stay distinct chain positions; a
        # pdf change always means a forward transition
        np.add.at(stay, (p[same], s[same]), 1)
        np.add.at(leave, (p[~same], s[~same]), 1)
    return stay, leave


SELF_LOOP_RANGE = (0.05, 0.95)


def _estimate_self_loops(alignments, num_phones, prev):
    stay, leave = _transition_counts(alignments, num_phones)
    tot = stay + leave
    est = np.where(tot > 0, stay / np.where(tot > 0, tot, 1), prev)
    return np.clip(est, *SELF_LOOP_RANGE)


def _gather(feats, alignments, num_pdfs):
    by_pdf = [[] for _ in range(num_pdfs)]
    for al in alignments:
        x = feats[al.utt_id]
        x = x.values if hasattr(x, "values") else x
        order = np.argsort(al.pdfs, kind="stable")
        bounds = np.searchsorted(al.pdfs[order], np.arange(num_pdfs + 1))
        for j in np.nonzero(np.diff(bounds))[0]:
            by_pdf[j].append(x[order[bounds[j]:bounds[j + 1]]])
    return [np.vstack(b) if b else None for b in by_pdf]


@dataclass
class MonophoneConfig:
    num_passes: int = 10
    max_gauss: int = 200
    min_frames_per_gauss: int = 20
    # fraction of passes over which the Gaussian count grows to max_gauss
    grow_fraction: float = 0.5
    init_self_loop: float = 0.5


def _init_model(phones, data_by_pdf, global_mean, global_var, floor, self_loop):
    gmms = []
    for x in data_by_pdf:
        if x is None or len(x) == 0:
            gmms.append(DiagGmm(np.ones(1), global_mean[None, :], global_var[None, :]))
        else:
            gmms.append(DiagGmm(np.ones(1), x.mean(axis=0)[None, :],
                                np.maximum(x.var(axis=0), floor)[None, :]))
    return AcousticModelGmm(phones, gmms, self_loop)


def _reestimate(am, feats, alignments, floor, target_total, cfg):
    data = _gather(feats, alignments, am.num_pdfs)
    occs = np.array([0 if x is None else len(x) for x in data], dtype=np.float64)
    # share the Gaussian budget by occupancy^0.2, as is customary
    share = np.zeros(am.num_pdfs, dtype=np.int64)
    if occs.sum() > 0:
        w = occs ** 0.2 * (occs > 0)
        share = np.maximum(1, np.floor(target_total * w / w.sum())).astype(np.int64)
    gmms = []
    for j, (g, x) in enumerate(zip(am.gmms, data)):
        if x is None:
            gmms.append(g)
            continue
        new, old_ll = em_step(g, x, floor)
        limit = min(share[j], max(1, len(x) // cfg.min_frames_per_gauss))
        if g.num_components < limit:
            cand, _ = em_step(split_gmm(g, min(limit - g.num_components, g.num_components)), x, floor)
            # accept a split only if it keeps the state likelihood from decreasing
            if cand.loglik(x).sum() >= old_ll:
                new = cand
        gmms.append(new)
    self_loop = _estimate_self_loops(alignments, len(am.phones), am.self_loop)
    return AcousticModelGmm(am.phones, gmms, self_loop)


def train_monophone(feats, phone_seqs, phones, cfg=MonophoneConfig(), init_alignments=None):
    """Flat-start (or alignment-initialized) Viterbi training.

    feats: utt -> FeatureMatrix; phone_seqs: utt -> phone ids.
    Returns (model, alignments, history, skipped) where history holds the
    total alignment log-probability of each pass.
    """
    utts = [u for u in sorted(phone_seqs) if u in feats]
    if not utts:
        raise ValueError("empty corpus")
    vals = {u: (feats[u].values if hasattr(feats[u], "values") else np.asarray(feats[u])) for u in utts}
    skipped = [u for u in utts if NUM_STATES * len(phone_seqs[u]) > len(vals[u]) or not phone_seqs[u]]
    if skipped:
        log.warning("skipping %d utterances with too few frames: %s", len(skipped), skipped[:5])
    utts = [u for u in utts if u not in set(skipped)]
    if not utts:
        raise ValueError("no usable utterances")

    all_x = np.vstack([vals[u] for u in utts])
    floor = variance_floor(all_x)
    gmean, gvar = all_x.mean(axis=0), np.maximum(all_x.var(axis=0), floor)

    if init_alignments is None:
        aligns = [flat_alignment(phone_seqs[u], len(vals[u]), u) for u in utts]
    else:
        aligns = [init_alignments[u] for u in utts if u in init_alignments]
        missing = [u for u in utts if u not in init_alignments]
        aligns += [flat_alignment(phone_seqs[u], len(vals[u]), u) for u in missing]
    num_pdfs = len(phones) * NUM_STATES
    am = _init_model(phones, _gather(vals, aligns, num_pdfs), gmean, gvar, floor,
                     np.full((len(phones), NUM_STATES), cfg.init_self_loop))
    am = AcousticModelGmm(phones, am.gmms,
                          _estimate_self_loops(aligns, len(phones), am.self_loop))

    grow_passes = max(1, int(round(cfg.num_passes * cfg.grow_fraction)))
    history = []
    for p in range(cfg.num_passes):
        aligns = [viterbi_align(am, vals[u], phone_seqs[u], u) for u in utts]
        total = float(sum(a.score for a in aligns))
        history.append(total)
        log.debug("pass %d: logprob %.3f gauss %d", p, total, am.num_gauss)
        target = num_pdfs + (cfg.max_gauss - num_pdfs) * min(1.0, (p + 1) / grow_passes)
        am = _reestimate(am, vals, aligns, floor, max(num_pdfs, int(target)), cfg)
    aligns = [viterbi_align(am, vals[u], phone_seqs[u], u) for u in utts]
    history.append(float(sum(a.score for a in aligns)))
    return am, {a.utt_id: a for a in aligns}, history, skipped


# ---- LDA ---------------------------------------------------------------------

def estimate_lda(feats, labels, target_dim):
    """Rows are the top generalized eigenvectors of between- vs within-class scatter."""
    xs = [f.values if hasattr(f, "values") else np.asarray(f) for f in feats]
    x = np.vstack(xs)
    y = np.concatenate([np.asarray(l, dtype=np.int64) for l in labels])
    if len(x) != len(y):
        raise ValueError("labels do not cover the frames")
    D = x.shape[1]
    if target_dim > D:
        raise ValueError("target_dim %d exceeds input dim %d" % (target_dim, D))
    classes, inv = np.unique(y, return_inverse=True)
    if len(classes) < 2:
        raise ValueError("LDA needs at least two classes")
    mu = x.mean(axis=0)
    counts = np.bincount(inv).astype(np.float64)
    sums = np.zeros((len(classes), D))
    np.add.at(sums, inv, x)
    cmeans = sums / counts[:, None]
    centered = x - cmeans[inv]
    sw = centered.T @ centered / len(x)
    d = cmeans - mu
    sb = (d * counts[:, None]).T @ d / len(x)
    sw += 1e-6 * np.trace(sw) / D * np.eye(D)
    vals, vecs = eigh(sb, sw)
    order = np.argsort(-vals, kind="stable")[:target_dim]
    w = vecs[:, order].T
    w /= np.linalg.norm(w, axis=1, keepdims=True)
    sign = np.sign(w[np.arange(len(w)), np.argmax(np.abs(w), axis=1)])
    return w * sign[:, None]


# ---- alignment text dump ------------------------------------------------------

def write_alignments(path, alignments):
    with open(path, "w", encoding="utf-8") as f:
        for al in (alignments.values() if isinstance(alignments, dict) else alignments):
            for t in range(len(al)):
                f.write("%s %d %d %d %d\n" % (al.utt_id, t, al.phones[t], al.states[t], al.pdfs[t]))


def read_alignments(path):
    rows = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            parts = line.split()
            if len(parts) != 5:
                continue
            rows.setdefault(parts[0], []).append([int(v) for v in parts[1:]])
    out = {}
    for utt, r in rows.items():
        a = np.array(r, dtype=np.int64)
        a = a[np.argsort(a[:, 0])]
        out[utt] = Alignment(utt, a[:, 1], a[:, 2], a[:, 3])
    return out
