"""Total-variability i-vector extractor on top of a diagonal UBM."""

from dataclasses import dataclass

import numpy as np

from . import serial
from .gmm import DiagGmm


@dataclass
class BaumWelchStats:
    n: np.ndarray  # (M,) occupancies
    f: np.ndarray  # (M, F) first-order sums centered on the UBM means

    def __add__(self, other):
        return BaumWelchStats(self.n + other.n, self.f + other.f)

    def scaled(self, k):
        return BaumWelchStats(self.n * k, self.f * k)


def accumulate_stats(ubm, fm):
    x = fm.values if hasattr(fm, "values") else np.atleast_2d(np.asarray(fm, dtype=np.float64))
    if x.shape[1] != ubm.dim:
        raise ValueError("feature dim %d does not match UBM dim %d" % (x.shape[1], ubm.dim))
    post = ubm.posteriors(x)
    n = post.sum(axis=0)
    f = post.T @ x - n[:, None] * ubm.means
    return BaumWelchStats(n, f)


class IvectorExtractor:
    def __init__(self, ubm, T):
        self.ubm = ubm
        self.T = np.asarray(T, dtype=np.float64)
        M, F = ubm.means.shape
        if self.T.shape[0] != M * F or self.T.ndim != 2 or self.T.shape[1] < 1:
            raise ValueError("T must be (M*F) x D with D >= 1")
        if not np.all(np.isfinite(self.T)):
            raise ValueError("non-finite T")
        self._prepare()

    @property
    def ivector_dim(self):
        return self.T.shape[1]

    def _prepare(self):
        M, F = self.ubm.means.shape
        self._Tc = self.T.reshape(M, F, -1)                       # M x F x D
        self._inv_var = 1.0 / self.ubm.variances                  # M x F
        self._TtSinv = np.transpose(self._Tc * self._inv_var[:, :, None], (0, 2, 1))  # M x D x F
        self._TtSinvT = np.einsum("mdf,mfe->mde", self._TtSinv, self._Tc)         # M x D x D

    def precision(self, stats):
        D = self.ivector_dim
        return np.eye(D) + np.einsum("m,mde->de", stats.n, self._TtSinvT)

    def linear_term(self, stats):
        return np.einsum("mdf,mf->d", self._TtSinv, stats.f)

    def posterior(self, stats):
        """Mean and covariance of the i-vector posterior."""
        L = self.precision(stats)
        cov = np.linalg.inv(L)
        cov = 0.5 * (cov + cov.T)
        return cov @ self.linear_term(stats), cov

    def extract(self, fm):
        return extract_from_stats(self, accumulate_stats(self.ubm, fm))

    def objective(self, stats_list):
        """Marginal log-likelihood of the statistics under the model (up to a T-free constant)."""
        total = 0.0
        for s in stats_list:
            L = self.precision(s)
            b = self.linear_term(s)
            _, logdet = np.linalg.slogdet(L)
            total += 0.5 * b @ np.linalg.solve(L, b) - 0.5 * logdet
        return total

    def save(self, path):
        serial.dump(path, "IVX", 1, [("ubm_weights", self.ubm.weights), ("ubm_means", self.ubm.means),
                                     ("ubm_variances", self.ubm.variances), ("T", self.T)])

    @classmethod
    def load(cls, path):
        a, _ = serial.load(path, "IVX", 1)
        return cls(DiagGmm(a["ubm_weights"], a["ubm_means"], a["ubm_variances"]), a["T"])


def extract_from_stats(ex, stats):
    """w = (I + T' S^-1 N T)^-1 T' S^-1 f."""
    return np.linalg.solve(ex.precision(stats), ex.linear_term(stats))


def extract_ivector(ex, fm):
    return ex.extract(fm)


def train_total_variability(stats, ubm, D, iters=10, seed=0, return_history=False):
    stats = list(stats)
    if len(stats) < D:
        raise ValueError("need at least D=%d utterances, got %d" % (D, len(stats)))
    M, F = ubm.means.shape
    rng = np.random.default_rng(seed)
    ex = IvectorExtractor(ubm, 0.1 * rng.standard_normal((M * F, D)))
    history = [ex.objective(stats)]
    for _ in range(iters):
        C = np.zeros((M, F, D))
        A = np.zeros((M, D, D))
        for s in stats:
            w, cov = ex.posterior(s)
            C += s.f[:, :, None] * w[None, None, :]
            A += s.n[:, None, None] * (cov + np.outer(w, w))[None]
        Tc = np.linalg.solve(A, np.transpose(C, (0, 2, 1)))  # M x D x F
        ex = IvectorExtractor(ubm, np.transpose(Tc, (0, 2, 1)).reshape(M * F, D))
        history.append(ex.objective(stats))
    if return_history:
        return ex, history
    return ex


def write_ivectors(path, ivecs):
    with open(path, "w", encoding="utf-8") as f:
        for utt, v in ivecs.items():
            f.write(utt + " " + " ".join(repr(float(x)) for x in v) + "\n")


def read_ivectors(path):
    out = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            parts = line.split()
            if parts:
                out[parts[0]] = np.array([float(v) for v in parts[1:]])
    return out
