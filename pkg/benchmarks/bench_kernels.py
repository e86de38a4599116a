"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Prints one line per kernel with the median wall time of each backend and
the speedup. Inputs are sized like a desk-scale run: a 3-second utterance
aligned against a 30-state transcript, 40-token edit distances, and a
50-word decoding graph.
"""

import argparse
import time

import numpy as np

from asrtl import _kernels_py
from asrtl.decoder import build_graph
from asrtl.lexlm import compile_lexicon, train_ngram

try:
    from asrtl import _kernels
except ImportError:
    _kernels = None


def median_time(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def cases(rng):
    T, S = 300, 30
    ll = rng.standard_normal((T, S))
    sl = np.log(rng.uniform(0.3, 0.9, S))
    nl = np.log1p(-np.exp(sl))
    yield "forced_viterbi", (ll, sl, nl)

    ref = rng.integers(0, 20, 40)
    hyp = rng.integers(0, 20, 40)
    yield "edit_ops", (ref, hyp)

    phones = ["p%d" % i for i in range(12)]
    syl = [("s%d" % i, list(rng.choice(phones, size=2))) for i in range(30)]
    words = [("w%d" % i, ["s%d" % j for j in rng.choice(30, size=rng.integers(1, 3))]) for i in range(50)]
    lex = compile_lexicon(words, syl)
    corpus = [list(rng.choice([w for w, _ in words], size=rng.integers(2, 5))) for _ in range(200)]
    lm = train_ngram(corpus, order=2)
    g = build_graph(lex, lm, rng.uniform(0.3, 0.9, (len(lex.phones), 3)))
    am = 0.1 * rng.standard_normal((150, 3 * len(lex.phones))) * 5
    yield "token_pass", (am, g.pdf, g.self_lp, g.next_lp, g.chain_start, g.chain_end, g.cross,
                         g.start_w, g.final_w, 16.0, 1)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if _kernels is None:
        print("compiled kernels are not built; only the numpy fallback is available")
    print("%-16s %12s %12s %8s" % ("kernel", "python_ms", "cython_ms", "speedup"))
    for name, a in cases(np.random.default_rng(0)):
        tp = median_time(lambda: getattr(_kernels_py, name)(*a), args.repeat)
        if _kernels is None:
            print("%-16s %12.2f %12s %8s" % (name, tp * 1e3, "-", "-"))
            continue
        tc = median_time(lambda: getattr(_kernels, name)(*a), args.repeat)
        print("%-16s %12.2f %12.2f %7.1fx" % (name, tp * 1e3, tc * 1e3, tp / tc))


if __name__ == "__main__":
    main()
