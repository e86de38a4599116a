import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from asrtl import _kernels_py as py
from asrtl.decoder import build_graph

from oracles import brute_force_chain, toy_decoder_case

try:
    from asrtl import _kernels as cy
except ImportError:  # extension not built in this environment
    cy = None

needs_cython = pytest.mark.skipif(cy is None, reason="compiled kernels not built")


def random_chain(rng, T, S):
    return (rng.standard_normal((T, S)) * 2, np.log(rng.uniform(0.1, 0.9, S)), np.log(rng.uniform(0.1, 0.9, S)))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 9), st.integers(1, 5))
def test_python_viterbi_matches_enumeration(seed, T, S):
    ll, sl, nl = random_chain(np.random.default_rng(seed), T, S)
    path, score = py.forced_viterbi(ll, sl, nl)
    if T < S:
        assert score == -np.inf
    else:
        assert score == pytest.approx(brute_force_chain(ll, sl, nl), abs=1e-10)
        assert path[0] == 0 and path[-1] == S - 1
        assert np.all(np.diff(path) >= 0) and np.all(np.diff(path) <= 1)


@needs_cython
@settings(max_examples=80, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 40), st.integers(1, 12))
def test_viterbi_backends_agree(seed, T, S):
    ll, sl, nl = random_chain(np.random.default_rng(seed), T, S)
    p1, s1 = py.forced_viterbi(ll, sl, nl)
    p2, s2 = cy.forced_viterbi(ll, sl, nl)
    if T < S:
        assert s1 == s2 == -np.inf
    else:
        assert s1 == pytest.approx(s2, abs=1e-9)
        np.testing.assert_array_equal(p1, p2)


@needs_cython
@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 3), max_size=12), st.lists(st.integers(0, 3), max_size=12))
def test_edit_ops_backends_agree(ref, hyp):
    r = np.array(ref, dtype=np.int64)
    h = np.array(hyp, dtype=np.int64)
    assert tuple(py.edit_ops(r, h)) == tuple(cy.edit_ops(r, h))


def graph_args(case):
    g = build_graph(case["lexicon"], case["lm"], case["self_loop"], case["lm_scale"], case["sil_prob"])
    return (case["acoustic_scale"] * case["loglik"], g.pdf, g.self_lp, g.next_lp, g.chain_start, g.chain_end,
            g.cross, g.start_w, g.final_w)


@needs_cython
@pytest.mark.parametrize("beam,nbest", [(1e9, 1), (1e9, 6), (2.0, 3), (0.0, 1)])
def test_token_pass_backends_agree(beam, nbest):
    for i in range(25):
        args = graph_args(toy_decoder_case(np.random.default_rng(i), 3, 30))
        a = py.token_pass(*args, beam, nbest)
        b = cy.token_pass(*args, beam, nbest)
        assert len(a) == len(b)
        for (sa, ca), (sb, cb) in zip(a, b):
            assert sa == pytest.approx(sb, abs=1e-9)
            assert list(ca) == list(cb)


def test_backend_switch_by_environment():
    env = dict(os.environ, ASRTL_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "import asrtl.kernels as k; print(k.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
