import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from asrtl.lexlm import (BOS, EOS, OOV_PENALTY, OOV_PHONE, OOV_WORD, SIL_PHONE, SIL_WORD, Lexicon, LexiconError,
                         NgramLm, compile_lexicon, perplexity, segment_corpus, segment_text, train_ngram,
                         uniform_lm, unigram_logprobs)

from oracles import kn_bigram_by_hand, worst_sum_deviation

WORDS5 = {"a": -1.2, "ab": -1.0, "b": -2.5, "abc": -3.1, "c": -1.7}


def toy_lexicon():
    return compile_lexicon([("AB", ["a", "b"]), ("A", ["a"]), ("AB", ["b"])],
                           [("a", ["ph1"]), ("b", ["ph2", "ph3"])])


def random_corpus(rng, n=200, vocab=12):
    words = ["w%d" % i for i in range(vocab)]
    zipf = 1.0 / np.arange(1, vocab + 1)
    zipf /= zipf.sum()
    return [list(rng.choice(words, size=rng.integers(1, 7), p=zipf)) for _ in range(n)]


def brute_force_segment(text, logp, penalty=OOV_PENALTY):
    """Score every way to cut text into pieces; pieces are vocab words or single OOV symbols."""
    best, arg = -math.inf, None
    n = len(text)
    for cuts in itertools.product([False, True], repeat=max(n - 1, 0)):
        pieces, start = [], 0
        for i, c in enumerate(cuts, 1):
            if c:
                pieces.append(text[start:i])
                start = i
        pieces.append(text[start:])
        score = 0.0
        for p in pieces:
            if p in logp:
                score += logp[p]
            elif len(p) == 1:
                score += penalty
            else:
                score = -math.inf
                break
        if score > best:
            best, arg = score, pieces
    return best, arg


def seg_score(seg, logp, penalty=OOV_PENALTY):
    return sum(logp.get(w, penalty) for w in seg)


# ---- lexicon -----------------------------------------------------------------

def test_two_layer_composition():
    lex = toy_lexicon()
    assert lex.word_to_phones("AB") == ["ph1", "ph2", "ph3"]
    assert lex.pronunciations("AB") == [["ph1", "ph2", "ph3"], ["ph2", "ph3"]]
    assert lex.phones[:2] == [SIL_PHONE, OOV_PHONE]


def test_oov_and_silence():
    lex = toy_lexicon()
    assert lex.pronunciations("ZZZ") == [[OOV_PHONE]]
    assert lex.pronunciations(SIL_WORD) == [[SIL_PHONE]]
    idx = lex.utterance_phones(["A"])
    assert [lex.phones[i] for i in idx] == [SIL_PHONE, "ph1", SIL_PHONE]


def test_unknown_syllable_named():
    with pytest.raises(LexiconError, match="'q'"):
        compile_lexicon([("W", ["a", "q"])], [("a", ["p"])])
    with pytest.raises(LexiconError):
        compile_lexicon([], [("a", ["p"]), ("a", ["x"])])


def test_lexicon_files_roundtrip(tmp_path):
    lex = toy_lexicon()
    wp, sp = str(tmp_path / "words.txt"), str(tmp_path / "syl.txt")
    lex.write(wp, sp)
    back = Lexicon.read(wp, sp)
    assert back.words == lex.words and back.syllables == lex.syllables
    (tmp_path / "bad.txt").write_text("no-tab-here\n")
    with pytest.raises(LexiconError, match=":1:"):
        Lexicon.read(str(tmp_path / "bad.txt"), sp)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.lists(st.sampled_from(["a", "b", "c"]), min_size=1, max_size=3), min_size=1, max_size=5))
def test_word_phones_are_syllable_concatenation(prons):
    syl = {"a": ["p1"], "b": ["p2", "p3"], "c": ["p4"]}
    lex = compile_lexicon([("w%d" % i, p) for i, p in enumerate(prons)], list(syl.items()))
    for i, p in enumerate(prons):
        assert lex.word_to_phones("w%d" % i) == [ph for s in p for ph in syl[s]]


# ---- segmentation -------------------------------------------------------------

def test_segment_examples():
    assert segment_text("abc", WORDS5, WORDS5) == ["ab", "c"]  # -2.7 beats abc (-3.1) and a,b,c
    assert segment_text("ab", {"ab": -1.0}, {"ab": -1.0}) == ["ab"]
    assert segment_text("z", WORDS5, WORDS5) == ["z"]
    assert segment_text("", WORDS5, WORDS5) == []


def test_segment_abc_matches_enumeration():
    vocab = {"a": -1.0, "ab": -1.5, "c": -0.5, "abc": -1.9}
    best, arg = brute_force_segment("abc", vocab)
    assert segment_text("abc", vocab, vocab) == arg
    assert best == pytest.approx(-1.9)


@settings(max_examples=150, deadline=None)
@given(st.text(alphabet="abcd", min_size=1, max_size=8))
def test_segment_dp_equals_brute_force(text):
    best, _ = brute_force_segment(text, WORDS5)
    seg = segment_text(text, WORDS5, WORDS5)
    assert "".join(seg) == text
    assert seg_score(seg, WORDS5) == pytest.approx(best)


def test_segment_corpus_prefers_real_words():
    lex = compile_lexicon([("ab", ["x"]), ("c", ["y"]), ("a", ["x"]), ("b", ["x"])], [("x", ["p"]), ("y", ["q"])])
    texts = ["ab c"] * 5 + ["ab"] * 3
    out = segment_corpus(texts, lex)
    assert out[0] == ["ab", "c"]


# ---- language models -----------------------------------------------------------

def test_kn_hand_value():
    corpus = [["a", "b"], ["a", "c"]]
    lm = train_ngram(corpus, order=2, smoothing="kneser_ney")
    hand = kn_bigram_by_hand(corpus, 0.75, "a", "b")
    assert hand == pytest.approx(0.2525, abs=1e-12)
    assert abs(lm.prob("b", ("a",)) - hand) < 1e-9


@pytest.mark.parametrize("smoothing", ["kneser_ney", "good_turing"])
@pytest.mark.parametrize("order", [2, 3, 4])
def test_sum_to_one(order, smoothing):
    rng = np.random.default_rng(order)
    lm = train_ngram(random_corpus(rng), order=order, smoothing=smoothing)
    assert worst_sum_deviation(lm, rng) < 1e-6
    assert all(0 < p <= 1 for m in range(2, order + 1) for p in lm.probs[m].values())


@pytest.mark.parametrize("smoothing", ["kneser_ney", "good_turing"])
def test_unseen_word_positive(smoothing):
    lm = train_ngram([["a", "b"], ["a", "c"]], order=3, smoothing=smoothing)
    assert lm.prob("never-seen", ("a", "b")) > 0
    assert lm.map_word("never-seen") == OOV_WORD


def test_gt_trusts_large_counts_and_sums():
    corpus = [["x", "y"]] * 20 + [["x", "z"]]
    lm = train_ngram(corpus, order=2, smoothing="good_turing")
    assert worst_sum_deviation(lm, np.random.default_rng(0), 20) < 1e-6
    assert lm.prob("y", ("x",)) > lm.prob("z", ("x",))


def test_silence_excluded_from_counts():
    a = train_ngram([["a", SIL_WORD, "b"]], order=2)
    b = train_ngram([["a", "b"]], order=2)
    assert a.prob("b", ("a",)) == pytest.approx(b.prob("b", ("a",)))


def test_train_errors():
    with pytest.raises(ValueError):
        train_ngram([["a"]], order=5)
    with pytest.raises(ValueError):
        train_ngram([], order=2)
    with pytest.raises(ValueError):
        train_ngram([["a"]], smoothing="witten_bell")


@pytest.mark.parametrize("smoothing", ["kneser_ney", "good_turing"])
def test_arpa_roundtrip(tmp_path, smoothing):
    rng = np.random.default_rng(5)
    lm = train_ngram(random_corpus(rng, 60), order=3, smoothing=smoothing)
    p = str(tmp_path / "lm.arpa")
    lm.write_arpa(p)
    text = open(p).read()
    assert text.startswith("\\data\\\nngram 1=")
    back = NgramLm.read_arpa(p)
    assert back.order == 3
    for h in lm.contexts(2)[:20]:
        for w in lm.predicted:
            assert back.prob(w, h) == pytest.approx(lm.prob(w, h), rel=1e-8)


def test_uniform_perplexity_equals_vocab():
    words = ["a", "b", "c", "d"]
    lm = uniform_lm(words)
    assert perplexity(lm, [["a", "c", "d"], ["b"]]) == pytest.approx(len(words) + 1)  # </s> is an event
    assert perplexity(lm, [["a", "c", "d"], ["b"]], include_eos=False) == pytest.approx(len(words) + 1)


def test_perplexity_empty_is_nan():
    assert math.isnan(perplexity(uniform_lm(["a"]), []))


def test_training_text_beats_shuffled():
    rng = np.random.default_rng(6)
    words = ["w%d" % i for i in range(15)]
    # a strongly sequential source: each word mostly followed by the next one
    corpus = []
    for _ in range(150):
        i = rng.integers(15)
        s = []
        for _ in range(rng.integers(3, 8)):
            s.append(words[i])
            i = (i + 1) % 15 if rng.random() < 0.8 else rng.integers(15)
        corpus.append(s)
    lm = train_ngram(corpus, order=3)
    ratios = []
    for seed in range(10):
        r = np.random.default_rng(seed)
        shuffled = [list(r.permutation(s)) for s in corpus]
        ratios.append(perplexity(lm, shuffled) - perplexity(lm, corpus))
    assert np.median(ratios) >= 0


def test_unigram_logprobs_cover_vocab():
    lm = train_ngram([["a", "b"], ["b"]], order=2)
    u = unigram_logprobs(lm)
    assert set(u) >= {"a", "b", EOS}
    assert BOS not in u
