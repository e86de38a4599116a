"""Two-layer pronunciation lexicon, trie segmentation and backoff n-gram LMs."""

import math
from collections import Counter, defaultdict

SIL_WORD = "<sil>"
OOV_WORD = "<unk>"
BOS = "<s>"
EOS = "</s>"
SIL_PHONE = "sil"
OOV_PHONE = "spn"


class LexiconError(ValueError):
    pass


class Lexicon:
    def __init__(self, words, syllables):
        # words: word -> list of pronunciations (syllable lists)
        self.words = {w: [list(p) for p in prons] for w, prons in words.items()}
        self.syllables = {s: list(ph) for s, ph in syllables.items()}
        phones = set()
        for ph in self.syllables.values():
            phones.update(ph)
        phones.discard(SIL_PHONE)
        phones.discard(OOV_PHONE)
        self.phones = [SIL_PHONE, OOV_PHONE] + sorted(phones)
        self.phone_index = {p: i for i, p in enumerate(self.phones)}

    def __contains__(self, word):
        return word in self.words

    def __len__(self):
        return len(self.words)

    @property
    def vocab(self):
        return sorted(self.words)

    def pronunciations(self, word):
        """All phone sequences of a word; OOV words get the garbage phone."""
        if word == SIL_WORD:
            return [[SIL_PHONE]]
        if word not in self.words:
            return [[OOV_PHONE]]
        return [[ph for s in pron for ph in self.syllables[s]] for pron in self.words[word]]

    def word_to_phones(self, word):
        return self.pronunciations(word)[0]

    def utterance_phones(self, words, boundary_silence=True):
        seq = [SIL_PHONE] if boundary_silence else []
        for w in words:
            seq.extend(self.word_to_phones(w))
        if boundary_silence:
            seq.append(SIL_PHONE)
        return [self.phone_index[p] for p in seq]

    def write(self, word_path, syllable_path):
        with open(word_path, "w", encoding="utf-8") as f:
            for w in sorted(self.words):
                for pron in self.words[w]:
                    f.write("%s\t%s\n" % (w, " ".join(pron)))
        with open(syllable_path, "w", encoding="utf-8") as f:
            for s in sorted(self.syllables):
                f.write("%s\t%s\n" % (s, " ".join(self.syllables[s])))

    @classmethod
    def read(cls, word_path, syllable_path):
        return compile_lexicon(_read_entries(word_path), _read_entries(syllable_path))


def _read_entries(path):
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if "\t" not in line:
                raise LexiconError("%s:%d: expected key<TAB>values" % (path, lineno))
            k, v = line.split("\t", 1)
            out.append((k, v.split()))
    return out


def compile_lexicon(word_entries, syllable_entries):
    syllables = {}
    for syl, phones in syllable_entries:
        if not phones:
            raise LexiconError("syllable %r has no phones" % syl)
        if syl in syllables and syllables[syl] != list(phones):
            raise LexiconError("syllable %r defined twice with different phones" % syl)
        syllables[syl] = list(phones)
    words = defaultdict(list)
    for word, syls in word_entries:
        for s in syls:
            if s not in syllables:
                raise LexiconError("word %r uses unknown syllable %r" % (word, s))
        if list(syls) not in words[word]:
            words[word].append(list(syls))
    return Lexicon(dict(words), syllables)


# ---- segmentation ---------------------------------------------------------------

OOV_PENALTY = math.log(1e-6)
_END = object()


def build_trie(words):
    root = {}
    for w in words:
        node = root
        for ch in w:
            node = node.setdefault(ch, {})
        node[_END] = w
    return root


def segment_text(text, lexicon, unigram_logprobs, oov_penalty=OOV_PENALTY, trie=None):
    """Maximum log-probability segmentation of an unspaced symbol string.

    Words come from a prefix trie over the vocabulary; any single symbol may
    also be emitted as an OOV token (the symbol itself) at oov_penalty.
    """
    vocab = lexicon.words if isinstance(lexicon, Lexicon) else lexicon
    if trie is None:
        trie = build_trie(vocab)
    n = len(text)
    best = [-math.inf] * (n + 1)
    back = [None] * (n + 1)
    best[0] = 0.0
    for i in range(n):
        if best[i] == -math.inf:
            continue
        # single-symbol OOV step
        s = best[i] + oov_penalty
        if s > best[i + 1]:
            best[i + 1], back[i + 1] = s, (i, text[i])
        node = trie
        for j in range(i, n):
            node = node.get(text[j])
            if node is None:
                break
            w = node.get(_END)
            if w is not None:
                s = best[i] + unigram_logprobs.get(w, oov_penalty)
                if s > best[j + 1]:
                    best[j + 1], back[j + 1] = s, (i, w)
    out = []
    i = n
    while i > 0:
        i, w = back[i]
        out.append(w)
    return out[::-1]


def segment_corpus(texts, lexicon, iterations=2):
    """Segment with a uniform unigram, then re-estimate unigrams and resegment."""
    trie = build_trie(lexicon.words)
    uni = {w: -math.log(len(lexicon)) for w in lexicon.words}
    out = texts
    for _ in range(iterations):
        out = [segment_text("".join(t.split()), lexicon, uni, trie=trie) for t in texts]
        counts = Counter(w for s in out for w in s if w in lexicon.words)
        total = sum(counts.values()) + len(lexicon)
        uni = {w: math.log((counts[w] + 1) / total) for w in lexicon.words}
    return out


# ---- n-gram LM -------------------------------------------------------------------

class NgramLm:
    """Backoff n-gram model stored as explicit probabilities plus backoff weights.

    probs[m] maps (m-1 context words..., word) -> p; bows[m] maps an m-word
    context -> backoff weight. Unlisted contexts back off with weight 1.
    """

    def __init__(self, order, vocab, probs, bows):
        self.order = order
        self.vocab = list(vocab)
        self.probs = probs
        self.bows = bows
        self.predicted = [w for w in self.vocab if w != BOS]
        self._vocab_set = set(self.vocab)

    def map_word(self, w):
        return w if w in self._vocab_set else OOV_WORD

    def prob(self, word, context=()):
        word = self.map_word(word)
        ctx = tuple(self.map_word(w) for w in context)[-(self.order - 1):] if self.order > 1 else ()
        weight = 1.0
        while True:
            p = self.probs[len(ctx) + 1].get(ctx + (word,))
            if p is not None:
                return weight * p
            if not ctx:
                return 0.0
            weight *= self.bows[len(ctx)].get(ctx, 1.0)
            ctx = ctx[1:]

    def logprob(self, word, context=()):
        p = self.prob(word, context)
        return math.log(p) if p > 0 else -math.inf

    def contexts(self, length):
        return [k[:-1] for k in self.probs[length + 1]]

    def sentence_logprob(self, words):
        hist = [BOS]
        total = 0.0
        for w in list(words) + [EOS]:
            total += self.logprob(w, tuple(hist[-(self.order - 1):]) if self.order > 1 else ())
            hist.append(w)
        return total

    # -- ARPA interchange --
    def write_arpa(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write("\\data\\\n")
            for m in range(1, self.order + 1):
                f.write("ngram %d=%d\n" % (m, len(self.probs[m])))
            for m in range(1, self.order + 1):
                f.write("\n\\%d-grams:\n" % m)
                for key in sorted(self.probs[m]):
                    p = self.probs[m][key]
                    lp = math.log10(p) if p > 0 else -99.0
                    line = "%.10g\t%s" % (lp, " ".join(key))
                    if m < self.order and key in self.bows.get(m, {}):
                        line += "\t%.10g" % math.log10(max(self.bows[m][key], 1e-99))
                    f.write(line + "\n")
            f.write("\n\\end\\\n")

    @classmethod
    def read_arpa(cls, path):
        probs = defaultdict(dict)
        bows = defaultdict(dict)
        order = 0
        section = None
        with open(path, encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if not line or line == "\\data\\":
                    continue
                if line.startswith("ngram "):
                    order = max(order, int(line[6:].split("=")[0]))
                elif line.endswith("-grams:"):
                    section = int(line[1:line.index("-")])
                elif line == "\\end\\":
                    break
                elif section:
                    parts = line.split()
                    lp = float(parts[0])
                    key = tuple(parts[1:1 + section])
                    probs[section][key] = 0.0 if lp <= -99 else 10.0 ** lp
                    if len(parts) > 1 + section:
                        bows[section][key] = 10.0 ** float(parts[1 + section])
        vocab = [k[0] for k in probs[1]]
        for m in range(1, order + 1):
            probs.setdefault(m, {})
            bows.setdefault(m, {})
        return cls(order, vocab, dict(probs), dict(bows))


KN_DISCOUNT = 0.75
GT_MAX_COUNT = 7  # counts above this are trusted as-is


def _prepare(corpus, vocab):
    vs = set(vocab) if vocab is not None else None
    sents = []
    for s in corpus:
        toks = [w for w in s if w != SIL_WORD]
        if vs is not None:
            toks = [w if w in vs else OOV_WORD for w in toks]
        sents.append(toks)
    words = set(w for s in sents for w in s)
    if vs is not None:
        words |= vs
    full = sorted(words - {BOS, EOS, OOV_WORD})
    return sents, [BOS, EOS, OOV_WORD] + full


def _ngram_counts(sents, order):
    counts = {m: Counter() for m in range(1, order + 1)}
    for s in sents:
        toks = [BOS] * 1 + s + [EOS]
        for m in range(1, order + 1):
            for i in range(len(toks) - m + 1):
                g = tuple(toks[i:i + m])
                if m == 1 and g[0] == BOS:
                    continue
                counts[m][g] += 1
    return counts


def train_ngram(corpus, order=3, smoothing="kneser_ney", vocab=None, discount=KN_DISCOUNT):
    if order not in (2, 3, 4):
        raise ValueError("order must be 2, 3 or 4")
    corpus = [list(s) for s in corpus]
    if not corpus:
        raise ValueError("empty corpus")
    sents, full_vocab = _prepare(corpus, vocab)
    counts = _ngram_counts(sents, order)
    if smoothing in ("kneser_ney", "kn"):
        probs, bows = _kneser_ney(counts, order, full_vocab, discount)
    elif smoothing in ("good_turing", "gt"):
        probs, bows = _good_turing(counts, order, full_vocab)
    else:
        raise ValueError("smoothing must be kneser_ney or good_turing")
    return NgramLm(order, full_vocab, probs, bows)


def _kneser_ney(counts, order, vocab, D):
    # adjusted counts: raw for the highest order and for n-grams starting
    # with <s>; otherwise the number of distinct left extensions
    adj = {order: Counter(counts[order])}
    for m in range(order - 1, 0, -1):
        cont = Counter()
        for g in counts[m + 1]:
            cont[g[1:]] += 1
        a = Counter()
        for g, c in counts[m].items():
            a[g] = c if g[0] == BOS else cont.get(g, 0)
        for g, c in cont.items():
            if g not in a:
                a[g] = c
        adj[m] = a

    predicted = [w for w in vocab if w != BOS]
    probs = {}
    bows = {}
    # unigrams interpolated with the uniform distribution
    uni = adj[1]
    total = sum(uni.values())
    types = sum(1 for c in uni.values() if c > 0)
    p1 = {}
    for w in predicted:
        c = uni.get((w,), 0)
        p1[(w,)] = max(c - D, 0.0) / total + D * types / total / len(predicted)
    p1[(BOS,)] = 0.0
    probs[1] = p1

    for m in range(2, order + 1):
        ctx_total = Counter()
        ctx_types = Counter()
        for g, c in adj[m].items():
            if c > 0:
                ctx_total[g[:-1]] += c
                ctx_types[g[:-1]] += 1
        pm = {}
        gam = {}
        for h in ctx_total:
            gam[h] = D * ctx_types[h] / ctx_total[h]
        for g, c in adj[m].items():
            if c <= 0:
                continue
            h = g[:-1]
            lower = _lookup(probs, bows, g[1:])
            pm[g] = max(c - D, 0.0) / ctx_total[h] + gam[h] * lower
        probs[m] = pm
        bows[m - 1] = gam
    bows.setdefault(order, {})
    return probs, bows


def _lookup(probs, bows, g):
    """Backoff lookup of p(g[-1] | g[:-1]) in partially built tables."""
    ctx, w = g[:-1], g[-1]
    weight = 1.0
    while True:
        p = probs[len(ctx) + 1].get(ctx + (w,))
        if p is not None:
            return weight * p
        if not ctx:
            return 0.0
        weight *= bows.get(len(ctx), {}).get(ctx, 1.0)
        ctx = ctx[1:]


def _gt_discounts(counts):
    """Katz discount ratio d_r for r = 1..GT_MAX_COUNT."""
    n = Counter(counts.values())
    k = GT_MAX_COUNT
    d = {}
    common = (k + 1) * n.get(k + 1, 0) / n[1] if n.get(1) else 0.0
    for r in range(1, k + 1):
        ok = n.get(r, 0) > 0 and n.get(r + 1, 0) > 0 and common < 1
        if ok:
            dr = ((r + 1) * n[r + 1] / (r * n[r]) - common) / (1 - common)
            ok = 0 < dr < 1
        # fall back to an absolute discount of 0.5 when the estimate is unusable
        d[r] = dr if ok else 1.0 - 0.5 / r
    return d


def _good_turing(counts, order, vocab):
    predicted = [w for w in vocab if w != BOS]
    probs = {}
    bows = {}

    def disc(c, d):
        return c * d[c] if c <= GT_MAX_COUNT else c

    d1 = _gt_discounts(counts[1])
    total = sum(counts[1].values())
    p1 = {}
    seen_mass = 0.0
    for w in predicted:
        c = counts[1].get((w,), 0)
        if c:
            p1[(w,)] = disc(c, d1) / total
            seen_mass += p1[(w,)]
    unseen = [w for w in predicted if (w,) not in p1]
    left = 1.0 - seen_mass
    if unseen:
        for w in unseen:
            p1[(w,)] = left / len(unseen)
    else:
        for w in predicted:
            p1[(w,)] += left / len(predicted)
    p1[(BOS,)] = 0.0
    probs[1] = p1

    for m in range(2, order + 1):
        dm = _gt_discounts(counts[m])
        ctx_total = Counter()
        by_ctx = defaultdict(list)
        for g, c in counts[m].items():
            ctx_total[g[:-1]] += c
            by_ctx[g[:-1]].append((g, c))
        pm = {}
        alpha = {}
        for h, items in by_ctx.items():
            tot = ctx_total[h]
            ps = {g: disc(c, dm) / tot for g, c in items}
            left = 1.0 - sum(ps.values())
            if left <= 1e-12:
                # every follower is trusted: reserve one pseudo-count for unseen words
                ps = {g: c / (tot + 1.0) for g, c in items}
                left = 1.0 - sum(ps.values())
            lower_seen = sum(_lookup(probs, bows, g[1:]) for g in ps)
            if 1.0 - lower_seen <= 1e-12:
                s = sum(ps.values())
                ps = {g: p / s for g, p in ps.items()}
                alpha[h] = 0.0
            else:
                alpha[h] = left / (1.0 - lower_seen)
            pm.update(ps)
        probs[m] = pm
        bows[m - 1] = alpha
    bows.setdefault(order, {})
    return probs, bows


def uniform_lm(words):
    """Unigram-only model assigning equal probability to every word and </s>."""
    vocab = [BOS, EOS] + sorted(set(words) - {BOS, EOS})
    p = 1.0 / (len(vocab) - 1)
    probs = {1: {(w,): (0.0 if w == BOS else p) for w in vocab}, 2: {}}
    return NgramLm(2, vocab, probs, {1: {}, 2: {}})


def perplexity(lm, sentences, include_eos=True):
    """exp(-mean log p) with </s> counted as an event; NaN for empty text."""
    total = 0.0
    n = 0
    for s in sentences:
        hist = [BOS]
        toks = list(s) + ([EOS] if include_eos else [])
        for w in toks:
            ctx = tuple(hist[-(lm.order - 1):]) if lm.order > 1 else ()
            total += lm.logprob(w, ctx)
            hist.append(w)
            n += 1
    if n == 0:
        return float("nan")
    return math.exp(-total / n)


def unigram_logprobs(lm):
    return {k[0]: math.log(p) for k, p in lm.probs[1].items() if p > 0}
