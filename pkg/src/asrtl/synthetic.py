"""Deterministic parent/child artificial languages rendered as two-formant speech.

Each phone is a formant target (f1, f2, amplitude, voiced). Voiced phones
are harmonic series shaped by two resonance peaks; unvoiced phones are
resonator-filtered noise. Words are strings of syllable "characters" so
character error rate has a natural unit, as in written Chinese.
"""

import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter

from .audio import AudioBuffer, write_manifest, write_wav
from .features import frame_geometry, num_frames
from .lexlm import SIL_PHONE, compile_lexicon


@dataclass(frozen=True)
class Phone:
    name: str
    f1: float
    f2: float
    amplitude: float
    voiced: bool


@dataclass
class SyntheticLanguageSpec:
    name: str
    phones: list
    syllables: dict            # syllable character -> phone names
    words: list                # word strings (concatenated syllable characters)
    word_weights: np.ndarray
    sentence_words: tuple = (2, 4)
    phone_ms: tuple = (80, 200)
    silence_ms: tuple = (100, 200)
    num_speakers: int = 20
    sample_rate: int = 8000
    seed: int = 0
    phone_map: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.words:
            raise ValueError("word list must be nonempty")
        self.word_weights = np.asarray(self.word_weights, dtype=np.float64)
        if np.any(self.word_weights <= 0):
            raise ValueError("word weights must be positive")
        nyq = self.sample_rate / 2
        for p in self.phones:
            if not (p.f1 < nyq and p.f2 < nyq):
                raise ValueError("formants of %s exceed Nyquist" % p.name)
        self.phone_map = {p.name: p for p in self.phones}

    def word_syllables(self, word):
        return list(word)

    def lexicon(self):
        return compile_lexicon([(w, self.word_syllables(w)) for w in self.words],
                               list(self.syllables.items()))


F1_RANGE = (250.0, 1000.0)
F2_RANGE = (900.0, 3200.0)
MIN_DIST = 0.22  # in log-formant space


def _phone_dist(a, b):
    d = math.hypot(math.log(a.f1 / b.f1), math.log(a.f2 / b.f2))
    return d + (0.0 if a.voiced == b.voiced else 0.25)


def _draw_phones(rng, n, prefix, existing=()):
    out = []
    tries = 0
    min_dist = MIN_DIST
    while len(out) < n:
        tries += 1
        if tries % 2000 == 0:
            min_dist *= 0.9
        f1 = math.exp(rng.uniform(*np.log(F1_RANGE)))
        f2 = math.exp(rng.uniform(*np.log(F2_RANGE)))
        if f2 < f1 + 300:
            continue
        cand = Phone("%s%02d" % (prefix, len(out)), round(f1, 1), round(f2, 1),
                     round(float(rng.uniform(0.4, 1.0)), 3), bool(rng.uniform() < 0.7))
        if all(_phone_dist(cand, p) >= min_dist for p in list(existing) + out):
            out.append(cand)
    return out


def _draw_lexicon(rng, phones, num_syllables, num_words, char_base):
    names = [p.name for p in phones]
    syllables = {}
    seen = set()
    i = 0
    while len(syllables) < num_syllables:
        n = int(rng.integers(1, 4))
        seq = tuple(rng.choice(names, size=n))
        if seq in seen:
            continue
        seen.add(seq)
        syllables[chr(char_base + i)] = list(seq)
        i += 1
    chars = sorted(syllables)
    words = []
    wset = set()
    while len(words) < num_words:
        n = int(rng.choice([1, 2, 2, 3]))
        w = "".join(rng.choice(chars, size=n))
        if w in wset:
            continue
        wset.add(w)
        words.append(w)
    ranks = rng.permutation(num_words) + 1
    weights = 1.0 / ranks ** 0.8
    return syllables, words, weights


PARENT_CHAR_BASE = 0x4E00
CHILD_CHAR_BASE = 0x6C00


def make_language_pair(shared_fraction, seed=0, parent_phones=20, child_phones=None,
                       parent_words=200, child_words=50, parent_syllables=80,
                       child_syllables=40, sample_rate=8000, **kw):
    """Parent/child specs whose inventories share ceil(shared_fraction * |parent|) phones.

    Shared phones keep their exact formant targets; the child's remaining
    phones are drawn fresh. Word lists are disjoint.
    """
    if not 0.0 <= shared_fraction <= 1.0:
        raise ValueError("shared_fraction must lie in [0, 1]")
    child_phones = parent_phones if child_phones is None else child_phones
    rng = np.random.default_rng(seed)
    pphones = _draw_phones(rng, parent_phones, "p")
    n_shared = min(math.ceil(shared_fraction * parent_phones - 1e-9), child_phones)
    shared_idx = sorted(rng.choice(parent_phones, size=n_shared, replace=False)) if n_shared else []
    shared = [pphones[i] for i in shared_idx]
    fresh = _draw_phones(rng, child_phones - n_shared, "c", existing=pphones)
    cphones = shared + fresh

    psyl, pwords, pw = _draw_lexicon(rng, pphones, parent_syllables, parent_words, PARENT_CHAR_BASE)
    csyl, cwords, cw = _draw_lexicon(rng, cphones, child_syllables, child_words, CHILD_CHAR_BASE)
    parent = SyntheticLanguageSpec("parent", pphones, psyl, pwords, pw, sample_rate=sample_rate,
                                   seed=int(rng.integers(2 ** 31)), **kw)
    child = SyntheticLanguageSpec("child", cphones, csyl, cwords, cw, sample_rate=sample_rate,
                                  seed=int(rng.integers(2 ** 31)), **kw)
    return parent, child


# ---- rendering -------------------------------------------------------------------

NOISE_FLOOR = 0.003
BANDWIDTH = 120.0


@dataclass
class Speaker:
    f0: float
    formant_scale: float
    gain: float


def speaker_params(spec, index):
    rng = np.random.default_rng([spec.seed, 7, index])
    return Speaker(float(rng.uniform(90, 220)), float(rng.uniform(0.92, 1.08)), float(rng.uniform(0.7, 1.3)))


def _resonator(f, bw, sr):
    r = math.exp(-math.pi * bw / sr)
    theta = 2 * math.pi * f / sr
    return [1.0 - r], [1.0, -2 * r * math.cos(theta), r * r]


def render_phone(phone, n, sr, speaker, rng, phase0=0.0):
    """Return (samples, end phase) for n samples of one phone."""
    jitter = rng.uniform(0.96, 1.04, size=2)
    f1 = min(phone.f1 * speaker.formant_scale * jitter[0], sr / 2 - 200)
    f2 = min(phone.f2 * speaker.formant_scale * jitter[1], sr / 2 - 100)
    if phone.voiced:
        f0 = speaker.f0 * rng.uniform(0.97, 1.03) * np.linspace(1.0, 0.97, n)
        phase = phase0 + 2 * np.pi * np.cumsum(f0) / sr
        nh = int((sr / 2 - 100) // (speaker.f0 * 1.05))
        k = np.arange(1, nh + 1)
        fk = k * speaker.f0
        env = 1.0 / (1.0 + ((fk - f1) / BANDWIDTH) ** 2) + 0.8 / (1.0 + ((fk - f2) / BANDWIDTH) ** 2)
        env = env / np.sqrt(k)
        x = np.sin(np.outer(phase, k)) @ env
        end = float(phase[-1]) if n else phase0
    else:
        e = rng.standard_normal(n + 64)
        b1, a1 = _resonator(f1, BANDWIDTH * 2, sr)
        b2, a2 = _resonator(f2, BANDWIDTH * 2, sr)
        x = (lfilter(b1, a1, e) + 0.8 * lfilter(b2, a2, e))[64:]
        end = phase0
    rms = np.sqrt(np.mean(x ** 2)) if n else 1.0
    x = x / max(rms, 1e-12) * 0.1 * phone.amplitude * speaker.gain
    ramp = min(40, n // 4)
    if ramp:
        w = np.linspace(0, 1, ramp)
        x[:ramp] *= w
        x[-ramp:] *= w[::-1]
    return x, end


@dataclass
class Utterance:
    utt_id: str
    speaker: str
    words: list
    phones: list          # phone names including boundary silences
    audio: AudioBuffer
    segments: list        # (phone name, start sample, end sample)

    @property
    def text(self):
        return "".join(self.words)

    def frame_labels(self, phone_index, shift_ms=10.0, length_ms=25.0):
        """Phone id of the segment covering each frame's center."""
        sr = self.audio.sample_rate
        flen, fshift = frame_geometry(sr, shift_ms, length_ms)
        n = num_frames(len(self.audio), flen, fshift)
        centers = np.arange(n) * fshift + flen // 2
        ends = np.array([e for _, _, e in self.segments])
        seg = np.minimum(np.searchsorted(ends, centers, side="right"), len(self.segments) - 1)
        return np.array([phone_index[self.segments[i][0]] for i in seg], dtype=np.int64)


def render_utterance(spec, words, speaker, rng, utt_id="utt", speaker_id="spk"):
    sr = spec.sample_rate
    phones = [SIL_PHONE]
    for w in words:
        for syl in spec.word_syllables(w):
            phones.extend(spec.syllables[syl])
    phones.append(SIL_PHONE)
    pieces = []
    segments = []
    pos = 0
    phase = 0.0
    for name in phones:
        if name == SIL_PHONE:
            n = int(sr * rng.uniform(*spec.silence_ms) / 1000)
            x = np.zeros(n)
        else:
            n = int(sr * rng.uniform(*spec.phone_ms) / 1000)
            x, phase = render_phone(spec.phone_map[name], n, sr, speaker, rng, phase)
        pieces.append(x)
        segments.append((name, pos, pos + n))
        pos += n
    y = np.concatenate(pieces) + NOISE_FLOOR * rng.standard_normal(pos)
    return Utterance(utt_id, speaker_id, list(words), phones, AudioBuffer(np.clip(y, -1, 1), sr), segments)


def sample_sentence(spec, rng):
    n = int(rng.integers(spec.sentence_words[0], spec.sentence_words[1] + 1))
    p = spec.word_weights / spec.word_weights.sum()
    return [spec.words[i] for i in rng.choice(len(spec.words), size=n, p=p)]


def synthesize_corpus(spec, num_utterances, seed=0, prefix=None, out_dir=None):
    """Render num_utterances sentences; optionally write wavs, manifest and labels."""
    if num_utterances < 1:
        raise ValueError("num_utterances must be >= 1")
    prefix = prefix or spec.name
    utts = []
    for i in range(num_utterances):
        rng = np.random.default_rng([spec.seed, seed, i])
        spk = int(rng.integers(spec.num_speakers))
        words = sample_sentence(spec, rng)
        utts.append(render_utterance(spec, words, speaker_params(spec, spk), rng,
                                     "%s-%05d" % (prefix, i), "%s-spk%02d" % (spec.name, spk)))
    if out_dir is not None:
        write_corpus(utts, spec, out_dir)
    return utts


def write_corpus(utts, spec, out_dir):
    wav_dir = os.path.join(out_dir, "wav")
    lab_dir = os.path.join(out_dir, "labels")
    os.makedirs(wav_dir, exist_ok=True)
    os.makedirs(lab_dir, exist_ok=True)
    lex = spec.lexicon()
    rows = []
    for u in utts:
        wav = os.path.join(wav_dir, u.utt_id + ".wav")
        write_wav(wav, u.audio)
        rows.append((u.utt_id, wav, u.speaker, u.text))
        with open(os.path.join(lab_dir, u.utt_id + ".labels"), "w") as f:
            f.write("".join("%d\n" % v for v in u.frame_labels(lex.phone_index)))
    write_manifest(os.path.join(out_dir, "manifest.tsv"), rows)
    lex.write(os.path.join(out_dir, "words.txt"), os.path.join(out_dir, "syllables.txt"))
    return rows


def read_labels(path):
    with open(path) as f:
        return np.array([int(line) for line in f if line.strip()], dtype=np.int64)
