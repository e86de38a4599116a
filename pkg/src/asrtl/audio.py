"""Audio buffers, PCM WAV I/O, resampling and the speed/volume augmentations."""

import os
import struct
from dataclasses import dataclass, field

import numpy as np


class WavError(Exception):
    """Base class for WAV reading errors."""


class WavNotFoundError(WavError, FileNotFoundError):
    pass


class WavHeaderError(WavError):
    """RIFF/WAVE header is corrupt or truncated."""


class WavEncodingError(WavError):
    """File is a valid RIFF container but not 8/16-bit PCM."""


@dataclass(frozen=True)
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int
    clamped: int = field(default=0, compare=False)

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 1:
            raise ValueError("AudioBuffer is mono; got shape %s" % (s.shape,))
        if int(self.sample_rate) <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(s)):
            raise ValueError("non-finite samples")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self):
        return len(self.samples) / self.sample_rate


def read_wav(path):
    if not os.path.exists(path):
        raise WavNotFoundError(path)
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavHeaderError("%s: missing RIFF/WAVE magic" % path)

    pos = 12
    fmt = None
    pcm = None
    while pos + 8 <= len(data):
        cid = data[pos:pos + 4]
        (size,) = struct.unpack("<I", data[pos + 4:pos + 8])
        body = data[pos + 8:pos + 8 + size]
        if cid == b"fmt ":
            if len(body) < 16:
                raise WavHeaderError("%s: truncated fmt chunk" % path)
            fmt = struct.unpack("<HHIIHH", body[:16])
        elif cid == b"data":
            pcm = body
            break
        pos += 8 + size + (size & 1)
    if fmt is None or pcm is None:
        raise WavHeaderError("%s: missing fmt or data chunk" % path)

    tag, channels, rate, _, _, bits = fmt
    if tag != 1 or bits not in (8, 16):
        raise WavEncodingError("%s: unsupported encoding (format %d, %d bits)" % (path, tag, bits))
    if channels < 1 or rate <= 0:
        raise WavHeaderError("%s: bad channel count or rate" % path)

    width = bits // 8
    n = len(pcm) // (width * channels)
    pcm = pcm[:n * width * channels]
    if bits == 16:
        x = np.frombuffer(pcm, dtype="<i2").astype(np.float64) / 32768.0
    else:
        x = (np.frombuffer(pcm, dtype=np.uint8).astype(np.float64) - 128.0) / 128.0
    x = x.reshape(n, channels).mean(axis=1)
    return AudioBuffer(x, rate)


def write_wav(path, buf, bits=16):
    if bits == 16:
        q = np.clip(np.round(buf.samples * 32768.0), -32768, 32767).astype("<i2")
    elif bits == 8:
        q = np.clip(np.round(buf.samples * 128.0 + 128.0), 0, 255).astype(np.uint8)
    else:
        raise ValueError("bits must be 8 or 16")
    pcm = q.tobytes()
    width = bits // 8
    header = b"RIFF" + struct.pack("<I", 36 + len(pcm)) + b"WAVE"
    header += b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, buf.sample_rate,
                                    buf.sample_rate * width, width, bits)
    header += b"data" + struct.pack("<I", len(pcm))
    with open(path, "wb") as f:
        f.write(header + pcm)


HALF_TAPS = 16
KAISER_BETA = 8.6


def resample(buf, target_rate):
    """Band-limited resampling with a Kaiser-windowed sinc interpolator.

    The low-pass cutoff sits at the lower of the two Nyquist frequencies,
    so downsampling also anti-aliases.
    """
    target_rate = int(target_rate)
    if target_rate <= 0:
        raise ValueError("target_rate must be positive")
    src = buf.sample_rate
    if target_rate == src:
        return buf
    x = buf.samples
    n_out = int(round(len(x) * target_rate / src))
    if n_out == 0 or len(x) == 0:
        return AudioBuffer(np.zeros(n_out), target_rate)

    cutoff = min(1.0, target_rate / src)
    # widen the kernel in input samples when downsampling so the number of
    # zero crossings covered stays at HALF_TAPS
    half = int(np.ceil(HALF_TAPS / cutoff))
    pos = np.arange(n_out) * (src / target_rate)
    base = np.floor(pos).astype(np.int64)
    offs = np.arange(-half + 1, half + 1)
    idx = base[:, None] + offs[None, :]
    d = pos[:, None] - idx
    r = np.clip(d / half, -1.0, 1.0)
    w = np.i0(KAISER_BETA * np.sqrt(1.0 - r * r)) / np.i0(KAISER_BETA)
    h = cutoff * np.sinc(cutoff * d) * w
    valid = (idx >= 0) & (idx < len(x))
    vals = np.where(valid, x[np.clip(idx, 0, len(x) - 1)], 0.0)
    y = np.sum(vals * h, axis=1)
    return AudioBuffer(np.clip(y, -1.0, 1.0), target_rate)


def speed_perturb(buf, factor):
    """Resample by 1/factor and relabel at the original rate."""
    if not 0.5 < factor < 2.0:
        raise ValueError("speed factor must lie in (0.5, 2.0), got %r" % factor)
    if factor == 1.0:
        return buf
    # treat the signal as if recorded at rate*factor, bring it back to rate
    n_out = int(round(len(buf) / factor))
    virtual = AudioBuffer(buf.samples, int(round(buf.sample_rate * factor)))
    out = resample(virtual, buf.sample_rate).samples
    out = out[:n_out] if len(out) >= n_out else np.pad(out, (0, n_out - len(out)))
    return AudioBuffer(out, buf.sample_rate)


def volume_perturb(buf, gain):
    """Scale by gain and clamp to [-1, 1]; the clamp count is stored on the result."""
    if not gain > 0:
        raise ValueError("gain must be positive")
    y = buf.samples * gain
    clamped = int(np.count_nonzero(np.abs(y) > 1.0))
    return AudioBuffer(np.clip(y, -1.0, 1.0), buf.sample_rate, clamped=clamped)


SPEED_FACTORS = (0.9, 1.0, 1.1)
VOLUME_RANGE = (0.125, 2.0)


def augment(buf, rng, speed_factors=SPEED_FACTORS, volume_range=VOLUME_RANGE):
    """Yield (factor, buffer) for each speed copy with a random volume gain."""
    for f in speed_factors:
        gain = rng.uniform(*volume_range)
        yield f, volume_perturb(speed_perturb(buf, f), gain)


def read_manifest(path):
    """Corpus manifest: utt-id, wav path, speaker id, transcript (tab separated)."""
    rows = []
    base = os.path.dirname(os.path.abspath(path))
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ValueError("%s:%d: expected 4 tab-separated fields" % (path, lineno))
            utt, wav, spk, text = parts
            if not os.path.isabs(wav):
                wav = os.path.join(base, wav)
            rows.append((utt, wav, spk, text))
    return rows


def write_manifest(path, rows):
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "w", encoding="utf-8") as f:
        for utt, wav, spk, text in rows:
            if os.path.isabs(wav):
                wav = os.path.relpath(wav, base)
            f.write("%s\t%s\t%s\t%s\n" % (utt, wav, spk, text))
