"""MFCC and pitch front end, CMN, deltas, splicing and network input assembly."""

import struct
from dataclasses import dataclass

import numpy as np
from scipy.fft import dct


@dataclass(frozen=True)
class FeatureMatrix:
    values: np.ndarray
    frame_shift_ms: float = 10.0
    frame_length_ms: float = 25.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError("feature matrix must be 2-D, got shape %s" % (v.shape,))
        if not np.all(np.isfinite(v)):
            raise ValueError("non-finite feature values")
        object.__setattr__(self, "values", v)

    @property
    def num_frames(self):
        return self.values.shape[0]

    @property
    def dims(self):
        return self.values.shape[1]

    def __len__(self):
        return self.values.shape[0]

    def with_values(self, values):
        return FeatureMatrix(values, self.frame_shift_ms, self.frame_length_ms)


@dataclass(frozen=True)
class MfccConfig:
    num_ceps: int = 13
    num_mel_bins: int = 23
    low_freq: float = 20.0
    high_freq: float = 0.0  # <= 0 means offset from Nyquist
    use_energy: bool = True
    hires: bool = False
    preemph: float = 0.97
    cep_lifter: float = 22.0
    frame_shift_ms: float = 10.0
    frame_length_ms: float = 25.0

    @property
    def output_dims(self):
        return self.num_ceps * (3 if self.hires else 1)


class ShortAudioError(ValueError):
    pass


def frame_geometry(sample_rate, shift_ms=10.0, length_ms=25.0):
    return int(round(sample_rate * length_ms / 1000)), int(round(sample_rate * shift_ms / 1000))


def num_frames(num_samples, frame_len, frame_shift):
    if num_samples < frame_len:
        return 0
    return 1 + (num_samples - frame_len) // frame_shift


def _frames(x, frame_len, frame_shift):
    n = num_frames(len(x), frame_len, frame_shift)
    if n == 0:
        raise ShortAudioError("audio of %d samples is shorter than one %d-sample frame"
                              % (len(x), frame_len))
    idx = np.arange(frame_len)[None, :] + frame_shift * np.arange(n)[:, None]
    return x[idx]


def mel_scale(f):
    return 1127.0 * np.log(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def inverse_mel_scale(m):
    return 700.0 * (np.exp(np.asarray(m, dtype=np.float64) / 1127.0) - 1.0)


def mel_banks(num_bins, nfft, sample_rate, low_freq, high_freq):
    """Triangular filters, evenly spaced in mel; returns (weights, center_hz)."""
    nyq = sample_rate / 2.0
    if high_freq <= 0:
        high_freq = nyq + high_freq
    if not 0 <= low_freq < high_freq <= nyq:
        raise ValueError("need 0 <= low_freq < high_freq <= nyquist")
    edges = np.linspace(mel_scale(low_freq), mel_scale(high_freq), num_bins + 2)
    fft_mel = mel_scale(np.arange(nfft // 2 + 1) * sample_rate / nfft)
    left, center, right = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (fft_mel[None, :] - left) / (center - left)
    down = (right - fft_mel[None, :]) / (right - center)
    w = np.maximum(0.0, np.minimum(up, down))
    return w, inverse_mel_scale(edges[1:-1])


def _power_spectrum(buf, cfg):
    frame_len, frame_shift = frame_geometry(buf.sample_rate, cfg.frame_shift_ms, cfg.frame_length_ms)
    frames = _frames(buf.samples, frame_len, frame_shift)
    energy = np.sum(frames ** 2, axis=1)
    if cfg.preemph:
        frames = np.concatenate(
            [frames[:, :1] * (1 - cfg.preemph), frames[:, 1:] - cfg.preemph * frames[:, :-1]], axis=1)
    frames = frames * np.hamming(frame_len)
    nfft = 1 << int(np.ceil(np.log2(frame_len)))
    spec = np.abs(np.fft.rfft(frames, nfft)) ** 2
    return spec, energy, nfft


_FLOOR = np.finfo(np.float64).tiny


def log_mel_energies(buf, cfg=MfccConfig()):
    spec, _, nfft = _power_spectrum(buf, cfg)
    fb, _ = mel_banks(cfg.num_mel_bins, nfft, buf.sample_rate, cfg.low_freq, cfg.high_freq)
    return np.log(np.maximum(spec @ fb.T, _FLOOR))


def compute_mfcc(buf, cfg=MfccConfig()):
    if cfg.num_ceps > cfg.num_mel_bins:
        raise ValueError("num_ceps must not exceed num_mel_bins")
    spec, energy, nfft = _power_spectrum(buf, cfg)
    fb, _ = mel_banks(cfg.num_mel_bins, nfft, buf.sample_rate, cfg.low_freq, cfg.high_freq)
    logmel = np.log(np.maximum(spec @ fb.T, _FLOOR))
    ceps = dct(logmel, type=2, axis=1, norm="ortho")[:, :cfg.num_ceps]
    if cfg.cep_lifter:
        n = np.arange(cfg.num_ceps)
        ceps = ceps * (1.0 + 0.5 * cfg.cep_lifter * np.sin(np.pi * n / cfg.cep_lifter))
    if cfg.use_energy:
        ceps[:, 0] = np.log(np.maximum(energy, _FLOOR))
    fm = FeatureMatrix(ceps, cfg.frame_shift_ms, cfg.frame_length_ms)
    if cfg.hires:
        fm = append_deltas(fm, 2)
    return fm


MIN_F0 = 60.0
MAX_F0 = 400.0


def _nccf(x, frame_len, frame_shift, n, lags):
    # normalized cross-correlation of each frame with its lagged copy;
    # the signal is zero-padded so every lag is defined at the tail
    pad = np.concatenate([x, np.zeros(lags[-1] + frame_len)])
    starts = frame_shift * np.arange(n)
    idx = starts[:, None] + np.arange(frame_len)[None, :]
    cur = pad[idx]
    e0 = np.sum(cur ** 2, axis=1)
    out = np.empty((n, len(lags)))
    for j, lag in enumerate(lags):
        lagged = pad[idx + lag]
        num = np.sum(cur * lagged, axis=1)
        den = np.sqrt(e0 * np.sum(lagged ** 2, axis=1))
        out[:, j] = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    return out


def track_pitch(buf, frame_shift_ms=10.0, frame_length_ms=25.0,
                min_f0=MIN_F0, max_f0=MAX_F0, octave_cost=0.02, transition_cost=0.3):
    """Frame-level f0 track.

    Returns (f0_hz, nccf_on_path, nccf_peak). The lag path minimizes
    -nccf + octave_cost*log2(lag/min_lag) + transition_cost*|log(lag ratio)|.
    """
    sr = buf.sample_rate
    frame_len, frame_shift = frame_geometry(sr, frame_shift_ms, frame_length_ms)
    n = num_frames(len(buf.samples), frame_len, frame_shift)
    if n == 0:
        raise ShortAudioError("audio of %d samples is shorter than one %d-sample frame"
                              % (len(buf.samples), frame_len))
    lags = np.arange(int(np.floor(sr / max_f0)), int(np.ceil(sr / min_f0)) + 1)
    r = _nccf(buf.samples, frame_len, frame_shift, n, lags)

    local = -r + octave_cost * np.log2(lags / lags[0])[None, :]
    loglag = np.log(lags)
    trans = transition_cost * np.abs(loglag[:, None] - loglag[None, :])
    cost = local[0].copy()
    back = np.zeros((n, len(lags)), dtype=np.int64)
    for t in range(1, n):
        tot = cost[:, None] + trans
        back[t] = np.argmin(tot, axis=0)
        cost = tot[back[t], np.arange(len(lags))] + local[t]
    path = np.empty(n, dtype=np.int64)
    path[-1] = int(np.argmin(cost))
    for t in range(n - 1, 0, -1):
        path[t - 1] = back[t, path[t]]

    # parabolic refinement of the chosen lag
    j = path
    jm, jp = np.clip(j - 1, 0, len(lags) - 1), np.clip(j + 1, 0, len(lags) - 1)
    rows = np.arange(n)
    a, b, c = r[rows, jm], r[rows, j], r[rows, jp]
    den = a - 2 * b + c
    shift = np.where((den < 0) & (jm != j) & (jp != j), 0.5 * (a - c) / np.where(den < 0, den, -1.0), 0.0)
    lag = lags[j] + np.clip(shift, -0.5, 0.5)
    return sr / lag, r[rows, j], r.max(axis=1)


def compute_pitch(buf, num_feats=3, frame_shift_ms=10.0, frame_length_ms=25.0):
    """Per-frame [pov, log-f0, delta-log-f0] (+ raw nccf peak when num_feats=4)."""
    if num_feats not in (3, 4):
        raise ValueError("num_feats must be 3 or 4")
    f0, on_path, peak = track_pitch(buf, frame_shift_ms, frame_length_ms)
    pov = np.clip(on_path, 0.0, 1.0)
    logf0 = np.log(f0)
    dlog = _delta(logf0[:, None])[:, 0]
    cols = [pov, logf0, dlog] + ([peak] if num_feats == 4 else [])
    return FeatureMatrix(np.stack(cols, axis=1), frame_shift_ms, frame_length_ms)


def apply_cmn(fm):
    return fm.with_values(fm.values - fm.values.mean(axis=0, keepdims=True))


_DELTA_WINDOW = 2


def _delta(x):
    n = len(x)
    idx = np.arange(n)
    out = np.zeros_like(x)
    for k in range(1, _DELTA_WINDOW + 1):
        out += k * (x[np.minimum(idx + k, n - 1)] - x[np.maximum(idx - k, 0)])
    return out / (2 * sum(k * k for k in range(1, _DELTA_WINDOW + 1)))


def append_deltas(fm, order=2):
    if order not in (1, 2):
        raise ValueError("delta order must be 1 or 2")
    blocks = [fm.values]
    for _ in range(order):
        blocks.append(_delta(blocks[-1]))
    return fm.with_values(np.concatenate(blocks, axis=1))


def splice_frames(fm, left, right):
    if left < 0 or right < 0:
        raise ValueError("context sizes must be nonnegative")
    n = fm.num_frames
    if left == right == 0 or n == 0:
        return fm.with_values(np.zeros((0, fm.dims * (left + right + 1)))) if n == 0 else fm
    idx = np.clip(np.arange(n)[:, None] + np.arange(-left, right + 1)[None, :], 0, n - 1)
    return fm.with_values(fm.values[idx].reshape(n, -1))


class FrameMismatchError(ValueError):
    pass


def assemble_nnet_input(mfcc_hires, pitch, ivec):
    if mfcc_hires.num_frames != pitch.num_frames:
        raise FrameMismatchError("mfcc has %d frames, pitch has %d"
                                 % (mfcc_hires.num_frames, pitch.num_frames))
    ivec = np.asarray(ivec, dtype=np.float64).ravel()
    rep = np.broadcast_to(ivec, (mfcc_hires.num_frames, len(ivec)))
    return mfcc_hires.with_values(np.concatenate([mfcc_hires.values, pitch.values, rep], axis=1))


def gmm_features(buf, cfg=MfccConfig()):
    """13 MFCC + 3 pitch, the GMM-stage input."""
    m = compute_mfcc(buf, cfg)
    p = compute_pitch(buf, 3, cfg.frame_shift_ms, cfg.frame_length_ms)
    return m.with_values(np.concatenate([m.values, p.values], axis=1))


def hires_features(buf, cfg=MfccConfig(hires=True)):
    """CMN'd 39-dim MFCC plus 4 pitch features (without the i-vector)."""
    m = apply_cmn(compute_mfcc(buf, cfg))
    p = compute_pitch(buf, 4, cfg.frame_shift_ms, cfg.frame_length_ms)
    return m.with_values(np.concatenate([m.values, p.values], axis=1))


# ---- archives ---------------------------------------------------------------

ARCHIVE_MAGIC = b"ASRTLFEA"
ARCHIVE_VERSION = 1


def write_archive(path, items):
    """Binary archive of named matrices: header then row-major float32."""
    items = list(items.items()) if isinstance(items, dict) else list(items)
    with open(path, "wb") as f:
        f.write(ARCHIVE_MAGIC + struct.pack("<II", ARCHIVE_VERSION, len(items)))
        for key, fm in items:
            k = key.encode("utf-8")
            f.write(struct.pack("<H", len(k)) + k)
            f.write(struct.pack("<IIff", fm.num_frames, fm.dims, fm.frame_shift_ms, fm.frame_length_ms))
            f.write(np.ascontiguousarray(fm.values, dtype="<f4").tobytes())


def read_archive(path):
    out = {}
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != ARCHIVE_MAGIC:
        raise ValueError("%s: not a feature archive" % path)
    version, count = struct.unpack_from("<II", data, 8)
    if version != ARCHIVE_VERSION:
        raise ValueError("%s: unsupported archive version %d" % (path, version))
    pos = 16
    for _ in range(count):
        (klen,) = struct.unpack_from("<H", data, pos)
        key = data[pos + 2:pos + 2 + klen].decode("utf-8")
        pos += 2 + klen
        rows, cols, shift, length = struct.unpack_from("<IIff", data, pos)
        pos += 16
        nbytes = rows * cols * 4
        vals = np.frombuffer(data, dtype="<f4", count=rows * cols, offset=pos).reshape(rows, cols)
        pos += nbytes
        out[key] = FeatureMatrix(vals.astype(np.float64), float(shift), float(length))
    return out


def write_text_matrix(path, items):
    with open(path, "w", encoding="utf-8") as f:
        for key, fm in (items.items() if isinstance(items, dict) else items):
            f.write("%s [\n" % key)
            for row in fm.values:
                f.write("  " + " ".join(repr(float(v)) for v in row) + "\n")
            f.write("]\n")


def read_text_matrix(path):
    out = {}
    key, rows = None, []
    with open(path, encoding="utf-8") as f:
        for line in f:
            s = line.strip()
            if not s:
                continue
            if s.endswith("["):
                key, rows = s[:-1].strip(), []
            elif s == "]":
                vals = np.array(rows, dtype=np.float64) if rows else np.zeros((0, 0))
                out[key] = FeatureMatrix(vals.reshape(len(rows), -1) if rows else vals)
                key = None
            else:
                rows.append([float(v) for v in s.split()])
    return out
