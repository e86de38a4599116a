import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from asrtl.audio import (AudioBuffer, WavEncodingError, WavHeaderError, WavNotFoundError, augment,
                         read_manifest, read_wav, resample, speed_perturb, volume_perturb, write_manifest,
                         write_wav)


def tone(freq, rate, n, amp=0.5, phase=0.0):
    t = np.arange(n) / rate
    return amp * np.sin(2 * np.pi * freq * t + phase)


def test_buffer_rejects_bad_input():
    with pytest.raises(ValueError):
        AudioBuffer(np.array([0.0, np.nan]), 8000)
    with pytest.raises(ValueError):
        AudioBuffer(np.zeros(4), 0)
    with pytest.raises(ValueError):
        AudioBuffer(np.zeros((2, 2)), 8000)


def test_buffer_is_read_only():
    b = AudioBuffer(np.zeros(4), 8000)
    with pytest.raises(ValueError):
        b.samples[0] = 1.0


def test_wav_header_passthrough(tmp_path):
    p = tmp_path / "a.wav"
    write_wav(str(p), AudioBuffer(tone(440, 16000, 160), 16000))
    b = read_wav(str(p))
    assert b.sample_rate == 16000 and len(b) == 160


def test_16bit_full_scale_value(tmp_path):
    p = tmp_path / "max.wav"
    pcm = struct.pack("<h", 32767)
    hdr = b"RIFF" + struct.pack("<I", 36 + 2) + b"WAVE"
    hdr += b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, 8000, 16000, 2, 16)
    hdr += b"data" + struct.pack("<I", 2)
    p.write_bytes(hdr + pcm)
    assert read_wav(str(p)).samples[0] == pytest.approx(32767 / 32768)


def test_stereo_mixed_down(tmp_path):
    p = tmp_path / "st.wav"
    frames = np.array([[16384, 0], [0, -16384]], dtype="<i2")
    pcm = frames.tobytes()
    hdr = b"RIFF" + struct.pack("<I", 36 + len(pcm)) + b"WAVE"
    hdr += b"fmt " + struct.pack("<IHHIIHH", 16, 1, 2, 8000, 32000, 4, 16)
    hdr += b"data" + struct.pack("<I", len(pcm))
    p.write_bytes(hdr + pcm)
    np.testing.assert_allclose(read_wav(str(p)).samples, [0.25, -0.25])


def test_8bit_roundtrip(tmp_path):
    p = tmp_path / "b8.wav"
    b = AudioBuffer(tone(300, 8000, 200), 8000)
    write_wav(str(p), b, bits=8)
    assert np.max(np.abs(read_wav(str(p)).samples - b.samples)) <= 1 / 128


def test_wav_errors(tmp_path):
    with pytest.raises(WavNotFoundError):
        read_wav(str(tmp_path / "nope.wav"))
    good = tmp_path / "g.wav"
    write_wav(str(good), AudioBuffer(np.zeros(10), 8000))
    data = bytearray(good.read_bytes())
    data[0:4] = b"RIFX"
    bad = tmp_path / "bad.wav"
    bad.write_bytes(bytes(data))
    with pytest.raises(WavHeaderError):
        read_wav(str(bad))
    trunc = tmp_path / "t.wav"
    trunc.write_bytes(good.read_bytes()[:30])
    with pytest.raises(WavHeaderError):
        read_wav(str(trunc))
    flt = bytearray(good.read_bytes())
    flt[20:22] = struct.pack("<H", 3)  # IEEE float tag
    fp = tmp_path / "f.wav"
    fp.write_bytes(bytes(flt))
    with pytest.raises(WavEncodingError):
        read_wav(str(fp))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1.0, 1.0), min_size=1, max_size=300))
def test_wav_roundtrip_within_one_lsb(tmp_path_factory, xs):
    p = tmp_path_factory.mktemp("w") / "r.wav"
    b = AudioBuffer(np.array(xs), 8000)
    write_wav(str(p), b)
    assert np.max(np.abs(read_wav(str(p)).samples - b.samples)) <= 1 / 32768


def test_resample_identity_and_errors():
    b = AudioBuffer(tone(100, 8000, 50), 8000)
    assert resample(b, 8000) is b
    with pytest.raises(ValueError):
        resample(b, 0)


def test_resample_length():
    b = AudioBuffer(tone(100, 16000, 1600), 16000)
    assert abs(len(resample(b, 8000)) - 800) <= 1


def test_resample_matches_analytic_tone():
    src = AudioBuffer(tone(1000, 16000, 16000), 16000)
    out = resample(src, 8000).samples
    ref = tone(1000, 8000, len(out))
    err = out[100:-100] - ref[100:-100]
    assert np.sqrt(np.mean(err ** 2)) < 0.01


def test_resample_roundtrip_band_limited():
    rng = np.random.default_rng(0)
    n = 16000
    x = sum(tone(f, 16000, n, amp=0.1, phase=rng.uniform(0, 6)) for f in (200, 700, 1500, 3100))
    b = AudioBuffer(x, 16000)
    back = resample(resample(b, 8000), 16000).samples
    err = back[200:-200] - x[200:-200]
    assert np.sqrt(np.mean(err ** 2)) < 0.02


def test_speed_perturb():
    b = AudioBuffer(tone(200, 8000, 900), 8000)
    assert speed_perturb(b, 1.0) is b
    assert abs(len(speed_perturb(b, 0.9)) - 1000) <= 1
    for bad in (0.5, 2.0, -1.0):
        with pytest.raises(ValueError):
            speed_perturb(b, bad)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.6, 1.9), st.integers(50, 2000))
def test_speed_perturb_duration(factor, n):
    b = AudioBuffer(np.zeros(n), 8000)
    out = speed_perturb(b, factor)
    assert abs(out.duration * factor - b.duration) <= factor / b.sample_rate + 1e-12


def test_volume_perturb_examples():
    b = AudioBuffer(np.full(7, 0.25), 8000)
    assert np.array_equal(volume_perturb(b, 1.0).samples, b.samples)
    np.testing.assert_array_equal(volume_perturb(b, 2.0).samples, 0.5)
    sat = volume_perturb(AudioBuffer(np.full(7, 0.5), 8000), 4.0)
    np.testing.assert_array_equal(sat.samples, 1.0)
    assert sat.clamped == 7
    for g in (0.0, -2.0):
        with pytest.raises(ValueError):
            volume_perturb(b, g)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-0.2, 0.2), min_size=1, max_size=50), st.floats(0.1, 2.0), st.floats(0.1, 2.0))
def test_volume_gains_compose(xs, g1, g2):
    b = AudioBuffer(np.array(xs), 8000)
    np.testing.assert_allclose(volume_perturb(volume_perturb(b, g1), g2).samples,
                               volume_perturb(b, g1 * g2).samples, atol=1e-12)


def test_augment_triples_list():
    b = AudioBuffer(tone(200, 8000, 800), 8000)
    out = list(augment(b, np.random.default_rng(0)))
    assert [f for f, _ in out] == [0.9, 1.0, 1.1]
    assert all(np.max(np.abs(x.samples)) <= 1.0 for _, x in out)


def test_manifest_roundtrip(tmp_path):
    rows = [("u1", str(tmp_path / "w" / "u1.wav"), "s1", "abc"), ("u2", str(tmp_path / "u2.wav"), "s2", "x y")]
    path = tmp_path / "manifest.tsv"
    write_manifest(str(path), rows)
    assert "w/u1.wav" in path.read_text()
    assert read_manifest(str(path)) == rows


def test_manifest_bad_line(tmp_path):
    path = tmp_path / "m.tsv"
    path.write_text("u1\tonly-two\n")
    with pytest.raises(ValueError, match=":1:"):
        read_manifest(str(path))
