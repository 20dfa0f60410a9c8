import struct
import wave

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coughscreen.audio_io import (
    AudioClip,
    UnsupportedWavError,
    WavError,
    WavHeaderError,
    load_wav,
    resample,
    write_wav,
)


def _write_pcm(path, frames: np.ndarray, rate: int, width: int):
    """frames: int array [n, channels] already in the target integer range."""
    frames = np.atleast_2d(frames.T).T
    with wave.open(str(path), "wb") as w:
        w.setnchannels(frames.shape[1])
        w.setsampwidth(width)
        w.setframerate(rate)
        if width == 1:
            data = (frames + 128).astype(np.uint8).tobytes()
        elif width == 3:
            flat = frames.astype("<i4").ravel()
            data = b"".join(struct.pack("<i", int(v))[:3] for v in flat)
        else:
            data = frames.astype({2: "<i2", 4: "<i4"}[width]).tobytes()
        w.writeframes(data)


def _write_float(path, samples: np.ndarray, rate: int):
    data = samples.astype("<f4").tobytes()
    fmt = struct.pack("<HHIIHH", 3, 1, rate, rate * 4, 4, 32)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(data)) + data
    path.write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)


def test_16bit_mono_identity(tmp_path):
    x = (np.arange(8000) % 200 - 100).astype(np.int16)
    _write_pcm(tmp_path / "a.wav", x, 8000, 2)
    clip = load_wav(tmp_path / "a.wav")
    assert len(clip) == 8000 and clip.sample_rate_hz == 8000
    np.testing.assert_allclose(clip.samples, x / 32768.0)


def test_16bit_half_scale(tmp_path):
    _write_pcm(tmp_path / "a.wav", np.full(10, 16384, dtype=np.int16), 8000, 2)
    assert abs(load_wav(tmp_path / "a.wav").samples[0] - 0.5) < 1e-4


def test_stereo_is_averaged(tmp_path):
    frames = np.tile([[16384, -16384]], (100, 1))
    _write_pcm(tmp_path / "s.wav", frames, 16000, 2)
    clip = load_wav(tmp_path / "s.wav")
    assert len(clip) == 100
    np.testing.assert_array_equal(clip.samples, 0.0)


@pytest.mark.parametrize("width,full", [(1, 128), (3, 2**23), (4, 2**31)])
def test_integer_widths(tmp_path, width, full):
    vals = np.array([0, full // 2, -full // 2, -full])
    _write_pcm(tmp_path / "w.wav", vals, 8000, width)
    clip = load_wav(tmp_path / "w.wav")
    np.testing.assert_allclose(clip.samples, vals / full, atol=1e-6)


def test_float_is_clamped(tmp_path):
    _write_float(tmp_path / "f.wav", np.array([0.25, 1.5, -3.0, np.nan]), 8000)
    clip = load_wav(tmp_path / "f.wav")
    assert np.all(np.isfinite(clip.samples))
    np.testing.assert_allclose(clip.samples[:3], [0.25, 1.0, -1.0])


def test_error_classes_are_distinct(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_wav(tmp_path / "missing.wav")
    bad = tmp_path / "bad.wav"
    bad.write_bytes(b"not a riff file at all")
    with pytest.raises(WavHeaderError):
        load_wav(bad)
    fmt = struct.pack("<HHIIHH", 85, 1, 8000, 1000, 1, 0)  # MPEG layer 3 tag
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", 4) + b"\0" * 4
    mp3 = tmp_path / "mp3.wav"
    mp3.write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)
    with pytest.raises(UnsupportedWavError):
        load_wav(mp3)
    assert issubclass(WavHeaderError, WavError) and issubclass(UnsupportedWavError, WavError)
    assert not issubclass(UnsupportedWavError, WavHeaderError)


def test_write_then_load_roundtrip(tmp_path, rng):
    x = rng.uniform(-0.9, 0.9, 500)
    write_wav(tmp_path / "r.wav", AudioClip(x, 22050))
    clip = load_wav(tmp_path / "r.wav")
    assert clip.sample_rate_hz == 22050
    np.testing.assert_allclose(clip.samples, x, atol=2.0 / 32768)


def test_audioclip_validation():
    with pytest.raises(ValueError):
        AudioClip(np.zeros(4), 0)


def test_resample_identity_at_same_rate(rng):
    clip = AudioClip(rng.uniform(-1, 1, 1000), 8000)
    assert resample(clip, 8000) is clip


def test_resample_length():
    assert len(resample(AudioClip(np.zeros(44100), 44100), 8000)) == 8000


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 5000), src=st.sampled_from([8000, 11025, 16000, 22050, 44100, 48000]),
       dst=st.sampled_from([8000, 16000, 44100]))
def test_resample_length_formula(n, src, dst):
    out = resample(AudioClip(np.zeros(n), src), dst)
    assert len(out) == round(n * dst / src) and out.sample_rate_hz == dst


def _peak_hz(x, sr):
    mag = np.abs(np.fft.rfft(x * np.hanning(len(x))))
    return np.argmax(mag) * sr / len(x), sr / len(x)


def test_resample_keeps_tone_frequency():
    sr = 44100
    t = np.arange(sr) / sr
    x = 0.8 * np.sin(2 * np.pi * 440.0 * t)
    f_in, _ = _peak_hz(x, sr)
    y = resample(AudioClip(x, sr), 8000).samples
    f_out, bin_out = _peak_hz(y, 8000)
    assert abs(f_in - 440.0) <= 1.0
    assert abs(f_out - f_in) <= bin_out


def test_resample_preserves_band_limited_energy(rng):
    sr, n = 44100, 2 * 44100
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1 / sr)
    spec[(freqs < 50) | (freqs > 3400)] = 0
    x = np.fft.irfft(spec, n)
    x *= 0.5 / np.max(np.abs(x))
    y = resample(AudioClip(x, sr), 8000).samples
    # compare mean power away from the zero-padded edges
    e_in = np.mean(x[sr // 4:-sr // 4] ** 2)
    e_out = np.mean(y[2000:-2000] ** 2)
    assert abs(e_out - e_in) / e_in < 0.01


def test_resample_at_same_rate_is_idempotent(rng):
    clip = resample(AudioClip(rng.uniform(-1, 1, 3000), 16000), 8000)
    again = resample(clip, 8000)
    np.testing.assert_allclose(again.samples, clip.samples, atol=1e-6)


def test_resample_upsampling_keeps_tone():
    sr = 8000
    t = np.arange(sr) / sr
    x = np.sin(2 * np.pi * 1000.0 * t)
    y = resample(AudioClip(x, sr), 16000).samples
    f, b = _peak_hz(y, 16000)
    assert abs(f - 1000.0) <= b
