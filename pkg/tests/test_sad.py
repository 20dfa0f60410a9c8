import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coughscreen.audio_io import AudioClip
from coughscreen.sad import (
    SadConfig,
    SadWarning,
    apply_sad,
    frame_length_samples,
    frame_rms,
    minmax_normalize,
    spectral_flux,
)

SR = 8000
FL = frame_length_samples(SR, 64.0)  # 512 samples


def test_frame_length():
    assert FL == 512


def test_rms_basic_values():
    assert frame_rms(AudioClip(np.zeros(FL), SR))[0] == 0.0
    assert frame_rms(AudioClip(np.full(FL, -0.3), SR))[0] == pytest.approx(0.3)
    sine = np.sin(2 * np.pi * np.arange(FL) / FL)  # exactly one cycle
    assert abs(frame_rms(AudioClip(sine, SR))[0] - 1 / np.sqrt(2)) < 1e-3


def test_rms_partial_last_frame_uses_own_length():
    x = np.concatenate([np.zeros(FL), np.full(100, 0.5)])
    r = frame_rms(AudioClip(x, SR))
    assert len(r) == 2 and r[1] == pytest.approx(0.5)


def test_rms_sign_invariant(rng):
    x = rng.uniform(-1, 1, 3000)
    np.testing.assert_array_equal(frame_rms(AudioClip(x, SR)), frame_rms(AudioClip(-x, SR)))


def test_minmax():
    np.testing.assert_allclose(minmax_normalize([2, 4, 6]), [0, 0.5, 1])
    np.testing.assert_array_equal(minmax_normalize([5, 5, 5]), [0, 0, 0])


def test_minmax_random_ranks(rng):
    v = rng.standard_normal(100)
    n = minmax_normalize(v)
    assert n[np.argmin(v)] == 0.0 and n[np.argmax(v)] == 1.0
    np.testing.assert_array_equal(np.argsort(n, kind="stable"), np.argsort(v, kind="stable"))


def _noise_silence_noise(rng):
    noise = lambda: 0.8 * rng.uniform(-1, 1, SR)  # noqa: E731
    return np.concatenate([noise(), np.zeros(SR), noise()])


def test_sad_removes_silence(rng):
    out = apply_sad(AudioClip(_noise_silence_noise(rng), SR), SadConfig())
    assert abs(out.duration_s - 2.0) <= FL / SR


def test_sad_output_frames_are_verbatim_slices(rng):
    x = _noise_silence_noise(rng)
    out = apply_sad(AudioClip(x, SR)).samples
    frames = {x[s:s + FL].tobytes() for s in range(0, len(x), FL)}
    for s in range(0, len(out), FL):
        assert out[s:s + FL].tobytes() in frames or len(out[s:]) < FL


def test_sad_all_kept_returns_input(rng):
    clip = AudioClip(rng.uniform(-1, 1, 4 * FL), SR)
    out = apply_sad(clip, SadConfig(threshold=0.0))
    assert out is clip


def test_sad_all_silent_keeps_one_frame():
    with pytest.warns(SadWarning):
        out = apply_sad(AudioClip(np.zeros(10 * FL), SR))
    assert len(out) == FL


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), t1=st.floats(0, 1), t2=st.floats(0, 1))
def test_sad_threshold_monotone(seed, t1, t2):
    r = np.random.default_rng(seed)
    x = r.uniform(-1, 1, 20 * FL) * np.repeat(r.uniform(0, 1, 20), FL)
    lo, hi = sorted((t1, t2))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SadWarning)
        n_lo = len(apply_sad(AudioClip(x, SR), SadConfig(threshold=lo)))
        n_hi = len(apply_sad(AudioClip(x, SR), SadConfig(threshold=hi)))
    assert n_hi <= n_lo <= len(x)


def test_sad_config_validation():
    with pytest.raises(ValueError):
        SadConfig(threshold=1.5)
    with pytest.raises(ValueError):
        SadConfig(frame_len_ms=0)
    with pytest.raises(ValueError):
        SadConfig(method="energy")


def test_flux_stationary_sine():
    n = 10 * FL
    x = np.sin(2 * np.pi * 1000.0 * np.arange(n) / SR)  # 1 kHz = exactly 64 cycles per frame
    f = spectral_flux(AudioClip(x, SR))
    assert f[0] == 0.0
    peak = np.max(np.abs(np.fft.rfft(x[:FL] * np.hanning(FL))))
    assert np.all(f[1:] <= 1e-3 * peak)


def test_flux_peaks_at_burst_onset(rng):
    x = np.concatenate([np.zeros(5 * FL), rng.uniform(-0.5, 0.5, 5 * FL)])
    f = spectral_flux(AudioClip(x, SR))
    assert int(np.argmax(f)) == 5 and np.all(f >= 0)


def test_flux_zero_clip_and_errors():
    np.testing.assert_array_equal(spectral_flux(AudioClip(np.zeros(3 * FL), SR)), 0.0)
    with pytest.raises(ValueError):
        spectral_flux(AudioClip(np.ones(FL), SR))


def test_sad_with_flux_method(rng):
    x = np.concatenate([np.zeros(8 * FL), 0.8 * rng.uniform(-1, 1, 8 * FL), np.zeros(8 * FL)])
    out = apply_sad(AudioClip(x, SR), SadConfig(method="spectral_flux"))
    assert 0 < len(out) < len(x)
