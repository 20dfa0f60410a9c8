import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coughscreen._colormaps import LUTS
from coughscreen.audio_io import AudioClip
from coughscreen.spectro import (
    Spectrogram,
    SpectroConfig,
    apply_colormap,
    expected_patch_count,
    export_patches,
    load_png,
    make_patches,
    patch_filename,
    render_image,
    save_png,
    stft,
)

SR = 8000
SMALL = SpectroConfig(image_px=32)


def test_config_validation():
    for bad in (dict(hop_samples=2048), dict(hop_samples=0), dict(patch_overlap=1.0), dict(image_px=0),
                dict(freq_scale="mel"), dict(colormap="jet")):
        with pytest.raises(ValueError):
            SpectroConfig(**bad)


def test_stft_peak_bin_for_1khz():
    x = np.sin(2 * np.pi * 1000.0 * np.arange(SR) / SR)
    spec = stft(AudioClip(x, SR))
    assert spec.magnitudes.shape == (513, 63)
    peaks = np.argmax(spec.magnitudes, axis=0)
    # frames whose window lies entirely inside the signal peak exactly at 1000 / (8000 / 1024)
    interior = slice(4, 59)
    assert np.all(peaks[interior] == 128)
    # edge frames see reflect padding, which flips the sine's phase inside the window
    assert np.all(np.abs(peaks - 128) <= 1)
    assert spec.bin_hz == pytest.approx(SR / 1024)


def test_stft_zero_clip():
    assert np.all(stft(AudioClip(np.zeros(3000), SR)).magnitudes == 0)


@settings(max_examples=50, deadline=None)
@given(n=st.integers(1, 20000), hop=st.sampled_from([64, 128, 256, 1024]))
def test_stft_frame_count(n, hop):
    spec = stft(AudioClip(np.zeros(n), SR), SpectroConfig(hop_samples=hop))
    assert spec.magnitudes.shape[1] == n // hop + 1


def test_stft_matches_direct_dft_oracle(rng):
    x = rng.standard_normal(700)
    cfg = SpectroConfig(win_len_samples=64, hop_samples=16)
    spec = stft(AudioClip(x, SR), cfg)
    xp = np.pad(x, 32, mode="reflect")
    w = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(64) / 64)
    k = np.arange(33)[:, None]
    basis = np.exp(-2j * np.pi * k * np.arange(64)[None] / 64)
    for f in (0, 7, 43):
        frame = xp[16 * f:16 * f + 64] * w
        np.testing.assert_allclose(spec.magnitudes[:, f], np.abs(basis @ frame), atol=1e-9)


def test_sine_energy_grows_linearly():
    energies = []
    for secs in (1, 2, 4):
        x = np.sin(2 * np.pi * 700.0 * np.arange(secs * SR) / SR)
        energies.append(np.sum(stft(AudioClip(x, SR)).magnitudes ** 2))
    for secs, e in zip((2, 4), energies[1:]):
        assert abs(e / energies[0] - secs) / secs < 0.05


def test_zero_spectrogram_renders_colormap_zero():
    img = render_image(Spectrogram(np.zeros((513, 63)), 7.8125, 0.016))
    assert img.shape == (256, 256, 3) and img.dtype == np.uint8
    assert np.all(img == np.array([0, 0, 4], dtype=np.uint8))


def test_single_peak_renders_colormap_one():
    mag = np.zeros((513, 63))
    mag[200, 30] = 5.0
    cfg = SpectroConfig(freq_scale="linear", image_px=513)
    img = render_image(Spectrogram(mag, 7.8125, 0.016), cfg)
    top = LUTS["magma"][255]
    hits = np.all(img == top, axis=2)
    assert hits.any()
    rows, cols = np.nonzero(hits)
    assert set(rows) == {512 - 200}
    assert np.all(img[~hits] == LUTS["magma"][0])


@pytest.mark.parametrize("scale", ["log", "linear"])
@pytest.mark.parametrize("cmap", ["magma", "viridis"])
def test_render_scale_invariance(rng, scale, cmap):
    mag = rng.uniform(0, 3, (513, 63)) ** 4
    cfg = SpectroConfig(freq_scale=scale, colormap=cmap)
    a = render_image(Spectrogram(mag, 7.8125, 0.016), cfg)
    b = render_image(Spectrogram(mag * 10.0, 7.8125, 0.016), cfg)
    np.testing.assert_array_equal(a, b)


def test_log_axis_rows():
    # each row holds one bin; the log axis goes from the Nyquist bin (top) down to bin 1 (bottom)
    mag = np.tile(np.arange(513, dtype=float)[:, None] + 1, (1, 4))
    cfg = SpectroConfig(image_px=16, freq_scale="log", colormap="magma")
    from coughscreen.spectro import _row_bins

    bins = _row_bins(513, 16, "log")
    assert bins[0] == 512 and bins[-1] == 1
    expected = np.round(512.0 ** (np.arange(16)[::-1] / 15)).astype(int)
    np.testing.assert_array_equal(bins, expected)
    img = render_image(Spectrogram(mag, 7.8125, 0.016), cfg)
    assert np.all(img[0] == LUTS["magma"][255])


def test_colormap_endpoints():
    np.testing.assert_array_equal(apply_colormap(np.array([0.0, 1.0]), "magma"), [[0, 0, 4], [252, 253, 191]])
    np.testing.assert_array_equal(apply_colormap(np.array([0.0]), "viridis"), [[68, 1, 84]])
    assert LUTS["magma"].shape == (256, 3) and LUTS["viridis"].dtype == np.uint8


@pytest.mark.parametrize("duration,count,starts", [(1.0, 1, [0.0]), (2.0, 3, [0.0, 0.5, 1.0]), (4.7, 8, None),
                                                   (0.3, 1, [0.0])])
def test_patch_counts(duration, count, starts):
    clip = AudioClip(np.zeros(int(round(duration * SR))), SR)
    patches = make_patches(clip, SMALL, "r")
    assert len(patches) == count == expected_patch_count(duration)
    if starts is not None:
        assert [p.start_s for p in patches] == starts
    assert all(p.image.shape == (32, 32, 3) and p.source_id == "r" for p in patches)


@settings(max_examples=200, deadline=None)
@given(duration=st.floats(0.2, 15.0))
def test_patch_count_formula(duration):
    n = int(round(duration * SR))
    from coughscreen.spectro import patch_bounds

    T = n / SR
    expected = 1 if T < 1.0 else math.floor((T - 1.0) / 0.5 + 1e-9) + 1
    assert len(patch_bounds(n, SR)) == expected


def test_short_clip_is_zero_padded(rng):
    x = rng.uniform(-0.5, 0.5, 4000)
    cfg = SpectroConfig(image_px=63, freq_scale="linear")
    (patch,) = make_patches(AudioClip(x, SR), cfg)
    padded = np.concatenate([x, np.zeros(4000)])
    direct = render_image(stft(AudioClip(padded, SR), cfg), cfg)
    np.testing.assert_array_equal(patch.image, direct)


def test_overlapping_patches_share_columns(rng):
    # hop 100 puts the 0.5 s patch step on a frame boundary (40 frames); one column per frame
    cfg = SpectroConfig(hop_samples=100, image_px=81, freq_scale="linear")
    x = 0.01 * rng.standard_normal(2 * SR)
    t = np.arange(800)
    x[5800:6600] += np.sin(2 * np.pi * 1500 * t / SR)  # loudest event inside the shared half-second
    a, b, _ = make_patches(AudioClip(x, SR), cfg)
    edge = 6  # frames whose window reaches the reflect padding differ
    np.testing.assert_array_equal(a.image[:, 40 + edge:81 - edge], b.image[:, edge:41 - edge])


def test_png_roundtrip(tmp_path, rng):
    img = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
    save_png(img, tmp_path / "x.png")
    np.testing.assert_array_equal(load_png(tmp_path / "x.png"), img)


def test_export_names(tmp_path):
    patches = make_patches(AudioClip(np.zeros(2 * SR), SR), SMALL, "rec7")
    paths = export_patches(patches, tmp_path)
    assert [p.name for p in paths] == ["rec7_0.png", "rec7_500.png", "rec7_1000.png"]
    assert patch_filename(patches[1]) == "rec7_500.png"
