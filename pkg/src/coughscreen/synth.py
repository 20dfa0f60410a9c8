"""Synthetic cough-like corpus with two acoustically separable classes.

Negative recordings hold noise bursts band-limited to 300-800 Hz, positive
ones to 1.5-3 kHz. Burst count, length, loudness and the silences between
them are random; durations span 1-8 s. Genders are balanced within each class
and folds are stratified by class.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .audio_io import AudioClip, write_wav
from .dataset import SampleRecord, assign_stratified_folds, write_manifest
from .models import GENDERS

BANDS_HZ = {0: (300.0, 800.0), 1: (1500.0, 3000.0)}
MANIFEST_NAME = "manifest.csv"


def band_noise(n: int, sample_rate: int, band: tuple[float, float], rng: np.random.Generator) -> np.ndarray:
    """White noise restricted to ``band`` by zeroing FFT bins, scaled to unit peak."""
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
    spec[(freqs < band[0]) | (freqs > band[1])] = 0.0
    x = np.fft.irfft(spec, n)
    peak = np.max(np.abs(x))
    return x / peak if peak > 0 else x


def synth_recording(label: int, sample_rate: int, rng: np.random.Generator,
                    duration_range=(1.0, 8.0)) -> np.ndarray:
    duration = rng.uniform(*duration_range)
    n = int(round(duration * sample_rate))
    x = 0.002 * rng.standard_normal(n)  # faint background hiss
    # first burst starts within 0.4 s and lasts at most 0.5 s, so even a 1 s clip holds one
    cursor = int(rng.uniform(0.0, 0.4) * sample_rate)
    while True:
        burst = int(rng.uniform(0.15, 0.5) * sample_rate)
        if cursor + burst > n:
            break
        env = np.hanning(burst) ** 0.5
        x[cursor:cursor + burst] += rng.uniform(0.3, 0.8) * env * band_noise(burst, sample_rate, BANDS_HZ[label], rng)
        cursor += burst + int(rng.uniform(0.1, 0.6) * sample_rate)
    return np.clip(x, -1.0, 1.0)


def generate_corpus(out_dir, n_per_class: int = 50, seed: int = 0, sample_rate: int = 44100,
                    k_folds: int = 5, duration_range=(1.0, 8.0)) -> Path:
    """Write ``audio/<id>.wav`` files plus ``manifest.csv``; returns the manifest path."""
    out_dir = Path(out_dir)
    audio_dir = out_dir / "audio"
    audio_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    labels = np.array([0] * n_per_class + [1] * n_per_class)
    folds = assign_stratified_folds(labels, k_folds, rng)
    genders = []
    for cls in (0, 1):
        g = np.array([GENDERS[i % 2] for i in range(n_per_class)])
        genders.extend(g[rng.permutation(n_per_class)])
    records = []
    for i, (label, fold, gender) in enumerate(zip(labels, folds, genders)):
        rid = f"syn{i:04d}"
        samples = synth_recording(int(label), sample_rate, rng, duration_range)
        rel = f"audio/{rid}.wav"
        write_wav(out_dir / rel, AudioClip(samples, sample_rate))
        records.append(SampleRecord(rid, rel, int(label), str(gender), int(fold)))
    manifest = out_dir / MANIFEST_NAME
    write_manifest(manifest, records)
    return manifest


def spectral_centroid(samples: np.ndarray, sample_rate: int) -> float:
    mag = np.abs(np.fft.rfft(samples))
    freqs = np.fft.rfftfreq(len(samples), 1.0 / sample_rate)
    total = mag.sum()
    return float((freqs * mag).sum() / total) if total > 0 else 0.0
