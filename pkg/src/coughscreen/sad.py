"""Sound activity detection: drop silent frames, keep the coughs.

Frames are non-overlapping. Each frame gets an activity value (RMS or
spectral flux), the values are min-max normalised per clip, and frames at or
above the threshold are concatenated in time order.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .audio_io import AudioClip

METHODS = ("rms", "spectral_flux")


class SadWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SadConfig:
    frame_len_ms: float = 64.0
    threshold: float = 0.1
    method: str = "rms"

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError(f"threshold must lie in [0, 1], got {self.threshold}")
        if self.frame_len_ms <= 0:
            raise ValueError(f"frame_len_ms must be positive, got {self.frame_len_ms}")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")


def frame_length_samples(sample_rate_hz: int, frame_len_ms: float) -> int:
    return max(1, int(round(sample_rate_hz * frame_len_ms / 1000.0)))


def _frame_bounds(n: int, frame_len: int) -> list[tuple[int, int]]:
    return [(s, min(s + frame_len, n)) for s in range(0, n, frame_len)]


def frame_rms(clip: AudioClip, frame_len_ms: float = 64.0) -> np.ndarray:
    """RMS of each non-overlapping frame; a short final frame uses its own length."""
    x = np.asarray(clip.samples, dtype=np.float64)
    if x.size == 0:
        raise ValueError("frame_rms needs a non-empty clip")
    fl = frame_length_samples(clip.sample_rate_hz, frame_len_ms)
    n_full = len(x) // fl
    full = np.sqrt(np.mean(np.square(x[: n_full * fl]).reshape(n_full, fl), axis=1)) if n_full else np.empty(0)
    if len(x) % fl:
        tail = x[n_full * fl:]
        full = np.append(full, np.sqrt(np.mean(tail * tail)))
    return full


def minmax_normalize(values) -> np.ndarray:
    """Scale to [0, 1]; a constant input maps to all zeros."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("minmax_normalize needs at least one value")
    lo, hi = v.min(), v.max()
    if hi - lo <= 0:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def spectral_flux(clip: AudioClip, frame_len_ms: float = 64.0) -> np.ndarray:
    """Half-wave rectified L2 change between consecutive frame magnitude spectra.

    Frames are Hann-windowed; the last partial frame is zero-padded. The first
    frame has no predecessor and gets 0.
    """
    x = np.asarray(clip.samples, dtype=np.float64)
    fl = frame_length_samples(clip.sample_rate_hz, frame_len_ms)
    n_frames = -(-len(x) // fl)
    if n_frames < 2:
        raise ValueError(f"spectral_flux needs a clip longer than one frame ({fl} samples), got {len(x)}")
    padded = np.zeros(n_frames * fl)
    padded[: len(x)] = x
    frames = padded.reshape(n_frames, fl) * np.hanning(fl)
    mag = np.abs(np.fft.rfft(frames, axis=1))
    rise = np.maximum(np.diff(mag, axis=0), 0.0)
    return np.concatenate([[0.0], np.sqrt(np.sum(rise * rise, axis=1))])


def frame_activity(clip: AudioClip, config: SadConfig) -> np.ndarray:
    if config.method == "rms":
        return frame_rms(clip, config.frame_len_ms)
    return spectral_flux(clip, config.frame_len_ms)


def apply_sad(clip: AudioClip, config: SadConfig = SadConfig()) -> AudioClip:
    """Concatenate, in order, the frames whose normalised activity is >= threshold.

    If nothing survives (e.g. digital silence), the single most active frame is
    kept and a :class:`SadWarning` is issued, so downstream steps never see an
    empty clip.
    """
    x = np.asarray(clip.samples)
    if x.size == 0:
        raise ValueError("apply_sad needs a non-empty clip")
    fl = frame_length_samples(clip.sample_rate_hz, config.frame_len_ms)
    bounds = _frame_bounds(len(x), fl)
    if config.method == "spectral_flux" and len(bounds) < 2:
        return clip
    activity = frame_activity(clip, config)
    keep = minmax_normalize(activity) >= config.threshold
    if not keep.any():
        warnings.warn("no frame passed the activity threshold; keeping the most active frame", SadWarning,
                      stacklevel=2)
        keep[int(np.argmax(activity))] = True
    if keep.all():
        return clip
    pieces = [x[s:e] for (s, e), k in zip(bounds, keep) if k]
    return AudioClip(np.concatenate(pieces), clip.sample_rate_hz)
