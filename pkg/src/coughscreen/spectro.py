"""STFT spectrograms rendered as colormapped images, cut into 1 s patches."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._colormaps import LUTS
from .audio_io import AudioClip

FREQ_SCALES = ("linear", "log")


@dataclass(frozen=True)
class SpectroConfig:
    win_len_samples: int = 1024
    hop_samples: int = 128
    freq_scale: str = "log"
    colormap: str = "magma"
    image_px: int = 256
    patch_len_s: float = 1.0
    patch_overlap: float = 0.5
    db_floor: float = -80.0

    def __post_init__(self):
        if self.win_len_samples <= 0 or self.hop_samples <= 0:
            raise ValueError("window and hop must be positive")
        if self.hop_samples > self.win_len_samples:
            raise ValueError("hop_samples must not exceed win_len_samples")
        if not 0.0 <= self.patch_overlap < 1.0:
            raise ValueError(f"patch_overlap must be in [0, 1), got {self.patch_overlap}")
        if self.image_px <= 0:
            raise ValueError("image_px must be positive")
        if self.patch_len_s <= 0:
            raise ValueError("patch_len_s must be positive")
        if self.db_floor >= 0:
            raise ValueError("db_floor must be negative")
        if self.freq_scale not in FREQ_SCALES:
            raise ValueError(f"freq_scale must be one of {FREQ_SCALES}, got {self.freq_scale!r}")
        if self.colormap not in LUTS:
            raise ValueError(f"colormap must be one of {sorted(LUTS)}, got {self.colormap!r}")


@dataclass(frozen=True)
class Spectrogram:
    magnitudes: np.ndarray  # [freq_bins, frames]
    bin_hz: float
    frame_hop_s: float


@dataclass(frozen=True)
class Patch:
    image: np.ndarray  # uint8 [px, px, 3]
    source_id: str
    start_s: float

    @property
    def start_ms(self) -> int:
        return int(round(self.start_s * 1000))


def hann(n: int) -> np.ndarray:
    """Periodic Hann window (the FFT-analysis variant)."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft(clip: AudioClip, config: SpectroConfig = SpectroConfig()) -> Spectrogram:
    """Centred STFT magnitude: reflect-pad win/2 each side, Hann window, one-sided FFT.

    Produces ``floor(len / hop) + 1`` frames and ``win/2 + 1`` bins.
    """
    x = np.asarray(clip.samples, dtype=np.float64)
    if x.size == 0:
        raise ValueError("stft needs at least one sample")
    win, hop = config.win_len_samples, config.hop_samples
    half = win // 2
    mode = "reflect" if len(x) > 1 else "constant"
    xp = np.pad(x, (half, half), mode=mode)
    n_frames = len(x) // hop + 1
    frames = np.lib.stride_tricks.sliding_window_view(xp, win)[::hop][:n_frames]
    mag = np.abs(np.fft.rfft(frames * hann(win), axis=1)).T
    return Spectrogram(np.ascontiguousarray(mag), clip.sample_rate_hz / win, hop / clip.sample_rate_hz)


def _row_bins(n_bins: int, px: int, scale: str) -> np.ndarray:
    """Spectrogram bin shown on each image row, row 0 being the top (highest frequency)."""
    pos = np.arange(px)[::-1] / max(px - 1, 1)  # 1 at the top row, 0 at the bottom
    top = n_bins - 1
    if scale == "linear" or top < 2:
        bins = np.round(pos * top)
    else:
        # bin 1 .. Nyquist bin on a log axis; DC has no place on it
        bins = np.round(np.power(float(top), pos))
    return np.clip(bins.astype(np.int64), 0, top)


def _col_frames(n_frames: int, px: int) -> np.ndarray:
    pos = np.arange(px) / max(px - 1, 1)
    return np.round(pos * (n_frames - 1)).astype(np.int64)


def to_unit_db(magnitudes: np.ndarray, db_floor: float) -> np.ndarray:
    """dB relative to the maximum, clamped at ``db_floor``, mapped to [0, 1]."""
    mag = np.asarray(magnitudes, dtype=np.float64)
    peak = mag.max() if mag.size else 0.0
    if peak <= 0:
        return np.zeros_like(mag)
    with np.errstate(divide="ignore"):
        db = 20.0 * np.log10(mag / peak)
    db = np.maximum(db, db_floor)
    return (db - db_floor) / -db_floor


def apply_colormap(values: np.ndarray, name: str) -> np.ndarray:
    lut = LUTS[name]
    idx = np.clip((np.asarray(values) * 256).astype(np.int64), 0, 255)
    return lut[idx]


def render_image(spec: Spectrogram, config: SpectroConfig = SpectroConfig()) -> np.ndarray:
    """Render a spectrogram as a ``[px, px, 3]`` uint8 RGB image (nearest-neighbour axes)."""
    mag = spec.magnitudes
    if mag.size == 0:
        raise ValueError("cannot render an empty spectrogram")
    px = config.image_px
    unit = to_unit_db(mag, config.db_floor)
    grid = unit[np.ix_(_row_bins(mag.shape[0], px, config.freq_scale), _col_frames(mag.shape[1], px))]
    return apply_colormap(grid, config.colormap)


def patch_bounds(n_samples: int, sample_rate_hz: int, config: SpectroConfig = SpectroConfig()) -> list[int]:
    """Start sample of every patch. Clips shorter than one patch yield a single start at 0."""
    plen = int(round(config.patch_len_s * sample_rate_hz))
    step = max(1, int(round(plen * (1.0 - config.patch_overlap))))
    if n_samples <= plen:
        return [0]
    return list(range(0, n_samples - plen + 1, step))


def expected_patch_count(duration_s: float, config: SpectroConfig = SpectroConfig()) -> int:
    """``floor((T - L) / (L * (1 - overlap))) + 1`` for T >= L, else 1."""
    L = config.patch_len_s
    if duration_s < L:
        return 1
    return int(np.floor((duration_s - L) / (L * (1.0 - config.patch_overlap)) + 1e-9)) + 1


def make_patches(clip: AudioClip, config: SpectroConfig = SpectroConfig(), source_id: str = "") -> list[Patch]:
    """Cut the clip into overlapping fixed-length segments and render each one."""
    x = np.asarray(clip.samples, dtype=np.float64)
    if x.size == 0:
        raise ValueError("make_patches needs a non-empty clip")
    sr = clip.sample_rate_hz
    plen = int(round(config.patch_len_s * sr))
    if len(x) < plen:
        x = np.concatenate([x, np.zeros(plen - len(x))])
    patches = []
    for start in patch_bounds(len(x), sr, config):
        segment = AudioClip(x[start:start + plen], sr)
        image = render_image(stft(segment, config), config)
        patches.append(Patch(image, source_id, start / sr))
    return patches


def patch_filename(patch: Patch) -> str:
    return f"{patch.source_id}_{patch.start_ms}.png"


def save_png(image: np.ndarray, path) -> None:
    from PIL import Image

    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="RGB").save(path, format="PNG")


def load_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def export_patches(patches, out_dir) -> list[Path]:
    """Write patches as ``<id>_<start_ms>.png`` files."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for p in patches:
        path = out_dir / patch_filename(p)
        save_png(p.image, path)
        paths.append(path)
    return paths
