"""WAV decoding and windowed-sinc resampling."""

from __future__ import annotations

import math
import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PIPELINE_RATE_HZ = 8000

_FORMAT_PCM = 1
_FORMAT_FLOAT = 3
_FORMAT_EXTENSIBLE = 0xFFFE


class WavError(Exception):
    """Base class for decoding failures."""


class WavHeaderError(WavError):
    """The file is not a well-formed RIFF/WAVE container."""


class UnsupportedWavError(WavError):
    """The container is valid but the sample encoding is not supported."""


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        if self.sample_rate_hz <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate_hz}")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz


def _read_chunks(raw: bytes, path) -> tuple[dict, bytes]:
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise WavHeaderError(f"{path}: missing RIFF/WAVE signature")
    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        cid = raw[pos:pos + 4]
        (size,) = struct.unpack("<I", raw[pos + 4:pos + 8])
        body = raw[pos + 8:pos + 8 + size]
        if cid == b"fmt ":
            if size < 16:
                raise WavHeaderError(f"{path}: fmt chunk too short ({size} bytes)")
            tag, channels, rate, _, block_align, bits = struct.unpack("<HHIIHH", body[:16])
            if tag == _FORMAT_EXTENSIBLE and size >= 40:
                tag = struct.unpack("<H", body[24:26])[0]
            fmt = {"tag": tag, "channels": channels, "rate": rate, "block_align": block_align, "bits": bits}
        elif cid == b"data":
            data = body
            break
        pos += 8 + size + (size & 1)
    if fmt is None:
        raise WavHeaderError(f"{path}: no fmt chunk")
    if data is None:
        raise WavHeaderError(f"{path}: no data chunk")
    if fmt["channels"] < 1 or fmt["rate"] < 1:
        raise WavHeaderError(f"{path}: invalid channel count or sample rate")
    return fmt, data


def _decode(fmt: dict, data: bytes, path) -> np.ndarray:
    tag, bits, channels = fmt["tag"], fmt["bits"], fmt["channels"]
    width = bits // 8
    if tag == _FORMAT_PCM and bits in (8, 16, 24, 32):
        usable = len(data) - len(data) % (width * channels)
        buf = np.frombuffer(data[:usable], dtype=np.uint8)
        if bits == 8:
            x = (buf.astype(np.float64) - 128.0) / 128.0
        elif bits == 16:
            x = buf.view("<i2").astype(np.float64) / 32768.0
        elif bits == 24:
            b = buf.reshape(-1, 3).astype(np.int32)
            v = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
            v = np.where(v >= 1 << 23, v - (1 << 24), v)
            x = v.astype(np.float64) / float(1 << 23)
        else:
            x = buf.view("<i4").astype(np.float64) / float(1 << 31)
    elif tag == _FORMAT_FLOAT and bits in (32, 64):
        usable = len(data) - len(data) % (width * channels)
        x = np.frombuffer(data[:usable], dtype="<f4" if bits == 32 else "<f8").astype(np.float64)
        x = np.nan_to_num(x, nan=0.0, posinf=1.0, neginf=-1.0)
        x = np.clip(x, -1.0, 1.0)
    else:
        raise UnsupportedWavError(f"{path}: unsupported encoding (format tag {tag}, {bits} bits)")
    return x.reshape(-1, channels)


def load_wav(path) -> AudioClip:
    """Decode a PCM (8/16/24/32-bit int) or IEEE-float WAV into a mono clip in [-1, 1]."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such audio file: {path}")
    fmt, data = _read_chunks(path.read_bytes(), path)
    frames = _decode(fmt, data, path)
    if frames.shape[0] == 0:
        raise WavHeaderError(f"{path}: data chunk holds no samples")
    mono = frames.mean(axis=1) if frames.shape[1] > 1 else frames[:, 0]
    return AudioClip(np.ascontiguousarray(mono), int(fmt["rate"]))


def write_wav(path, clip: AudioClip) -> None:
    """Write a mono 16-bit PCM WAV (values clipped to [-1, 1])."""
    pcm = np.round(np.clip(clip.samples, -1.0, 1.0) * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(clip.sample_rate_hz))
        fh.writeframes(pcm.tobytes())


# --- resampling -------------------------------------------------------------

KAISER_BETA = 8.0
TAPS = 64
CUTOFF_FRACTION = 0.95


def _kernel(offsets: np.ndarray, cutoff: float, half_width: float) -> np.ndarray:
    """Kaiser-windowed sinc evaluated at fractional sample offsets (input-rate units)."""
    h = 2.0 * cutoff * np.sinc(2.0 * cutoff * offsets)
    ratio = np.clip(offsets / half_width, -1.0, 1.0)
    return h * np.i0(KAISER_BETA * np.sqrt(1.0 - ratio * ratio)) / np.i0(KAISER_BETA)


MAX_PHASES = 4096


def resample(clip: AudioClip, target_rate_hz: int, chunk: int = 4096) -> AudioClip:
    """Band-limited resampling to ``target_rate_hz``.

    The low-pass cutoff sits at 95 % of the lower rate's Nyquist frequency.
    The filter spans 64 taps measured at the lower of the two rates, so its
    transition band stays narrow when decimating. Output sample ``k`` sits at
    input position ``k * src / dst``; when the reduced rate ratio has at most
    ``MAX_PHASES`` distinct fractional positions the kernel is tabulated once
    per phase (a polyphase filter bank), otherwise it is evaluated directly.
    """
    if target_rate_hz <= 0:
        raise ValueError(f"target rate must be positive, got {target_rate_hz}")
    src = clip.sample_rate_hz
    if src == target_rate_hz:
        return clip
    x = np.asarray(clip.samples, dtype=np.float64)
    n_in = len(x)
    n_out = int(round(n_in * target_rate_hz / src))
    scale = min(1.0, target_rate_hz / src)
    cutoff = CUTOFF_FRACTION * 0.5 * scale  # cycles per input sample
    half_width = (TAPS / 2) / scale  # in input samples
    reach = int(math.ceil(half_width))
    g = math.gcd(int(src), int(target_rate_hz))
    up, down = int(target_rate_hz) // g, int(src) // g  # position of output k = k * down / up
    out = np.empty(n_out, dtype=np.float64)
    xp = np.concatenate([np.zeros(reach), x, np.zeros(reach + 1)])
    taps = np.arange(-reach + 1, reach + 1)
    table = None
    if up <= MAX_PHASES:
        table = _kernel(np.arange(up)[:, None] / up - taps[None, :], cutoff, half_width)
    for start in range(0, n_out, chunk):
        k = np.arange(start, min(start + chunk, n_out), dtype=np.int64)
        base, phase = np.divmod(k * down, up)
        idx = base[:, None] + taps[None, :] + reach  # indices into the padded input
        if table is not None:
            weights = table[phase]
        else:
            weights = _kernel((phase / up)[:, None] - taps[None, :], cutoff, half_width)
        out[start:start + len(k)] = np.einsum("ij,ij->i", xp[idx], weights)
    return AudioClip(out, int(target_rate_hz))
