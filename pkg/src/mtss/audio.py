"""Audio I/O, resampling, framing and the STFT shared by every feature worker."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import get_window

SAMPLE_RATE = 16000

_RESAMPLE_TAPS = 64
_KAISER_BETA = 12.0
_RESAMPLE_ROLLOFF = 0.95


class AudioError(ValueError):
    """Raised for unreadable, unsupported or empty audio."""


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float32)
        if x.ndim != 1:
            raise AudioError(f"waveform must be 1-D, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise AudioError("waveform contains non-finite samples")
        if int(self.sample_rate) <= 0:
            raise AudioError(f"sample rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class Spectrogram:
    """Non-negative D x T matrix, D = n_fft // 2 + 1."""

    values: np.ndarray
    n_fft: int
    hop: int
    kind: str = "magnitude"

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


def _to_float(data: np.ndarray) -> np.ndarray:
    if data.dtype == np.int16:
        return data.astype(np.float32) / 32768.0
    if data.dtype == np.int32:
        return (data.astype(np.float64) / 2147483648.0).astype(np.float32)
    if data.dtype == np.uint8:
        return (data.astype(np.float32) - 128.0) / 128.0
    if data.dtype in (np.float32, np.float64):
        return np.clip(data.astype(np.float32), -1.0, 1.0)
    raise AudioError(f"unsupported sample format {data.dtype}")


def load_audio(path, target_sr: int = SAMPLE_RATE) -> Waveform:
    """Read a PCM WAV file as a mono waveform at ``target_sr``.

    Stereo (or any multi-channel) input is averaged to mono. Integer PCM is
    scaled into [-1, 1).
    """
    try:
        sr, data = wavfile.read(str(path))
    except (OSError, ValueError, EOFError) as exc:
        raise AudioError(f"cannot read {path}: {exc}") from exc
    x = _to_float(np.asarray(data))
    if x.ndim == 2:
        x = x.mean(axis=1)
    if x.size == 0:
        raise AudioError(f"{path} contains no samples")
    if sr != target_sr:
        x = resample(x, sr, target_sr)
    return Waveform(x, target_sr)


def save_audio(path, wave: Waveform) -> None:
    """Write 16-bit PCM mono WAV."""
    pcm = np.clip(np.round(wave.samples.astype(np.float64) * 32768.0), -32768, 32767)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(str(path), wave.sample_rate, pcm.astype(np.int16))


def resample(x: np.ndarray, sr_in: int, sr_out: int) -> np.ndarray:
    """Band-limited resampling with a 64-tap Kaiser(12) windowed sinc."""
    x = np.asarray(x, dtype=np.float64)
    if sr_in == sr_out:
        return x.astype(np.float32)
    n_in = x.shape[0]
    n_out = -(-n_in * sr_out // sr_in)
    # cutoff relative to the input Nyquist; anti-aliasing when downsampling
    cutoff = min(1.0, sr_out / sr_in) * _RESAMPLE_ROLLOFF
    half = _RESAMPLE_TAPS // 2
    offsets = np.arange(-half + 1, half + 1)
    out = np.empty(n_out, dtype=np.float64)
    block = 8192
    for start in range(0, n_out, block):
        pos = np.arange(start, min(start + block, n_out)) * (sr_in / sr_out)
        base = np.floor(pos).astype(np.int64)
        idx = base[:, None] + offsets[None, :]
        dist = pos[:, None] - idx
        # evaluate the continuous Kaiser window at fractional distance
        u = np.clip(1.0 - (dist / half) ** 2, 0.0, None)
        w = np.i0(_KAISER_BETA * np.sqrt(u)) / np.i0(_KAISER_BETA)
        h = cutoff * np.sinc(cutoff * dist) * w
        valid = (idx >= 0) & (idx < n_in)
        taps = np.where(valid, x[np.clip(idx, 0, n_in - 1)], 0.0)
        out[start:start + len(pos)] = np.sum(taps * h, axis=1)
    return out.astype(np.float32)


def frame_count(n_samples: int, hop: int, centered: bool = True, frame_length: int | None = None) -> int:
    if hop <= 0:
        raise ValueError("hop must be positive")
    if centered:
        return 1 + n_samples // hop
    if frame_length is None:
        raise ValueError("frame_length is required for non-centered framing")
    if n_samples < frame_length:
        return 0
    return 1 + (n_samples - frame_length) // hop


def frame_signal(x: np.ndarray, frame_length: int, hop: int) -> np.ndarray:
    """Centered frames (T x frame_length) with reflect padding."""
    pad = frame_length // 2
    if x.shape[0] > 1:
        padded = np.pad(x, pad, mode="reflect")
    else:
        padded = np.pad(x, pad, mode="constant")
    frames = np.lib.stride_tricks.sliding_window_view(padded, frame_length)[::hop]
    return frames[: frame_count(x.shape[0], hop)]


def hann(n: int) -> np.ndarray:
    return get_window("hann", n, fftbins=True)


def stft(wave: Waveform, n_fft: int = 2048, hop: int = 160, power: bool = False) -> Spectrogram:
    """Hann-windowed, centered (reflect padded) STFT magnitude or power."""
    if n_fft <= 0 or n_fft & (n_fft - 1):
        raise ValueError(f"n_fft must be a power of two, got {n_fft}")
    if hop <= 0:
        raise ValueError("hop must be positive")
    if len(wave) < 1:
        raise AudioError("waveform is empty")
    frames = frame_signal(wave.samples.astype(np.float64), n_fft, hop)
    spec = np.abs(np.fft.rfft(frames * hann(n_fft), axis=1)).T
    if power:
        spec = spec ** 2
    return Spectrogram(spec, n_fft, hop, "power" if power else "magnitude")


def random_crop(wave: Waveform, crop_len: int, seed, align: int = 1) -> Waveform:
    """Uniformly placed contiguous crop; short input is zero-padded on the right.

    ``align`` restricts the start offset to multiples of that many samples,
    which keeps crops on the feature frame grid.
    """
    if crop_len < 1:
        raise ValueError("crop_len must be >= 1")
    x = wave.samples
    n = x.shape[0]
    if n <= crop_len:
        out = np.zeros(crop_len, dtype=np.float32)
        out[:n] = x
        return Waveform(out, wave.sample_rate)
    start = crop_start(n, crop_len, seed, align)
    return Waveform(x[start:start + crop_len].copy(), wave.sample_rate)


def crop_start(n_samples: int, crop_len: int, seed, align: int = 1) -> int:
    """Start offset chosen by :func:`random_crop` for the same arguments."""
    if n_samples <= crop_len:
        return 0
    rng = np.random.default_rng(seed)
    return int(rng.integers(0, (n_samples - crop_len) // align + 1)) * align
