"""Hand-crafted target features for the pretext workers.

Every frame-level feature is computed on the same centered 10 ms grid
(hop 160 at 16 kHz), so all matrices for a clip share the frame count
``1 + n_samples // 160``. The waveform worker (W) is the raw signal itself.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import scipy.fft

from .audio import Waveform, frame_count, frame_signal, hann, stft

AMIN = 1e-10
TOP_DB = 80.0
STD_FLOOR = 1e-6


class Worker(str, enum.Enum):
    W = "W"
    L = "L"
    P = "P"
    M = "M"
    C = "C"
    T = "T"

    def __str__(self):
        return self.value


WORKER_ORDER = tuple(Worker)
BASELINE = (Worker.W, Worker.L, Worker.P)
WORKER_NAMES = {
    Worker.W: "waveform",
    Worker.L: "lps",
    Worker.P: "prosody",
    Worker.M: "mfcc",
    Worker.C: "chroma",
    Worker.T: "tempogram",
}


def parse_workers(spec) -> tuple[Worker, ...]:
    """Parse ``"WLPT"``, ``"WLP+T"`` or an iterable of ids into canonical order."""
    if isinstance(spec, str):
        letters = [c for c in spec.upper() if c not in "+, "]
    else:
        letters = [str(w).upper() for w in spec]
    valid = "".join(w.value for w in WORKER_ORDER)
    chosen = set()
    for c in letters:
        if c not in valid or len(c) != 1:
            raise ValueError(f"unknown worker id {c!r}; valid ids are {', '.join(valid)}")
        chosen.add(Worker(c))
    return tuple(w for w in WORKER_ORDER if w in chosen)


def workers_label(workers: Iterable[Worker]) -> str:
    return "".join(w.value for w in parse_workers(workers))


@dataclass(frozen=True)
class ExtractionSpec:
    sr: int = 16000
    n_fft: int = 2048
    hop: int = 160
    n_mels: int = 128
    n_mfcc: int = 20
    chroma_bins: int = 12
    tempogram_win: int = 384
    f0_min: float = 65.0
    f0_max: float = 2093.0
    yin_threshold: float = 0.1

    def __post_init__(self):
        if self.hop * 1000 != 10 * self.sr:
            raise ValueError("hop must correspond to 10 ms")
        for name in ("sr", "n_fft", "hop", "n_mels", "n_mfcc", "chroma_bins", "tempogram_win"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.f0_min < self.f0_max <= self.sr / 2:
            raise ValueError("need 0 < f0_min < f0_max <= sr/2")

    def dim(self, worker: Worker) -> int:
        return {
            Worker.W: 1,
            Worker.L: self.n_fft // 2 + 1,
            Worker.P: 4,
            Worker.M: self.n_mfcc,
            Worker.C: self.chroma_bins,
            Worker.T: self.tempogram_win,
        }[Worker(worker)]


DEFAULT_SPEC = ExtractionSpec()


@dataclass
class FeatureMatrix:
    worker: Worker
    values: np.ndarray
    hop: int = 160

    def __post_init__(self):
        self.worker = Worker(self.worker)
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise ValueError("feature values must be a D x T matrix")

    @property
    def shape(self):
        return self.values.shape


@dataclass
class FeatureStats:
    worker: Worker
    mean: np.ndarray
    std: np.ndarray

    def normalize(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean[:, None]) / self.std[:, None]


def _check_sr(wave: Waveform, spec: ExtractionSpec):
    if wave.sample_rate != spec.sr:
        raise ValueError(f"sample rate {wave.sample_rate} does not match extraction rate {spec.sr}")


def _hz_to_mel(f):
    # Slaney: linear below 1 kHz, logarithmic above
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    mel = f / f_sp
    return np.where(f >= min_log_hz, min_log_mel + np.log(np.maximum(f, 1e-12) / min_log_hz) / logstep, mel)


def _mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(m >= min_log_mel, min_log_hz * np.exp(logstep * (m - min_log_mel)), f_sp * m)


_MEL_CACHE: dict = {}


def mel_filterbank(sr: int, n_fft: int, n_mels: int, fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Slaney-scale triangular filters with area normalization, n_mels x (n_fft/2+1)."""
    fmax = sr / 2 if fmax is None else fmax
    key = (sr, n_fft, n_mels, fmin, fmax)
    if key in _MEL_CACHE:
        return _MEL_CACHE[key]
    fft_freqs = np.linspace(0, sr / 2, n_fft // 2 + 1)
    mel_f = _mel_to_hz(np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2))
    fdiff = np.diff(mel_f)
    ramps = mel_f[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / fdiff[:-1, None]
    upper = ramps[2:] / fdiff[1:, None]
    weights = np.maximum(0.0, np.minimum(lower, upper))
    weights *= (2.0 / (mel_f[2:] - mel_f[:-2]))[:, None]
    _MEL_CACHE[key] = weights
    return weights


def power_to_db(power: np.ndarray) -> np.ndarray:
    db = 10.0 * np.log10(np.maximum(power, AMIN))
    if db.size:
        db = np.maximum(db, db.max() - TOP_DB)
    return db


class _Analysis:
    """Per-waveform cache of the spectral representations shared by workers."""

    def __init__(self, wave: Waveform, spec: ExtractionSpec):
        _check_sr(wave, spec)
        self.wave = wave
        self.spec = spec
        self._power = None
        self._mel_db = None

    @property
    def n_frames(self):
        return frame_count(len(self.wave), self.spec.hop)

    @property
    def power(self) -> np.ndarray:
        if self._power is None:
            self._power = stft(self.wave, self.spec.n_fft, self.spec.hop, power=True).values
        return self._power

    @property
    def mel_db(self) -> np.ndarray:
        if self._mel_db is None:
            fb = mel_filterbank(self.spec.sr, self.spec.n_fft, self.spec.n_mels)
            self._mel_db = power_to_db(fb @ self.power)
        return self._mel_db

    def lps(self):
        return 10.0 * np.log10(self.power + AMIN)

    def mfcc(self):
        return scipy.fft.dct(self.mel_db, type=2, norm="ortho", axis=0)[: self.spec.n_mfcc]

    def chroma(self):
        spec = self.spec
        freqs = np.arange(spec.n_fft // 2 + 1) * spec.sr / spec.n_fft
        bins = spec.chroma_bins
        pc = np.full(freqs.shape, -1)
        nz = freqs > 0
        pc[nz] = (np.round(bins * np.log2(freqs[nz] / 440.0)).astype(int) + 69) % bins
        fold = np.zeros((bins, freqs.size))
        fold[pc[nz], np.nonzero(nz)[0]] = 1.0
        chroma = fold @ self.power
        peak = chroma.max(axis=0, keepdims=True)
        return np.divide(chroma, peak, out=np.zeros_like(chroma), where=peak > 0)

    def onset_strength(self):
        mel_db = self.mel_db
        n = mel_db.shape[1]
        diff = np.maximum(0.0, mel_db[:, 1:] - mel_db[:, :-1]).mean(axis=0)
        # delay by half a window so onsets line up with the frame centre
        delay = 1 + self.spec.n_fft // (2 * self.spec.hop)
        env = np.concatenate([np.zeros(delay), diff])[:n]
        if env.size < n:
            env = np.pad(env, (0, n - env.size))
        return env[None, :]

    def tempogram(self):
        env = self.onset_strength()[0]
        win = self.spec.tempogram_win
        half = win // 2
        padded = np.pad(env, (half, win - half))
        frames = np.lib.stride_tricks.sliding_window_view(padded, win)[: env.size]
        frames = frames * hann(win)
        n_fft = 2 * win
        spectrum = np.fft.rfft(frames, n=n_fft, axis=1)
        ac = np.fft.irfft(np.abs(spectrum) ** 2, n=n_fft, axis=1)[:, :win]
        lag0 = ac[:, :1]
        ok = lag0[:, 0] > 1e-12 * max(1.0, float(np.max(lag0)))
        out = np.zeros_like(ac)
        out[ok] = ac[ok] / lag0[ok]
        return np.clip(out, -1.0, 1.0).T

    def prosody(self):
        spec = self.spec
        frames = frame_signal(self.wave.samples.astype(np.float64), spec.n_fft, spec.hop)
        positive = frames >= 0
        zcr = np.count_nonzero(positive[:, 1:] != positive[:, :-1], axis=1) / (spec.n_fft - 1)
        rms = np.sqrt(np.mean(frames ** 2, axis=1))
        voicing, f0 = yin(frames, spec.sr, spec.f0_min, spec.f0_max, spec.yin_threshold)
        return np.stack([zcr, rms, voicing, f0])

    def feature(self, worker: Worker) -> np.ndarray:
        worker = Worker(worker)
        if worker is Worker.W:
            return self.wave.samples[None, :].copy()
        fn = {
            Worker.L: self.lps,
            Worker.P: self.prosody,
            Worker.M: self.mfcc,
            Worker.C: self.chroma,
            Worker.T: self.tempogram,
        }[worker]
        return fn().astype(np.float32)


def yin(frames: np.ndarray, sr: int, f0_min: float, f0_max: float, threshold: float = 0.1):
    """YIN on a batch of frames (T x N). Returns ``(voicing, f0)``.

    Voicing is ``1 - min(CMNDF)`` over the lag search range, clamped to
    [0, 1]; f0 is zeroed where voicing < 0.5.
    """
    frames = np.asarray(frames, dtype=np.float64)
    n_frames, n = frames.shape
    tau_min = max(2, int(np.floor(sr / f0_max)))
    tau_max = min(int(np.ceil(sr / f0_min)), n // 2)
    width = n - tau_max

    # d(tau) = sum_j (x_j - x_{j+tau})^2 over j < width, computed via FFT
    size = scipy.fft.next_fast_len(n + width)
    head = frames[:, :width]
    cross = scipy.fft.irfft(
        np.conj(scipy.fft.rfft(head, size, axis=1)) * scipy.fft.rfft(frames, size, axis=1), size, axis=1
    )[:, : tau_max + 1]
    sq = np.concatenate([np.zeros((n_frames, 1)), np.cumsum(frames ** 2, axis=1)], axis=1)
    energy_head = sq[:, width]
    lags = np.arange(tau_max + 1)
    energy_shift = sq[:, lags + width] - sq[:, lags]
    diff = np.maximum(energy_head[:, None] + energy_shift - 2.0 * cross, 0.0)

    cum = np.cumsum(diff[:, 1:], axis=1)
    cmndf = np.ones_like(diff)
    denom = cum / lags[None, 1:]
    np.divide(diff[:, 1:], denom, out=cmndf[:, 1:], where=denom > 1e-12 * (energy_head[:, None] + 1e-30))

    voicing = np.zeros(n_frames)
    f0 = np.zeros(n_frames)
    silent = energy_head <= 1e-10
    search = cmndf[:, tau_min: tau_max + 1]
    for i in range(n_frames):
        if silent[i]:
            continue
        row = search[i]
        voicing[i] = 1.0 - min(max(float(row.min()), 0.0), 1.0)
        if voicing[i] < 0.5:
            continue
        below = np.nonzero(row < threshold)[0]
        if below.size:
            k = int(below[0])
            while k + 1 < row.size and row[k + 1] < row[k]:
                k += 1
        else:
            k = int(np.argmin(row))
        tau = float(k + tau_min)
        if 0 < k < row.size - 1:
            a, b, c = row[k - 1], row[k], row[k + 1]
            denom_p = a - 2.0 * b + c
            if denom_p > 0:
                tau += 0.5 * (a - c) / denom_p
        f0[i] = np.clip(sr / tau, f0_min, f0_max)
    return voicing, f0


def lps(wave: Waveform, spec: ExtractionSpec = DEFAULT_SPEC) -> FeatureMatrix:
    return FeatureMatrix(Worker.L, _Analysis(wave, spec).feature(Worker.L), spec.hop)


def mfcc(wave: Waveform, spec: ExtractionSpec = DEFAULT_SPEC) -> FeatureMatrix:
    return FeatureMatrix(Worker.M, _Analysis(wave, spec).feature(Worker.M), spec.hop)


def chroma(wave: Waveform, spec: ExtractionSpec = DEFAULT_SPEC) -> FeatureMatrix:
    return FeatureMatrix(Worker.C, _Analysis(wave, spec).feature(Worker.C), spec.hop)


def onset_strength(wave: Waveform, spec: ExtractionSpec = DEFAULT_SPEC) -> np.ndarray:
    return _Analysis(wave, spec).onset_strength()


def tempogram(wave: Waveform, spec: ExtractionSpec = DEFAULT_SPEC) -> FeatureMatrix:
    return FeatureMatrix(Worker.T, _Analysis(wave, spec).feature(Worker.T), spec.hop)


def prosody(wave: Waveform, spec: ExtractionSpec = DEFAULT_SPEC) -> FeatureMatrix:
    """Rows: zero-crossing rate, RMS energy, voicing probability, F0 (Hz)."""
    return FeatureMatrix(Worker.P, _Analysis(wave, spec).feature(Worker.P), spec.hop)


def extract_all(wave: Waveform, workers, spec: ExtractionSpec = DEFAULT_SPEC) -> dict[Worker, FeatureMatrix]:
    analysis = _Analysis(wave, spec)
    out = {}
    for w in parse_workers(workers):
        hop = 1 if w is Worker.W else spec.hop
        out[w] = FeatureMatrix(w, analysis.feature(w), hop)
    return out


@dataclass
class RunningStats:
    """Streaming per-dimension mean/variance (Welford, mergeable)."""

    dim: int | None = None
    count: int = 0
    mean: np.ndarray | None = None
    m2: np.ndarray | None = None
    worker: Worker | None = field(default=None)

    def update(self, values: np.ndarray) -> "RunningStats":
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError("expected a D x T matrix")
        d, n = values.shape
        if self.dim is None:
            self.dim = d
            self.mean = np.zeros(d)
            self.m2 = np.zeros(d)
        elif d != self.dim:
            raise ValueError(f"dimension mismatch: expected {self.dim}, got {d}")
        if n == 0:
            return self
        batch_mean = values.mean(axis=1)
        batch_m2 = ((values - batch_mean[:, None]) ** 2).sum(axis=1)
        self._combine(n, batch_mean, batch_m2)
        return self

    def _combine(self, n, mean, m2):
        total = self.count + n
        delta = mean - self.mean
        self.mean = self.mean + delta * (n / total)
        self.m2 = self.m2 + m2 + delta ** 2 * (self.count * n / total)
        self.count = total

    def merge(self, other: "RunningStats") -> "RunningStats":
        if other.count == 0:
            return self
        if self.dim is None:
            self.dim, self.mean, self.m2, self.count = other.dim, other.mean.copy(), other.m2.copy(), other.count
            return self
        if other.dim != self.dim:
            raise ValueError("dimension mismatch")
        self._combine(other.count, other.mean, other.m2)
        return self

    def finalize(self, worker) -> FeatureStats:
        if self.count == 0:
            raise ValueError("no frames to compute statistics from")
        std = np.maximum(np.sqrt(self.m2 / self.count), STD_FLOOR)
        return FeatureStats(Worker(worker), self.mean.copy(), std)


def compute_stats(corpus: Iterable[FeatureMatrix]) -> FeatureStats:
    running = RunningStats()
    worker = None
    for fm in corpus:
        if worker is None:
            worker = fm.worker
        running.update(fm.values)
    if worker is None:
        raise ValueError("empty corpus")
    return running.finalize(worker)


# -- feature store ----------------------------------------------------------

MAGIC = b"MTSS"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIBII")


def write_matrix(path, worker: Worker, values: np.ndarray) -> None:
    values = np.ascontiguousarray(values, dtype="<f4")
    d, t = values.shape
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, ord(Worker(worker).value), d, t))
        fh.write(values.tobytes())


def read_matrix(path) -> tuple[Worker, np.ndarray]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, version, wid, d, t = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    payload = raw[_HEADER.size:]
    if len(payload) != 4 * d * t:
        raise ValueError(f"{path}: payload size {len(payload)} does not match {d}x{t}")
    values = np.frombuffer(payload, dtype="<f4").reshape(d, t).astype(np.float32)
    return Worker(chr(wid)), values


def write_feature(path, fm: FeatureMatrix) -> None:
    write_matrix(path, fm.worker, fm.values)


def read_feature(path) -> FeatureMatrix:
    worker, values = read_matrix(path)
    return FeatureMatrix(worker, values)


def write_stats(path, stats: FeatureStats) -> None:
    write_matrix(path, stats.worker, np.stack([stats.mean, stats.std], axis=1))


def read_stats(path) -> FeatureStats:
    worker, values = read_matrix(path)
    if values.shape[1] != 2:
        raise ValueError(f"{path}: stats file must have T=2")
    return FeatureStats(worker, values[:, 0].astype(np.float64), values[:, 1].astype(np.float64))
