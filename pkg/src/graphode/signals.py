"""Multichannel records: synthesis, file formats, epoching and log-spectra."""
from __future__ import annotations

import csv
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal.windows import hann

MAGIC = b"GRSG"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHHIQd")  # magic, version, flags, channels, samples, rate


class RecordFormatError(ValueError):
    """Raised for malformed record files; the message carries the byte offset."""


@dataclass
class SignalRecord:
    samples: np.ndarray  # (N, S)
    sample_rate: float
    label_track: np.ndarray | None = None  # (S,) in {0, 1}
    channel_names: list[str] | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2 or self.samples.shape[1] == 0:
            raise ValueError(f"samples must be an N x S matrix with S > 0, got {self.samples.shape}")
        if not self.sample_rate > 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.label_track is not None:
            lab = np.asarray(self.label_track)
            if lab.shape != (self.samples.shape[1],):
                raise ValueError(f"label_track has shape {lab.shape}, expected ({self.samples.shape[1]},)")
            if not np.all((lab == 0) | (lab == 1)):
                raise ValueError("label_track values must be 0 or 1")
            self.label_track = lab.astype(np.uint8)
        if self.channel_names is None:
            self.channel_names = [f"ch{i}" for i in range(self.n_channels)]

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.n_samples / self.sample_rate


@dataclass
class SyntheticSpec:
    channels: int = 19
    sample_rate: float = 256.0
    duration_s: float = 60.0
    event_windows: Sequence[tuple[float, float]] = ()
    seed: int = 0
    window_seconds: float = 12.0
    noise_std: float = 0.5
    event_gain: float = 1.0


def generate_synthetic_record(spec: SyntheticSpec) -> SignalRecord:
    """Low-frequency background plus phase-coupled 20-32 Hz bursts in events.

    Background: three sinusoids per channel below 12 Hz, a shared alpha-band
    rhythm with channel-specific gain, and white noise. Each event window
    adds a common burst source (three tones in 20-32 Hz, raised-cosine
    envelope) to every channel with its own gain and a small time lag.
    """
    if spec.channels < 2:
        raise ValueError("synthetic records need at least 2 channels")
    if spec.duration_s <= spec.window_seconds:
        raise ValueError(f"duration {spec.duration_s}s is not longer than one {spec.window_seconds}s window")
    if not 0 <= int(spec.seed) < 2 ** 64:
        raise ValueError("seed must fit in an unsigned 64-bit integer")
    windows = sorted((float(a), float(b)) for a, b in spec.event_windows)
    for a, b in windows:
        if not 0 <= a < b <= spec.duration_s:
            raise ValueError(f"event window [{a}, {b}) outside [0, {spec.duration_s}]")
    for (a0, b0), (a1, _) in zip(windows, windows[1:]):
        if a1 < b0:
            raise ValueError(f"event windows [{a0}, {b0}) and [{a1}, ...) overlap")

    rng = np.random.default_rng(int(spec.seed))
    fs = float(spec.sample_rate)
    n_samp = int(round(spec.duration_s * fs))
    t = np.arange(n_samp) / fs
    n = spec.channels

    freqs = rng.uniform(1.0, 12.0, size=(n, 3))
    amps = rng.uniform(0.5, 1.5, size=(n, 3))
    phases = rng.uniform(0.0, 2 * np.pi, size=(n, 3))
    x = np.einsum("nk,nkt->nt", amps, np.sin(2 * np.pi * freqs[:, :, None] * t + phases[:, :, None]))
    alpha_f = rng.uniform(8.0, 12.0)
    alpha_gain = rng.uniform(0.2, 1.0, size=(n, 1))
    x += alpha_gain * np.sin(2 * np.pi * alpha_f * t + rng.uniform(0, 2 * np.pi))
    x += spec.noise_std * rng.standard_normal((n, n_samp))

    labels = np.zeros(n_samp, dtype=np.uint8)
    ramp = 0.5
    for a, b in windows:
        i0, i1 = int(round(a * fs)), int(round(b * fs))
        labels[i0:i1] = 1
        tt = t[i0:i1] - a
        env = np.ones_like(tt)
        rise = tt < ramp
        fall = tt > (b - a) - ramp
        env[rise] = 0.5 - 0.5 * np.cos(np.pi * tt[rise] / ramp)
        env[fall] = 0.5 - 0.5 * np.cos(np.pi * ((b - a) - tt[fall]) / ramp)
        bf = rng.uniform(20.0, 32.0, size=3)
        bphase = rng.uniform(0, 2 * np.pi, size=3)
        level = spec.event_gain * rng.uniform(0.6, 1.4)
        gains = level * rng.uniform(0.6, 1.4, size=n)
        lags = rng.uniform(0.0, 0.005, size=n)
        for ch in range(n):
            arg = 2 * np.pi * bf[:, None] * (tt - lags[ch]) + bphase[:, None]
            x[ch, i0:i1] += gains[ch] * env * np.sin(arg).sum(axis=0)
    return SignalRecord(x, fs, labels)


# ---------------------------------------------------------------- file formats

def write_record(record: SignalRecord, path: str | Path) -> None:
    """Binary layout: header, then N*S little-endian float32 (row-major), then
    S uint8 labels if flag bit 0 is set."""
    flags = 1 if record.label_track is not None else 0
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, flags, record.n_channels, record.n_samples,
                          float(record.sample_rate))
    body = np.ascontiguousarray(record.samples, dtype="<f4").tobytes()
    tail = record.label_track.astype(np.uint8).tobytes() if flags else b""
    Path(path).write_bytes(header + body + tail)


def read_record(path: str | Path) -> SignalRecord:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise RecordFormatError(f"{path}: truncated header at byte offset {len(raw)} (need {_HEADER.size})")
    magic, version, flags, n, s, rate = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise RecordFormatError(f"{path}: bad magic {magic!r} at byte offset 0")
    if version != FORMAT_VERSION:
        raise RecordFormatError(f"{path}: unsupported version {version} at byte offset 4")
    if n == 0 or s == 0:
        raise RecordFormatError(f"{path}: empty record dimensions at byte offset 8")
    if not rate > 0:
        raise RecordFormatError(f"{path}: non-positive sample rate at byte offset 20")
    off = _HEADER.size
    n_body = n * s * 4
    expected = off + n_body + (s if flags & 1 else 0)
    if len(raw) != expected:
        bad = min(len(raw), expected)
        raise RecordFormatError(f"{path}: size {len(raw)} != expected {expected}, mismatch at byte offset {bad}")
    samples = np.frombuffer(raw, dtype="<f4", count=n * s, offset=off).reshape(n, s).astype(np.float64)
    if not np.all(np.isfinite(samples)):
        first = int(np.flatnonzero(~np.isfinite(samples.reshape(-1)))[0])
        raise RecordFormatError(f"{path}: non-finite sample at byte offset {off + 4 * first}")
    labels = None
    if flags & 1:
        labels = np.frombuffer(raw, dtype=np.uint8, count=s, offset=off + n_body).copy()
        if labels.max(initial=0) > 1:
            first = int(np.flatnonzero(labels > 1)[0])
            raise RecordFormatError(f"{path}: label value not in {{0,1}} at byte offset {off + n_body + first}")
    return SignalRecord(samples, float(rate), labels)


def read_csv_record(path: str | Path, sample_rate: float, label_column: str = "label") -> SignalRecord:
    """One channel per column under a header row; an optional ``label`` column."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader if row]
    data = np.asarray(rows, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] != len(header):
        raise ValueError(f"{path}: ragged CSV rows")
    labels = None
    names = list(header)
    if label_column in names:
        k = names.index(label_column)
        labels = data[:, k].astype(np.uint8)
        data = np.delete(data, k, axis=1)
        names.pop(k)
    return SignalRecord(data.T.copy(), sample_rate, labels, names)


# ---------------------------------------------------------------- epoching

@dataclass
class EpochSequence:
    epochs: np.ndarray  # (T, N, L)
    window_seconds: float
    step_seconds: float
    sample_rate: float
    epoch_labels: np.ndarray  # (T,)
    starts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return self.epochs.shape[0]


def epoch_count(duration: float, window_seconds: float, step_seconds: float) -> int:
    if duration < window_seconds:
        return 0
    return int(math.floor((duration - window_seconds) / step_seconds + 1e-9)) + 1


def segment_epochs(record: SignalRecord, window_seconds: float = 12.0,
                   step_seconds: float = 1.0) -> EpochSequence:
    """Left-aligned moving windows; trailing partial window dropped."""
    if step_seconds <= 0:
        raise ValueError("step_seconds must be positive")
    count = epoch_count(record.duration, window_seconds, step_seconds)
    if count == 0:
        raise ValueError(f"record of {record.duration}s is shorter than one {window_seconds}s window")
    fs = record.sample_rate
    length = int(round(window_seconds * fs))
    starts = np.array([min(int(round(i * step_seconds * fs)), record.n_samples - length)
                       for i in range(count)], dtype=np.int64)
    epochs = np.stack([record.samples[:, s:s + length] for s in starts])
    if record.label_track is not None:
        frac = np.array([record.label_track[s:s + length].mean() for s in starts])
        labels = (frac > 0.5).astype(np.int64)
    else:
        labels = np.zeros(count, dtype=np.int64)
    return EpochSequence(epochs, window_seconds, step_seconds, fs, labels, starts)


# ---------------------------------------------------------------- spectra

@dataclass
class SpectralFeatures:
    values: np.ndarray  # (T, N, d)
    fft_size: int
    hop: int
    floor_epsilon: float
    sample_rate: float

    @property
    def n_bins(self) -> int:
        return self.values.shape[-1]

    @property
    def frequencies(self) -> np.ndarray:
        return np.fft.rfftfreq(self.fft_size, d=1.0 / self.sample_rate)


def _mean_magnitude(epochs: np.ndarray, fft_size: int, hop: int) -> np.ndarray:
    frames = sliding_window_view(epochs, fft_size, axis=-1)[..., ::hop, :]
    window = hann(fft_size, sym=False)
    return np.abs(np.fft.rfft(frames * window, axis=-1)).mean(axis=-2)


def stft_log_spectrum(epochs: EpochSequence, fft_size: int = 256, hop: int = 128,
                      floor_epsilon: float = 1e-8, threads: int = 1) -> SpectralFeatures:
    """Hann-windowed STFT per epoch; frame magnitudes averaged, then log-floored."""
    length = epochs.epochs.shape[-1]
    if fft_size <= 0 or fft_size & (fft_size - 1):
        raise ValueError(f"fft_size must be a power of two, got {fft_size}")
    if fft_size > length:
        raise ValueError(f"fft_size {fft_size} exceeds epoch length {length}")
    if hop <= 0:
        raise ValueError("hop must be positive")
    data = epochs.epochs
    if threads > 1 and len(data) > 1:
        chunks = np.array_split(np.arange(len(data)), threads)
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(lambda idx: _mean_magnitude(data[idx], fft_size, hop), chunks))
        mag = np.concatenate(parts, axis=0)
    else:
        mag = _mean_magnitude(data, fft_size, hop)
    values = np.log(np.maximum(mag, floor_epsilon))
    return SpectralFeatures(values, fft_size, hop, floor_epsilon, epochs.sample_rate)


def band_power(x: np.ndarray, sample_rate: float, low: float, high: float) -> np.ndarray:
    """Mean periodogram power in [low, high) Hz along the last axis."""
    spec = np.abs(np.fft.rfft(x, axis=-1)) ** 2 / x.shape[-1]
    freqs = np.fft.rfftfreq(x.shape[-1], d=1.0 / sample_rate)
    sel = (freqs >= low) & (freqs < high)
    return spec[..., sel].mean(axis=-1)
