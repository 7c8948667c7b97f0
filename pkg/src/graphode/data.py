"""Synthetic corpora, per-record featurization, and windowed training samples."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graphs import SpectralGraphSequence, build_graph_sequence
from .signals import (SignalRecord, SyntheticSpec, generate_synthetic_record, segment_epochs,
                      stft_log_spectrum)


@dataclass
class CorpusSpec:
    n_records: int = 40
    channels: int = 19
    sample_rate: float = 256.0
    duration_s: float = 60.0
    event_fraction: float = 0.5
    event_min_s: float = 14.0
    event_max_s: float = 24.0
    noise_std: float = 0.5
    event_gain: float = 1.0
    seed: int = 0


def corpus_specs(spec: CorpusSpec) -> list[SyntheticSpec]:
    """Per-record synthetic specs; the first ``event_fraction`` share of a
    seeded permutation carries one event window each."""
    rng = np.random.default_rng(spec.seed)
    seeds = rng.integers(0, 2 ** 63, size=spec.n_records)
    with_event = np.zeros(spec.n_records, dtype=bool)
    with_event[rng.permutation(spec.n_records)[: int(round(spec.event_fraction * spec.n_records))]] = True
    out = []
    for i in range(spec.n_records):
        windows: tuple = ()
        if with_event[i]:
            dur = rng.uniform(spec.event_min_s, spec.event_max_s)
            start = rng.uniform(5.0, spec.duration_s - dur - 5.0)
            windows = ((round(start, 3), round(start + dur, 3)),)
        out.append(SyntheticSpec(spec.channels, spec.sample_rate, spec.duration_s, windows, int(seeds[i]),
                                 noise_std=spec.noise_std, event_gain=spec.event_gain))
    return out


@dataclass
class FeatureConfig:
    window_seconds: float = 12.0
    step_seconds: float = 1.0
    fft_size: int = 256
    hop: int = 128
    floor_epsilon: float = 1e-8
    tau: int = 3


@dataclass
class RecordGraphs:
    """One featurized record: graph sequence plus the channel-mean raw trace."""

    name: str
    graphs: SpectralGraphSequence
    series: np.ndarray  # (S,) channel mean of the raw samples
    epoch_starts: np.ndarray
    epoch_length: int
    has_event: bool


def featurize_record(name: str, record: SignalRecord, cfg: FeatureConfig, threads: int = 1) -> RecordGraphs:
    epochs = segment_epochs(record, cfg.window_seconds, cfg.step_seconds)
    spectra = stft_log_spectrum(epochs, cfg.fft_size, cfg.hop, cfg.floor_epsilon, threads=threads)
    graphs = build_graph_sequence(spectra.values, epochs.epoch_labels, cfg.tau, threads=threads)
    has_event = bool(record.label_track is not None and record.label_track.any())
    return RecordGraphs(name, graphs, record.samples.mean(axis=0), epochs.starts,
                        epochs.epochs.shape[-1], has_event)


def split_records(records: list[RecordGraphs], seed: int,
                  fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)) -> tuple[list, list, list]:
    """Record-level split, stratified by whether a record contains an event."""
    rng = np.random.default_rng(seed)
    parts: tuple[list, list, list] = ([], [], [])
    for flag in (False, True):
        group = [r for r in records if r.has_event == flag]
        order = rng.permutation(len(group))
        n_val = int(round(fractions[1] * len(group)))
        n_test = int(round(fractions[2] * len(group)))
        n_train = len(group) - n_val - n_test
        for k, idx in enumerate(order):
            part = 0 if k < n_train else (1 if k < n_train + n_val else 2)
            parts[part].append(group[idx])
    return tuple(sorted(p, key=lambda r: r.name) for p in parts)


@dataclass
class Batch:
    features: np.ndarray  # (B, T, N, d) observed node attributes
    adjacency: np.ndarray  # (B, T, N, N)
    series: np.ndarray  # (B, S) standardized channel-mean raw window
    future: np.ndarray  # (B, K, N, d)
    future_adjacency: np.ndarray  # (B, K, N, N)
    labels: np.ndarray  # (B,)

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass
class WindowDataset:
    """Samples are (record, t0): epochs t0..t0+T-1 observed, next K are targets.

    The label of a sample is the label of its last observed epoch.
    """

    records: list[RecordGraphs]
    obs_len: int = 8
    horizon: int = 1
    stride: int = 2
    index: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        if not self.index:
            for r, rec in enumerate(self.records):
                last = len(rec.graphs) - self.obs_len - self.horizon
                self.index.extend((r, t0) for t0 in range(0, last + 1, self.stride))

    def __len__(self) -> int:
        return len(self.index)

    @property
    def labels(self) -> np.ndarray:
        return np.array([self.records[r].graphs.labels[t0 + self.obs_len - 1] for r, t0 in self.index],
                        dtype=np.int64)

    def batch(self, rows) -> Batch:
        feats, adjs, series, fut, fut_adj, labels = [], [], [], [], [], []
        for i in rows:
            r, t0 = self.index[int(i)]
            rec = self.records[r]
            t1 = t0 + self.obs_len
            feats.append(rec.graphs.features[t0:t1])
            adjs.append(rec.graphs.adjacency[t0:t1])
            fut.append(rec.graphs.features[t1:t1 + self.horizon])
            fut_adj.append(rec.graphs.adjacency[t1:t1 + self.horizon])
            labels.append(rec.graphs.labels[t1 - 1])
            s0, s1 = rec.epoch_starts[t0], rec.epoch_starts[t1 - 1] + rec.epoch_length
            x = rec.series[s0:s1]
            sd = x.std()
            series.append((x - x.mean()) / (sd if sd > 1e-12 else 1.0))
        return Batch(np.stack(feats), np.stack(adjs), np.stack(series), np.stack(fut), np.stack(fut_adj),
                     np.asarray(labels, dtype=np.int64))

    def all(self) -> Batch:
        return self.batch(range(len(self)))


def synthesize_corpus(spec: CorpusSpec) -> list[tuple[str, SignalRecord]]:
    return [(f"rec{i:03d}", generate_synthetic_record(s)) for i, s in enumerate(corpus_specs(spec))]
