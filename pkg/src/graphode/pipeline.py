"""In-memory composition of the stages, shared by the CLI and the experiment tests."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from concurrent.futures import ThreadPoolExecutor

from .config import RunConfig
from .data import RecordGraphs, WindowDataset, featurize_record, split_records, synthesize_corpus
from .metrics import MetricsReport
from .model import Model
from .training import (TrainResult, band_power_baseline, evaluate, finetune_classifier, persistence_gji,
                       train_forecaster)


@dataclass
class Splits:
    train: WindowDataset
    val: WindowDataset
    test: WindowDataset


def featurize_all(named_records, cfg: RunConfig, threads: int = 1) -> list[RecordGraphs]:
    """Featurize records in input order; with threads > 1 records fan out to
    workers and results are merged back by position."""
    def one(item):
        return featurize_record(item[0], item[1], cfg.features)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(one, named_records))
    return [one(item) for item in named_records]


def make_splits(records: list[RecordGraphs], cfg: RunConfig) -> Splits:
    parts = split_records(records, cfg.corpus.seed)
    t = cfg.train
    return Splits(*(WindowDataset(p, t.obs_len, t.horizon, t.sample_stride) for p in parts))


def build_model(splits: Splits, cfg: RunConfig) -> Model:
    first = splits.train.records[0].graphs
    model = Model(first.features.shape[1], first.features.shape[2], cfg.model, cfg.train)
    batch = splits.train.all()
    model.fit_normalization(batch.features, batch.future)
    return model


@dataclass
class ExperimentResult:
    model: Model
    pretrain: TrainResult
    finetune: TrainResult
    test: MetricsReport
    persistence_gji: float
    baseline_auroc: float


def run_experiment(cfg: RunConfig, splits: Splits | None = None, threads: int = 1) -> ExperimentResult:
    """synthesize -> featurize -> pretrain -> fine-tune -> test metrics."""
    if splits is None:
        splits = make_splits(featurize_all(synthesize_corpus(cfg.corpus), cfg, threads), cfg)
    model = build_model(splits, cfg)
    pre = train_forecaster(model, splits.train, splits.val, cfg.train, threads)
    fine = finetune_classifier(model, splits.train, splits.val, cfg.train, threads)
    report = evaluate(model, splits.test, cfg.train, cfg.threshold_policy, threads)
    return ExperimentResult(model, pre, fine, report, persistence_gji(splits.test, cfg.train.tau),
                            band_power_baseline(splits.train, splits.test, cfg.corpus.sample_rate,
                                                cfg.features.fft_size))


def with_train(cfg: RunConfig, **changes) -> RunConfig:
    return dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, **changes))
