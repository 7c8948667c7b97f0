"""Two-stage optimization (forecast pretraining, head fine-tuning) and evaluation."""
from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward
from .config import TrainConfig
from .data import WindowDataset
from .forecaster import bce_with_logits, forecast_loss
from .graphs import binarize_adjacency, correlation_adjacency, global_jaccard
from .metrics import MetricsReport, SingleClassError, compute_auroc, compute_f1_acc_recall, cosine_rows
from .model import Model

BETA1, BETA2, EPS = 0.9, 0.999, 1e-8


class DivergenceError(FloatingPointError):
    pass


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState,
              learning_rate: float, weight_decay: float = 0.0) -> None:
    """Bias-corrected Adam with decoupled weight decay, in place."""
    for name in sorted(grads):
        if not np.all(np.isfinite(grads[name])):
            raise DivergenceError(f"training_eval.adam_step: non-finite gradient for parameter {name}")
    state.step += 1
    c1 = 1.0 - BETA1 ** state.step
    c2 = 1.0 - BETA2 ** state.step
    for name in sorted(grads):
        p, g = params[name], grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= BETA1
        m += (1 - BETA1) * g
        v *= BETA2
        v += (1 - BETA2) * g * g
        if weight_decay:
            p.data *= 1.0 - learning_rate * weight_decay
        p.data -= learning_rate * (m / c1) / (np.sqrt(v / c2) + EPS)


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(grads[k] * grads[k])) for k in sorted(grads))))


def clip_gradients(grads: Mapping[str, np.ndarray], max_norm: float = 5.0) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients by max_norm/norm when the global L2 norm exceeds max_norm."""
    norm = global_norm(grads)
    if norm > max_norm:
        factor = max_norm / norm
        return {k: g * factor for k, g in grads.items()}, norm
    return dict(grads), norm


def _collect_grads(params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}


def _set_trainable(model: Model, names: set[str]) -> dict[str, Tensor]:
    for k, p in model.all_tensors().items():
        p.requires_grad = k in names
        p.grad = None
    return {k: p for k, p in model.all_tensors().items() if k in names}


def _epoch_record(epoch: int, stage: str, train_loss: float, val_metric: float, lr: float,
                  seconds: float | None) -> dict:
    return {"epoch": epoch, "stage": stage, "train_loss": train_loss, "val_metric": val_metric,
            "lr": lr, "seconds": seconds}


@dataclass
class TrainResult:
    history: list[dict]
    best_epoch: int
    best_metric: float


def _stream(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng([seed, tag])


def forecast_validation_loss(model: Model, ds: WindowDataset, cfg: TrainConfig, threads: int = 1) -> float:
    def one(k):
        rows = range(k, min(k + cfg.eval_batch_size, len(ds)))
        batch = ds.batch(rows)
        out = model.forward(batch, ds.horizon, train=False, rng=_stream(cfg.seed, 10_000 + k))
        return forecast_loss(out.predicted, batch.future).item() * len(batch)

    starts = list(range(0, len(ds), cfg.eval_batch_size))
    totals = _map(one, starts, threads)
    return float(np.sum(totals) / len(ds))


def _map(fn, items, threads: int):
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def train_forecaster(model: Model, train_ds: WindowDataset, val_ds: WindowDataset, cfg: TrainConfig,
                     threads: int = 1, log=None) -> TrainResult:
    """Minimize the forecast loss; early stop on validation loss, restore the best state."""
    params = _set_trainable(model, set(model.trunk_parameters()))
    state = AdamState()
    order_rng = _stream(cfg.seed, 1)
    noise_rng = _stream(cfg.seed, 2)
    history: list[dict] = []
    best, best_epoch, best_state = np.inf, -1, model.state_dict()
    for epoch in range(cfg.max_epochs):
        t_start = time.perf_counter()
        perm = order_rng.permutation(len(train_ds))
        losses = []
        for b, start in enumerate(range(0, len(perm), cfg.batch_size)):
            batch = train_ds.batch(perm[start:start + cfg.batch_size])
            with Tape() as tape:
                out = model.forward(batch, train_ds.horizon, train=True, rng=noise_rng)
                loss = forecast_loss(out.predicted, batch.future, cfg.structure_weight)
            if not np.isfinite(loss.item()):
                raise DivergenceError(f"training_eval.train_forecaster: non-finite loss at epoch {epoch}, batch {b}")
            backward(tape, loss)
            grads, _ = clip_gradients(_collect_grads(params), cfg.grad_clip_norm)
            adam_step(params, grads, state, cfg.learning_rate, cfg.weight_decay)
            for p in params.values():
                p.grad = None
            losses.append(loss.item() * len(batch))
        val = forecast_validation_loss(model, val_ds, cfg, threads)
        seconds = time.perf_counter() - t_start if cfg.record_timing else None
        history.append(_epoch_record(epoch, "forecast_pretrain", float(np.sum(losses) / len(train_ds)), val,
                                     cfg.learning_rate, seconds))
        if log:
            log(history[-1])
        if val < best:
            best, best_epoch, best_state = val, epoch, model.state_dict()
        elif epoch - best_epoch >= cfg.early_stop_patience:
            break
    model.load_state_dict(best_state)
    _set_trainable(model, set())
    return TrainResult(history, best_epoch, float(best))


# ---------------------------------------------------------------- stage 2

def pooled_features(model: Model, ds: WindowDataset, cfg: TrainConfig, threads: int = 1) -> np.ndarray:
    """Deterministic pooled trajectories (eval mode) for every sample."""
    def one(k):
        batch = ds.batch(range(k, min(k + cfg.eval_batch_size, len(ds))))
        out = model.forward(batch, ds.horizon, train=False, rng=_stream(cfg.seed, 20_000 + k), decode=False)
        return model.pooled(out.trajectory).data

    return np.concatenate(_map(one, list(range(0, len(ds), cfg.eval_batch_size)), threads), axis=0)


def predict_scores(model: Model, ds: WindowDataset, cfg: TrainConfig, threads: int = 1) -> np.ndarray:
    feats = model.normalize_pooled(pooled_features(model, ds, cfg, threads))
    return (feats @ model.head.w.data + model.head.b.data).reshape(-1)


def finetune_classifier(model: Model, train_ds: WindowDataset, val_ds: WindowDataset, cfg: TrainConfig,
                        threads: int = 1, log=None) -> TrainResult:
    """Train the head on pooled trajectories; checkpoint by validation AUROC.

    With ``finetune_unfreeze`` off the trunk is fixed, so pooled features are
    computed once in eval mode and the head is fit on them.
    """
    val_labels = val_ds.labels
    if val_labels.min(initial=1) == val_labels.max(initial=0):
        raise SingleClassError("training_eval.finetune_classifier: validation split has a single class")
    lr = cfg.finetune_learning_rate or cfg.learning_rate
    names = set(model.head.named())
    if cfg.finetune_unfreeze:
        names |= set(model.trunk_parameters())
    params = _set_trainable(model, names)
    state = AdamState()
    order_rng = _stream(cfg.seed, 3)
    noise_rng = _stream(cfg.seed, 4)
    train_labels = train_ds.labels
    train_pooled = pooled_features(model, train_ds, cfg, threads)
    model.fit_pool_normalization(train_pooled)
    frozen_train = frozen_val = None
    if not cfg.finetune_unfreeze:
        frozen_train = model.normalize_pooled(train_pooled)
        frozen_val = model.normalize_pooled(pooled_features(model, val_ds, cfg, threads))
    history: list[dict] = []
    best, best_epoch, best_state = -np.inf, -1, model.state_dict()
    for epoch in range(cfg.max_epochs):
        t_start = time.perf_counter()
        perm = order_rng.permutation(len(train_ds))
        losses = []
        for start in range(0, len(perm), cfg.batch_size):
            rows = perm[start:start + cfg.batch_size]
            with Tape() as tape:
                if frozen_train is not None:
                    pooled = Tensor(frozen_train[rows])
                    logits = ad.reshape(ad.add_bias(pooled @ model.head.w, model.head.b), (len(rows),))
                else:
                    batch = train_ds.batch(rows)
                    logits = model.forward(batch, train_ds.horizon, train=True, rng=noise_rng, decode=False,
                                           classify=True).logits
                loss = bce_with_logits(logits, train_labels[rows])
            backward(tape, loss)
            grads, _ = clip_gradients(_collect_grads(params), cfg.grad_clip_norm)
            adam_step(params, grads, state, lr, cfg.weight_decay)
            for p in params.values():
                p.grad = None
            losses.append(loss.item() * len(rows))
        if frozen_val is not None:
            scores = (frozen_val @ model.head.w.data + model.head.b.data).reshape(-1)
        else:
            scores = predict_scores(model, val_ds, cfg, threads)
        val = compute_auroc(scores, val_labels)
        seconds = time.perf_counter() - t_start if cfg.record_timing else None
        history.append(_epoch_record(epoch, "classify_finetune", float(np.sum(losses) / len(train_ds)), val, lr,
                                     seconds))
        if log:
            log(history[-1])
        if val > best:
            best, best_epoch, best_state = val, epoch, model.state_dict()
        elif epoch - best_epoch >= cfg.early_stop_patience:
            break
    model.load_state_dict(best_state)
    _set_trainable(model, set())
    return TrainResult(history, best_epoch, float(best))


# ---------------------------------------------------------------- evaluation

def evaluate_graph_forecast(predicted: np.ndarray, truth_adjacency: np.ndarray, truth_features: np.ndarray,
                            tau: int = 3) -> tuple[float, float]:
    """Mean GJI and mean row cosine over (B, K, N, d) predictions.

    Predicted attributes -> correlation_adjacency -> top-tau edges, scored
    against the top-tau edges of the true adjacency.
    """
    scores = []
    for p_seq, a_seq in zip(predicted, truth_adjacency):
        for p, a in zip(p_seq, a_seq):
            pred_edges = binarize_adjacency(correlation_adjacency(p, tau).adjacency, tau)
            scores.append(global_jaccard(binarize_adjacency(a, tau), pred_edges))
    cos = cosine_rows(predicted, truth_features)
    return float(np.mean(scores)), (float(np.mean(cos)) if cos.size else float("nan"))


def persistence_gji(ds: WindowDataset, tau: int = 3) -> float:
    """GJI of repeating the last observed graph for every future step."""
    batch = ds.all()
    scores = []
    for obs, fut in zip(batch.adjacency, batch.future_adjacency):
        last = binarize_adjacency(obs[-1], tau)
        scores.extend(global_jaccard(binarize_adjacency(a, tau), last) for a in fut)
    return float(np.mean(scores))


def forecast_predictions(model: Model, ds: WindowDataset, cfg: TrainConfig, threads: int = 1) -> np.ndarray:
    def one(k):
        batch = ds.batch(range(k, min(k + cfg.eval_batch_size, len(ds))))
        return model.forward(batch, ds.horizon, train=False, rng=_stream(cfg.seed, 30_000 + k)).predicted.data

    return np.concatenate(_map(one, list(range(0, len(ds), cfg.eval_batch_size)), threads), axis=0)


def benchmark_inference(model: Model, batch, horizon: int, repeats: int = 5) -> tuple[float, int]:
    """Median wall time over ``repeats`` timed forwards (after one warm-up) and
    the trajectory NFE."""
    rng = np.random.default_rng(0)
    model.forward(batch, horizon, rng=rng)
    times, nfe = [], 0
    for _ in range(max(repeats, 5)):
        t0 = time.perf_counter()
        out = model.forward(batch, horizon, rng=rng)
        times.append(time.perf_counter() - t0)
        nfe = out.trajectory.nfe
    return float(np.median(times)), nfe


def evaluate(model: Model, ds: WindowDataset, cfg: TrainConfig, threshold_policy="optimal",
             threads: int = 1, with_graphs: bool = True) -> MetricsReport:
    labels = ds.labels
    scores = predict_scores(model, ds, cfg, threads)
    auroc = compute_auroc(scores, labels)
    f1, acc, rec = compute_f1_acc_recall(scores, labels, threshold_policy)
    gji = cos = None
    if with_graphs:
        pred = forecast_predictions(model, ds, cfg, threads)
        batch = ds.all()
        gji, cos = evaluate_graph_forecast(pred, batch.future_adjacency, batch.future, cfg.tau)
    n_batches = -(-len(ds) // cfg.eval_batch_size)
    nfe = 4 * ds.horizon * cfg.substeps_per_unit * n_batches
    wall = None
    if cfg.record_timing:
        wall, _ = benchmark_inference(model, ds.batch(range(min(len(ds), cfg.eval_batch_size))), ds.horizon)
    return MetricsReport(auroc, f1, acc, rec, gji, cos, nfe, wall)


def write_history(history: list[dict], path: str | Path, append: bool = False) -> None:
    with open(path, "a" if append else "w") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


# ---------------------------------------------------------------- baseline

BANDS = {"delta": (1.0, 4.0), "theta": (4.0, 8.0), "alpha": (8.0, 13.0), "beta": (13.0, 30.0),
         "gamma": (30.0, 45.0)}


def band_power_features(ds: WindowDataset, sample_rate: float, fft_size: int) -> np.ndarray:
    """log mean power per standard band, averaged over channels and the
    observed epochs of each sample; shape (n_samples, 5)."""
    freqs = np.arange(fft_size // 2 + 1) * sample_rate / fft_size
    power = np.exp(2.0 * ds.all().features)  # (B, T, N, d)
    cols = []
    for low, high in BANDS.values():
        sel = (freqs >= low) & (freqs < high)
        cols.append(np.log(power[..., sel].mean(axis=(1, 2, 3))))
    return np.stack(cols, axis=1)


def band_power_baseline(train_ds: WindowDataset, test_ds: WindowDataset, sample_rate: float,
                        fft_size: int) -> float:
    """Test AUROC of logistic regression on standardized band powers."""
    from sklearn.linear_model import LogisticRegression
    from sklearn.pipeline import make_pipeline
    from sklearn.preprocessing import StandardScaler

    x_tr = band_power_features(train_ds, sample_rate, fft_size)
    x_te = band_power_features(test_ds, sample_rate, fft_size)
    clf = make_pipeline(StandardScaler(), LogisticRegression(max_iter=1000)).fit(x_tr, train_ds.labels)
    return compute_auroc(clf.decision_function(x_te), test_ds.labels)
