"""Decoding latent trajectories to node attributes, forecast loss, and the
pooled-trajectory classification head."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import init_uniform, zeros
from .graphs import binarize_adjacency, correlation_adjacency

POOLING_MODES = ("max", "mean", "sum")


@dataclass
class DecoderParams:
    w1: Tensor  # (D, hidden)
    b1: Tensor
    w2: Tensor  # (hidden, N*d)
    b2: Tensor
    n_nodes: int
    n_bins: int

    @classmethod
    def init(cls, dim: int, hidden: int, n_nodes: int, n_bins: int, rng: np.random.Generator) -> "DecoderParams":
        out = n_nodes * n_bins
        return cls(init_uniform(rng, (dim, hidden), dim), zeros((hidden,)),
                   init_uniform(rng, (hidden, out), hidden), zeros((out,)), n_nodes, n_bins)

    @classmethod
    def zeros(cls, dim: int, hidden: int, n_nodes: int, n_bins: int) -> "DecoderParams":
        out = n_nodes * n_bins
        return cls(zeros((dim, hidden)), zeros((hidden,)), zeros((hidden, out)), zeros((out,)), n_nodes, n_bins)

    def named(self) -> dict[str, Tensor]:
        return {"omega.w1": self.w1, "omega.b1": self.b1, "omega.w2": self.w2, "omega.b2": self.b2}


def decode_step(z: Tensor, params: DecoderParams) -> Tensor:
    """(B, D) latent -> (B, N, d) node attributes via affine-relu-affine."""
    hidden = ad.relu(ad.add_bias(z @ params.w1, params.b1))
    flat = ad.add_bias(hidden @ params.w2, params.b2)
    return ad.reshape(flat, (z.shape[0], params.n_nodes, params.n_bins))


def decode_trajectory(states: list[Tensor], params: DecoderParams) -> Tensor:
    """K states of (B, D) -> (B, K, N, d)."""
    return ad.stack([decode_step(z, params) for z in states], axis=1)


def _centered_unit_rows(x: Tensor) -> Tensor:
    """Rows centered and scaled to unit norm; zero-variance rows map to 0."""
    xd = x.data
    c = xd - xd.mean(axis=-1, keepdims=True)
    n = np.linalg.norm(c, axis=-1, keepdims=True)
    live = n > 1e-12
    safe = np.where(live, n, 1.0)
    u = np.where(live, c / safe, 0.0)

    def back(g):
        dc = np.where(live, (g - u * np.sum(g * u, axis=-1, keepdims=True)) / safe, 0.0)
        return (dc - dc.mean(axis=-1, keepdims=True),)

    return ad.apply_op(u, (x,), back)


def pearson_matrix(x: Tensor) -> Tensor:
    """(..., N, d) -> (..., N, N) signed Pearson correlation between rows."""
    u = _centered_unit_rows(x)
    ut = ad.apply_op(np.swapaxes(u.data, -1, -2).copy(), (u,), lambda g: (np.swapaxes(g, -1, -2).copy(),))
    return ad.matmul(u, ut)


def forecast_loss(predicted: Tensor, truth: np.ndarray, structure_weight: float = 0.0) -> Tensor:
    """Mean over batch and steps of the Frobenius norm of the node-attribute error.

    ``predicted`` and ``truth`` are (B, K, N, d) (or (K, N, d)). With
    ``structure_weight`` > 0 the mean Frobenius distance between predicted
    and true row-correlation matrices is added with that weight.
    """
    truth = np.asarray(truth, dtype=np.float64)
    if predicted.shape != truth.shape:
        raise ValueError(f"forecaster.forecast_loss: horizon/shape mismatch {predicted.shape} vs {truth.shape}")
    lead = int(np.prod(predicted.shape[:-2]))
    n, d = predicted.shape[-2:]
    diff = ad.reshape(predicted - Tensor(truth), (lead, n * d))
    loss = ad.mean(ad.l2_norm(diff, axis=-1))
    if structure_weight > 0:
        c_pred = pearson_matrix(ad.reshape(predicted, (lead, n, d)))
        c_true = pearson_matrix(Tensor(truth.reshape(lead, n, d)))
        gap = ad.reshape(c_pred - c_true, (lead, n * n))
        loss = loss + ad.mean(ad.l2_norm(gap, axis=-1)) * structure_weight
    return loss


def pool_trajectory(states: Tensor, mode: str = "max") -> Tensor:
    """(B, K, D) -> (B, D) by coordinatewise max, mean or sum over K."""
    if states.shape[1] == 0:
        raise ValueError("cannot pool an empty trajectory")
    if mode == "max":
        return ad.max_reduce(states, axis=1)
    if mode == "mean":
        return ad.mean(states, axis=1)
    if mode == "sum":
        return ad.sum(states, axis=1)
    raise ValueError(f"pooling mode must be one of {POOLING_MODES}, got {mode!r}")


@dataclass
class ClassifierParams:
    w: Tensor  # (D, 1)
    b: Tensor  # (1,)
    pooling: str = "max"

    @classmethod
    def zeros(cls, dim: int, pooling: str = "max") -> "ClassifierParams":
        return cls(zeros((dim, 1)), zeros((1,)), pooling)

    def named(self) -> dict[str, Tensor]:
        return {"head.w": self.w, "head.b": self.b}


def classifier_logit(pooled: Tensor, params: ClassifierParams) -> Tensor:
    return ad.reshape(ad.add_bias(pooled @ params.w, params.b), (pooled.shape[0],))


def classify(pooled: Tensor, params: ClassifierParams) -> Tensor:
    """Probability sigmoid(w . pooled + b) per row."""
    return ad.sigmoid(classifier_logit(pooled, params))


def bce_with_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean binary cross-entropy; softplus(x) - y*x is the stable form."""
    y = Tensor(np.asarray(labels, dtype=np.float64).reshape(logits.shape))
    return ad.mean(ad.softplus(logits) - logits * y)


@dataclass
class ForecastResult:
    predicted: np.ndarray  # (K, N, d)
    adjacency: list[np.ndarray]
    step_losses: list[float]
    tau: int = 3

    @classmethod
    def build(cls, predicted: np.ndarray, truth: np.ndarray | None = None, tau: int = 3) -> "ForecastResult":
        adj = [correlation_adjacency(p, tau).adjacency for p in predicted]
        losses = []
        if truth is not None:
            losses = [float(np.linalg.norm(p - t)) for p, t in zip(predicted, truth)]
        return cls(np.asarray(predicted), adj, losses, tau)

    def to_json(self) -> dict:
        steps = []
        for k, p in enumerate(self.predicted):
            edges = sorted(binarize_adjacency(self.adjacency[k], self.tau))
            step = {"step": k + 1, "node_attributes": p.tolist(), "edges": [list(e) for e in edges]}
            if self.step_losses:
                step["loss"] = self.step_losses[k]
            steps.append(step)
        return {"horizon": len(self.predicted), "tau": self.tau, "steps": steps}

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))
