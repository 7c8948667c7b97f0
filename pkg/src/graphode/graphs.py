"""Sparse correlation graphs over spectral node features, and edge-set scoring."""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

EdgeSet = frozenset  # of (i, j) with i < j


def edge_set(pairs: Iterable[tuple[int, int]]) -> frozenset[tuple[int, int]]:
    out = set()
    for i, j in pairs:
        if i == j:
            raise ValueError(f"self-loop ({i}, {j}) not allowed in an edge set")
        out.add((min(i, j), max(i, j)))
    return frozenset(out)


@dataclass
class EpochGraph:
    node_features: np.ndarray  # (N, d)
    adjacency: np.ndarray  # (N, N), symmetric, zero diagonal, weights in [0, 1]
    tau: int
    max_row_nnz_presym: int = 0

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]

    def to_json(self) -> dict:
        rows, cols = np.nonzero(self.adjacency)
        return {
            "n": int(self.n),
            "d": int(self.node_features.shape[1]),
            "tau": int(self.tau),
            "features": self.node_features.reshape(-1).tolist(),
            "adjacency": [[int(i), int(j), float(self.adjacency[i, j])] for i, j in zip(rows, cols)],
            "max_row_nnz_presym": int(self.max_row_nnz_presym),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "EpochGraph":
        n, d = obj["n"], obj["d"]
        feats = np.asarray(obj["features"], dtype=np.float64).reshape(n, d)
        adj = np.zeros((n, n))
        for i, j, w in obj["adjacency"]:
            adj[int(i), int(j)] = w
        return cls(feats, adj, int(obj["tau"]), int(obj.get("max_row_nnz_presym", 0)))


def pearson_similarity(features: np.ndarray) -> np.ndarray:
    """|Pearson| between rows, clamped to [0, 1]; zero-variance rows give 0."""
    x = np.asarray(features, dtype=np.float64)
    centered = x - x.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(centered, axis=1)
    scale = np.maximum(1.0, np.linalg.norm(x, axis=1))
    live = norms > 1e-10 * scale
    unit = np.zeros_like(centered)
    unit[live] = centered[live] / norms[live, None]
    sim = np.clip(np.abs(unit @ unit.T), 0.0, 1.0)
    np.fill_diagonal(sim, 0.0)
    return sim


def top_tau_mask(weights: np.ndarray, tau: int) -> np.ndarray:
    """Boolean mask of the ``tau`` largest positive off-diagonal entries per row.

    Ties go to the lower column index.
    """
    w = np.array(weights, dtype=np.float64)
    n = w.shape[0]
    np.fill_diagonal(w, -np.inf)
    order = np.argsort(-w, axis=1, kind="stable")[:, :tau]
    mask = np.zeros((n, n), dtype=bool)
    np.put_along_axis(mask, order, True, axis=1)
    return mask & (w > 0)


def correlation_adjacency(features: np.ndarray, tau: int = 3) -> EpochGraph:
    """Top-``tau`` |Pearson| graph over node rows, max-symmetrized.

    Row sparsity <= tau holds before symmetrization. Afterwards an edge
    survives if either end kept it, so a hub that every other node picks
    ends up with N-1 entries.
    """
    x = np.asarray(features, dtype=np.float64)
    n = x.shape[0]
    if n < 2:
        raise ValueError("correlation_adjacency needs at least 2 nodes")
    if not 1 <= tau <= n - 1:
        raise ValueError(f"tau must be in [1, {n - 1}], got {tau}")
    if not np.all(np.isfinite(x)):
        raise ValueError("node features contain non-finite entries")
    sim = pearson_similarity(x)
    mask = top_tau_mask(sim, tau)
    directed = np.where(mask, sim, 0.0)
    adjacency = np.maximum(directed, directed.T)
    return EpochGraph(x, adjacency, tau, int(np.count_nonzero(directed, axis=1).max()))


def binarize_adjacency(adjacency: np.ndarray, tau: int = 3,
                       threshold: float | None = None) -> frozenset[tuple[int, int]]:
    """Undirected support of the per-row top-``tau`` positive weights.

    With ``threshold`` set, every off-diagonal weight >= threshold is kept
    instead of the top-``tau`` rule.
    """
    a = np.asarray(adjacency, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"adjacency must be square, got {a.shape}")
    if threshold is None:
        mask = top_tau_mask(a, tau)
    else:
        mask = a >= threshold
        np.fill_diagonal(mask, False)
    rows, cols = np.nonzero(mask)
    return edge_set(zip(rows.tolist(), cols.tolist()))


def global_jaccard(true_edges: Iterable, pred_edges: Iterable) -> float:
    t, p = set(true_edges), set(pred_edges)
    union = t | p
    if not union:
        return 1.0
    return len(t & p) / len(union)


@dataclass
class SpectralGraphSequence:
    features: np.ndarray  # (T, N, d)
    adjacency: np.ndarray  # (T, N, N)
    tau: int
    labels: np.ndarray  # (T,)
    presym_row_nnz: np.ndarray | None = None  # (T,) max row count before symmetrization

    def __len__(self) -> int:
        return self.features.shape[0]

    def __getitem__(self, t: int) -> EpochGraph:
        nnz = 0 if self.presym_row_nnz is None else int(self.presym_row_nnz[t])
        return EpochGraph(self.features[t], self.adjacency[t], self.tau, nnz)

    @property
    def max_row_nnz_presym(self) -> int:
        return 0 if self.presym_row_nnz is None else int(np.max(self.presym_row_nnz, initial=0))

    @property
    def graphs(self) -> list[EpochGraph]:
        return [self[t] for t in range(len(self))]

    def to_json(self, **meta) -> dict:
        graphs = [self[t].to_json() for t in range(len(self))]
        return {"tau": int(self.tau), "labels": [int(v) for v in self.labels],
                "max_row_nnz_presym": int(self.max_row_nnz_presym),
                "row_sparsity_ok": bool(self.max_row_nnz_presym <= self.tau),
                "graphs": graphs, **meta}

    @classmethod
    def from_json(cls, obj: dict) -> "SpectralGraphSequence":
        graphs = [EpochGraph.from_json(g) for g in obj["graphs"]]
        return cls(np.stack([g.node_features for g in graphs]), np.stack([g.adjacency for g in graphs]),
                   int(obj["tau"]), np.asarray(obj["labels"], dtype=np.int64),
                   np.array([g.max_row_nnz_presym for g in graphs], dtype=np.int64))

    def save(self, path: str | Path, **meta) -> None:
        Path(path).write_text(json.dumps(self.to_json(**meta)))

    @classmethod
    def load(cls, path: str | Path) -> "SpectralGraphSequence":
        return cls.from_json(json.loads(Path(path).read_text()))


def build_graph_sequence(features: np.ndarray, labels: np.ndarray, tau: int = 3,
                         threads: int = 1) -> SpectralGraphSequence:
    """Per-epoch ``correlation_adjacency`` over a (T, N, d) feature stack."""
    feats = np.asarray(features, dtype=np.float64)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            graphs = list(pool.map(lambda f: correlation_adjacency(f, tau), feats))
    else:
        graphs = [correlation_adjacency(f, tau) for f in feats]
    adj = np.stack([g.adjacency for g in graphs])
    nnz = np.array([g.max_row_nnz_presym for g in graphs], dtype=np.int64)
    return SpectralGraphSequence(feats, adj, tau, np.asarray(labels, dtype=np.int64), nnz)
