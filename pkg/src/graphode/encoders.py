"""Initial-state encoders: GRU graph descriptor and stochastic temporal descriptor."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def init_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


# ---------------------------------------------------------------- GRU

@dataclass
class GruCellParams:
    """Gate blocks are packed as [reset | update | candidate] along the output axis."""

    w_x: Tensor  # (input_dim, 3H)
    w_h: Tensor  # (H, 3H)
    b_x: Tensor  # (3H,)
    b_h: Tensor  # (3H,)

    @property
    def input_dim(self) -> int:
        return self.w_x.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.w_h.shape[0]

    @classmethod
    def init(cls, input_dim: int, hidden_dim: int, rng: np.random.Generator) -> "GruCellParams":
        h3 = 3 * hidden_dim
        return cls(init_uniform(rng, (input_dim, h3), hidden_dim), init_uniform(rng, (hidden_dim, h3), hidden_dim),
                   init_uniform(rng, (h3,), hidden_dim), init_uniform(rng, (h3,), hidden_dim))

    @classmethod
    def zeros(cls, input_dim: int, hidden_dim: int) -> "GruCellParams":
        h3 = 3 * hidden_dim
        return cls(zeros((input_dim, h3)), zeros((hidden_dim, h3)), zeros((h3,)), zeros((h3,)))

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w_x": self.w_x, f"{prefix}.w_h": self.w_h,
                f"{prefix}.b_x": self.b_x, f"{prefix}.b_h": self.b_h}


def gru_cell(x: Tensor, h: Tensor, p: GruCellParams) -> Tensor:
    hd = p.hidden_dim
    gx = ad.add_bias(x @ p.w_x, p.b_x)
    gh = ad.add_bias(h @ p.w_h, p.b_h)
    r = ad.sigmoid(ad.slice_axis(gx, -1, 0, hd) + ad.slice_axis(gh, -1, 0, hd))
    z = ad.sigmoid(ad.slice_axis(gx, -1, hd, 2 * hd) + ad.slice_axis(gh, -1, hd, 2 * hd))
    n = ad.tanh(ad.slice_axis(gx, -1, 2 * hd, 3 * hd) + r * ad.slice_axis(gh, -1, 2 * hd, 3 * hd))
    return n + z * (h - n)


def run_gru(seq: Tensor, layers: list[GruCellParams]) -> Tensor:
    """Stacked GRU over (B, T, input_dim) from a zero state; returns the top
    layer's final hidden state (B, H)."""
    if seq.shape[1] == 0:
        raise ValueError("GRU input sequence has length 0")
    if seq.shape[2] != layers[0].input_dim:
        raise ValueError(f"GRU input dim {seq.shape[2]} != parameter input dim {layers[0].input_dim}")
    batch = seq.shape[0]
    hs = [Tensor(np.zeros((batch, p.hidden_dim))) for p in layers]
    for t in range(seq.shape[1]):
        inp = ad.reshape(ad.slice_axis(seq, 1, t, t + 1), (batch, seq.shape[2]))
        for k, p in enumerate(layers):
            hs[k] = gru_cell(inp, hs[k], p)
            inp = hs[k]
    return hs[-1]


# ---------------------------------------------------------------- graph descriptor

@dataclass
class GnnRound:
    w_self: Tensor
    w_nbr: Tensor
    w_edge: Tensor
    bias: Tensor


@dataclass
class GraphEncoderParams:
    node_gru: list[GruCellParams]
    edge_gru: list[GruCellParams]
    rounds: list[GnnRound]
    w_out: Tensor  # (H, m)
    b_out: Tensor  # (m,)

    @classmethod
    def init(cls, n_bins: int, hidden: int, layers: int, m: int, rng: np.random.Generator,
             gnn_rounds: int = 1) -> "GraphEncoderParams":
        node = [GruCellParams.init(n_bins if k == 0 else hidden, hidden, rng) for k in range(layers)]
        edge = [GruCellParams.init(1 if k == 0 else hidden, hidden, rng) for k in range(layers)]
        rounds = [GnnRound(init_uniform(rng, (hidden, hidden), hidden), init_uniform(rng, (hidden, hidden), hidden),
                           init_uniform(rng, (hidden, hidden), hidden), zeros((hidden,)))
                  for _ in range(gnn_rounds)]
        return cls(node, edge, rounds, init_uniform(rng, (hidden, m), hidden), zeros((m,)))

    def named(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for k, p in enumerate(self.node_gru):
            out.update(p.named(f"phi.node_gru.{k}"))
        for k, p in enumerate(self.edge_gru):
            out.update(p.named(f"phi.edge_gru.{k}"))
        for k, r in enumerate(self.rounds):
            out.update({f"phi.gnn.{k}.w_self": r.w_self, f"phi.gnn.{k}.w_nbr": r.w_nbr,
                        f"phi.gnn.{k}.w_edge": r.w_edge, f"phi.gnn.{k}.bias": r.bias})
        out["phi.gnn.w_out"] = self.w_out
        out["phi.gnn.b_out"] = self.b_out
        return out


@dataclass
class EdgeIndex:
    """Ordered pairs (graph b, source i, target j) with a weight sequence each."""

    graph: np.ndarray
    src: np.ndarray
    dst: np.ndarray

    def __len__(self) -> int:
        return len(self.graph)


def edge_index_from_adjacency(adjacency: np.ndarray) -> EdgeIndex:
    """Pairs (i, j), i != j, whose weight is nonzero at any epoch.

    ``adjacency`` has shape (B, T, N, N).
    """
    present = np.any(adjacency != 0, axis=1)
    n = adjacency.shape[-1]
    present[:, np.arange(n), np.arange(n)] = False
    b, i, j = np.nonzero(present)
    return EdgeIndex(b, i, j)


def encode_node_sequences(features: np.ndarray | Tensor, layers: list[GruCellParams]) -> Tensor:
    """features (B, T, N, d) -> per-node final hidden states (B*N, H), node-major per graph."""
    x = features.data if isinstance(features, Tensor) else np.asarray(features, dtype=np.float64)
    if x.shape[1] == 0:
        raise ValueError("graph sequence has length 0")
    b, t, n, d = x.shape
    seq = Tensor(np.ascontiguousarray(x.transpose(0, 2, 1, 3)).reshape(b * n, t, d))
    return run_gru(seq, layers)


def encode_edge_sequences(adjacency: np.ndarray, layers: list[GruCellParams],
                          edges: EdgeIndex | None = None) -> tuple[Tensor | None, EdgeIndex]:
    """Shared GRU over each listed edge's weight sequence; (E, H) states.

    Edges absent at every epoch are skipped unless listed explicitly in ``edges``.
    """
    a = np.asarray(adjacency, dtype=np.float64)
    if a.shape[1] == 0:
        raise ValueError("graph sequence has length 0")
    if edges is None:
        edges = edge_index_from_adjacency(a)
    if len(edges) == 0:
        return None, edges
    seq = a[edges.graph, :, edges.src, edges.dst]  # (E, T)
    return run_gru(Tensor(seq[:, :, None]), layers), edges


def aggregate_graph(h_nodes: Tensor, h_edges: Tensor | None, edges: EdgeIndex,
                    last_adjacency: np.ndarray, params: GraphEncoderParams) -> Tensor:
    """Message passing on the last adjacency, mean over nodes, projection to m.

    msg_i = sum_j a_ij (W_nbr h_j + W_edge h_ij); h_i <- relu(W_self h_i + msg_i + b).
    """
    a_last = np.asarray(last_adjacency, dtype=np.float64)
    b, n, _ = a_last.shape
    hidden = h_nodes.shape[-1]
    if h_nodes.shape[0] != b * n:
        raise ValueError(f"node states {h_nodes.shape} do not match {b} graphs of {n} nodes")
    a_const = Tensor(a_last)
    edge_msg = None
    if h_edges is not None and len(edges):
        w = a_last[edges.graph, edges.src, edges.dst]
        target = edges.graph * n + edges.src
    h = h_nodes
    for rnd in params.rounds:
        if h.shape[-1] != rnd.w_self.shape[0]:
            raise ValueError(f"aggregation dims: state {h.shape[-1]} vs weight {rnd.w_self.shape[0]}")
        nbr = ad.reshape(ad.matmul(a_const, ad.reshape(h @ rnd.w_nbr, (b, n, hidden))), (b * n, hidden))
        total = h @ rnd.w_self + nbr
        if h_edges is not None and len(edges):
            weighted = ad.mul(h_edges @ rnd.w_edge, Tensor(np.repeat(w[:, None], hidden, axis=1)))
            edge_msg = ad.scatter_add_rows(weighted, target, b * n)
            total = total + edge_msg
        h = ad.relu(ad.add_bias(total, rnd.bias))
    pooled = ad.mean(ad.reshape(h, (b, n, hidden)), axis=1)
    return ad.add_bias(pooled @ params.w_out, params.b_out)


def encode_graph(features: np.ndarray, adjacency: np.ndarray, params: GraphEncoderParams) -> Tensor:
    """Full graph descriptor: (B, T, N, d) features + (B, T, N, N) adjacency -> (B, m)."""
    h_nodes = encode_node_sequences(features, params.node_gru)
    h_edges, edges = encode_edge_sequences(adjacency, params.edge_gru)
    return aggregate_graph(h_nodes, h_edges, edges, np.asarray(adjacency)[:, -1], params)


# ---------------------------------------------------------------- temporal descriptor

@dataclass
class ConvStage:
    weight: Tensor  # (2 * c_in, c_out): kernel taps stacked along the input axis; no bias (batch norm follows)
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray


@dataclass
class TemporalEncoderParams:
    stages: list[ConvStage]
    w_out: Tensor  # (C, c)
    b_out: Tensor  # (c,)
    noise_scale: float = 0.1
    momentum: float = 0.1

    @classmethod
    def init(cls, channels: int, c: int, rng: np.random.Generator, noise_scale: float = 0.1,
             n_stages: int = 3) -> "TemporalEncoderParams":
        stages = []
        c_in = 1
        for _ in range(n_stages):
            stages.append(ConvStage(init_uniform(rng, (2 * c_in, channels), 2 * c_in),
                                    Tensor(np.ones(channels), requires_grad=True), zeros((channels,)),
                                    np.zeros(channels), np.ones(channels)))
            c_in = channels
        return cls(stages, init_uniform(rng, (channels, c), channels), zeros((c,)), noise_scale)

    @property
    def min_length(self) -> int:
        length = 1
        for _ in self.stages:
            length = 2 * length + 1
        return length

    def named(self) -> dict[str, Tensor]:
        out = {}
        for k, s in enumerate(self.stages):
            out.update({f"psi.conv{k}.weight": s.weight,
                        f"psi.bn{k}.gamma": s.gamma, f"psi.bn{k}.beta": s.beta})
        out["psi.w_out"] = self.w_out
        out["psi.b_out"] = self.b_out
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for k, s in enumerate(self.stages):
            out[f"psi.bn{k}.running_mean"] = s.running_mean
            out[f"psi.bn{k}.running_var"] = s.running_var
        return out


def pool_channels(raw: np.ndarray) -> np.ndarray:
    """Mean over channels then per-window standardization: (..., N, S) -> (..., S)."""
    x = np.asarray(raw, dtype=np.float64).mean(axis=-2)
    mu = x.mean(axis=-1, keepdims=True)
    sd = x.std(axis=-1, keepdims=True)
    return (x - mu) / np.where(sd > 1e-12, sd, 1.0)


def encode_temporal_stochastic(series: np.ndarray, params: TemporalEncoderParams, train: bool = False,
                               rng: np.random.Generator | None = None) -> Tensor:
    """(B, S) channel-pooled windows -> z_s (B, c).

    Three stages of [kernel-2 conv, batch norm, relu, max-pool 2], a time
    average, and a linear projection. In training mode batch statistics
    are used (running averages updated) and Gaussian noise of
    ``params.noise_scale`` is added to the output.
    """
    x_np = np.asarray(series, dtype=np.float64)
    if x_np.ndim != 2:
        raise ValueError(f"expected (B, S) series, got {x_np.shape}")
    if x_np.shape[1] < params.min_length:
        raise ValueError(f"window of {x_np.shape[1]} samples is shorter than the receptive field {params.min_length}")
    x = Tensor(x_np[:, :, None])
    for st in params.stages:
        length = x.shape[1]
        taps = ad.concat([ad.slice_axis(x, 1, 0, length - 1), ad.slice_axis(x, 1, 1, length)], axis=-1)
        y = taps @ st.weight
        if train:
            y, mu, var = ad.batch_norm(y, st.gamma, st.beta, axes=(0, 1))
            count = y.shape[0] * y.shape[1]
            st.running_mean[:] = (1 - params.momentum) * st.running_mean + params.momentum * mu
            st.running_var[:] = ((1 - params.momentum) * st.running_var
                                 + params.momentum * var * count / max(count - 1, 1))
        else:
            y = ad.batch_norm(y, st.gamma, st.beta, axes=(0, 1), stats=(st.running_mean, st.running_var))
        y = ad.relu(y)
        half = y.shape[1] // 2
        y = ad.slice_axis(y, 1, 0, 2 * half)
        x = ad.max_reduce(ad.reshape(y, (y.shape[0], half, 2, y.shape[2])), axis=2)
    z_s = ad.add_bias(ad.mean(x, axis=1) @ params.w_out, params.b_out)
    if train and params.noise_scale > 0:
        if rng is None:
            raise ValueError("training-mode temporal encoding needs an rng for the noise draw")
        z_s = z_s + Tensor(params.noise_scale * rng.standard_normal(z_s.shape))
    return z_s


# ---------------------------------------------------------------- latent state

@dataclass
class LatentState:
    z_s: np.ndarray
    z_g: np.ndarray

    @property
    def z0(self) -> np.ndarray:
        return np.concatenate([self.z_s, self.z_g], axis=-1)

    @classmethod
    def split(cls, z0: np.ndarray, c: int) -> "LatentState":
        z0 = np.asarray(z0)
        return cls(z0[..., :c].copy(), z0[..., c:].copy())


def build_initial_state(z_s: Tensor, z_g: Tensor, c: int | None = None, m: int | None = None) -> Tensor:
    """z0 = [z_s, z_g] with the stochastic block leading."""
    if c is not None and z_s.shape[-1] != c:
        raise ValueError(f"z_s has dim {z_s.shape[-1]}, expected c={c}")
    if m is not None and z_g.shape[-1] != m:
        raise ValueError(f"z_g has dim {z_g.shape[-1]}, expected m={m}")
    if z_s.shape[:-1] != z_g.shape[:-1]:
        raise ValueError(f"batch shapes differ: {z_s.shape} vs {z_g.shape}")
    return ad.concat([z_s, z_g], axis=-1)
