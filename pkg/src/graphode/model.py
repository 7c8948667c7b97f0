"""The assembled forecaster: encoders -> gated ODE -> decoder, plus the head."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig, TrainConfig
from .data import Batch
from .encoders import (GraphEncoderParams, TemporalEncoderParams, build_initial_state, encode_graph,
                       encode_temporal_stochastic)
from .forecaster import ClassifierParams, DecoderParams, classifier_logit, decode_trajectory, pool_trajectory
from .neural_ode import FieldOptions, Trajectory, VectorFieldParams, bind_field, solve_trajectory


@dataclass
class Forward:
    z0: Tensor
    trajectory: Trajectory
    predicted: Tensor | None = None
    logits: Tensor | None = None


class Model:
    def __init__(self, n_nodes: int, n_bins: int, cfg: ModelConfig, train: TrainConfig, seed: int | None = None):
        self.cfg = cfg
        self.train_cfg = train
        self.n_nodes, self.n_bins = n_nodes, n_bins
        self.c = cfg.latent_stochastic_dim
        self.m = cfg.latent_graph_dim
        self.dim = self.c + self.m
        rng = np.random.default_rng(train.seed if seed is None else seed)
        self.phi = GraphEncoderParams.init(n_bins, cfg.gru_hidden, cfg.gru_layers, self.m, rng, cfg.gnn_rounds)
        self.psi = TemporalEncoderParams.init(cfg.psi_channels, self.c, rng, train.sigma_noise)
        self.field = VectorFieldParams.init(self.dim, self.c, rng, cfg.decay_hidden, cfg.residual_hidden or None,
                                            cfg.per_coordinate_decay)
        self.decoder = DecoderParams.init(self.dim, cfg.decoder_hidden, n_nodes, n_bins, rng)
        self.head = ClassifierParams.zeros(self.dim, train.pooling)
        self.feature_mean = np.zeros(n_bins)
        self.feature_std = np.ones(n_bins)
        self.pool_mean = np.zeros(self.dim)
        self.pool_std = np.ones(self.dim)
        self.options = FieldOptions(train.gate_mode, train.freeze_stochastic_block)

    # ------------------------------------------------------------ parameters

    def trunk_parameters(self) -> dict[str, Tensor]:
        out = dict(self.phi.named())
        if self.train_cfg.stochastic_enabled:
            out.update(self.psi.named())
        out.update(self.field.named())
        if self.options.gate_mode != "learned":
            out.pop("ode.gate.w")
            out.pop("ode.gate.b")
        out.update(self.decoder.named())
        return out

    def parameters(self) -> dict[str, Tensor]:
        out = self.trunk_parameters()
        out.update(self.head.named())
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = dict(self.psi.buffers())
        out["norm.mean"] = self.feature_mean
        out["norm.std"] = self.feature_std
        out["pool.mean"] = self.pool_mean
        out["pool.std"] = self.pool_std
        return out

    def all_tensors(self) -> dict[str, Tensor]:
        """Every stored array by name, including frozen ones, for checkpoints."""
        out = dict(self.phi.named())
        out.update(self.psi.named())
        out.update(self.field.named())
        out.update(self.decoder.named())
        out.update(self.head.named())
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {k: t.data.copy() for k, t in self.all_tensors().items()}
        out.update({k: v.copy() for k, v in self.buffers().items()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        tensors = self.all_tensors()
        buffers = self.buffers()
        missing = (set(tensors) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"state is missing {sorted(missing)[:5]}")
        for k, t in tensors.items():
            if t.shape != state[k].shape:
                raise ValueError(f"{k}: shape {state[k].shape} does not match model {t.shape}")
            t.data[...] = state[k]
        for k, b in buffers.items():
            b[...] = state[k]

    def fit_normalization(self, features: np.ndarray, future: np.ndarray | None = None) -> None:
        """Per-bin input standardization; optionally start the decoder's output
        bias at the mean target so training begins from the mean forecast."""
        flat = features.reshape(-1, self.n_bins)
        self.feature_mean[:] = flat.mean(axis=0)
        sd = flat.std(axis=0)
        self.feature_std[:] = np.where(sd > 1e-8, sd, 1.0)
        if future is not None:
            self.decoder.b2.data[:] = future.reshape(-1, self.n_nodes * self.n_bins).mean(axis=0)

    def fit_pool_normalization(self, pooled: np.ndarray) -> None:
        """Fixed standardization of pooled trajectories ahead of the head, so
        that the first head updates follow each coordinate's class covariance
        instead of its common offset."""
        self.pool_mean[:] = pooled.mean(axis=0)
        sd = pooled.std(axis=0)
        self.pool_std[:] = np.where(sd > 1e-8, sd, 1.0)

    def normalize_pooled(self, pooled: np.ndarray) -> np.ndarray:
        return (pooled - self.pool_mean) / self.pool_std

    def head_logits(self, pooled: Tensor) -> Tensor:
        x = ad.add_bias(pooled, Tensor(-self.pool_mean))
        return classifier_logit(x @ Tensor(np.diag(1.0 / self.pool_std)), self.head)

    # ------------------------------------------------------------ forward

    def encode(self, batch: Batch, train: bool = False, rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
        feats = (batch.features - self.feature_mean) / self.feature_std
        z_g = encode_graph(feats, batch.adjacency, self.phi)
        if self.train_cfg.stochastic_enabled:
            z_s = encode_temporal_stochastic(batch.series, self.psi, train=train, rng=rng)
        else:
            z_s = Tensor(np.zeros((len(batch), self.c)))
        return build_initial_state(z_s, z_g, self.c, self.m), z_s

    def solve(self, z0: Tensor, z_s: Tensor, horizon: int, rng: np.random.Generator | None = None) -> Trajectory:
        field_fn = bind_field(self.field, z_s, self.options, rng)
        return solve_trajectory(field_fn, z0, horizon, self.train_cfg.substeps_per_unit)

    def forward(self, batch: Batch, horizon: int, train: bool = False, rng: np.random.Generator | None = None,
                decode: bool = True, classify: bool = False) -> Forward:
        z0, z_s = self.encode(batch, train, rng)
        traj = self.solve(z0, z_s, horizon, rng)
        out = Forward(z0, traj)
        if decode:
            out.predicted = decode_trajectory(traj.states, self.decoder)
        if classify:
            out.logits = self.head_logits(self.pooled(traj))
        return out

    def pooled(self, traj: Trajectory) -> Tensor:
        return pool_trajectory(traj.stacked(), self.head.pooling)

    def field_numpy(self, z: np.ndarray) -> np.ndarray:
        """Evaluate the bound field on raw latent points; the decay is
        conditioned on each point's own stochastic block."""
        z_t = Tensor(np.asarray(z, dtype=np.float64))
        rng = np.random.default_rng(self.train_cfg.seed)
        z_s = ad.slice_axis(z_t, -1, 0, self.c)
        return bind_field(self.field, z_s, self.options, rng)(z_t).data
