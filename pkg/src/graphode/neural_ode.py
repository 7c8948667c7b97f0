"""Gated residual vector field with adaptive decay, and fixed-step RK4."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import init_uniform, zeros

GATE_MODES = ("learned", "off", "random")


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class VectorFieldParams:
    w1: Tensor  # residual block, (D, H_res)
    b1: Tensor
    w2: Tensor  # (H_res, D)
    b2: Tensor
    w_g: Tensor  # gate, (D, D)
    b_g: Tensor
    w_s: Tensor  # decay head, (c, k)
    b_s: Tensor
    w_a: Tensor  # (k, 1), or (k, D) for per-coordinate decay
    b_a: Tensor

    @property
    def dim(self) -> int:
        return self.w_g.shape[0]

    @property
    def c(self) -> int:
        return self.w_s.shape[0]

    @classmethod
    def init(cls, dim: int, c: int, rng: np.random.Generator, decay_hidden: int = 32,
             residual_hidden: int | None = None, per_coordinate_decay: bool = False) -> "VectorFieldParams":
        hr = residual_hidden or dim
        out = dim if per_coordinate_decay else 1
        return cls(init_uniform(rng, (dim, hr), dim), zeros((hr,)), init_uniform(rng, (hr, dim), hr), zeros((dim,)),
                   init_uniform(rng, (dim, dim), dim), zeros((dim,)),
                   init_uniform(rng, (c, decay_hidden), c), zeros((decay_hidden,)),
                   init_uniform(rng, (decay_hidden, out), decay_hidden), zeros((out,)))

    @classmethod
    def zeros(cls, dim: int, c: int, decay_hidden: int = 32, residual_hidden: int | None = None,
              per_coordinate_decay: bool = False) -> "VectorFieldParams":
        hr = residual_hidden or dim
        out = dim if per_coordinate_decay else 1
        return cls(zeros((dim, hr)), zeros((hr,)), zeros((hr, dim)), zeros((dim,)), zeros((dim, dim)), zeros((dim,)),
                   zeros((c, decay_hidden)), zeros((decay_hidden,)), zeros((decay_hidden, out)), zeros((out,)))

    def named(self, prefix: str = "ode") -> dict[str, Tensor]:
        return {f"{prefix}.res.w1": self.w1, f"{prefix}.res.b1": self.b1, f"{prefix}.res.w2": self.w2,
                f"{prefix}.res.b2": self.b2, f"{prefix}.gate.w": self.w_g, f"{prefix}.gate.b": self.b_g,
                f"{prefix}.decay.w_s": self.w_s, f"{prefix}.decay.b_s": self.b_s,
                f"{prefix}.decay.w_a": self.w_a, f"{prefix}.decay.b_a": self.b_a}


def _check(term: str, t: Tensor) -> None:
    if not np.all(np.isfinite(t.data)):
        raise NonFiniteError(f"neural_ode.vector_field: non-finite values in the {term} term")


def gate(z: Tensor, params: VectorFieldParams) -> Tensor:
    """sigmoid(W_g z + b_g), entries in (0, 1)."""
    return ad.sigmoid(ad.add_bias(z @ params.w_g, params.b_g))


def residual(z: Tensor, params: VectorFieldParams) -> Tensor:
    """h(z) = z + W2 tanh(W1 z + b1) + b2."""
    return z + ad.add_bias(ad.tanh(ad.add_bias(z @ params.w1, params.b1)) @ params.w2, params.b2)


def decay_coefficient(z_s: Tensor, params: VectorFieldParams) -> Tensor:
    """softplus(W_a tanh(W_s z_s + b_s) + b_a) > 0; shape (B, 1) or (B, D)."""
    return ad.softplus(ad.add_bias(ad.tanh(ad.add_bias(z_s @ params.w_s, params.b_s)) @ params.w_a, params.b_a))


@dataclass
class FieldOptions:
    gate_mode: str = "learned"
    freeze_stochastic_block: bool = True

    def __post_init__(self):
        if self.gate_mode not in GATE_MODES:
            raise ValueError(f"gate_mode must be one of {GATE_MODES}, got {self.gate_mode!r}")


def bind_field(params: VectorFieldParams, z_s_init: Tensor, options: FieldOptions | None = None,
               rng: np.random.Generator | None = None) -> Callable[[Tensor], Tensor]:
    """Close the vector field over the initial stochastic block.

    The decay is evaluated once from ``z_s_init`` and held for the whole
    horizon. With ``gate_mode='random'`` the gate is replaced by uniform
    coefficients drawn once per call from ``rng``.
    """
    opts = options or FieldOptions()
    dim, c = params.dim, params.c
    if z_s_init.shape[-1] != c:
        raise ValueError(f"z_s_init has dim {z_s_init.shape[-1]}, expected {c}")
    batch = z_s_init.shape[0]
    lam = decay_coefficient(z_s_init, params)
    _check("decay", lam)
    if lam.shape[-1] == 1:
        lam = lam @ Tensor(np.ones((1, dim)))
    random_gate = None
    if opts.gate_mode == "random":
        if rng is None:
            raise ValueError("random gate mode needs an rng")
        random_gate = Tensor(rng.uniform(0.0, 1.0, size=(batch, dim)))
    mask = None
    if opts.freeze_stochastic_block:
        m = np.ones((batch, dim))
        m[:, :c] = 0.0
        mask = Tensor(m)

    def f(z: Tensor) -> Tensor:
        h = residual(z, params)
        _check("residual", h)
        if opts.gate_mode == "learned":
            g = gate(z, params)
            _check("gate", g)
            drive = (g + 1.0) * h
        elif opts.gate_mode == "random":
            drive = (random_gate + 1.0) * h
        else:
            drive = h
        out = drive - lam * z
        if mask is not None:
            out = out * mask
        return out

    return f


def vector_field(z: Tensor, z_s_init: Tensor, params: VectorFieldParams,
                 options: FieldOptions | None = None, rng: np.random.Generator | None = None) -> Tensor:
    """f(z) = (g(z) + 1) * h(z) - lambda(z_s_init) * z."""
    return bind_field(params, z_s_init, options, rng)(z)


# ---------------------------------------------------------------- integration

def rk4_step(field_fn: Callable[[Tensor], Tensor], z: Tensor, t: float, dt: float) -> Tensor:
    """One classical RK4 step. ``t`` is nominal: the field is autonomous."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    k1 = field_fn(z)
    _stage_check(1, k1)
    k2 = field_fn(z + k1 * (dt / 2))
    _stage_check(2, k2)
    k3 = field_fn(z + k2 * (dt / 2))
    _stage_check(3, k3)
    k4 = field_fn(z + k3 * dt)
    _stage_check(4, k4)
    return z + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6)


def _stage_check(stage: int, k) -> None:
    data = k.data if isinstance(k, Tensor) else np.asarray(k)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"neural_ode.rk4_step: non-finite stage k{stage}")


@dataclass
class Trajectory:
    states: list  # K latent states, each (B, D)
    times: list[float]
    nfe: int
    substeps: int
    steps: int = 0

    def stacked(self) -> Tensor:
        """(B, K, D) view of the states."""
        return ad.stack(self.states, axis=1)


def solve_trajectory(field_fn: Callable[[Tensor], Tensor], z0: Tensor, horizon: int,
                     substeps_per_unit: int = 4, t0: float = 0.0) -> Trajectory:
    """Integrate over ``horizon`` unit intervals, recording the state at each
    integer time t0+1..t0+K."""
    if horizon < 1 or substeps_per_unit < 1:
        raise ValueError("horizon and substeps_per_unit must be >= 1")
    calls = [0]

    def counted(z):
        calls[0] += 1
        return field_fn(z)

    dt = 1.0 / substeps_per_unit
    z, states, times, steps = z0, [], [], 0
    for interval in range(horizon):
        try:
            for s in range(substeps_per_unit):
                z = rk4_step(counted, z, t0 + interval + s * dt, dt)
                steps += 1
        except NonFiniteError as err:
            raise NonFiniteError(f"{err} (interval {interval})") from err
        states.append(z)
        times.append(t0 + interval + 1.0)
    return Trajectory(states, times, calls[0], substeps_per_unit, steps)


# ---------------------------------------------------------------- field export

@dataclass
class GridSpec:
    resolution: int = 20
    bounds: tuple[float, float, float, float] | None = None  # xmin, xmax, ymin, ymax
    padding: float = 0.1


@dataclass
class FieldGrid:
    rows: np.ndarray  # (G, 4): x, y, dx, dy
    mean: np.ndarray
    basis: np.ndarray  # (2, D)
    bounds: tuple[float, float, float, float] = field(default=(0.0, 0.0, 0.0, 0.0))

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "y", "dx", "dy"])
            for row in self.rows:
                w.writerow([f"{v:.9g}" for v in row])

    def to_json(self) -> dict:
        return {"columns": ["x", "y", "dx", "dy"], "rows": self.rows.tolist(), "mean": self.mean.tolist(),
                "basis": self.basis.tolist(), "bounds": list(self.bounds)}


def principal_plane(references: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and top-2 principal directions (rows), sign fixed so the largest
    component of each direction is positive."""
    ref = np.asarray(references, dtype=np.float64)
    if ref.ndim != 2 or ref.shape[0] < 3:
        raise ValueError("field export needs at least 3 reference states")
    if ref.shape[1] < 2:
        raise ValueError("field export needs latent dimension >= 2")
    mean = ref.mean(axis=0)
    _, sv, vt = np.linalg.svd(ref - mean, full_matrices=False)
    basis = vt[:2].copy()
    for k in range(2):
        if k >= len(sv) or sv[k] <= 1e-12 * max(sv[0], 1.0):
            # no spread along this direction: fall back to the k-th unit axis
            basis[k] = np.eye(ref.shape[1])[k]
    for k in range(2):
        if basis[k, np.argmax(np.abs(basis[k]))] < 0:
            basis[k] = -basis[k]
    return mean, basis


def export_field_grid(field_np: Callable[[np.ndarray], np.ndarray], references: np.ndarray,
                      grid: GridSpec | None = None) -> FieldGrid:
    """Evaluate the field on a 2-D grid in the references' principal plane.

    Grid coordinates are offsets from the reference mean along the two
    principal directions; arrows are the field projected onto that plane.
    """
    grid = grid or GridSpec()
    mean, basis = principal_plane(references)
    proj = (np.asarray(references) - mean) @ basis.T
    if grid.bounds is None:
        lo, hi = proj.min(axis=0), proj.max(axis=0)
        pad = grid.padding * np.maximum(hi - lo, 1e-9)
        bounds = (lo[0] - pad[0], hi[0] + pad[0], lo[1] - pad[1], hi[1] + pad[1])
    else:
        bounds = tuple(float(b) for b in grid.bounds)
    xs = np.linspace(bounds[0], bounds[1], grid.resolution)
    ys = np.linspace(bounds[2], bounds[3], grid.resolution)
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    coords = np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1)
    lifted = mean + coords @ basis
    deriv = np.asarray(field_np(lifted), dtype=np.float64)
    arrows = deriv @ basis.T
    return FieldGrid(np.concatenate([coords, arrows], axis=1), mean, basis, bounds)


def save_field_json(grid: FieldGrid, path: str | Path) -> None:
    Path(path).write_text(json.dumps(grid.to_json()))
