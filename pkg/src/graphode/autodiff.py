"""Tape-based reverse-mode differentiation over dense float64 arrays.

Every primitive computes its forward value with numpy and, when a tape is
active and any input requires gradients, records a closure that maps the
output gradient to input gradients. ``backward`` replays the tape in reverse
and accumulates into ``Tensor.grad``.

    with Tape() as tape:
        loss = ad.sum(ad.tanh(x @ w))
    backward(tape, loss)
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor", "Tape", "backward", "gradcheck", "GradcheckReport", "apply_op",
    "matmul", "add", "sub", "neg", "mul", "scale", "shift", "add_bias",
    "sigmoid", "tanh", "softplus", "relu", "concat", "stack", "slice_axis",
    "reshape", "sum", "mean", "max_reduce", "l2_norm", "gather_rows",
    "scatter_add_rows", "batch_norm", "save_checkpoint", "load_checkpoint",
]

_TAPES: list["Tape"] = []


class ShapeError(ValueError):
    pass


class Tensor:
    """Dense float64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64, order="C")
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return shift(self, -float(other))

    def __rsub__(self, other):
        return shift(neg(self), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _raise_item(shape):
    raise ShapeError(f"item() needs a single-element tensor, got shape {shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of primitive applications; usable for one backward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._produced: set[int] = set()
        self.consumed = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def record(self, inputs, output, backward_fn) -> None:
        if self.consumed:
            raise RuntimeError("tape already consumed by backward()")
        self.nodes.append(_Node(tuple(inputs), output, backward_fn))
        self._produced.add(id(output))

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def apply_op(out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap a forward value as a Tensor and record ``backward_fn`` if needed.

    ``backward_fn(grad_out)`` must return one gradient (or None) per input.
    """
    tape = _TAPES[-1] if _TAPES else None
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.record(inputs, out, backward_fn)
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``.grad`` of every tensor that requires gradients.

    Gradients of leaves accumulate on top of existing ``.grad`` buffers, so
    several tapes can contribute to one parameter before an optimizer step.
    """
    if tape.consumed:
        raise RuntimeError("backward() called twice on the same tape")
    if loss.data.size != 1:
        raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
    if id(loss) not in tape._produced:
        raise RuntimeError("loss was not produced on this tape")
    tape.consumed = True
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        node.output.grad = g
        in_grads = node.backward(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if ig.shape != inp.shape:
                raise ShapeError(f"backward produced gradient of shape {ig.shape} for input {inp.shape}")
            key = id(inp)
            if key in tape._produced:
                prev = grads.get(key)
                grads[key] = ig if prev is None else prev + ig
            else:
                inp.grad = ig.copy() if inp.grad is None else inp.grad + ig
    tape.nodes.clear()
    tape._produced.clear()


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- primitives

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., n, k) @ (k, m) or batched (..., n, k) @ (..., k, m)."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    shared = b.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if shared:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return apply_op(ad @ bd, (a, b), back)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return apply_op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return apply_op(a.data - b.data, (a, b), lambda g: (g, -g))


def neg(a: Tensor) -> Tensor:
    return apply_op(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return apply_op(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    return apply_op(a.data * c, (a,), lambda g: (g * c,))


def shift(a: Tensor, c: float) -> Tensor:
    return apply_op(a.data + c, (a,), lambda g: (g,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Broadcast-add a bias over the trailing dimension of ``x``."""
    if b.ndim != 1 or x.shape[-1:] != b.shape:
        raise ShapeError(f"add_bias: bias {b.shape} does not match trailing dim of {x.shape}")
    lead = tuple(range(x.ndim - 1))
    return apply_op(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)))


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    return apply_op(s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return apply_op(t, (x,), lambda g: (g * (1.0 - t * t),))


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    return apply_op(np.logaddexp(0.0, xd), (x,), lambda g: (g * expit(xd),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return apply_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = list(xs)
    ax = axis % xs[0].ndim
    for t in xs[1:]:
        if t.ndim != xs[0].ndim or t.shape[:ax] + t.shape[ax + 1:] != xs[0].shape[:ax] + xs[0].shape[ax + 1:]:
            raise ShapeError(f"concat: shape mismatch {xs[0].shape} vs {t.shape} on axis {axis}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in xs])

    def back(g):
        return [np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(xs))]

    return apply_op(np.concatenate([t.data for t in xs], axis=ax), xs, back)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Stack along a new axis (concat of reshaped inputs)."""
    xs = list(xs)
    ax = axis % (xs[0].ndim + 1)
    expanded = [reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]) for t in xs]
    return concat(expanded, axis=ax)


def slice_axis(x: Tensor, axis: int, start: int | None = None, stop: int | None = None,
               step: int | None = None) -> Tensor:
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop, step)
    index = tuple(index)
    shape = x.shape

    def back(g):
        out = np.zeros(shape)
        out[index] = g
        return (out,)

    return apply_op(x.data[index], (x,), back)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return apply_op(x.data.reshape(tuple(shape)), (x,), lambda g: (g.reshape(old),))


def sum(x: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return apply_op(x.data.sum(axis=axis, keepdims=keepdims), (x,), back)


def mean(x: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def max_reduce(x: Tensor, axis: int) -> Tensor:
    """Maximum along ``axis``; the gradient goes to the first maximal entry."""
    idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    shape = x.shape

    def back(g):
        out = np.zeros(shape)
        np.put_along_axis(out, idx, np.expand_dims(g, axis), axis=axis)
        return (out,)

    return apply_op(np.take_along_axis(x.data, idx, axis=axis).squeeze(axis), (x,), back)


def l2_norm(x: Tensor, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; subgradient 0 at the origin."""
    xd = x.data
    n = np.sqrt(np.sum(xd * xd, axis=axis))

    def back(g):
        safe = np.where(n > 0, n, 1.0)
        factor = np.where(n > 0, g / safe, 0.0)
        return (np.expand_dims(factor, axis) * xd,)

    return apply_op(n, (x,), back)


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    index = np.asarray(index, dtype=np.int64)
    shape = x.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return apply_op(x.data[index], (x,), back)


def scatter_add_rows(x: Tensor, index: np.ndarray, n_rows: int) -> Tensor:
    """out[index[e]] += x[e]; rows of ``out`` not hit stay zero."""
    index = np.asarray(index, dtype=np.int64)
    if index.shape != x.shape[:1]:
        raise ShapeError(f"scatter_add_rows: index {index.shape} vs rows {x.shape[:1]}")
    out = np.zeros((n_rows,) + x.shape[1:])
    np.add.at(out, index, x.data)
    return apply_op(out, (x,), lambda g: (g[index],))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, axes: tuple[int, ...],
               eps: float = 1e-5, stats: tuple[np.ndarray, np.ndarray] | None = None):
    """Normalize over ``axes`` per trailing channel, then scale and shift.

    With ``stats=None`` batch statistics are used and returned alongside the
    output as ``(y, mean, var)``; otherwise the given (mean, var) are fixed.
    """
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ShapeError(f"batch_norm: affine params {gamma.shape} vs channels {x.shape[-1:]}")
    xd = x.data
    if stats is None:
        mu = xd.mean(axis=axes, keepdims=True)
        var = xd.var(axis=axes, keepdims=True)
    else:
        mu, var = (np.asarray(s).reshape((1,) * (xd.ndim - 1) + (-1,)) for s in stats)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    gd = gamma.data
    lead = tuple(range(xd.ndim - 1))
    count = int(np.prod([xd.shape[a] for a in axes]))

    def back(g):
        dxhat = g * gd
        if stats is None:
            dx = inv / count * (count * dxhat - dxhat.sum(axis=axes, keepdims=True)
                                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
        else:
            dx = dxhat * inv
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    y = apply_op(xhat * gd + beta.data, (x, gamma, beta), back)
    if stats is None:
        return y, mu.reshape(-1), var.reshape(-1)
    return y


# ---------------------------------------------------------------- checking

@dataclass
class GradcheckReport:
    errors: dict[str, float]
    tolerance: float
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = all(np.isfinite(e) and e <= self.tolerance for e in self.errors.values())

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0


def _named(params) -> list[tuple[str, Tensor]]:
    if isinstance(params, Mapping):
        return list(params.items())
    return [(f"p{i}", p) for i, p in enumerate(params)]


def gradcheck(fn: Callable[[], Tensor], params: Mapping[str, Tensor] | Iterable[Tensor],
              step: float = 1e-5, tolerance: float = 1e-5, floor: float = 1e-8) -> GradcheckReport:
    """Compare tape gradients of the scalar ``fn()`` with central differences.

    The error of one parameter tensor is max|analytic - numeric| divided by
    the larger of the two gradients' max-norms (floored at ``floor``).
    """
    named = _named(params)
    saved_flags = [p.requires_grad for _, p in named]
    for _, p in named:
        p.requires_grad = True
        p.grad = None
    with Tape() as tape:
        loss = fn()
    backward(tape, loss)
    errors = {}
    for name, p in named:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(analytic)):
            errors[name] = float("inf")
            continue
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = fn().item()
            flat[i] = orig - step
            down = fn().item()
            flat[i] = orig
            numeric.reshape(-1)[i] = (up - down) / (2.0 * step)
        denom = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
        errors[name] = float(np.abs(analytic - numeric).max(initial=0.0) / denom)
    for (_, p), flag in zip(named, saved_flags):
        p.requires_grad = flag
        p.grad = None
    return GradcheckReport(errors, tolerance)


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(stem: str | Path, params: Mapping[str, Tensor | np.ndarray],
                    extra: dict | None = None) -> tuple[Path, Path]:
    """Write ``stem.json`` (manifest) and ``stem.bin`` (little-endian float64)."""
    stem = Path(stem)
    entries, offset, chunks = [], 0, []
    for name in sorted(params):
        arr = params[name]
        arr = np.asarray(arr.data if isinstance(arr, Tensor) else arr, dtype="<f8", order="C")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        offset += arr.size
        chunks.append(arr.reshape(-1).tobytes())
    manifest = {"format": "graphode-checkpoint", "version": 1, "dtype": "float64",
                "byteorder": "little", "payload": stem.name + ".bin", "tensors": entries,
                "extra": extra or {}}
    json_path, bin_path = stem.with_suffix(".json"), stem.with_suffix(".bin")
    bin_path.write_bytes(b"".join(chunks))
    json_path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return json_path, bin_path


def load_checkpoint(stem: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    stem = Path(stem)
    manifest = json.loads(stem.with_suffix(".json").read_text())
    if manifest.get("format") != "graphode-checkpoint":
        raise ValueError(f"{stem}.json is not a checkpoint manifest")
    payload = np.frombuffer(stem.with_suffix(".bin").read_bytes(), dtype="<f8")
    out = {}
    for e in manifest["tensors"]:
        chunk = payload[e["offset"]:e["offset"] + e["count"]]
        if chunk.size != e["count"]:
            raise ValueError(f"checkpoint payload truncated at tensor {e['name']}")
        out[e["name"]] = chunk.astype(np.float64).reshape(tuple(e["shape"]))
    return out, manifest.get("extra", {})
