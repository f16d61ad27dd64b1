"""Dense 2-D tensors with tape-based reverse-mode differentiation.

Every tensor is a 2-D float64 array. Operations run eagerly; when a
:class:`Tape` is active and at least one input is tracked (a trainable
:class:`Parameter` or the output of a recorded op), the op is appended to the
tape together with a closure that maps the output gradient to input
gradients. :func:`backward` walks the tape in reverse.

Outside a tape nothing is recorded, which is the fast path used for
generation.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "ShapeError",
    "DegenerateMaskError",
    "DisconnectedGraphError",
    "NumericError",
    "ParameterError",
    "tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "transpose",
    "total",
    "relu",
    "gelu",
    "sigmoid",
    "softmax_rows",
    "softmax_row",
    "layer_norm",
    "cross_entropy",
    "gather_rows",
    "slice_cols",
    "concat_cols",
    "gaussian_kernel_matrix",
    "gaussian_smooth_1d",
    "backward",
    "grad_check",
]


class ShapeError(ValueError):
    pass


class DegenerateMaskError(ValueError):
    pass


class DisconnectedGraphError(RuntimeError):
    pass


class NumericError(ArithmeticError):
    """Raised when an operation produces NaN or Inf."""


class ParameterError(ValueError):
    pass


_TAPES: list["Tape"] = []


class Tensor:
    """Immutable 2-D array of float64 values."""

    __slots__ = ("data", "tracked", "__weakref__")

    def __init__(self, data, tracked: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got shape {arr.shape}")
        self.data = arr
        self.tracked = tracked

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single value, shape is {self.shape}")
        return float(self.data[0, 0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


class Parameter(Tensor):
    """A trainable leaf. ``data`` is updated in place by optimizers only."""

    __slots__ = ("grad", "name")

    def __init__(self, data, name: str = "", requires_grad: bool = True):
        super().__init__(data, tracked=requires_grad)
        self.grad = np.zeros_like(self.data)
        self.name = name

    @property
    def value(self) -> Tensor:
        return Tensor(self.data)

    @property
    def requires_grad(self) -> bool:
        return self.tracked

    @requires_grad.setter
    def requires_grad(self, flag: bool) -> None:
        self.tracked = bool(flag)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


class Tape:
    """Ordered record of primitive ops, in the order they were executed.

    Use as a context manager; ops executed inside the ``with`` block are
    recorded. Because recording happens at execution time, the record is
    already topologically ordered.
    """

    def __init__(self):
        self.ops: list[tuple[Tensor, tuple, Callable]] = []
        self._outputs: set[int] = set()

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.ops)

    def record(self, out: Tensor, inputs: tuple, grad_fn: Callable) -> None:
        self.ops.append((out, inputs, grad_fn))
        self._outputs.add(id(out))

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._outputs


def tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finish(out: np.ndarray, inputs: tuple, grad_fn: Callable) -> Tensor:
    if not np.isfinite(out).all():
        raise NumericError("non-finite value produced")
    res = Tensor(out)
    if _TAPES and any(t.tracked for t in inputs):
        res.tracked = True
        _TAPES[-1].record(res, inputs, grad_fn)
    return res


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}")


# -- primitives -------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} x {b.shape}")
    out = a.data @ b.data

    def grad_fn(g):
        return g @ b.data.T, a.data.T @ g

    return _finish(out, (a, b), grad_fn)


def add(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _check_broadcast(a, b, "add")
    out = a.data + b.data

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _finish(out, (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _check_broadcast(a, b, "sub")
    out = a.data - b.data

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _finish(out, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _check_broadcast(a, b, "mul")
    out = a.data * b.data

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _finish(out, (a, b), grad_fn)


def div(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _check_broadcast(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def grad_fn(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _finish(out, (a, b), grad_fn)


def neg(a) -> Tensor:
    a = tensor(a)
    return _finish(-a.data, (a,), lambda g: (-g,))


def transpose(a) -> Tensor:
    a = tensor(a)
    return _finish(a.data.T.copy(), (a,), lambda g: (g.T,))


def total(a) -> Tensor:
    """Sum of all entries as a 1x1 tensor."""
    a = tensor(a)
    out = np.array([[a.data.sum()]])
    return _finish(out, (a,), lambda g: (np.full(a.shape, g[0, 0]),))


def relu(a) -> Tensor:
    a = tensor(a)
    on = a.data > 0
    return _finish(a.data * on, (a,), lambda g: (g * on,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """GELU, tanh approximation. Smooth, so finite-difference checks hold."""
    a = tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def grad_fn(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        return (g * d,)

    return _finish(out, (a,), grad_fn)


def sigmoid(a) -> Tensor:
    a = tensor(a)
    x = a.data
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def grad_fn(g):
        return (g * out * (1.0 - out),)

    return _finish(out, (a,), grad_fn)


def _as_mask(mask, shape: tuple[int, int]) -> np.ndarray | None:
    if mask is None:
        return None
    m = np.asarray(mask, dtype=bool)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    try:
        return np.broadcast_to(m, shape)
    except ValueError:
        raise ShapeError(f"mask shape {m.shape} does not fit {shape}") from None


def softmax_rows(x, mask=None) -> Tensor:
    """Row-wise softmax. ``mask`` (True = keep) broadcasts against ``x``.

    Masked entries come out as exactly 0.
    """
    x = tensor(x)
    m = _as_mask(mask, x.shape)
    z = x.data
    if m is not None:
        if not m.any(axis=1).all():
            raise DegenerateMaskError("every position of some row is masked")
        z = np.where(m, z, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def grad_fn(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - dot),)

    return _finish(out, (x,), grad_fn)


def softmax_row(x, mask=None) -> Tensor:
    x = tensor(x)
    if x.shape[0] != 1:
        raise ShapeError(f"softmax_row expects a 1xn row, got {x.shape}")
    return softmax_rows(x, mask)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    x, gain, bias = tensor(x), tensor(gain), tensor(bias)
    d = x.shape[1]
    if gain.shape != (1, d) or bias.shape != (1, d):
        raise ShapeError(f"layer_norm: gain/bias must be (1, {d})")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def grad_fn(g):
        gx_hat = g * gain.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=1, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)

    return _finish(out, (x, gain, bias), grad_fn)


def cross_entropy(logits, targets: Sequence[int], ignore_index: int | None = None) -> Tensor:
    """Mean softmax cross-entropy of each row against its target class."""
    logits = tensor(logits)
    t = np.asarray(targets, dtype=np.int64)
    if t.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: {len(t)} targets for {logits.shape[0]} rows")
    keep = np.ones(len(t), bool) if ignore_index is None else t != ignore_index
    count = int(keep.sum())
    if count == 0:
        raise ParameterError("cross_entropy: no non-ignored targets")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.nonzero(keep)[0]
    loss = -logp[rows, t[rows]].sum() / count

    def grad_fn(g):
        p = np.exp(logp)
        p[rows, t[rows]] -= 1.0
        p[~keep] = 0.0
        return (p * (g[0, 0] / count),)

    return _finish(np.array([[loss]]), (logits,), grad_fn)


def gather_rows(table, ids: Sequence[int]) -> Tensor:
    """Embedding lookup: rows ``ids`` of ``table``."""
    table = tensor(table)
    idx = np.asarray(ids, dtype=np.int64)
    out = table.data[idx]

    def grad_fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _finish(out, (table,), grad_fn)


def slice_cols(x, start: int, stop: int) -> Tensor:
    x = tensor(x)
    out = x.data[:, start:stop].copy()

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return _finish(out, (x,), grad_fn)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(tensor(p) for p in parts)
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise ShapeError(f"concat_cols: row counts differ {[p.shape for p in parts]}")
    out = np.concatenate([p.data for p in parts], axis=1)
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def grad_fn(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return _finish(out, parts, grad_fn)


# -- smoothing --------------------------------------------------------------


def gaussian_kernel_matrix(n: int, sigma: float, mask=None) -> np.ndarray:
    """Column-stochastic spreading matrix ``S`` with ``out = dist @ S``.

    Row ``j`` spreads the mass at position ``j`` over the unmasked positions
    within radius ceil(3 sigma), with weights exp(-d^2 / 2 sigma^2)
    renormalized over the positions that exist. Masked rows and columns are
    zero.
    """
    if not sigma > 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    keep = np.ones(n, bool) if mask is None else np.asarray(mask, bool).reshape(-1)
    radius = math.ceil(3 * sigma)
    pos = np.arange(n)
    d = pos[None, :] - pos[:, None]
    k = np.exp(-(d.astype(np.float64) ** 2) / (2.0 * sigma * sigma))
    k[np.abs(d) > radius] = 0.0
    k[:, ~keep] = 0.0
    k[~keep, :] = 0.0
    z = k.sum(axis=1, keepdims=True)
    np.divide(k, z, out=k, where=z > 0)
    return k


def gaussian_smooth_1d(dist, sigma: float, mask=None) -> Tensor:
    """Smooth a 1xn distribution with a truncated Gaussian kernel.

    The result is renormalized to sum to 1 over unmasked positions.
    """
    dist = tensor(dist)
    if dist.shape[0] != 1:
        raise ShapeError(f"gaussian_smooth_1d expects a 1xn row, got {dist.shape}")
    n = dist.shape[1]
    kmat = gaussian_kernel_matrix(n, sigma, mask)
    spread = matmul(dist, Tensor(kmat))
    return div(spread, total(spread))


# -- differentiation --------------------------------------------------------


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into ``param.grad`` for every tracked
    Parameter reachable from ``loss`` through ``tape``."""
    if loss.shape != (1, 1):
        raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
    if not tape.produced(loss):
        raise DisconnectedGraphError("loss was not produced on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    for out, inputs, grad_fn in reversed(tape.ops):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for inp, gi in zip(inputs, grad_fn(g)):
            if gi is None or not inp.tracked:
                continue
            if isinstance(inp, Parameter):
                inp.grad += gi
            else:
                key = id(inp)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Parameter],
    eps: float = 1e-4,
    max_components: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-8,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` takes no arguments and returns a scalar built from ``params``.
    With ``max_components`` only that many randomly chosen entries per
    parameter are compared. The error of one component is
    ``|a - n| / max(|a| + |n|, floor)``; raising ``floor`` keeps round-off
    on vanishing components from reading as a large relative error.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
    if tape.produced(loss):
        backward(tape, loss)
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        analytic = p.grad.reshape(-1)
        idx = np.arange(flat.size)
        if max_components is not None and flat.size > max_components:
            idx = rng.choice(flat.size, size=max_components, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            up = f().item()
            flat[i] = orig - eps
            down = f().item()
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            a = analytic[i]
            err = abs(a - numeric) / max(abs(a) + abs(numeric), floor)
            worst = max(worst, err)
    return worst
