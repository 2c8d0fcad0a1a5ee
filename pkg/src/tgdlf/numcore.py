"""Dense float64 arrays with reverse-mode gradient accumulation.

Every operation on :class:`Tensor` records a node (parents plus a backward
closure) and a global sequence number. :func:`backward` collects the nodes
reachable from a scalar loss into a :class:`Tape` ordered by execution and
replays it in reverse, so each gradient is the sum over all paths.

Broadcasting is deliberately narrow: the second operand of a binary
elementwise op must have the same shape as the first, or a shape equal to a
trailing suffix of it (e.g. a bias vector against a matrix, or a [24, d]
table against a [B, 24, d] batch).
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

_sequence = itertools.count()
_recording = True


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference and finite differences)."""
    global _recording
    previous = _recording
    _recording = False
    try:
        yield
    finally:
        _recording = previous


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._seq = next(_sequence)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out._seq = next(_sequence)
    needs = _recording and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    out.grad = None
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _accumulate(t: Tensor, g: np.ndarray):
    # never in place: upstream gradient arrays may be shared between parents
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    if a.shape == b.shape:
        return
    nb = len(b.shape)
    if nb == 0 or nb > len(a.shape) or a.shape[len(a.shape) - nb:] != b.shape:
        raise ShapeError(f"{op}: cannot broadcast {b.shape} against {a.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        _accumulate(a, g)
        _accumulate(b, _unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        _accumulate(a, g)
        _accumulate(b, -_unbroadcast(g, b.shape))

    return _result(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        _accumulate(a, g * b.data)
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bw(g):
        _accumulate(a, g * c)

    return _result(a.data * c, (a,), bw)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bw(g):
        _accumulate(a, g * mask)

    return _result(np.where(mask, a.data, 0.0), (a,), bw)


# ---------------------------------------------------------------- structural


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` is [..., m, k]; ``b`` is either a plain [k, n] matrix (shared across
    the leading axes of ``a``) or [..., k, n] with the same leading axes.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if b.data.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}")

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if b.data.ndim == 2:
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
            _accumulate(b, gb)

    return _result(a.data @ b.data, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""

    def bw(g):
        _accumulate(a, np.swapaxes(g, -1, -2))

    return _result(np.swapaxes(a.data, -1, -2).copy(), (a,), bw)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    new = a.data.reshape(shape)

    def bw(g):
        _accumulate(a, g.reshape(a.shape))

    return _result(new, (a,), bw)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accumulate(p, g[tuple(idx)])

    return _result(np.concatenate([p.data for p in parts], axis=axis), parts, bw)


def expand(a: Tensor, lead: Sequence[int]) -> Tensor:
    """Repeat ``a`` along new leading axes: [*shape] -> [*lead, *shape]."""
    lead = tuple(lead)
    out = np.broadcast_to(a.data, lead + a.shape).copy()

    def bw(g):
        _accumulate(a, g.sum(axis=tuple(range(len(lead)))))

    return _result(out, (a,), bw)


# ---------------------------------------------------------------- reductions


def sum_all(a: Tensor) -> Tensor:
    def bw(g):
        _accumulate(a, np.full(a.shape, float(g)))

    return _result(np.array(a.data.sum()), (a,), bw)


def mean_all(a: Tensor) -> Tensor:
    n = a.size

    def bw(g):
        _accumulate(a, np.full(a.shape, float(g) / n))

    return _result(np.array(a.data.mean()), (a,), bw)


def mse_loss(pred: Tensor, target) -> Tensor:
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss shapes differ: {pred.shape} vs {target.shape}")
    diff = pred.data - target
    n = diff.size

    def bw(g):
        _accumulate(pred, (2.0 * float(g) / n) * diff)

    return _result(np.array(np.mean(diff * diff)), (pred,), bw)


# ---------------------------------------------------------------- nonlinear rows


def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis with max subtraction.

    ``mask`` (broadcastable boolean, True = keep) forces excluded entries to
    exactly zero probability. Every row must keep at least one entry.
    """
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        _accumulate(x, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _result(y, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(f"layer_norm affine params must be ({n},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        if gain.requires_grad:
            _accumulate(gain, (g * xhat).reshape(-1, n).sum(axis=0))
        if bias.requires_grad:
            _accumulate(bias, g.reshape(-1, n).sum(axis=0))
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
            _accumulate(x, gx)

    return _result(out, (x, gain, bias), bw)


# ---------------------------------------------------------------- backward


@dataclass
class Tape:
    """Reachable operations of one loss, in execution order."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        seen: set[int] = set()
        nodes: list[Tensor] = []
        stack = [loss]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            if t._backward is not None:
                nodes.append(t)
                stack.extend(t._parents)
        nodes.sort(key=lambda t: t._seq)
        return cls(nodes)

    def replay(self, loss: Tensor, seed: float = 1.0):
        # interior nodes get fresh grads; leaves accumulate
        for t in self.nodes:
            t.grad = None
        loss.grad = np.full(loss.shape, seed, dtype=np.float64)
        for t in reversed(self.nodes):
            if t.grad is not None:
                t._backward(t.grad)
        for t in self.nodes:
            t.grad = None


def backward(loss: Tensor):
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._backward is None:
        return
    Tape.from_loss(loss).replay(loss)


# ---------------------------------------------------------------- gradient oracle


def finite_diff_check(f: Callable[[], Tensor], params: Iterable[Tensor], step: float = 1e-6,
                      fallback_steps: Sequence[float] = (), recheck_above: float = 1e-6) -> float:
    """Max relative error between autodiff and central differences.

    ``f`` recomputes the scalar loss from the current parameter values. The
    error of one element is ``|fd - ad| / max(|fd|, |ad|, 1e-8)``. Elements
    whose error exceeds ``recheck_above`` are re-measured at each of
    ``fallback_steps`` and keep the smallest error: a small step loses tiny
    gradients to rounding, a large one can straddle a ReLU kink, while a
    wrong gradient disagrees at every step. Parameter grads are left holding
    the autodiff result.
    """
    if step <= 0 or any(h <= 0 for h in fallback_steps):
        raise ValueError("steps must be positive")
    params = list(params)
    for p in params:
        p.grad = np.zeros_like(p.data)
    backward(f())

    def central(flat, i, h):
        orig = flat[i]
        flat[i] = orig + h
        up = float(f().data)
        flat[i] = orig - h
        down = float(f().data)
        flat[i] = orig
        return (up - down) / (2.0 * h)

    worst = 0.0
    with no_grad():
        for p in params:
            flat = p.data.reshape(-1)
            ad = p.grad.reshape(-1)
            for i in range(flat.size):
                err = relative_error(central(flat, i, step), ad[i])
                for h in fallback_steps:
                    if err <= recheck_above:
                        break
                    err = min(err, relative_error(central(flat, i, h), ad[i]))
                worst = max(worst, err)
    return worst


# ---------------------------------------------------------------- checkpoints


def save_params(path, params: dict[str, Tensor | np.ndarray]):
    """Write named arrays to an ``.npz`` archive (shape and row-major bits preserved)."""
    arrays = {k: (v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64))
              for k, v in params.items()}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_params(path) -> dict[str, np.ndarray]:
    with np.load(Path(path), allow_pickle=False) as archive:
        return {k: archive[k].astype(np.float64) for k in archive.files}


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


__all__ = [
    "Tensor", "Tape", "ShapeError", "no_grad", "as_tensor",
    "add", "sub", "mul", "scale", "relu", "matmul", "transpose", "reshape",
    "concat", "expand", "sum_all", "mean_all", "mse_loss", "softmax_rows",
    "layer_norm", "backward", "finite_diff_check", "save_params", "load_params",
    "relative_error",
]
