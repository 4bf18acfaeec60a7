"""Reverse-mode autodiff over dense float64 matrices.

Everything is a 2-D array: row vectors are ``(1, n)``, scalars ``(1, 1)``.
Op functions build the graph eagerly; ``Tensor.backward()`` walks it once
in reverse topological order and accumulates gradients into ``.grad``.
Leaf tensors created via ``constant()`` (or plain ``Tensor(...)``) have no
parents, so gradients stop there unless the leaf is a registered parameter
whose ``.grad`` the optimizer reads.

Single-writer discipline: a Tensor is mutated (by ``backward`` or the SGD
update) by one thread at a time; read-only sharing of frozen values is fine.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from .errors import InputError, ShapeError, TrainingError

__all__ = [
    "Tensor",
    "constant",
    "matmul",
    "add",
    "affine",
    "relu",
    "softmax_rows",
    "softmax_cols",
    "grad_reverse",
    "mul",
    "scale",
    "neg",
    "rsub",
    "log",
    "clip",
    "total",
    "sum_axis",
    "col",
    "take_rows",
    "pick",
    "detach",
    "sgd_update",
    "check_gradients",
    "GradCheckReport",
]


def _as_matrix(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"expected at most 2 dimensions, got shape {arr.shape}")
    return arr


class Tensor:
    """A float64 matrix plus the tape bookkeeping needed for backward()."""

    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, parents: tuple["Tensor", ...] = (),
                 backward: Callable[[np.ndarray], None] | None = None):
        self.data = _as_matrix(data)
        self.grad = np.zeros_like(self.data)
        self._parents = parents
        self._backward = backward

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.data.shape}")
        return float(self.data.reshape(())[()])

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's .grad.

        Visits each recorded node exactly once. ``self`` must be scalar.
        """
        if self.data.shape != (1, 1):
            raise ShapeError(f"backward() requires a scalar output, got {self.data.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape})"


def constant(data) -> Tensor:
    """Wrap an array as a leaf with no gradient flow beyond it."""
    return Tensor(data)


def detach(x: Tensor) -> Tensor:
    """Same values, no history: gradients stop here."""
    return Tensor(x.data)


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    out = g
    if shape[0] == 1 and g.shape[0] != 1:
        out = out.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        out = out.sum(axis=1, keepdims=True)
    if out.shape != shape:
        raise ShapeError(f"cannot reduce gradient of shape {g.shape} to {shape}")
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise ShapeError(f"matmul: inner dimensions differ, {a.data.shape} @ {b.data.shape}")
    out = Tensor(a.data @ b.data, (a, b))

    def _bw(g: np.ndarray) -> None:
        a.grad += g @ b.data.T
        b.grad += a.data.T @ g

    out._backward = _bw
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; either operand may broadcast from a (1, n) / (m, 1) shape."""
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: incompatible shapes {a.data.shape} + {b.data.shape}") from exc
    out = Tensor(data, (a, b))

    def _bw(g: np.ndarray) -> None:
        a.grad += _unbroadcast(g, a.data.shape)
        b.grad += _unbroadcast(g, b.data.shape)

    out._backward = _bw
    return out


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with b a (1, cols) row vector broadcast over rows."""
    if b.rows != 1 or b.cols != w.cols:
        raise ShapeError(f"affine: bias shape {b.data.shape} does not match weight {w.data.shape}")
    return add(matmul(x, w), b)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0), (x,))

    def _bw(g: np.ndarray) -> None:
        x.grad += g * (x.data > 0.0)

    out._backward = _bw
    return out


def softmax_rows(s: Tensor) -> Tensor:
    """Softmax along each row, with max-subtraction for stability."""
    z = s.data - s.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor(y, (s,))

    def _bw(g: np.ndarray) -> None:
        s.grad += y * (g - (g * y).sum(axis=1, keepdims=True))

    out._backward = _bw
    return out


def softmax_cols(s: Tensor) -> Tensor:
    """Softmax along each column, with max-subtraction for stability."""
    z = s.data - s.data.max(axis=0, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=0, keepdims=True)
    out = Tensor(y, (s,))

    def _bw(g: np.ndarray) -> None:
        s.grad += y * (g - (g * y).sum(axis=0, keepdims=True))

    out._backward = _bw
    return out


def grad_reverse(x: Tensor, lam: float) -> Tensor:
    """Identity forward; backward multiplies the upstream gradient by -lam."""
    if lam < 0.0:
        raise InputError(f"grad_reverse: lam must be >= 0, got {lam}")
    out = Tensor(x.data, (x,))

    def _bw(g: np.ndarray) -> None:
        x.grad += -lam * g

    out._backward = _bw
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product, broadcasting as in add()."""
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: incompatible shapes {a.data.shape} * {b.data.shape}") from exc
    out = Tensor(data, (a, b))

    def _bw(g: np.ndarray) -> None:
        a.grad += _unbroadcast(g * b.data, a.data.shape)
        b.grad += _unbroadcast(g * a.data, b.data.shape)

    out._backward = _bw
    return out


def scale(x: Tensor, k: float) -> Tensor:
    out = Tensor(k * x.data, (x,))

    def _bw(g: np.ndarray) -> None:
        x.grad += k * g

    out._backward = _bw
    return out


def neg(x: Tensor) -> Tensor:
    return scale(x, -1.0)


def rsub(c: float, x: Tensor) -> Tensor:
    """Constant minus tensor, e.g. 1 - p."""
    out = Tensor(c - x.data, (x,))

    def _bw(g: np.ndarray) -> None:
        x.grad += -g

    out._backward = _bw
    return out


def log(x: Tensor) -> Tensor:
    out = Tensor(np.log(x.data), (x,))

    def _bw(g: np.ndarray) -> None:
        x.grad += g / x.data

    out._backward = _bw
    return out


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient is zero where clamping engaged."""
    out = Tensor(np.clip(x.data, lo, hi), (x,))
    interior = (x.data > lo) & (x.data < hi)

    def _bw(g: np.ndarray) -> None:
        x.grad += g * interior

    out._backward = _bw
    return out


def total(x: Tensor) -> Tensor:
    """Sum of all entries, as a (1, 1) tensor."""
    out = Tensor(x.data.sum(), (x,))

    def _bw(g: np.ndarray) -> None:
        x.grad += g

    out._backward = _bw
    return out


def sum_axis(x: Tensor, axis: int) -> Tensor:
    """Sum over one axis, keeping it as a length-1 dimension."""
    out = Tensor(x.data.sum(axis=axis, keepdims=True), (x,))

    def _bw(g: np.ndarray) -> None:
        x.grad += g

    out._backward = _bw
    return out


def col(x: Tensor, j: int) -> Tensor:
    """Column j as an (m, 1) tensor."""
    out = Tensor(x.data[:, j:j + 1], (x,))

    def _bw(g: np.ndarray) -> None:
        x.grad[:, j:j + 1] += g

    out._backward = _bw
    return out


def take_rows(x: Tensor, idx) -> Tensor:
    """Gather rows by index (duplicates allowed)."""
    idx = np.asarray(idx, dtype=np.intp)
    out = Tensor(x.data[idx], (x,))

    def _bw(g: np.ndarray) -> None:
        np.add.at(x.grad, idx, g)

    out._backward = _bw
    return out


def pick(x: Tensor, rows, cols) -> Tensor:
    """Gather entries x[rows[i], cols[i]] into a (k, 1) tensor."""
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    if rows.shape != cols.shape:
        raise ShapeError(f"pick: index shapes differ, {rows.shape} vs {cols.shape}")
    out = Tensor(x.data[rows, cols].reshape(-1, 1), (x,))

    def _bw(g: np.ndarray) -> None:
        np.add.at(x.grad, (rows, cols), g[:, 0])

    out._backward = _bw
    return out


def sgd_update(tensors: Mapping[str, Tensor], velocity: dict[str, np.ndarray],
               lr: float, momentum: float,
               include: Iterable[str] | None = None) -> None:
    """SGD with momentum, in place: v <- momentum*v + g; p <- p - lr*v.

    Only names in ``include`` (default: all) are touched; the rest keep both
    their values and their velocity buffers bit-identical. Raises
    TrainingError naming the parameter if its gradient is non-finite.
    """
    if lr <= 0.0:
        raise InputError(f"sgd_update: lr must be > 0, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise InputError(f"sgd_update: momentum must be in [0, 1), got {momentum}")
    names = list(tensors) if include is None else list(include)
    for name in names:
        p = tensors[name]
        g = p.grad
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for parameter '{name}'")
        v = velocity[name]
        v *= momentum
        v += g
        p.data -= lr * v


@dataclass
class GradCheckReport:
    """Analytic-vs-finite-difference comparison over a parameter set."""

    max_rel_error: float
    worst_param: str
    by_param: dict[str, float] = field(default_factory=dict)

    def __str__(self) -> str:
        return f"max rel error {self.max_rel_error:.3e} at '{self.worst_param}'"


def check_gradients(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor],
                    eps: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients of ``loss_fn`` against central differences.

    ``loss_fn`` must be deterministic and rebuild its graph from the current
    parameter values on every call. Relative error per entry is
    |a - fd| / max(|a|, |fd|, 1e-6); the report carries the max over all
    entries of all parameters.
    """
    if eps <= 0.0:
        raise InputError(f"check_gradients: eps must be > 0, got {eps}")
    for p in params.values():
        p.grad[:] = 0.0
    loss_fn().backward()
    analytic = {name: p.grad.copy() for name, p in params.items()}

    worst = 0.0
    worst_name = ""
    by_param: dict[str, float] = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        err = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = loss_fn().item()
            flat[i] = orig - eps
            f_minus = loss_fn().item()
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * eps)
            a = analytic[name].reshape(-1)[i]
            rel = abs(a - fd) / max(abs(a), abs(fd), 1e-6)
            err = max(err, rel)
        by_param[name] = err
        if err >= worst:
            worst = err
            worst_name = name
    return GradCheckReport(max_rel_error=worst, worst_param=worst_name, by_param=by_param)
