"""Minimal reverse-mode differentiation over 64-bit numpy arrays.

A :class:`Tensor` records the operation that produced it together with
vector-Jacobian closures for its parents; :func:`backward` replays the tape
in reverse topological order.  The op set is deliberately small (matrix
multiply, transpose, concat, split, elementwise add/mul, scalar scale, exp,
rectifier, softmax over an axis, sum over an axis, mean, square) and there
is no general broadcasting; the single allowed shape mix is adding a length-m
vector to every row of an (n, m) matrix, which is what bias terms need.

Every forward value and every gradient is checked for NaN/Inf and aborts
with diagnostics when one appears (toggle with :func:`set_finite_checks`).
Calling backward twice on the same tape is an error.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NonFiniteValue, NotScalar, ShapeError, TapeReuse

_CHECK_FINITE = True


def set_finite_checks(enabled: bool) -> bool:
    """Enable or disable NaN/Inf aborts; returns the previous setting."""
    global _CHECK_FINITE
    previous = _CHECK_FINITE
    _CHECK_FINITE = enabled
    return previous


def _assert_finite(data: np.ndarray, where: str) -> None:
    if not _CHECK_FINITE:
        return
    # A full-array sum is NaN or Inf iff some entry is; cheap single pass.
    if not math.isfinite(float(data.sum())):
        bad = int((~np.isfinite(data)).sum())
        raise NonFiniteValue(f"{where}: {bad}/{data.size} non-finite entries, shape {data.shape}")


class Tensor:
    """A node on the tape: forward value, gradient slot, and parent links."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_vjp", "_backward_ran")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]] | None = None
        self._backward_ran = False
        _assert_finite(self.data, f"tensor {name or '(leaf)'}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = self.name or ("param" if self.requires_grad else "const")
        return f"Tensor({tag}, shape={self.data.shape})"

    # -- sugar ----------------------------------------------------------

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def t(self) -> "Tensor":
        return transpose(self)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, name: str | None = None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad=False, name=name)


def constant(x, name: str | None = None) -> Tensor:
    return Tensor(x, requires_grad=False, name=name)


def _make(data: np.ndarray, parents: Sequence[Tensor],
          vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]], op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out.name = op
    out._parents = tuple(parents)
    out._vjp = vjp
    out._backward_ran = False
    _assert_finite(data, f"forward op {op}")
    return out


# -- operations ---------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul of {a.data.shape} and {b.data.shape}")
    out = a.data @ b.data

    def vjp(g: np.ndarray):
        return g @ b.data.T, a.data.T @ g

    return _make(out, (a, b), vjp, "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got {a.data.shape}")
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape == b.data.shape:
        def vjp(g: np.ndarray):
            return g, g
    elif a.data.ndim == 2 and b.data.shape == (a.data.shape[1],):
        # Row-vector bias added to every row of a matrix.
        def vjp(g: np.ndarray):
            return g, g.sum(axis=0)
    else:
        raise ShapeError(f"add of {a.data.shape} and {b.data.shape}")
    return _make(a.data + b.data, (a, b), vjp, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul of {a.data.shape} and {b.data.shape}")

    def vjp(g: np.ndarray):
        return g * b.data, g * a.data

    return _make(a.data * b.data, (a, b), vjp, "mul")


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _make(a.data * factor, (a,), lambda g: (g * factor,), "scale")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow surfaces as a NonFiniteValue abort
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0  # derivative at exactly 0 is 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def softmax(a: Tensor, axis: int) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g: np.ndarray):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _make(out, (a,), vjp, "softmax")


def tensor_sum(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        shape = a.data.shape
        return _make(np.asarray(a.data.sum()), (a,),
                     lambda g: (np.broadcast_to(g, shape),), "sum")
    out = a.data.sum(axis=axis)

    def vjp(g: np.ndarray):
        return (np.broadcast_to(np.expand_dims(g, axis), a.data.shape),)

    return _make(out, (a,), vjp, "sum")


def mean(a: Tensor) -> Tensor:
    size = a.data.size
    shape = a.data.shape
    return _make(np.asarray(a.data.mean()), (a,),
                 lambda g: (np.broadcast_to(g / size, shape),), "mean")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat of zero tensors")
    sizes = [t.data.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def vjp(g: np.ndarray):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp, "concat")


def split(a: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    if sum(sizes) != a.data.shape[axis]:
        raise ShapeError(f"split sizes {sizes} do not cover axis {axis} of {a.data.shape}")
    bounds = np.cumsum(sizes)[:-1]
    pieces = np.split(a.data, bounds, axis=axis)
    outs = []
    offset = 0
    for piece in pieces:
        lo = offset
        hi = offset + piece.shape[axis]
        offset = hi

        def vjp(g: np.ndarray, lo=lo, hi=hi):
            full = np.zeros_like(a.data)
            index = [slice(None)] * a.data.ndim
            index[axis] = slice(lo, hi)
            full[tuple(index)] = g
            return (full,)

        outs.append(_make(piece.copy(), (a,), vjp, "split"))
    return outs


_OPS: dict[str, Callable] = {
    "matmul": matmul,
    "transpose": transpose,
    "concat": lambda *inputs, axis=0: concat(inputs, axis=axis),
    "split": split,
    "add": add,
    "mul": mul,
    "scale": scale,
    "exp": exp,
    "relu": relu,
    "softmax": softmax,
    "sum": tensor_sum,
    "mean": mean,
    "square": square,
}


def record(op: str, *inputs, **kwargs):
    """Name-dispatched entry point for the supported tape operations."""
    try:
        fn = _OPS[op]
    except KeyError:
        raise ShapeError(f"unknown op {op!r}; supported: {sorted(_OPS)}") from None
    return fn(*inputs, **kwargs)


# -- backward pass ------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate gradients of a scalar loss into every reachable tensor."""
    if loss.data.shape != ():
        raise NotScalar(f"backward needs a scalar, got shape {loss.data.shape}")
    if loss._backward_ran:
        raise TapeReuse("backward was already run on this tape")
    loss._backward_ran = True
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    loss.grad = np.ones(())
    for node in reversed(order):
        if node.grad is None or node._vjp is None:
            continue
        contributions = node._vjp(node.grad)
        for parent, contribution in zip(node._parents, contributions):
            if not parent.requires_grad or contribution is None:
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.data)
            parent.grad = parent.grad + contribution
            _assert_finite(parent.grad, f"gradient into {parent.name or 'tensor'}")


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def grad_of(t: Tensor) -> np.ndarray:
    """Gradient of a tensor after backward; zeros when unreachable."""
    return t.grad if t.grad is not None else np.zeros_like(t.data)


# -- finite-difference verification --------------------------------------


class FdRow:
    __slots__ = ("array", "coordinate", "analytic", "numeric", "rel_error")

    def __init__(self, array: str, coordinate: int, analytic: float, numeric: float,
                 rel_error: float):
        self.array = array
        self.coordinate = coordinate
        self.analytic = analytic
        self.numeric = numeric
        self.rel_error = rel_error


class FdReport:
    """Per-coordinate finite-difference comparison for a set of parameters."""

    def __init__(self, rows: list[FdRow], tol: float):
        self.rows = rows
        self.tol = tol

    @property
    def max_rel_error(self) -> float:
        return max((r.rel_error for r in self.rows), default=0.0)

    def by_array(self) -> dict[str, float]:
        worst: dict[str, float] = {}
        for r in self.rows:
            worst[r.array] = max(worst.get(r.array, 0.0), r.rel_error)
        return worst

    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write("array,coordinate,analytic,numeric,rel_error\n")
            for r in self.rows:
                fh.write(f"{r.array},{r.coordinate},{r.analytic!r},{r.numeric!r},"
                         f"{r.rel_error!r}\n")


def fd_check(f: Callable[[], Tensor], params: Sequence[tuple[str, Tensor]],
             h_scale: float = 1e-5, tol: float = 1e-4, max_coords: int = 64,
             seed: int = 0) -> FdReport:
    """Compare analytic gradients of ``f()`` against central differences.

    ``f`` must be a deterministic zero-argument map that rebuilds its tape
    from the given parameters on every call and returns a scalar.  Large
    arrays are subsampled to ``max_coords`` seeded coordinates (at least 64
    by default); the step is ``h_scale * max(1, |theta_c|)`` per coordinate.
    """
    zero_grads(t for _, t in params)
    loss = f()
    backward(loss)
    analytic = {name: grad_of(t).copy() for name, t in params}

    rng = np.random.default_rng(seed)
    rows: list[FdRow] = []
    for name, tensor in params:
        flat = tensor.data.reshape(-1)
        size = flat.size
        if size <= max_coords:
            coords = np.arange(size)
        else:
            coords = np.sort(rng.choice(size, size=max_coords, replace=False))
        a_flat = analytic[name].reshape(-1)
        for c in coords:
            original = flat[c]
            h = h_scale * max(1.0, abs(original))
            flat[c] = original + h
            f_plus = f().item()
            flat[c] = original - h
            f_minus = f().item()
            flat[c] = original
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = float(a_flat[c])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
            rows.append(FdRow(name, int(c), a, numeric, rel))
    return FdReport(rows, tol)
