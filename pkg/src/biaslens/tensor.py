"""Dense float64 tensors with tape-based reverse-mode differentiation.

Just enough machinery for small MLPs and coupling-style networks: 1-D and
2-D arrays, nine primitive ops, and an explicit Graph object that records
them. Gradients are exact reverse-mode; `finite_diff_grad` provides the
independent numerical check.

Conventions:
  - every buffer is float64, row-major; constructing or producing a
    non-finite value raises NonFiniteError immediately,
  - ops record onto the innermost active `Graph` context, and only when at
    least one input requires grad,
  - tensors outside an active graph are plain immutable values.
"""

from __future__ import annotations

import struct
from typing import Callable, Sequence

import numpy as np

from .errors import GraphError, NonFiniteError, ShapeError

_ACTIVE_GRAPHS: list["Graph"] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 2:
            raise ShapeError(f"tensors are 1-D or 2-D, got shape {arr.shape}")
        if arr.size and not np.isfinite(arr).all():
            raise NonFiniteError("tensor contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Graph:
    """Tape of op records; use as a context manager around the forward pass.

    Records are appended in execution order, so they are already
    topologically sorted; backward walks them once in reverse.
    """

    def __init__(self):
        self.records: list[tuple[str, tuple, Tensor, Callable]] = []
        self.consumed = False

    def __enter__(self) -> "Graph":
        _ACTIVE_GRAPHS.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _ACTIVE_GRAPHS.pop()


def _record(kind: str, inputs: tuple, out: Tensor, backward_fn: Callable) -> None:
    if _ACTIVE_GRAPHS and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE_GRAPHS[-1].records.append((kind, inputs, out, backward_fn))


def _make(data: np.ndarray) -> Tensor:
    if data.size and not np.isfinite(data).all():
        raise NonFiniteError("op produced NaN or Inf")
    t = Tensor.__new__(Tensor)
    t.data = data
    t.requires_grad = False
    t.grad = None
    return t


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to a broadcast operand's shape."""
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    return g.sum(axis=0)


def _check_broadcast(a: Tensor, b: Tensor, opname: str) -> None:
    """Allowed: identical shapes, or b a row vector / scalar against 2-D a."""
    if a.shape == b.shape:
        return
    if b.shape == ():
        return
    if a.data.ndim == 2 and b.shape == (a.shape[1],):
        return
    raise ShapeError(f"{opname}: incompatible shapes {a.shape} and {b.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = _make(a.data @ b.data)

    def backward(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    _record("matmul", (a, b), out, backward)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    out = _make(a.data + b.data)

    def backward(g):
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, _reduce_to(g, b.shape))

    _record("add", (a, b), out, backward)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    out = _make(a.data * b.data)

    def backward(g):
        if a.requires_grad:
            _accum(a, g * b.data)
        if b.requires_grad:
            _accum(b, _reduce_to(g * a.data, b.shape))

    _record("mul", (a, b), out, backward)
    return out


def tanh(a: Tensor) -> Tensor:
    out = _make(np.tanh(a.data))

    def backward(g):
        if a.requires_grad:
            _accum(a, g * (1.0 - out.data**2))

    _record("tanh", (a,), out, backward)
    return out


def exp(a: Tensor) -> Tensor:
    out = _make(np.exp(a.data))

    def backward(g):
        if a.requires_grad:
            _accum(a, g * out.data)

    _record("exp", (a,), out, backward)
    return out


def sum_all(a: Tensor) -> Tensor:
    out = _make(np.asarray(a.data.sum()))

    def backward(g):
        if a.requires_grad:
            _accum(a, np.broadcast_to(g, a.shape).astype(np.float64))

    _record("sum", (a,), out, backward)
    return out


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    """Slice along the last axis; works for 1-D and 2-D tensors."""
    if not (0 <= start <= stop <= a.shape[-1]):
        raise ShapeError(f"slice [{start}:{stop}] out of bounds for shape {a.shape}")
    out = _make(a.data[..., start:stop].copy())

    def backward(g):
        if a.requires_grad:
            full = np.zeros(a.shape)
            full[..., start:stop] = g
            _accum(a, full)

    _record("slice", (a,), out, backward)
    return out


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis."""
    if not parts:
        raise ShapeError("concat of zero tensors")
    ndims = {p.data.ndim for p in parts}
    if len(ndims) != 1:
        raise ShapeError("concat: mixed ranks")
    out = _make(np.concatenate([p.data for p in parts], axis=-1))
    widths = [p.shape[-1] for p in parts]

    def backward(g):
        off = 0
        for p, w in zip(parts, widths):
            if p.requires_grad:
                _accum(p, g[..., off : off + w])
            off += w

    _record("concat", tuple(parts), out, backward)
    return out


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = _make(a.data * c)

    def backward(g):
        if a.requires_grad:
            _accum(a, g * c)

    _record("scale", (a,), out, backward)
    return out


# Registry used by generic gradient-property tests.
OPS = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "tanh": tanh,
    "exp": exp,
    "sum": sum_all,
    "slice": slice_cols,
    "concat": concat,
    "scale": scale,
}


def backward(loss: Tensor, graph: Graph) -> None:
    """Populate .grad on every requires-grad leaf reachable from `loss`.

    The graph is consumed; calling backward twice on it is an error.
    """
    if graph.consumed:
        raise GraphError("backward called twice on the same graph")
    if loss.shape != ():
        raise GraphError(f"loss must be scalar, got shape {loss.shape}")
    graph.consumed = True
    loss.grad = np.asarray(1.0)
    for _, _, out, backward_fn in reversed(graph.records):
        if out.grad is None:
            continue
        backward_fn(out.grad)
    graph.records.clear()


def finite_diff_grad(f: Callable[[np.ndarray], float], params: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function, coordinate by coordinate."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = np.asarray(params, dtype=np.float64)
    grad = np.zeros_like(params)
    flat = grad.reshape(-1)
    p = params.copy()
    pf = p.reshape(-1)
    for i in range(pf.size):
        orig = pf[i]
        pf[i] = orig + eps
        hi = f(p)
        pf[i] = orig - eps
        lo = f(p)
        pf[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NonFiniteError("function evaluation was non-finite during finite differences")
        flat[i] = (hi - lo) / (2.0 * eps)
    return grad


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    """Serialize: u32 rank, u32 per-dim sizes, then little-endian f64 data."""
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    header = struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.astype("<f8").tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Inverse of tensor_to_bytes; returns (array, next offset)."""
    (rank,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    dims = struct.unpack_from(f"<{rank}I", buf, offset)
    offset += 4 * rank
    n = int(np.prod(dims)) if rank else 1
    arr = np.frombuffer(buf, dtype="<f8", count=n, offset=offset).reshape(dims)
    offset += 8 * n
    return arr.astype(np.float64), offset
