"""Dense float64 matrices with a reverse-mode gradient tape.

Every model in this package (both transformer branches, the graph teacher,
the distillation losses) is assembled from the operations below. Tensors are
two-dimensional throughout: row vectors are 1 x n and scalars are 1 x 1.

Two properties are enforced globally:

* Finiteness. Each forward operation checks its output and raises
  ``NumericsError`` on overflow instead of letting inf/NaN leak into a
  training step.
* Permutation stability. Reductions that run across token rows
  (``softmax_rows`` row sums, ``attend``, ``mean_rows``) accumulate in a
  value-sorted order, so permuting token rows permutes the results
  bit-for-bit. Feature-axis reductions keep ordinary (faster) summation.
"""

from __future__ import annotations

import struct
import threading
from typing import Callable, Iterable, Mapping

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "no_grad",
    "ShapeError",
    "NumericsError",
    "matmul",
    "block_matmul",
    "attend",
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "add_bias",
    "relu",
    "sigmoid",
    "tanh",
    "concat_cols",
    "transpose",
    "mean_rows",
    "repeat_rows",
    "sum_all",
    "mse",
    "softmax_rows",
    "layer_norm",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_bytes",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericsError(ArithmeticError):
    """A forward value or a gradient left the finite range."""


def _as_matrix(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"tensors are 2-D matrices, got shape {arr.shape}")
    return arr


class Tensor:
    """A 2-D float64 array plus a lazily allocated gradient of the same shape.

    The constructor does not copy arrays that are already float64 matrices;
    callers that reuse buffers should pass a copy.
    """

    __slots__ = ("data", "grad")

    def __init__(self, data):
        self.data = _as_matrix(data)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data[0, 0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, grad={'set' if self.grad is not None else 'none'})"


# ---------------------------------------------------------------------------
# tape


_TLS = threading.local()


def _tape_stack() -> list:
    stack = getattr(_TLS, "stack", None)
    if stack is None:
        stack = []
        _TLS.stack = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Define-by-run operation record, replayed in reverse by :meth:`backward`.

    Records are appended in creation order, which is a topological order by
    construction. ``backward`` resets the gradients of every tensor produced
    on this tape, seeds the loss with 1, and visits each record exactly once
    in reverse; leaf gradients accumulate across calls until the caller
    zeroes them.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _tape_stack().pop()
        return False

    def __len__(self) -> int:
        return len(self._records)

    def record(self, out: Tensor, backward: Callable[[np.ndarray], None]) -> None:
        self._records.append((out, backward))

    def backward(self, loss: Tensor) -> None:
        if loss.data.shape != (1, 1):
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        for out, _ in self._records:
            out.grad = None
        loss.grad = np.ones((1, 1))
        for out, backward in reversed(self._records):
            upstream = out.grad
            if upstream is None:
                continue
            backward(upstream)


class _NoGrad:
    """Context manager that suspends recording on any active tape."""

    def __enter__(self):
        _tape_stack().append(None)
        return self

    def __exit__(self, *exc) -> bool:
        _tape_stack().pop()
        return False


def no_grad() -> _NoGrad:
    return _NoGrad()


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    """Accumulate a gradient the closure may not own (copied on first use)."""
    if t.grad is None:
        t.grad = np.array(g)
    else:
        t.grad += g


def _accumulate_owned(t: Tensor, g: np.ndarray) -> None:
    """Accumulate a freshly computed gradient array owned by the caller."""
    if t.grad is None:
        t.grad = g
    else:
        t.grad += g


def _check_finite(arr: np.ndarray) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NumericsError("non-finite value produced in forward pass")
    return arr


# ---------------------------------------------------------------------------
# permutation-stable reductions

# Summing a sorted copy makes the result a function of the value multiset
# only, so reordering the reduced axis cannot flip the last ulp.


def _sorted_rowsum(arr: np.ndarray) -> np.ndarray:
    return np.sort(arr, axis=1).sum(axis=1, keepdims=True)


def _sorted_colsum(arr: np.ndarray) -> np.ndarray:
    return np.sort(arr, axis=0).sum(axis=0, keepdims=True)


# ---------------------------------------------------------------------------
# operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Standard matrix product a @ b."""
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul {a.shape} @ {b.shape}: inner dimensions differ")
    out = Tensor(_check_finite(a.data @ b.data))
    tape = active_tape()
    if tape is not None:
        def backward(g, a=a, b=b):
            _accumulate_owned(a, g @ b.data.T)
            _accumulate_owned(b, a.data.T @ g)
        tape.record(out, backward)
    return out


def block_matmul(mat: np.ndarray, x: Tensor, block_rows: int) -> Tensor:
    """Left-multiply each consecutive ``block_rows``-row block of x by ``mat``.

    ``mat`` is a constant square matrix (no gradient), so stacking many
    same-shaped samples row-wise lets one call apply it to all of them;
    the graph teacher's training path uses this to mix every window of a
    batch across the road network at once.
    """
    rows, cols = x.data.shape
    if mat.shape != (block_rows, block_rows) or rows % block_rows != 0:
        raise ShapeError(
            f"block_matmul: matrix {mat.shape} does not tile rows {rows} in blocks of {block_rows}"
        )
    blocks = rows // block_rows
    stacked = x.data.reshape(blocks, block_rows, cols)
    out_data = np.matmul(mat, stacked).reshape(rows, cols)
    out = Tensor(_check_finite(out_data))
    tape = active_tape()
    if tape is not None:
        def backward(g, x=x, mat=mat, blocks=blocks, block_rows=block_rows, cols=cols):
            g3 = g.reshape(blocks, block_rows, cols)
            _accumulate_owned(x, np.matmul(mat.T, g3).reshape(blocks * block_rows, cols))
        tape.record(out, backward)
    return out


def attend(weights: Tensor, values: Tensor) -> Tensor:
    """Matrix product specialised for attention application.

    Numerically equal to ``matmul(weights, values)`` but accumulated over the
    shared (token) axis in value-sorted order, so a simultaneous permutation
    of weight rows/columns and value rows permutes the output bit-exactly.
    """
    if weights.data.shape[1] != values.data.shape[0]:
        raise ShapeError(f"attend {weights.shape} @ {values.shape}: inner dimensions differ")
    prod = weights.data[:, :, None] * values.data[None, :, :]
    prod.sort(axis=1)
    out = Tensor(_check_finite(prod.sum(axis=1)))
    tape = active_tape()
    if tape is not None:
        def backward(g, w=weights, v=values):
            _accumulate_owned(w, g @ v.data.T)
            _accumulate_owned(v, w.data.T @ g)
        tape.record(out, backward)
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op} needs equal shapes, got {a.shape} and {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    out = Tensor(_check_finite(a.data + b.data))
    tape = active_tape()
    if tape is not None:
        def backward(g, a=a, b=b):
            _accumulate(a, g)
            _accumulate(b, g)
        tape.record(out, backward)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    out = Tensor(_check_finite(a.data - b.data))
    tape = active_tape()
    if tape is not None:
        def backward(g, a=a, b=b):
            _accumulate(a, g)
            _accumulate_owned(b, -g)
        tape.record(out, backward)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product."""
    _same_shape(a, b, "mul")
    out = Tensor(_check_finite(a.data * b.data))
    tape = active_tape()
    if tape is not None:
        def backward(g, a=a, b=b):
            _accumulate_owned(a, g * b.data)
            _accumulate_owned(b, g * a.data)
        tape.record(out, backward)
    return out


def scale(a: Tensor, factor: float) -> Tensor:
    out = Tensor(_check_finite(a.data * factor))
    tape = active_tape()
    if tape is not None:
        def backward(g, a=a, factor=factor):
            _accumulate_owned(a, g * factor)
        tape.record(out, backward)
    return out


def add_scalar(a: Tensor, value: float) -> Tensor:
    out = Tensor(_check_finite(a.data + value))
    tape = active_tape()
    if tape is not None:
        def backward(g, a=a):
            _accumulate(a, g)
        tape.record(out, backward)
    return out


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a 1 x n row vector to every row of x (the one permitted broadcast)."""
    if bias.data.shape != (1, x.data.shape[1]):
        raise ShapeError(f"add_bias: bias {bias.shape} does not match rows of {x.shape}")
    out = Tensor(_check_finite(x.data + bias.data))
    tape = active_tape()
    if tape is not None:
        def backward(g, x=x, bias=bias):
            _accumulate(x, g)
            _accumulate_owned(bias, g.sum(axis=0, keepdims=True))
        tape.record(out, backward)
    return out


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0))
    tape = active_tape()
    if tape is not None:
        def backward(g, a=a):
            _accumulate_owned(a, g * (a.data > 0.0))
        tape.record(out, backward)
    return out


def sigmoid(a: Tensor) -> Tensor:
    d = a.data
    e = np.exp(-np.abs(d))
    out_data = np.where(d >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None:
        def backward(g, a=a, y=out_data):
            _accumulate_owned(a, g * y * (1.0 - y))
        tape.record(out, backward)
    return out


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None:
        def backward(g, a=a, y=out_data):
            _accumulate_owned(a, g * (1.0 - y * y))
        tape.record(out, backward)
    return out


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[0] != b.data.shape[0]:
        raise ShapeError(f"concat_cols needs equal row counts, got {a.shape} and {b.shape}")
    split = a.data.shape[1]
    out = Tensor(np.concatenate([a.data, b.data], axis=1))
    tape = active_tape()
    if tape is not None:
        def backward(g, a=a, b=b, split=split):
            _accumulate(a, g[:, :split])
            _accumulate(b, g[:, split:])
        tape.record(out, backward)
    return out


def transpose(a: Tensor) -> Tensor:
    out = Tensor(a.data.T)
    tape = active_tape()
    if tape is not None:
        def backward(g, a=a):
            _accumulate(a, g.T)
        tape.record(out, backward)
    return out


def mean_rows(a: Tensor) -> Tensor:
    """Column means as a 1 x n row; stable under any row permutation."""
    m = a.data.shape[0]
    out = Tensor(_check_finite(_sorted_colsum(a.data) / m))
    tape = active_tape()
    if tape is not None:
        def backward(g, a=a, m=m):
            _accumulate(a, np.broadcast_to(g / m, a.data.shape))
        tape.record(out, backward)
    return out


def repeat_rows(v: Tensor, count: int) -> Tensor:
    """Tile a 1 x n row vector into count identical rows."""
    if v.data.shape[0] != 1:
        raise ShapeError(f"repeat_rows needs a 1 x n row, got {v.shape}")
    out = Tensor(np.repeat(v.data, count, axis=0))
    tape = active_tape()
    if tape is not None:
        def backward(g, v=v):
            _accumulate_owned(v, g.sum(axis=0, keepdims=True))
        tape.record(out, backward)
    return out


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(_check_finite(np.array([[a.data.sum()]])))
    tape = active_tape()
    if tape is not None:
        def backward(g, a=a):
            _accumulate_owned(a, np.full(a.data.shape, g[0, 0]))
        tape.record(out, backward)
    return out


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared difference over all entries, as a 1 x 1 scalar."""
    _same_shape(a, b, "mse")
    diff = a.data - b.data
    n = diff.size
    out = Tensor(_check_finite(np.array([[np.mean(diff * diff)]])))
    tape = active_tape()
    if tape is not None:
        def backward(g, a=a, b=b, diff=diff, n=n):
            grad = (2.0 / n) * g[0, 0] * diff
            _accumulate_owned(a, grad)
            _accumulate_owned(b, -grad)
        tape.record(out, backward)
    return out


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with per-row max subtraction for stability."""
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / _sorted_rowsum(e)
    out = Tensor(_check_finite(y))
    tape = active_tape()
    if tape is not None:
        def backward(g, x=x, y=y):
            inner = (g * y).sum(axis=1, keepdims=True)
            _accumulate_owned(x, y * (g - inner))
        tape.record(out, backward)
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalisation to zero mean / unit variance, then affine.

    Uses the population variance; constant rows are handled by eps in the
    denominator and normalise to the bias.
    """
    d = x.data.shape[1]
    if gain.data.shape != (1, d) or bias.data.shape != (1, d):
        raise ShapeError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match width {d}"
        )
    mu = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mu
    var = np.mean(centered * centered, axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = Tensor(_check_finite(xhat * gain.data + bias.data))
    tape = active_tape()
    if tape is not None:
        def backward(g, x=x, gain=gain, bias=bias, centered=centered, inv=inv, xhat=xhat, d=d):
            _accumulate_owned(gain, (g * xhat).sum(axis=0, keepdims=True))
            _accumulate_owned(bias, g.sum(axis=0, keepdims=True))
            dxhat = g * gain.data
            dvar = (dxhat * centered).sum(axis=1, keepdims=True) * (-0.5) * inv ** 3
            dmu = -(dxhat.sum(axis=1, keepdims=True)) * inv + dvar * (
                -2.0 * centered.mean(axis=1, keepdims=True)
            )
            dx = dxhat * inv + dvar * (2.0 / d) * centered + dmu / d
            _accumulate_owned(x, dx)
        tape.record(out, backward)
    return out


# ---------------------------------------------------------------------------
# checkpoint container
#
# Layout (all integers little-endian):
#   bytes 0..3   magic b"TCKP"
#   byte  4      format version (currently 1)
#   bytes 5..8   uint32 record count
#   per record:
#     uint16 name length, then that many UTF-8 name bytes
#     uint8  ndim, then ndim x uint32 extents
#     prod(extents) x float64 values, row-major
#
# Record order is the iteration order of the mapping passed in, so a model's
# stable parameter ordering makes the file bytes reproducible.

_MAGIC = b"TCKP"
_VERSION = 1


def checkpoint_bytes(params: Mapping[str, "Tensor | np.ndarray"]) -> bytes:
    chunks = [_MAGIC, struct.pack("<B", _VERSION), struct.pack("<I", len(params))]
    for name, value in params.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(chunks)


def save_checkpoint(path, params: Mapping[str, "Tensor | np.ndarray"]) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(params))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    version = blob[4]
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (count,) = struct.unpack_from("<I", blob, 5)
    offset = 9
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        ndim = blob[offset]
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, offset)
        offset += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=offset).reshape(shape)
        offset += 8 * size
        params[name] = arr.astype(np.float64)
    return params
