"""Dense tensors with tape-based reverse-mode differentiation.

Every op is a plain function taking :class:`Tensor` inputs. When a
:class:`Tape` is active and at least one input requires a gradient, the op
appends a node holding its backward rule; :func:`backward` replays the tape in
reverse. Outside a tape the ops are ordinary numpy computations, which is what
decoding uses.

Broadcasting is never implicit. The only shape-changing arithmetic is
:func:`add_bias` (row-vector bias) and the explicit :func:`tile_rows`.
"""

from __future__ import annotations

import threading
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import kernels


class ShapeError(ValueError):
    pass


class DegenerateInputError(ValueError):
    pass


class ContractError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


_debug = False


def set_debug(flag: bool) -> bool:
    """Enable finite-value checks on every op output and gradient."""
    global _debug
    prev, _debug = _debug, bool(flag)
    return prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return self.data.item()

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class Node(NamedTuple):
    inputs: tuple
    output: Tensor
    backward: Callable


_state = threading.local()


def current_tape():
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of differentiable ops; use as a context manager."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        if not hasattr(_state, "tapes"):
            _state.tapes = []
        _state.tapes.append(self)
        return self

    def __exit__(self, *exc):
        _state.tapes.pop()
        return False

    def __len__(self):
        return len(self.nodes)


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")


def _make(data, inputs, backward_fn, name=None):
    """Wrap an op result, recording it on the active tape when needed."""
    if _debug:
        _check_finite(data, name or "op output")
    out = Tensor(data, name=name)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(Node(tuple(inputs), out, backward_fn))
    return out


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def backward(loss: Tensor, tape: Tape, params: Sequence[Tensor] | None = None):
    """Populate ``.grad`` of everything reachable from ``loss`` on ``tape``.

    When ``params`` is given their gradients are reset to zero first, so a
    parameter the loss never touched ends with an all-zero gradient.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if params is not None:
        for p in params:
            p.zero_grad()
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        gout = node.output.grad
        if gout is None:
            continue
        grads = node.backward(gout)
        for inp, g in zip(node.inputs, grads):
            if g is None or not inp.requires_grad:
                continue
            if _debug:
                _check_finite(g, f"gradient of {inp!r}")
            if inp.grad is None:
                inp.grad = np.array(g, dtype=inp.dtype, copy=True).reshape(inp.shape)
            else:
                inp.grad += g


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, Bm = a.data, b.data
    return _make(A @ Bm, (a, b), lambda g: (g @ Bm.T, A.T @ g))


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got {x.shape}")
    return _make(x.data.T.copy(), (x,), lambda g: (g.T,))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    A, Bv = a.data, b.data
    return _make(A * Bv, (a, b), lambda g: (g * Bv, g * A))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    y = kernels._fallback._sigmoid(x.data)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * pos,))


_ELEMENTWISE = {"tanh": tanh, "sigmoid": sigmoid, "add": add, "mul": mul, "sub": sub}


def elementwise(op: str, *operands: Tensor) -> Tensor:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*operands)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x + b`` with ``b`` a vector matching the last axis of ``x``."""
    if b.data.ndim != 1 or x.shape[-1:] != b.shape:
        raise ShapeError(f"add_bias: bias {b.shape} does not match rows of {x.shape}")
    lead = tuple(range(x.data.ndim - 1))
    return _make(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)))


def scale(x: Tensor, c: float) -> Tensor:
    return _make(x.data * c, (x,), lambda g: (g * c,))


def mul_const(x: Tensor, m) -> Tensor:
    """Multiply by a constant array of identical shape (dropout masks, weights)."""
    m = np.asarray(m, dtype=x.dtype)
    if m.shape != x.shape:
        raise ShapeError(f"mul_const: shapes {x.shape} and {m.shape} differ")
    return _make(x.data * m, (x,), lambda g: (g * m,))


def tile_rows(v: Tensor, n: int) -> Tensor:
    """Stack ``n`` copies of vector ``v`` into an ``[n, d]`` matrix."""
    if v.data.ndim != 1:
        raise ShapeError(f"tile_rows: expected a vector, got {v.shape}")
    return _make(np.tile(v.data, (n, 1)), (v,), lambda g: (g.sum(axis=0),))


# ---------------------------------------------------------------- reductions


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return _make(np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.full(shape, g, dtype=g.dtype),))


def sum_rows(x: Tensor) -> Tensor:
    """Sum over the last axis."""
    shape = x.shape
    return _make(x.data.sum(axis=-1), (x,), lambda g: (np.broadcast_to(g[..., None], shape),))


def dot(a: Tensor, b: Tensor) -> Tensor:
    return sum(mul(a, b))


def softmax_row(x: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    if x.shape[-1] < 1:
        raise ShapeError("softmax_row: empty input")
    e = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), bw)


def log_softmax_rows(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _make(y, (x,), bw)


def masked_mean(h: Tensor, mask) -> Tensor:
    """Mean over rows of ``h`` where ``mask`` is 1.

    Accepts ``h [N, d]`` with ``mask [N]`` or a batch ``h [B, N, d]`` with
    ``mask [B, N]``. Rows with mask 0 get zero weight and zero gradient.
    """
    m = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=h.dtype)
    if m.shape != h.shape[:-1]:
        raise ShapeError(f"masked_mean: mask {m.shape} does not match states {h.shape}")
    counts = m.sum(axis=-1, keepdims=True)
    if np.any(counts == 0):
        raise DegenerateInputError("masked_mean: mask selects no rows")
    w = m / counts
    out = np.einsum("...n,...nd->...d", w, h.data)
    return _make(out, (h,), lambda g: (w[..., None] * g[..., None, :],))


def nll_rows(logits: Tensor, targets, weights) -> Tensor:
    """``-sum_b weights[b] * log softmax(logits[b])[targets[b]]`` as a scalar."""
    targets = np.asarray(targets)
    w = np.asarray(weights, dtype=logits.dtype)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=-1, keepdims=True)
    logp = z - np.log(s)
    rows = np.arange(len(targets))
    loss = -(w * logp[rows, targets]).sum()

    def bw(g):
        gl = e / s
        gl[rows, targets] -= 1.0
        return (gl * (w * g)[:, None],)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), bw)


def l2_normalize_rows(x: Tensor) -> Tensor:
    n = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    if np.any(n == 0):
        raise DegenerateInputError("l2_normalize_rows: zero-norm vector, cosine undefined")
    y = x.data / n

    def bw(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / n,)

    return _make(y, (x,), bw)


# ---------------------------------------------------------------- structure


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    data = np.concatenate([p.data for p in parts], axis=axis)
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _make(data, tuple(parts), lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    data = np.stack([p.data for p in parts], axis=axis)
    n = len(parts)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _make(data, tuple(parts), bw)


def embedding(table: Tensor, ids) -> Tensor:
    """Rows of ``table`` selected by integer ``ids`` (any shape)."""
    ids = np.asarray(ids, dtype=np.int64)
    shape = table.shape

    def bw(g):
        gt = np.zeros(shape, dtype=g.dtype)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (gt,)

    return _make(table.data[ids], (table,), bw)


# ---------------------------------------------------------------- fused kernels


def gru_step(h_prev: Tensor, x: Tensor, W: Tensor, U: Tensor, b: Tensor, mask=None, rmask=None) -> Tensor:
    """One GRU step; rows where ``mask`` is 0 pass ``h_prev`` through.

    ``z = σ(xW_z + hU_z + b_z)``, ``r = σ(xW_r + hU_r + b_r)``,
    ``h̃ = tanh(xW_h + (r⊙h)U_h + b_h)``, ``h' = (1−z)⊙h + z⊙h̃``.
    """
    Bn, H = h_prev.shape
    if x.data.ndim != 2 or x.shape[0] != Bn or W.shape != (x.shape[1], 3 * H) or U.shape != (H, 3 * H) or b.shape != (3 * H,):
        raise ShapeError(
            f"gru_step: h {h_prev.shape}, x {x.shape}, W {W.shape}, U {U.shape}, b {b.shape} are inconsistent"
        )
    dt = h_prev.dtype
    m = np.ones(Bn, dtype=dt) if mask is None else np.asarray(mask, dtype=dt)
    rm = np.ones((Bn, H), dtype=dt) if rmask is None else np.asarray(rmask, dtype=dt)
    h, cache = kernels.gru_forward(h_prev.data, x.data, m, W.data, U.data, b.data, rm)
    hp, xd, Wd, Ud = h_prev.data, x.data, W.data, U.data

    def bw(g):
        return kernels.gru_backward(g, hp, xd, m, Wd, Ud, rm, cache)

    return _make(h, (h_prev, x, W, U, b), bw)


def attention(d_prev: Tensor, keys: Tensor, Wa: Tensor, va: Tensor, hs: Tensor, mask):
    """Additive attention; returns ``(context, weights)``.

    ``keys`` is ``hs`` projected by the key matrix, ``[B, N, A]``. The weights
    come back as a plain array; they are not differentiated through.
    """
    m = np.asarray(mask, dtype=d_prev.dtype)
    if m.shape != hs.shape[:2] or keys.shape[:2] != hs.shape[:2] or Wa.shape != (d_prev.shape[1], keys.shape[2]):
        raise ShapeError(
            f"attention: d {d_prev.shape}, keys {keys.shape}, Wa {Wa.shape}, states {hs.shape}, mask {m.shape}"
        )
    if np.any(m.sum(axis=1) == 0):
        raise DegenerateInputError("attention: every source position is masked")
    ctx, alpha, t = kernels.attention_forward(d_prev.data, keys.data, Wa.data, va.data, hs.data, m)
    dd, Wd, vd, hd = d_prev.data, Wa.data, va.data, hs.data

    def bw(g):
        return kernels.attention_backward(g, dd, Wd, vd, hd, alpha, t)

    return _make(ctx, (d_prev, keys, Wa, va, hs), bw), alpha
