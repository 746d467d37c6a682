"""Dense tensors with tape-based reverse-mode differentiation, plus Adam.

Operations record themselves on the active :class:`Tape` when at least one
input requires a gradient. Outside a tape nothing is recorded, which doubles
as the inference ("no grad") mode.

Example:
    >>> w = Tensor(np.ones((2, 2)), requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (w @ w).sum()
    ...     tape.backward(loss)
    >>> w.grad
    array([[4., 4.],
           [4., 4.]])
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float64
NLL_FLOOR = 1e-12


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateInputError(ValueError):
    """A norm that must be nonzero is zero."""


class ConfigError(ValueError):
    """An operation was configured with an invalid setting."""


class Tensor:
    """A dense array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def _accumulate_at(self, index, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad[index] += g

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


@dataclass
class _Node:
    inputs: tuple
    output: Tensor
    backward: object


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations executed inside the ``with`` block
    are recorded, and :meth:`backward` replays them in reverse. Tapes nest:
    the innermost active tape receives new records. Each thread has its own
    stack of active tapes.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, inputs, output: Tensor, backward) -> None:
        self.nodes.append(_Node(tuple(inputs), output, backward))

    def backward(self, loss: Tensor) -> None:
        """Populate ``.grad`` on every tracked tensor reachable from ``loss``.

        Gradients accumulate across calls; call :func:`zero_grads` (or
        ``Tensor.zero_grad``) between independent passes.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss._accumulate(np.ones_like(loss.data))
        for node in reversed(self.nodes):
            g = node.output.grad
            if g is None:
                continue
            node.backward(g)
        # recorded outputs are intermediates; only leaves keep their grads
        for node in self.nodes:
            node.output.grad = None


_local = threading.local()


def _tape_stack() -> list[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def _active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def backward(loss: Tensor, tape: Tape) -> None:
    """Functional alias for :meth:`Tape.backward`."""
    tape.backward(loss)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, inputs, backward_fn) -> Tensor:
    """Wrap an op result and record it if any input is tracked."""
    tracked = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=tracked)
    if tracked:
        tape = _active_tape()
        if tape is not None:
            tape.record(inputs, out, backward_fn)
        else:
            out.requires_grad = False
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw)


def where(mask: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where ``mask`` is true, else ``b`` (mask is a constant)."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.where(mask, g, 0.0), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.where(mask, 0.0, g), b.shape))

    return _make(np.where(mask, a.data, b.data), (a, b), bw)


def matmul(a, b) -> Tensor:
    """Matrix product of two 2-D tensors (a 1-D ``a`` is treated as a row)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            if a.ndim == 1:
                b._accumulate(np.outer(a.data, g))
            else:
                b._accumulate(a.data.T @ g)

    return _make(a.data @ b.data, (a, b), bw)


# ---------------------------------------------------------------------------
# nonlinearities


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)

    def bw(g):
        x._accumulate(g * (1.0 - y * y))

    return _make(y, (x,), bw)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def bw(g):
        x._accumulate(g * y * (1.0 - y))

    return _make(y, (x,), bw)


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0

    def bw(g):
        x._accumulate(g * pos)

    return _make(np.where(pos, x.data, 0.0), (x,), bw)


def identity(x) -> Tensor:
    return as_tensor(x)


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)

    def bw(g):
        x._accumulate(g * y)

    return _make(y, (x,), bw)


def log(x) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        x._accumulate(g / x.data)

    return _make(np.log(x.data), (x,), bw)


def softmax(v) -> Tensor:
    """Softmax along the last axis, with max subtraction."""
    v = as_tensor(v)
    if v.ndim == 0 or v.shape[-1] == 0:
        raise ShapeError(f"softmax needs a non-empty last axis, got shape {v.shape}")
    z = v.data - v.data.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    y = ez / ez.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        v._accumulate(y * (g - dot))

    return _make(y, (v,), bw)


def cosine_rows(E, e) -> Tensor:
    """Cosine similarity between each row of ``E`` and the query ``e``.

    ``E`` is ``N x k``. ``e`` is a ``k``-vector (result: ``N``) or a
    ``M x k`` stack of queries (result: ``M x N``). No epsilon is added to
    the norms; any zero-norm row or query raises :class:`DegenerateInputError`.
    """
    E, e = as_tensor(E), as_tensor(e)
    if E.ndim != 2 or e.ndim not in (1, 2) or e.shape[-1] != E.shape[1]:
        raise ShapeError(f"cosine_rows shape mismatch: E {E.shape}, query {e.shape}")
    single = e.ndim == 1
    Q = e.data[None, :] if single else e.data
    En = np.sqrt((E.data * E.data).sum(axis=1))
    Qn = np.sqrt((Q * Q).sum(axis=1))
    if np.any(En == 0.0):
        bad = np.flatnonzero(En == 0.0).tolist()
        raise DegenerateInputError(f"zero-norm rows in entity matrix: {bad}")
    if np.any(Qn == 0.0):
        raise DegenerateInputError("zero-norm query vector")
    Eu = E.data / En[:, None]
    Qu = Q / Qn[:, None]
    C = Qu @ Eu.T  # M x N

    def bw(g):
        G = g[None, :] if single else g
        if E.requires_grad:
            # d cos_mj / d E_j = (q_m/|q_m| - cos_mj * E_j/|E_j|) / |E_j|
            dE = (G.T @ Qu - (G * C).sum(axis=0)[:, None] * Eu) / En[:, None]
            E._accumulate(dE)
        if e.requires_grad:
            dQ = (G @ Eu - (G * C).sum(axis=1)[:, None] * Qu) / Qn[:, None]
            e._accumulate(dQ[0] if single else dQ)

    return _make(C[0] if single else C, (E, e), bw)


def dropout(x, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; the identity when not training or when ``rate == 0``."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    keep = rng.random(x.shape) >= rate
    scale = keep / (1.0 - rate)

    def bw(g):
        x._accumulate(g * scale)

    return _make(x.data * scale, (x,), bw)


def nll_loss(o, gold, floor: float = NLL_FLOOR) -> Tensor:
    """Negative log-likelihood of gold classes under probability vectors.

    ``o`` is an ``n``-vector with an integer ``gold`` (scalar result), or an
    ``M x n`` matrix with an ``M``-vector of gold indices (``M``-vector
    result). The gold probability is clamped at ``floor`` before the log.
    """
    o = as_tensor(o)
    gold_arr = np.asarray(gold)
    n = o.shape[-1]
    if np.any(gold_arr < 0) or np.any(gold_arr >= n):
        raise IndexError(f"gold index out of range [0, {n}): {gold_arr.tolist()}")
    if o.ndim == 1:
        idx = (int(gold_arr),)
    else:
        if gold_arr.shape != (o.shape[0],):
            raise ShapeError(f"gold shape {gold_arr.shape} does not match {o.shape}")
        idx = (np.arange(o.shape[0]), gold_arr)
    p = o.data[idx]
    clamped = p < floor
    out = -np.log(np.maximum(p, floor))

    def bw(g):
        grad = np.zeros_like(o.data)
        grad[idx] = np.where(clamped, 0.0, -g / np.maximum(p, floor))
        o._accumulate(grad)

    return _make(out, (o,), bw)


# ---------------------------------------------------------------------------
# reductions and structural ops


def tsum(x) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        x._accumulate(np.broadcast_to(g, x.shape))

    return _make(np.asarray(x.data.sum()), (x,), bw)


def tmean(x) -> Tensor:
    x = as_tensor(x)
    n = x.data.size

    def bw(g):
        x._accumulate(np.broadcast_to(g / n, x.shape))

    return _make(np.asarray(x.data.mean()), (x,), bw)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        x._accumulate(g.reshape(x.shape))

    return _make(x.data.reshape(shape), (x,), bw)


def getitem(x, index) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        x._accumulate_at(index, g)

    return _make(x.data[index], (x,), bw)


def gather_rows(W, rows) -> Tensor:
    """Rows of ``W`` selected by an integer array (embedding lookup)."""
    W = as_tensor(W)
    rows = np.asarray(rows, dtype=np.intp)

    def bw(g):
        if W.grad is None:
            W.grad = np.zeros_like(W.data)
        np.add.at(W.grad, rows.reshape(-1), g.reshape(-1, W.shape[1]))

    return _make(W.data[rows], (W,), bw)


def bag_sum(W, n_out: int, out_rows, w_rows) -> Tensor:
    """Sum rows of ``W`` into ``n_out`` output rows.

    Output row ``out_rows[j]`` receives ``W[w_rows[j]]`` for every ``j``;
    rows that receive nothing are zero. This realizes a sum of embeddings
    over a set of indices per position.
    """
    W = as_tensor(W)
    out_rows = np.asarray(out_rows, dtype=np.intp)
    w_rows = np.asarray(w_rows, dtype=np.intp)
    out = np.zeros((n_out, W.shape[1]), dtype=DTYPE)
    np.add.at(out, out_rows, W.data[w_rows])

    def bw(g):
        if W.grad is None:
            W.grad = np.zeros_like(W.data)
        np.add.at(W.grad, w_rows, g[out_rows])

    return _make(out, (W,), bw)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def bw(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accumulate(np.take(g, i, axis=axis))

    return _make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), bw)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """Moment estimates for a named set of parameters."""

    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update, applied to ``params`` in place.

    Parameters absent from ``grads`` (or with a ``None`` gradient) are
    treated as having a zero gradient.
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is not None and g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        if name in state.m and state.m[name].shape != p.shape:
            raise ShapeError(f"moment for {name!r} has shape {state.m[name].shape}, parameter {p.shape}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
    return params
