"""Dense float64 tensors with a dynamic reverse-mode tape.

Each differentiable op records its inputs and the intermediates its
backward rule needs on the output tensor. Backward rules live in a registry
keyed by op name, which keeps them individually addressable for the gradient
checking suite.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, NumericalError, ShapeError

_BACKWARD: dict[str, Callable] = {}
_grad_enabled = True

_GELU_C = math.sqrt(2.0 / math.pi)


def backward_rule(name: str):
    def register(fn):
        _BACKWARD[name] = fn
        return fn

    return register


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "op", "inputs", "saved", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, *, op: str | None = None,
                 inputs: tuple = (), saved=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.op = op
        self.inputs = inputs
        self.saved = saved
        # leaves own a zeroed accumulator; tape nodes get one during backward
        self.grad = np.zeros_like(self.data) if (requires_grad and op is None) else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"expected a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}{tag})"

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

    def __getitem__(self, key):
        return index(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, inputs: tuple, saved=None) -> Tensor:
    if _grad_enabled and any(t.requires_grad for t in inputs):
        return Tensor(data, True, op=op, inputs=inputs, saved=saved)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_check(a: Tensor, b: Tensor, opname: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{opname}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# tape traversal


def _topological_order(root: Tensor) -> list[Tensor]:
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
        for inp in node.inputs:
            if inp.requires_grad and id(inp) not in seen:
                stack.append((inp, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(t) into ``t.grad`` for every tensor reachable from root."""
    if root.data.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    pending: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(_topological_order(root)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            node.grad += g
        if node.op is None:
            continue
        input_grads = _BACKWARD[node.op](node, g)
        for inp, ig in zip(node.inputs, input_grads):
            if ig is None or not inp.requires_grad:
                continue
            key = id(inp)
            pending[key] = pending[key] + ig if key in pending else ig


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "add")
    return _make(a.data + b.data, "add", (a, b))


@backward_rule("add")
def _add_back(out, g):
    a, b = out.inputs
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "sub")
    return _make(a.data - b.data, "sub", (a, b))


@backward_rule("sub")
def _sub_back(out, g):
    a, b = out.inputs
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "mul")
    return _make(a.data * b.data, "mul", (a, b))


@backward_rule("mul")
def _mul_back(out, g):
    a, b = out.inputs
    ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
    gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
    return ga, gb


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "div")
    return _make(a.data / b.data, "div", (a, b))


@backward_rule("div")
def _div_back(out, g):
    a, b = out.inputs
    ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
    gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
    return ga, gb


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * c, "scale", (a,), saved=float(c))


@backward_rule("scale")
def _scale_back(out, g):
    return (g * out.saved,)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, "neg", (a,))


@backward_rule("neg")
def _neg_back(out, g):
    return (-g,)


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading ones."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}") from None
    return _make(out, "matmul", (a, b))


@backward_rule("matmul")
def _matmul_back(out, g):
    a, b = out.inputs
    ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
    gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
    return ga, gb


# ---------------------------------------------------------------------------
# elementwise nonlinearities


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return _make(s, "sigmoid", (a,), saved=s)


@backward_rule("sigmoid")
def _sigmoid_back(out, g):
    s = out.saved
    return (g * s * (1.0 - s),)


def log_sigmoid(a) -> Tensor:
    """log(sigmoid(z)) evaluated as -softplus(-z)."""
    a = as_tensor(a)
    return _make(-np.logaddexp(0.0, -a.data), "log_sigmoid", (a,))


@backward_rule("log_sigmoid")
def _log_sigmoid_back(out, g):
    (a,) = out.inputs
    return (g * _sigmoid(-a.data),)


def softplus(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.logaddexp(0.0, a.data), "softplus", (a,))


@backward_rule("softplus")
def _softplus_back(out, g):
    (a,) = out.inputs
    return (g * _sigmoid(a.data),)


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    t = np.tanh(_GELU_C * (x + 0.044715 * x * x * x))
    return _make(0.5 * x * (1.0 + t), "gelu", (a,), saved=t)


@backward_rule("gelu")
def _gelu_back(out, g):
    (a,) = out.inputs
    x, t = a.data, out.saved
    dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)


# ---------------------------------------------------------------------------
# reductions and normalisers


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), "sum", (a,), saved=(axis, keepdims))


@backward_rule("sum")
def _sum_back(out, g):
    (a,) = out.inputs
    axis, keepdims = out.saved
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, a.shape),)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return _make(np.mean(a.data, axis=axis, keepdims=keepdims), "mean", (a,), saved=(axis, keepdims, n))


@backward_rule("mean")
def _mean_back(out, g):
    (a,) = out.inputs
    axis, keepdims, n = out.saved
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g / n, a.shape),)


def log_softmax(a) -> Tensor:
    """Max-shifted log-softmax over the last axis."""
    a = as_tensor(a)
    if a.ndim == 0 or a.shape[-1] < 1:
        raise ShapeError(f"log_softmax needs a non-empty last axis, got {a.shape}")
    if not np.all(np.isfinite(a.data)):
        raise NumericalError("log_softmax received non-finite logits")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return _make(out, "log_softmax", (a,))


@backward_rule("log_softmax")
def _log_softmax_back(out, g):
    return (g - np.exp(out.data) * g.sum(axis=-1, keepdims=True),)


def causal_softmax(a) -> Tensor:
    """Softmax over the last axis of square score blocks, masking keys after the query."""
    a = as_tensor(a)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ShapeError(f"causal_softmax needs square trailing axes, got {a.shape}")
    n = a.shape[-1]
    masked = np.where(np.triu(np.ones((n, n), dtype=bool), 1), -np.inf, a.data)
    e = np.exp(masked - masked.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)
    return _make(p, "causal_softmax", (a,))


@backward_rule("causal_softmax")
def _causal_softmax_back(out, g):
    p = out.data
    return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match {x.shape}")
    xc = x.data - x.data.mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    return _make(xhat * gain.data + bias.data, "layer_norm", (x, gain, bias), saved=(xhat, rstd))


@backward_rule("layer_norm")
def _layer_norm_back(out, g):
    x, gain, bias = out.inputs
    xhat, rstd = out.saved
    lead = tuple(range(g.ndim - 1))
    ggain = (g * xhat).sum(axis=lead) if gain.requires_grad else None
    gbias = g.sum(axis=lead) if bias.requires_grad else None
    gx = None
    if x.requires_grad:
        dxhat = g * gain.data
        gx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return gx, ggain, gbias


# ---------------------------------------------------------------------------
# indexing and layout


def gather_rows(table, idx) -> Tensor:
    """Embedding lookup: rows of a 2-D table selected by an integer array."""
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"gather_rows needs a 2-D table, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for table with {table.shape[0]} rows")
    return _make(table.data[idx], "gather_rows", (table,), saved=idx)


@backward_rule("gather_rows")
def _gather_rows_back(out, g):
    (table,) = out.inputs
    grad = np.zeros_like(table.data)
    np.add.at(grad, out.saved.reshape(-1), g.reshape(-1, table.shape[1]))
    return (grad,)


def pick(a, idx) -> Tensor:
    """Select one entry of the last axis per leading position: out[...] = a[..., idx[...]]."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != a.shape[:-1]:
        raise ShapeError(f"pick: index shape {idx.shape} does not match {a.shape[:-1]}")
    out = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]
    return _make(out, "pick", (a,), saved=idx)


@backward_rule("pick")
def _pick_back(out, g):
    (a,) = out.inputs
    grad = np.zeros_like(a.data)
    np.put_along_axis(grad, out.saved[..., None], g[..., None], axis=-1)
    return (grad,)


def index(a, key) -> Tensor:
    a = as_tensor(a)
    return _make(a.data[key], "index", (a,), saved=key)


@backward_rule("index")
def _index_back(out, g):
    (a,) = out.inputs
    grad = np.zeros_like(a.data)
    np.add.at(grad, out.saved, g)
    return (grad,)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _make(data, "reshape", (a,))


@backward_rule("reshape")
def _reshape_back(out, g):
    return (g.reshape(out.inputs[0].shape),)


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    return _make(np.transpose(a.data, axes), "transpose", (a,), saved=axes)


@backward_rule("transpose")
def _transpose_back(out, g):
    return (np.transpose(g, np.argsort(out.saved)),)


# ---------------------------------------------------------------------------
# finite differences


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def finite_diff_check(fn: Callable[[list[Tensor]], Tensor], params: Iterable[Tensor],
                      step: float = 1e-4, sample: int | None = None, seed: int = 0,
                      coords: Sequence[tuple[int, int]] | None = None) -> float:
    """Compare backward() against central differences and return the max relative error.

    ``fn`` maps the parameter list to a scalar tensor. ``coords`` restricts the
    probe to (param index, flat index) pairs; with ``sample`` set, a seeded
    random subset of at least 64 of them is probed instead of all.
    """
    if not step > 0:
        raise ContractError(f"finite-difference step must be positive, got {step}")
    params = list(params)
    for p in params:
        p.zero_grad()
    root = fn(params)
    if not np.all(np.isfinite(root.data)):
        raise NumericalError("function under check returned a non-finite value")
    backward(root)

    if coords is None:
        coords = [(i, j) for i, p in enumerate(params) for j in range(p.size)]
    coords = list(coords)
    if sample is not None and sample < len(coords):
        rng = np.random.default_rng(seed)
        pick_ids = np.sort(rng.choice(len(coords), size=max(sample, 64), replace=False))
        coords = [coords[c] for c in pick_ids]

    analytic = np.empty(len(coords))
    numeric = np.empty(len(coords))
    with no_grad():
        for n, (i, j) in enumerate(coords):
            flat = params[i].data.flat
            orig = flat[j]
            flat[j] = orig + step
            f_plus = fn(params).item()
            flat[j] = orig - step
            f_minus = fn(params).item()
            flat[j] = orig
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise NumericalError("function under check returned a non-finite value")
            numeric[n] = (f_plus - f_minus) / (2 * step)
            analytic[n] = params[i].grad.reshape(-1)[j]
    if not len(coords):
        return 0.0
    return float(relative_error(analytic, numeric).max())
