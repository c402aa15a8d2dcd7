"""Dense tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Operations on tensors that require
gradients record a :class:`ComputeNode`; :meth:`Tensor.backward` walks the
recorded graph once in reverse topological order.

Broadcasting follows numpy's trailing-dimension rule: shapes are aligned at
their last axis and an extent of 1 (or a missing leading axis) stretches.
Anything else needs an explicit ``reshape``/``broadcast_to``.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, DomainError, GraphError, NumericError, ShapeError

_state = {"dtype": np.dtype(np.float32), "grad": True, "check_finite": True}


def get_default_dtype() -> np.dtype:
    return _state["dtype"]


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported element type {dtype}; use float32 or float64")
    _state["dtype"] = dtype


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    old = _state["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    old = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = old


def is_grad_enabled() -> bool:
    return _state["grad"]


def _check_finite(arr: np.ndarray, op: str) -> None:
    if _state["check_finite"] and not np.isfinite(arr).all():
        raise NumericError(f"non-finite value produced by {op}")


class ComputeNode:
    """One recorded operation: its tag, inputs and backward rule."""

    __slots__ = ("op", "inputs", "backward_fn", "consumed")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.consumed = False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            is_float = isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64)
            dtype = data.dtype if is_float else _state["dtype"]
        arr = np.array(data, dtype=dtype)
        if any(d == 0 for d in arr.shape):
            raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
        _check_finite(arr, "construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: ComputeNode | None = None
        self.name = name

    # -- properties -----------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # -- autograd -------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every ``requires_grad`` leaf."""
        if self.data.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {self.shape}")
        if self.node is None:
            if self.requires_grad:
                self._accumulate(np.ones_like(self.data))
            return
        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for t in order:
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t.node is None:
                t._accumulate(g)
                continue
            node = t.node
            node.consumed = True
            for inp, ig in zip(node.inputs, node.backward_fn(g)):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig

    def _accumulate(self, g: np.ndarray) -> None:
        g = np.asarray(g, dtype=self.data.dtype)
        if g.shape != self.shape:
            raise GraphError(f"gradient shape {g.shape} does not match {self.shape}")
        self.grad = np.array(g) if self.grad is None else self.grad + g

    # -- operator sugar -------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def _not_scalar(t: Tensor):
    raise GraphError(f"item() needs a single-element tensor, got shape {t.shape}")


def _topological_order(root: Tensor) -> list[Tensor]:
    """Reverse topological order (root first); each tensor appears once."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t.node is not None and t.node.consumed:
            raise GraphError(
                "graph already consumed by a previous backward(); rebuild it with a new forward pass"
            )
        stack.append((t, True))
        if t.node is not None:
            for inp in t.node.inputs:
                if inp.requires_grad and id(inp) not in seen:
                    stack.append((inp, False))
    order.reverse()
    return order


def _make(data: np.ndarray, inputs: tuple, backward_fn: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.node = None
    rg = _state["grad"] and any(t.requires_grad for t in inputs)
    out.requires_grad = rg
    if rg:
        out.node = ComputeNode(op, inputs, backward_fn)
    return out


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or _state["dtype"]), dtype=dtype)


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of trailing-dimension broadcast)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None


# -- elementwise ----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "add")

    def back(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "sub")

    def back(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "mul")

    def back(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), back, "mul")


hadamard = mul


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "div")
    if np.any(b.data == 0):
        raise DomainError("division by zero")

    def back(g):
        return unbroadcast(g / b.data, a.shape), unbroadcast(-g * a.data / (b.data * b.data), b.shape)

    return _make(a.data / b.data, (a, b), back, "div")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log of non-positive value")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    if not p.is_integer() and np.any(a.data <= 0):
        raise DomainError(f"non-integer power {p} of non-positive value")
    if p < 0 and np.any(a.data == 0):
        raise DomainError("negative power of zero")

    def back(g):
        return (g * p * a.data ** (p - 1),)

    return _make(a.data**p, (a,), back, "pow")


def gelu(a: Tensor) -> Tensor:
    """tanh approximation of the Gaussian error linear unit."""
    c = float(np.sqrt(2.0 / np.pi))
    x = a.data
    x2 = x * x
    t = np.tanh(c * x * (1.0 + 0.044715 * x2))

    def back(g):
        dt = (1.0 - t * t) * c * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return _make(0.5 * x * (1.0 + t), (a,), back, "gelu")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


_BINARY = {"add": add, "sub": sub, "mul": mul, "hadamard": mul, "div": div}
_UNARY = {"exp": exp, "log": log, "neg": neg}


def elementwise(op_tag: str, a, b=None) -> Tensor:
    """Dispatch an element-wise operation by tag (add/sub/mul/div/exp/log)."""
    if op_tag in _BINARY:
        if b is None:
            raise ValueError(f"{op_tag} needs two operands")
        return _BINARY[op_tag](a, b)
    if op_tag in _UNARY:
        return _UNARY[op_tag](as_tensor(a))
    raise ValueError(f"unknown element-wise op {op_tag!r}")


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# -- linear algebra -------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >= 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch extents differ: {a.shape} @ {b.shape}") from None

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return (
            None if ga is None else unbroadcast(ga, a.shape),
            None if gb is None else unbroadcast(gb, b.shape),
        )

    return _make(a.data @ b.data, (a, b), back, "matmul")


# -- shape ----------------------------------------------------------------


def reshape(a: Tensor, shape: tuple) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes: tuple | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def broadcast_to(a: Tensor, shape: tuple) -> Tensor:
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast {a.shape} to {shape}") from None
    return _make(out, (a,), lambda g: (unbroadcast(g, a.shape),), "broadcast_to")


def getitem(a: Tensor, idx) -> Tensor:
    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(a.data[idx]), (a,), back, "getitem")


# -- reductions -----------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _make(np.asarray(out), (a,), back, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis, keepdims) * (1.0 / count)


# -- normalisation / probabilities ----------------------------------------


def softmax(x: Tensor, axis: int = -1, temperature: float = 1.0) -> Tensor:
    """Max-subtracted softmax along ``axis``."""
    if not temperature > 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    z = x.data / temperature if temperature != 1.0 else x.data
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        gz = s * (g - (g * s).sum(axis=axis, keepdims=True))
        return (gz / temperature if temperature != 1.0 else gz,)

    return _make(s, (x,), back, "softmax")


def softmax_rows(logits: Tensor, temperature: float = 1.0) -> Tensor:
    if logits.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got shape {logits.shape}")
    return softmax(logits, axis=-1, temperature=temperature)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def back(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), back, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    n = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def back(g):
        ghat = g * gamma.data
        gx = inv / n * (n * ghat - ghat.sum(-1, keepdims=True) - xhat * (ghat * xhat).sum(-1, keepdims=True))
        return gx, unbroadcast(g * xhat, gamma.shape), unbroadcast(g, beta.shape)

    return _make(xhat * gamma.data + beta.data, (x, gamma, beta), back, "layer_norm")


# -- indexing -------------------------------------------------------------


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``weight[ids]``; gradient scatter-adds back into the table."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError(f"embedding ids out of range [0, {weight.shape[0]})")

    def back(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[-1]))
        return (full,)

    return _make(weight.data[ids], (weight,), back, "embedding")


def take_last(x: Tensor, idx: np.ndarray) -> Tensor:
    """Pick ``x[..., idx[...]]`` along the last axis (one index per row)."""
    idx = np.asarray(idx)[..., None]
    if idx.shape[:-1] != x.shape[:-1]:
        idx = np.broadcast_to(idx, x.shape[:-1] + (1,))

    def back(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, idx, g[..., None], axis=-1)
        return (full,)

    return _make(np.take_along_axis(x.data, idx, axis=-1)[..., 0], (x,), back, "take_last")


# -- verification -----------------------------------------------------------


def _relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def gradcheck(f: Callable, x, eps: float = 1e-5, floor: float = 1e-12) -> float:
    """Max relative error between backprop and central differences.

    ``x`` is one array/Tensor or a sequence of them; ``f`` receives the same
    number of float64 tensors and must return a scalar tensor. The error per
    component is ``|a - cd| / max(|a|, |cd|, floor)``.
    """
    single = not isinstance(x, (list, tuple))
    xs = [np.array(v.data if isinstance(v, Tensor) else v, dtype=np.float64) for v in ([x] if single else x)]
    with default_dtype(np.float64):
        leaves = [Tensor(v, requires_grad=True) for v in xs]
        y = f(*leaves)
        if y.size != 1:
            raise GraphError(f"gradcheck needs a scalar-valued f, got shape {y.shape}")
        y.backward()
        worst = 0.0
        for k, leaf in enumerate(leaves):
            analytic = leaf.grad if leaf.grad is not None else np.zeros_like(xs[k])
            numeric = np.empty_like(xs[k])
            for i in range(xs[k].size):
                vals = []
                for step in (eps, -eps):
                    probe = [v.copy() for v in xs]
                    probe[k].flat[i] += step
                    with no_grad():
                        vals.append(f(*[Tensor(p) for p in probe]).item())
                numeric.flat[i] = (vals[0] - vals[1]) / (2 * eps)
            if not (np.isfinite(analytic).all() and np.isfinite(numeric).all()):
                raise NumericError("non-finite gradient during gradcheck")
            worst = max(worst, _relative_error(analytic, numeric, floor))
    return worst


def gradcheck_params(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor] | Sequence[Tensor],
    eps: float = 1e-5,
    floor: float = 1e-12,
    max_per_param: int | None = None,
    seed: int = 0,
) -> float:
    """Like :func:`gradcheck`, perturbing parameter tensors in place.

    ``loss_fn`` closes over the parameters. Tensors must already be float64.
    ``max_per_param`` limits how many (randomly chosen) components of each
    parameter are probed.
    """
    tensors = list(params.values()) if isinstance(params, dict) else list(params)
    for p in tensors:
        if p.dtype != np.float64:
            raise ValueError("gradcheck_params needs float64 parameters")
        p.grad = None
    with default_dtype(np.float64):
        loss_fn().backward()
        rng = np.random.default_rng(seed)
        worst = 0.0
        for p in tensors:
            analytic_full = p.grad if p.grad is not None else np.zeros_like(p.data)
            idx = np.arange(p.size)
            if max_per_param is not None and p.size > max_per_param:
                idx = rng.choice(p.size, size=max_per_param, replace=False)
            analytic = analytic_full.reshape(-1)[idx]
            numeric = np.empty(len(idx))
            flat = p.data.reshape(-1)
            for j, i in enumerate(idx):
                orig = flat[i]
                vals = []
                for step in (eps, -eps):
                    flat[i] = orig + step
                    with no_grad():
                        vals.append(loss_fn().item())
                flat[i] = orig
                numeric[j] = (vals[0] - vals[1]) / (2 * eps)
            if not (np.isfinite(analytic).all() and np.isfinite(numeric).all()):
                raise NumericError("non-finite gradient during gradcheck")
            worst = max(worst, _relative_error(analytic, numeric, floor))
    return worst
