"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op returns a new :class:`Tensor`. When at least one input requires a
gradient, the output keeps a reference to its inputs and a backward rule;
the resulting DAG is the tape for one step. :func:`backward` orders it
topologically and visits every node exactly once in reverse.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "DimensionError",
    "ContractError",
    "tensor",
    "make_op",
    "matmul",
    "add",
    "sub",
    "mul",
    "elementwise",
    "scale",
    "neg",
    "tsum",
    "mean",
    "tabs",
    "reshape",
    "transpose",
    "concat",
    "softmax",
    "log_softmax",
    "gelu",
    "tanh",
    "sigmoid",
    "layer_norm",
    "replace_rows",
    "conv2d",
    "mean_pool2d",
    "cross_entropy",
    "backward",
    "zero_grad",
    "grad_check",
    "GradCheckReport",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """A call violates an operation's preconditions."""


class TrainingDivergence(RuntimeError):
    """Non-finite loss or a training run that misses its accuracy floor."""


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("only division by a Python scalar is supported")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return _index(self, idx)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """Wrap a forward result as a tape node.

    ``backward_fn`` maps the output gradient to one gradient (or ``None``)
    per parent. Custom ops and the negative-control tests use this directly.
    """
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


# -- linear algebra ---------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supported layouts: ``(..., m, k) @ (k, n)`` (shared right operand, used by
    every linear layer) and ``(B, m, k) @ (B, k, n)`` (batched).
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and (b.ndim != a.ndim or a.shape[:-2] != b.shape[:-2]):
        raise DimensionError(f"matmul: batch dims differ for {a.shape} and {b.shape}")
    A, B = a.data, b.data
    out = A @ B

    def bw(g):
        ga = g @ np.swapaxes(B, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if B.ndim == 2:
                k = A.shape[-1]
                gb = A.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(A, -1, -2) @ g
        return ga, gb

    return make_op(out, (a, b), bw)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> bool:
    if a.shape == b.shape:
        return False
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return True
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not compatible")


def _unbroadcast(g: np.ndarray, vec: bool) -> np.ndarray:
    return g.reshape(-1, g.shape[-1]).sum(axis=0) if vec else g


def add(a: Tensor, b: Tensor) -> Tensor:
    vec = _check_broadcast(a, b, "add")
    return make_op(a.data + b.data, (a, b), lambda g: (g, _unbroadcast(g, vec)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    vec = _check_broadcast(a, b, "sub")
    return make_op(a.data - b.data, (a, b), lambda g: (g, -_unbroadcast(g, vec)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    vec = _check_broadcast(a, b, "mul")
    A, B = a.data, b.data

    def bw(g):
        return (g * B if a.requires_grad else None,
                _unbroadcast(g * A, vec) if b.requires_grad else None)

    return make_op(A * B, (a, b), bw)


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    ops = {"add": add, "sub": sub, "mul": mul}
    if kind not in ops:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return ops[kind](a, b)


def scale(a: Tensor, c: float) -> Tensor:
    return make_op(a.data * c, (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return make_op(-a.data, (a,), lambda g: (-g,))


# -- reductions and reshaping ---------------------------------------------------


def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        shape = a.shape
        return make_op(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))
    out = a.data.sum(axis=axis)
    return make_op(out, (a,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),))


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return scale(tsum(a, axis), 1.0 / n)


def tabs(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return make_op(np.abs(a.data), (a,), lambda g: (g * sign,))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    inv = np.argsort(axes)
    return make_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([p.data for p in parts], axis=axis)
    return make_op(out, tuple(parts), lambda g: tuple(np.split(g, cuts, axis=axis)))


def _index(a: Tensor, idx) -> Tensor:
    shape = a.shape

    def bw(g):
        z = np.zeros(shape)
        np.add.at(z, idx, g)
        return (z,)

    return make_op(a.data[idx], (a,), bw)


# -- nonlinearities ---------------------------------------------------------------


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-shifted so large inputs cannot overflow."""
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"softmax: needs a non-empty last axis, got {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return make_op(s, (x,), bw)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return make_op(out, (x,), lambda g: (g - s * g.sum(axis=-1, keepdims=True),))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x), with the erf-based normal CDF."""
    X = x.data
    cdf = 0.5 * (1.0 + erf(X * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * X * X)
    return make_op(X * cdf, (x,), lambda g: (g * (cdf + X * pdf),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return make_op(t, (x,), lambda g: (g * (1.0 - t * t),))


def sigmoid(x: Tensor) -> Tensor:
    # tanh form is overflow-free for any finite input
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return make_op(s, (x,), lambda g: (g * s * (1.0 - s),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} vs feature dim {d}")
    X = x.data
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    G = gamma.data

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * G
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gg = (g * xhat).reshape(-1, d).sum(axis=0) if gamma.requires_grad else None
        gb = g.reshape(-1, d).sum(axis=0) if beta.requires_grad else None
        return gx, gg, gb

    return make_op(xhat * G + beta.data, (x, gamma, beta), bw)


def replace_rows(x: Tensor, rows: np.ndarray, token: Tensor) -> Tensor:
    """Replace the rows selected by boolean ``rows`` (shape ``x.shape[:-1]``) with ``token``.

    Replaced positions pass no gradient back into ``x``.
    """
    rows = np.asarray(rows, dtype=bool)
    if rows.shape != x.shape[:-1] or token.shape != x.shape[-1:]:
        raise DimensionError(f"replace_rows: rows {rows.shape}, token {token.shape} vs input {x.shape}")
    out = x.data.copy()
    out[rows] = token.data

    def bw(g):
        gx = g.copy()
        gx[rows] = 0.0
        return gx, g[rows].sum(axis=0)

    return make_op(out, (x, token), bw)


# -- convolution --------------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1) -> Tensor:
    """Valid cross-correlation of ``x[n, cin, H, W]`` with ``w[cout, cin, kh, kw]``."""
    n, cin, H, W = x.shape
    cout, wcin, kh, kw = w.shape
    if wcin != cin:
        raise DimensionError(f"conv2d: input channels {cin} vs kernel {w.shape}")
    if kh > H or kw > W or (H - kh) % stride or (W - kw) % stride:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} stride {stride} does not tile input {H}x{W}")
    if b.shape != (cout,):
        raise DimensionError(f"conv2d: bias {b.shape} vs {cout} output channels")
    Ho, Wo = (H - kh) // stride + 1, (W - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x.data, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # n, cin, Ho, Wo, kh, kw
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * Ho * Wo, cin * kh * kw)
    wmat = w.data.reshape(cout, -1)
    out = (cols @ wmat.T + b.data).reshape(n, Ho, Wo, cout).transpose(0, 3, 1, 2)

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (gm.T @ cols).reshape(w.shape) if w.requires_grad else None
        gb = gm.sum(axis=0) if b.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gm @ wmat).reshape(n, Ho, Wo, cin, kh, kw)
            gx = np.zeros(x.shape)
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += (
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2))
        return gx, gw, gb

    return make_op(out, (x, w, b), bw)


def mean_pool2d(x: Tensor) -> Tensor:
    """2x2 mean pooling with stride 2; an odd trailing row/column is dropped."""
    n, c, H, W = x.shape
    Ho, Wo = H // 2, W // 2
    crop = x.data[:, :, :2 * Ho, :2 * Wo]
    out = crop.reshape(n, c, Ho, 2, Wo, 2).mean(axis=(3, 5))

    def bw(g):
        gx = np.zeros(x.shape)
        gx[:, :, :2 * Ho, :2 * Wo] = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25
        return (gx,)

    return make_op(out, (x,), bw)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits[n, classes]``."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim == 1:
        logits = reshape(logits, (1, -1))
    lp = log_softmax(logits)
    picked = lp[np.arange(labels.size), labels]
    return neg(mean(picked))


# -- backward pass ---------------------------------------------------------------------


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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable ``t`` needing a gradient."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def zero_grad(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


# -- gradient checking -----------------------------------------------------------------


class GradCheckReport:
    def __init__(self, max_rel_error: float, tol: float, per_input: list[float]):
        self.max_rel_error = max_rel_error
        self.tol = tol
        self.per_input = per_input

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error <= self.tol)

    def __bool__(self) -> bool:
        return self.passed

    def __repr__(self) -> str:
        state = "pass" if self.passed else "FAIL"
        return f"GradCheckReport({state}, max_rel_error={self.max_rel_error:.3e}, tol={self.tol:g})"


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
               tol: float = 1e-4, floor: float = 1e-6) -> GradCheckReport:
    """Compare tape gradients of scalar ``f(*inputs)`` against central differences.

    The per-element error is ``|a - n| / max(|a|, |n|, floor)``; ``floor``
    keeps near-zero gradients from turning round-off into huge ratios.
    Every input is checked, whatever its ``requires_grad`` flag.
    """
    flags = [t.requires_grad for t in inputs]
    for t in inputs:
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None
    try:
        backward(f(*inputs))
        analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]
        per_input = []
        for t, a in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            num = np.empty(flat.size)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = f(*inputs).item()
                flat[i] = orig - eps
                fm = f(*inputs).item()
                flat[i] = orig
                num[i] = (fp - fm) / (2.0 * eps)
            a = a.reshape(-1)
            denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), floor)
            per_input.append(float(np.max(np.abs(a - num) / denom)) if flat.size else 0.0)
    finally:
        for t, flag in zip(inputs, flags):
            t.requires_grad = flag
            t.grad = None
    return GradCheckReport(max(per_input, default=0.0), tol, per_input)
