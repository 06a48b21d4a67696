"""Dense tensors with reverse-mode automatic differentiation.

Define-by-run: every operation records its parents and a backward closure,
and the graph is rebuilt from scratch on each forward pass. Gradients
accumulate additively when a tensor is used more than once in one graph.
Broadcasting is restricted to missing leading axes and extents of 1 so the
adjoint code stays auditable.

Also hosts the Adam optimizer, the smooth-L1 loss, and a central
finite-difference gradient checker used as the independent oracle for every
backward pass in this package.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class GraphError(RuntimeError):
    """Misuse of the computation graph (non-scalar loss, repeated backward)."""


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x: np.ndarray) -> np.ndarray:
    # overflow-safe: for x > 30, log(1+e^x) == x to double precision
    return np.where(x > 30.0, x, np.log1p(np.exp(np.minimum(x, 30.0))))


def _check_broadcast(sa: tuple, sb: tuple) -> tuple:
    """Validate restricted broadcasting and return the result shape."""
    ndim = max(len(sa), len(sb))
    pa = (1,) * (ndim - len(sa)) + tuple(sa)
    pb = (1,) * (ndim - len(sb)) + tuple(sb)
    out = []
    for da, db in zip(pa, pb):
        if da != db and da != 1 and db != 1:
            raise DimensionError(f"shapes {sa} and {sb} are not broadcastable")
        out.append(max(da, db))
    return tuple(out)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to the original operand shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class Tensor:
    """N-dimensional float array, optionally part of a computation graph.

    The data buffer is treated as immutable once the tensor has entered a
    graph; only the ``grad`` accumulator is mutated by ``backward``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 _parents: tuple = (), _bwd=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype != np.float32:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in _parents)
        self.grad = np.zeros_like(arr) if (requires_grad and not _parents) else None
        self._parents = _parents if self.requires_grad else ()
        self._bwd = _bwd if self.requires_grad else None
        self._consumed = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    # -- graph ------------------------------------------------------------

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Populate ``grad`` on every reachable tensor with d(self)/d(tensor).

        ``self`` must be scalar. Calling backward twice on the same loss is
        an error so accidental double accumulation surfaces immediately.
        """
        if self.data.ndim != 0:
            raise GraphError(f"backward requires a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise GraphError("backward already ran on this graph")
        self._consumed = True

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
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        self._accum(np.ones_like(self.data))
        for node in reversed(order):
            if node._bwd is not None:
                node._bwd(node.grad)

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    __radd__ = __add__
    __rmul__ = __mul__

    def __rsub__(self, other):
        return sub(other, self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- elementwise ops --------------------------------------------------------

def _binary(a, b, fwd, bwd_a, bwd_b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    out_data = fwd(a.data, b.data)

    def _bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(bwd_a(g, a.data, b.data), a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(bwd_b(g, a.data, b.data), b.shape))

    return Tensor(out_data, _parents=(a, b), _bwd=_bwd)


def add(a, b) -> Tensor:
    return _binary(a, b, lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary(a, b, lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _binary(a, b, lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def _unary(a, out_data, grad_fn) -> Tensor:
    def _bwd(g):
        if a.requires_grad:
            a._accum(grad_fn(g))
    return Tensor(out_data, _parents=(a,), _bwd=_bwd)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _unary(a, -a.data, lambda g: -g)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _unary(a, out, lambda g: g * out)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return _unary(a, s, lambda g: g * s * (1.0 - s))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    return _unary(a, t, lambda g: g * (1.0 - t * t))


def silu(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return _unary(a, a.data * s, lambda g: g * (s + a.data * s * (1.0 - s)))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    return _unary(a, _softplus(a.data), lambda g: g * _sigmoid(a.data))


# -- reductions / structure --------------------------------------------------

def tsum(a) -> Tensor:
    a = as_tensor(a)
    return _unary(a, np.asarray(a.data.sum()),
                  lambda g: np.broadcast_to(g, a.shape).copy())


def tmean(a) -> Tensor:
    a = as_tensor(a)
    n = a.size
    return _unary(a, np.asarray(a.data.mean()),
                  lambda g: np.broadcast_to(g / n, a.shape).copy())


def matmul(a, b) -> Tensor:
    """Matrix product of a (..., M, K) stack against a single (K, N) matrix."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul expects (...,M,K) @ (K,N), got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def _bwd(g):
        if a.requires_grad:
            a._accum(g @ b.data.T)
        if b.requires_grad:
            k, n = b.shape
            b._accum(a.data.reshape(-1, k).T @ g.reshape(-1, n))

    return Tensor(out, _parents=(a, b), _bwd=_bwd)


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice [start:stop) along one axis."""
    a = as_tensor(a)
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def _bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[idx] = g
            a._accum(full)

    return Tensor(a.data[idx].copy(), _parents=(a,), _bwd=_bwd)


def concat(tensors, axis: int) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def _bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                p._accum(g[tuple(idx)])

    return Tensor(out, _parents=tuple(parts), _bwd=_bwd)


def tile_axis(a, axis: int, reps: int) -> Tensor:
    """Repeat a length-1 axis ``reps`` times; gradient sums back over copies."""
    a = as_tensor(a)
    if a.data.shape[axis] != 1:
        raise DimensionError(f"tile_axis needs extent 1 on axis {axis}, got {a.shape}")
    out = np.repeat(a.data, reps, axis=axis)

    def _bwd(g):
        if a.requires_grad:
            a._accum(g.sum(axis=axis, keepdims=True))

    return Tensor(out, _parents=(a,), _bwd=_bwd)


# -- loss --------------------------------------------------------------------

def smooth_l1(pred, target, beta: float = 1.0) -> Tensor:
    """Mean smooth-L1 (Huber) loss: quadratic inside |d| < beta, linear outside."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"smooth_l1 shape mismatch: {pred.shape} vs {target.shape}")
    if beta <= 0:
        raise ValueError(f"smooth_l1 beta must be positive, got {beta}")
    d = pred.data - target.data
    absd = np.abs(d)
    quad = absd < beta
    per = np.where(quad, 0.5 * d * d / beta, absd - 0.5 * beta)
    n = per.size

    def _bwd(g):
        gd = g * np.where(quad, d / beta, np.sign(d)) / n
        if pred.requires_grad:
            pred._accum(gd)
        if target.requires_grad:
            target._accum(-gd)

    return Tensor(np.asarray(per.mean()), _parents=(pred, target), _bwd=_bwd)


# -- Adam ---------------------------------------------------------------------

@dataclass
class AdamState:
    """Bias-corrected Adam moments, one pair of buffers per parameter."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def init_adam(params: dict, lr: float = 1e-4, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
    for name, p in params.items():
        state.m[name] = np.zeros_like(p.data)
        state.v[name] = np.zeros_like(p.data)
    return state


def adam_step(params: dict, grads: dict, state: AdamState):
    """One in-place Adam update; returns (params, state) for convenience."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape "
                                 f"{p.data.shape} for '{name}'")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    """Scale all gradients in place so their global L2 norm is <= max_norm."""
    total = 0.0
    for g in grads.values():
        total += float((g * g).sum())
    norm = np.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def zero_grads(params: dict) -> None:
    for p in params.values():
        p.zero_grad()


# -- finite-difference oracle -------------------------------------------------

def grad_check(f, params, eps: float = 1e-5) -> float:
    """Max relative error between backward() and central finite differences.

    ``f`` takes no arguments, reads the current values of ``params`` (a dict
    or sequence of leaf tensors) and returns a scalar Tensor. Relative error
    is |analytic - numeric| / max(1e-8, |analytic| + |numeric|), maximized
    over every scalar parameter. Only meaningful at 64-bit precision.
    """
    leaves = list(params.values()) if isinstance(params, dict) else list(params)
    for p in leaves:
        p.zero_grad()
    loss = f()
    if loss.data.ndim != 0:
        raise GraphError(f"grad_check needs a scalar function, got shape {loss.shape}")
    loss.backward()
    analytic = [p.grad.copy() for p in leaves]

    worst = 0.0
    for p, ga in zip(leaves, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f().item()
            flat[i] = orig - eps
            fm = f().item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            a = gflat[i]
            rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, rel)
    return worst
