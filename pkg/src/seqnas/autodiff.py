"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every op builds a node that records its parents and a closure mapping the
output gradient to one gradient per parent.  ``Tensor.backward`` walks the
graph in reverse topological order and accumulates into leaf ``.grad``.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


def _as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=DTYPE)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.name = name

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Populate ``.grad`` on every leaf that requires it.

        Only scalar outputs may omit ``grad``.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p: float):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    out.op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("add", a.data, b.data)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("sub", a.data, b.data)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("mul", a.data, b.data)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("div", a.data, b.data)
    out = a.data / b.data
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)), "div")


def power(a: Tensor, p: float) -> Tensor:
    return _node(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.logaddexp(0.0, x)
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return _node(out, (a,), lambda g: (g * sig,), "softplus")


def silu(a: Tensor) -> Tensor:
    x = a.data
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    out = x * sig
    return _node(out, (a,), lambda g: (g * (sig + x * sig * (1.0 - sig)),), "silu")


def sin(a: Tensor) -> Tensor:
    return _node(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),), "sin")


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or rate <= 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    mask = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _node(a.data * mask, (a,), lambda g: (g * mask,), "dropout")


# ------------------------------------------------------------------ structure

def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs ndim >= 2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(np.matmul(a.data, b.data), (a, b), back, "matmul")


def reshape(a: Tensor, shape) -> Tensor:
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, slice, type(None), type(Ellipsis))) for p in parts)


def getitem(a: Tensor, idx) -> Tensor:
    basic = _is_basic_index(idx)

    def back(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _node(a.data[idx], (a,), back, "getitem")


def concat(items: Sequence[Tensor], axis: int = -1) -> Tensor:
    items = [_wrap(t) for t in items]
    sizes = [t.shape[axis] for t in items]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _node(np.concatenate([t.data for t in items], axis=axis), items, back, "concat")


def stack(items: Sequence[Tensor], axis: int = 0) -> Tensor:
    items = [_wrap(t) for t in items]

    def back(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _node(np.stack([t.data for t in items], axis=axis), items, back, "stack")


def split(a: Tensor, n: int, axis: int = -1) -> list[Tensor]:
    size = a.shape[axis]
    if size % n:
        raise ShapeError(f"split: axis of size {size} not divisible by {n}")
    step = size // n
    out = []
    for i in range(n):
        idx = [slice(None)] * a.ndim
        idx[axis] = slice(i * step, (i + 1) * step)
        out.append(getitem(a, tuple(idx)))
    return out


def pad(a: Tensor, widths) -> Tensor:
    widths = tuple(tuple(w) for w in widths)
    slices = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
    return _node(np.pad(a.data, widths), (a,), lambda g: (g[slices],), "pad")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), back, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


# ----------------------------------------------------------- neural-net ops

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (a,), back, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def back(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _node(out, (a,), back, "log_softmax")


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layernorm: affine params {gamma.shape}/{beta.shape} vs feature dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def back(g):
        gx_hat = g * gamma.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _node(out, (x, gamma, beta), back, "layernorm")


def batchnorm1d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                running_var: np.ndarray, training: bool, momentum: float = 0.1,
                eps: float = 1e-5) -> Tensor:
    """Channel-last batch norm; statistics pool every axis except the last.

    In training mode the running buffers are updated in place.
    """
    c = x.shape[-1]
    if gamma.shape != (c,):
        raise ShapeError(f"batchnorm1d: gamma {gamma.shape} vs channels {c}")
    red = tuple(range(x.ndim - 1))
    if not training:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean) * inv
        out = xhat * gamma.data + beta.data

        def back_eval(g):
            return g * gamma.data * inv, (g * xhat).sum(axis=red), g.sum(axis=red)

        return _node(out, (x, gamma, beta), back_eval, "batchnorm1d")

    n = x.data.size // c
    mu = x.data.mean(axis=red)
    xc = x.data - mu
    var = (xc * xc).mean(axis=red)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    running_mean *= 1.0 - momentum
    running_mean += momentum * mu
    running_var *= 1.0 - momentum
    running_var += momentum * var * n / max(n - 1, 1)

    def back(g):
        gx_hat = g * gamma.data
        gx = inv * (gx_hat - gx_hat.mean(axis=red) - xhat * (gx_hat * xhat).mean(axis=red))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _node(out, (x, gamma, beta), back, "batchnorm1d")


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids outside [0, {table.shape[0]})")

    def back(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _node(table.data[ids], (table,), back, "embedding")


def mean_pool(x: Tensor, axis: int = 1, mask: np.ndarray | None = None) -> Tensor:
    """Mean over ``axis``; ``mask`` (same shape as x without the last dim) excludes positions."""
    if mask is None:
        return tmean(x, axis=axis)
    w = np.asarray(mask, dtype=DTYPE)[..., None]
    denom = np.maximum(w.sum(axis=axis, keepdims=True), 1.0)
    return tsum(x * (w / denom), axis=axis)


def cross_entropy(logits: Tensor, targets, weights: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under softmax(logits).

    ``logits`` is (..., V); ``weights`` selects which positions count.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    v = logits.shape[-1]
    flat = logits.data.reshape(-1, v)
    t = targets.reshape(-1)
    w = np.ones(t.shape, dtype=DTYPE) if weights is None else np.asarray(weights, DTYPE).reshape(-1)
    total = w.sum()
    if total <= 0:
        raise ValueError("cross_entropy: no positions selected")
    z = flat - flat.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(len(t)), t]
    loss = (nll * w).sum() / total

    def back(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(len(t)), t] -= 1.0
        p *= (w / total)[:, None] * g
        return (p.reshape(logits.shape),)

    return _node(np.asarray(loss), (logits,), back, "cross_entropy")


def mse(pred: Tensor, target) -> Tensor:
    diff = pred - Tensor(_as_array(target))
    return tmean(diff * diff)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    norm = sqrt(tsum(x * x, axis=axis, keepdims=True) + eps)
    return x / norm


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise cosine similarity of rows: (N, D) x (M, D) -> (N, M)."""
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"cosine_similarity: feature dims {a.shape} vs {b.shape}")
    return matmul(l2_normalize(a), transpose(l2_normalize(b)))


def conv1d(x: Tensor, w: Tensor, b: Tensor | None, padding: tuple[int, int]) -> Tensor:
    """Channel-last 1-D convolution. x: (B, L, Cin), w: (K, Cin, Cout)."""
    k, cin, cout = w.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"conv1d: input channels {x.shape[-1]} vs kernel {cin}")
    left, right = padding
    xp = np.pad(x.data, ((0, 0), (left, right), (0, 0)))
    lout = xp.shape[1] - k + 1
    if lout <= 0:
        raise ShapeError(f"conv1d: kernel {k} longer than padded input {xp.shape[1]}")
    out = np.zeros((x.shape[0], lout, cout))
    for i in range(k):
        out += xp[:, i:i + lout, :] @ w.data[i]
    if b is not None:
        out += b.data
    parents = (x, w) if b is None else (x, w, b)

    def back(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        g2 = g.reshape(-1, cout)
        for i in range(k):
            gxp[:, i:i + lout, :] += g @ w.data[i].T
            gw[i] = xp[:, i:i + lout, :].reshape(-1, cin).T @ g2
        gx = gxp[:, left:left + x.shape[1], :]
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _node(out, parents, back, "conv1d")


def fft_conv(u: Tensor, h: Tensor) -> Tensor:
    """Full linear convolution along axis 1 through a zero-padded circular FFT.

    u: (B, L, D), h: (K, D) -> (B, L + K - 1, D), y[t] = sum_s u[s] h[t - s].
    """
    if u.shape[-1] != h.shape[-1]:
        raise ShapeError(f"fft_conv: channels {u.shape[-1]} vs filter {h.shape[-1]}")
    L, K = u.shape[1], h.shape[0]
    n = L + K - 1
    U = np.fft.rfft(u.data, n=n, axis=1)
    H = np.fft.rfft(h.data, n=n, axis=0)
    out = np.fft.irfft(U * H[None], n=n, axis=1)

    def back(g):
        G = np.fft.rfft(g, n=n, axis=1)
        gu = np.fft.irfft(G * np.conj(H)[None], n=n, axis=1)[:, :L]
        gh = np.fft.irfft((G * np.conj(U)).sum(axis=0), n=n, axis=0)[:K]
        return gu, gh

    return _node(out, (u, h), back, "fft_conv")


def linear_recurrence(decay: Tensor, drive: Tensor) -> Tensor:
    """States of s_t = decay_t * s_{t-1} + drive_t along axis 1, with s_{-1} = 0."""
    if decay.shape != drive.shape:
        raise ShapeError(f"linear_recurrence: decay {decay.shape} vs drive {drive.shape}")
    a, b = decay.data, drive.data
    out = np.empty_like(b)
    state = np.zeros_like(b[:, 0])
    for t in range(b.shape[1]):
        state = a[:, t] * state + b[:, t]
        out[:, t] = state

    def back(g):
        ga = np.zeros_like(a)
        gb = np.empty_like(b)
        carry = np.zeros_like(b[:, 0])
        for t in range(b.shape[1] - 1, -1, -1):
            carry = g[:, t] + carry
            gb[:, t] = carry
            if t > 0:
                ga[:, t] = carry * out[:, t - 1]
            carry = carry * a[:, t]
        return ga, gb

    return _node(out, (decay, drive), back, "linear_recurrence")


# ------------------------------------------------------------------- checks

def gradcheck(fn: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5,
              floor: float = 1e-6) -> float:
    """Max elementwise relative error between backward and central differences.

    ``fn`` must rebuild the scalar loss from scratch on every call.  Entries
    where both gradients are below ``floor`` in magnitude are compared
    against ``floor`` instead of themselves.
    """
    params = list(params)
    for p in params:
        p.data = np.ascontiguousarray(p.data)
        p.grad = None
    fn().backward()
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = fn().item()
            flat[i] = orig - eps
            down = fn().item()
            flat[i] = orig
            numeric.reshape(-1)[i] = (up - down) / (2 * eps)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
        worst = max(worst, float(np.max(np.abs(analytic - numeric) / denom)))
    return worst
