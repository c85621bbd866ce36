"""Define-by-run reverse-mode autodiff over float64 numpy arrays.

A :class:`Tape` records every differentiable op in execution order, so the
reverse sweep in :meth:`Tape.backward` is a plain walk over the node list.
Tensors that do not require gradients (constants, detached values) are never
recorded, which makes tape-free evaluation as cheap as raw numpy.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes " + " and ".join(str(tuple(s)) for s in shapes))


class Tensor:
    __slots__ = ("data", "tape", "parents", "backward_fn", "node_id", "name", "op", "requires_grad")

    def __init__(self, data, tape: "Tape | None" = None, name: str | None = None,
                 requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.flags.writeable:
            arr = arr.view()
            arr.flags.writeable = False
        self.data = arr
        self.tape = tape
        self.parents: tuple = ()
        self.backward_fn = None
        self.node_id: int | None = None
        self.name = name
        self.op = "leaf"
        self.requires_grad = requires_grad
        if requires_grad and tape is not None:
            tape.record(self)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}{', grad' if self.requires_grad else ''})"

    __array_priority__ = 100

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

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


class Tape:
    """Append-only record of differentiable ops.

    Node ids are positions in ``nodes``; an op is appended after its inputs,
    so the list is always in topological order.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.grads: list[np.ndarray | None] = []

    def __len__(self):
        return len(self.nodes)

    def record(self, t: Tensor) -> None:
        t.node_id = len(self.nodes)
        t.tape = self
        self.nodes.append(t)

    def param(self, data, name: str | None = None) -> Tensor:
        return Tensor(data, tape=self, name=name, requires_grad=True)

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Sweep the tape in reverse from ``loss``; return grads of all leaves.

        Leaves not reachable from ``loss`` get zero gradients. Per-node
        gradients are kept in ``self.grads`` (None for unreachable nodes).
        """
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.tape is not self or loss.node_id is None:
            raise ValueError("loss is not recorded on this tape")
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[loss.node_id] = np.ones_like(loss.data)
        for i in range(loss.node_id, -1, -1):
            g = grads[i]
            node = self.nodes[i]
            if g is None or node.backward_fn is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or parent.node_id is None or parent.tape is not self:
                    continue
                j = parent.node_id
                grads[j] = pg if grads[j] is None else grads[j] + pg
        self.grads = grads
        out = {}
        for node in self.nodes:
            if node.backward_fn is None:
                g = grads[node.node_id]
                out[node] = np.zeros_like(node.data) if g is None else g
        return out


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    return tape.backward(loss)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, op: str, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    tape = None
    for p in parents:
        if p.requires_grad and p.tape is not None:
            tape = p.tape
            break
    out = Tensor(data)
    out.op = op
    if tape is None:
        return out
    out.parents = tuple(parents)
    out.backward_fn = backward_fn
    out.requires_grad = True
    tape.record(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# --- primitives -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, "add", (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, "sub", (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, "mul", (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, "div", (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _make(ad @ bd, "matmul", (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x, w, b) -> Tensor:
    """``x @ w + b`` as one node; ``b`` broadcasts over rows."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError("linear", x.shape, w.shape)
    if b.shape != (w.shape[1],):
        raise ShapeError("linear", w.shape, b.shape)
    xd, wd = x.data, w.data
    return _make(xd @ wd + b.data, "linear", (x, w, b),
                 lambda g: (g @ wd.T, xd.T @ g, g.sum(axis=0)))


def elu(x) -> Tensor:
    """ELU with alpha = 1."""
    x = as_tensor(x)
    xd = x.data
    neg = np.expm1(np.minimum(xd, 0.0))
    out = np.where(xd > 0, xd, neg)
    return _make(out, "elu", (x,), lambda g: (g * np.where(xd > 0, 1.0, neg + 1.0),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, "sigmoid", (x,), lambda g: (g * out * (1.0 - out),))


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, "softmax", (x,), back)


def sum_(x, axis=None) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(x.data.sum(axis=axis), "sum", (x,), back)


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    n = x.data.size if axis is None else np.prod([shape[a] for a in np.atleast_1d(axis)])

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _make(x.data.mean(axis=axis), "mean", (x,), back)


def sq_error(a, b) -> Tensor:
    """Sum of squared differences, reduced to a scalar."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("sq_error", a.shape, b.shape)
    d = a.data - b.data
    return _make(np.sum(d * d), "sq_error", (a, b), lambda g: (2.0 * g * d, -2.0 * g * d))


def square(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _make(xd * xd, "square", (x,), lambda g: (2.0 * g * xd,))


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = not any(isinstance(p, (list, np.ndarray)) for p in parts)

    def back(g):
        full = np.zeros(shape)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(x.data[idx], "getitem", (x,), back)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, shape) from None
    return _make(out, "reshape", (x,), lambda g: (g.reshape(old),))


def stack(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    for x in xs[1:]:
        if x.shape != xs[0].shape:
            raise ShapeError("stack", xs[0].shape, x.shape)
    n = len(xs)

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _make(np.stack([x.data for x in xs], axis=axis), "stack", xs, back)


def zscore(x, axis, floor: float = 1e-6) -> Tensor:
    """Standardize with population mean/std over ``axis``; std clipped below at ``floor``."""
    x = as_tensor(x)
    xd = x.data
    mu = xd.mean(axis=axis, keepdims=True)
    std = np.sqrt(((xd - mu) ** 2).mean(axis=axis, keepdims=True))
    floored = std < floor
    s = np.where(floored, floor, std)
    out = (xd - mu) / s

    def back(g):
        gm = g.mean(axis=axis, keepdims=True)
        gy = (g * out).mean(axis=axis, keepdims=True)
        # the std term drops out wherever the floor is active
        return ((g - gm - np.where(floored, 0.0, out * gy)) / s,)

    return _make(out, "zscore", (x,), back)


def detach(x) -> Tensor:
    return Tensor(as_tensor(x).data)


# --- verification oracles ---------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], theta, h: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` maps a parameter Tensor to a scalar Tensor and must be built from
    the ops in this module.
    """
    theta = np.array(theta, dtype=np.float64)
    tape = Tape()
    p = tape.param(theta)
    analytic = tape.backward(f(p))[p].ravel()
    flat = theta.ravel()
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        plus, minus = flat.copy(), flat.copy()
        plus[i] += h
        minus[i] -= h
        fp = float(f(Tensor(plus.reshape(theta.shape))).data)
        fm = float(f(Tensor(minus.reshape(theta.shape))).data)
        numeric[i] = (fp - fm) / (2.0 * h)
    if flat.size == 0:
        return 0.0
    err = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)
    return float(err.max())


def jacobian_fd(f: Callable[[np.ndarray], np.ndarray], z, h: float = 1e-4) -> np.ndarray:
    """Central-difference Jacobian ``J[n, d]`` of a vector function at ``z``."""
    z = np.asarray(z, dtype=np.float64).ravel()
    cols = []
    for d in range(z.size):
        zp, zm = z.copy(), z.copy()
        zp[d] += h
        zm[d] -= h
        fp = np.asarray(f(zp), dtype=np.float64).ravel()
        fm = np.asarray(f(zm), dtype=np.float64).ravel()
        bad = ~(np.isfinite(fp) & np.isfinite(fm))
        if bad.any():
            raise FloatingPointError(
                f"non-finite output at input coordinate {d}, output index {int(np.argmax(bad))}")
        cols.append((fp - fm) / (2.0 * h))
    return np.stack(cols, axis=1)


def jacobian_fd_batch(f: Callable[[np.ndarray], np.ndarray], Z, h: float = 1e-4) -> np.ndarray:
    """Vectorized :func:`jacobian_fd` for a batch ``Z`` (B, D); ``f`` maps (B', D) -> (B', N).

    Returns (B, N, D). All 2·D perturbations of every row go through ``f`` in
    one call.
    """
    Z = np.asarray(Z, dtype=np.float64)
    B, D = Z.shape
    eye = np.eye(D) * h
    plus = (Z[:, None, :] + eye[None]).reshape(B * D, D)
    minus = (Z[:, None, :] - eye[None]).reshape(B * D, D)
    out = np.asarray(f(np.concatenate([plus, minus], axis=0)), dtype=np.float64)
    if not np.all(np.isfinite(out)):
        row = int(np.argmax(~np.isfinite(out).all(axis=1)))
        raise FloatingPointError(f"non-finite output at input coordinate {row % D} of row {(row % (B * D)) // D}")
    fp, fm = out[: B * D], out[B * D:]
    J = ((fp - fm) / (2.0 * h)).reshape(B, D, -1)
    return J.transpose(0, 2, 1)


# --- optimizer --------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def zeros(cls, n: int, **kw) -> "AdamState":
        return cls(m=np.zeros(n), v=np.zeros(n), **kw)


def adam_step(state: AdamState, theta: np.ndarray, g: np.ndarray) -> tuple[np.ndarray, AdamState]:
    """Bias-corrected Adam update. ``theta``, ``state.m`` and ``state.v`` are updated in place."""
    if not (theta.shape == g.shape == state.m.shape == state.v.shape):
        raise ShapeError("adam_step", theta.shape, g.shape, state.m.shape)
    if not np.all(np.isfinite(g)):
        bad = int(np.argmax(~np.isfinite(g)))
        raise FloatingPointError(f"non-finite gradient at index {bad} (step {state.step + 1}): {g[bad]}")
    state.step += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * g
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * (g * g)
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    theta -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return theta, state
