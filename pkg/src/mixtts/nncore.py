"""Reverse-mode automatic differentiation over dense float64 numpy buffers.

Every operation the encoder/decoder needs is defined here, either as a
primitive with a hand-written backward rule or as a composite of primitives.
``grad_check`` verifies any scalar-valued computation against central finite
differences and is the ground truth for all gradient code in this package.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeMismatch(ValueError):
    pass


class NonFiniteGradient(ArithmeticError):
    pass


class DegenerateBatch(ValueError):
    pass


class Tensor:
    """Node in the computation tape.

    ``data`` is always a float64 ndarray. ``grad_fn`` maps the upstream
    gradient to a tuple of gradients aligned with ``parents`` (entries may be
    None). Tensors are write-once: ops build new nodes, ``backward`` walks
    them. Repeated backward passes over one graph are safe because gradients
    accumulate in a per-call dict, never on the nodes themselves.
    """

    __slots__ = ("data", "parents", "grad_fn", "requires_grad")

    def __init__(self, data, parents=(), grad_fn=None, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents = tuple(parents)
        self.grad_fn = grad_fn
        self.requires_grad = bool(requires_grad) or any(
            p.requires_grad for p in self.parents
        )

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def detach(self):
        """Value-only copy, cut loose from the tape."""
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

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


def tensor(data):
    """Constant (no gradient) tensor."""
    return Tensor(data)


def param(data):
    """Trainable leaf tensor."""
    return Tensor(data, requires_grad=True)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise primitives (full numpy broadcasting)
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor(out, (a, b), grad_fn)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor(out, (a, b), grad_fn)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def grad_fn(g):
        return (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        )

    return Tensor(out, (a, b), grad_fn)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def grad_fn(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return Tensor(out, (a, b), grad_fn)


def neg(a):
    a = as_tensor(a)
    return Tensor(-a.data, (a,), lambda g: (-g,))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    return Tensor(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def grad_fn(g):
        return (g * 0.5 / np.maximum(out, 1e-300),)

    return Tensor(out, (a,), grad_fn)


def square(a):
    a = as_tensor(a)
    return Tensor(a.data * a.data, (a,), lambda g: (g * 2.0 * a.data,))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return Tensor(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a):
    a = as_tensor(a)
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ez = np.exp(a.data[~pos])
    out[~pos] = ez / (1.0 + ez)
    return Tensor(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return Tensor(out, (a,), lambda g: (g * (1.0 - out * out),))


def softplus(a):
    """ln(1 + exp(x)) via the overflow-safe split max(x,0) + log1p(exp(-|x|))."""
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))

    def grad_fn(g):
        s = np.empty_like(a.data)
        pos = a.data >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
        ez = np.exp(a.data[~pos])
        s[~pos] = ez / (1.0 + ez)
        return (g * s,)

    return Tensor(out, (a,), grad_fn)


def maximum(a, b):
    """Elementwise max; at ties the gradient goes to ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data > b.data
    out = np.where(take_a, a.data, b.data)

    def grad_fn(g):
        return (
            _unbroadcast(g * take_a, a.shape),
            _unbroadcast(g * ~take_a, b.shape),
        )

    return Tensor(out, (a, b), grad_fn)


# ---------------------------------------------------------------------------
# structural primitives
# ---------------------------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def grad_fn(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor(out, (a, b), grad_fn)


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.shape).copy(),)

    return Tensor(out, (a,), grad_fn)


def mean_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)
    return Tensor(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def concat(parts, axis=0):
    parts = [as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(out, tuple(parts), grad_fn)


def narrow(a, axis, start, size):
    """Contiguous slice along one axis."""
    a = as_tensor(a)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + size)
    idx = tuple(idx)
    out = a.data[idx]

    def grad_fn(g):
        full = np.zeros(a.shape)
        full[idx] = g
        return (full,)

    return Tensor(out, (a,), grad_fn)


def gather_rows(table, indices):
    """Row lookup ``table[indices]``; backward scatter-adds into the table."""
    table = as_tensor(table)
    idx = np.asarray(indices, dtype=np.intp)
    out = table.data[idx]

    def grad_fn(g):
        gt = np.zeros(table.shape)
        np.add.at(gt, idx, g)
        return (gt,)

    return Tensor(out, (table,), grad_fn)


def pad_stack(seqs, width):
    """Stack 2-D tensors [T_i, C] into [B, width, C], zero-padded on the right."""
    seqs = [as_tensor(s) for s in seqs]
    cols = seqs[0].shape[1]
    out = np.zeros((len(seqs), width, cols))
    for i, s in enumerate(seqs):
        if s.ndim != 2 or s.shape[1] != cols or s.shape[0] > width:
            raise ShapeMismatch(f"pad_stack got {s.shape}, width {width}")
        out[i, : s.shape[0]] = s.data

    def grad_fn(g):
        return tuple(g[i, : s.shape[0]] for i, s in enumerate(seqs))

    return Tensor(out, tuple(seqs), grad_fn)


def weighted_mix(weights, memory):
    """Context reduction: out[b, m] = sum_u weights[b, u] * memory[b, u, m]."""
    weights, memory = as_tensor(weights), as_tensor(memory)
    if weights.ndim != 2 or memory.ndim != 3 or weights.shape != memory.shape[:2]:
        raise ShapeMismatch(f"weighted_mix {weights.shape} over {memory.shape}")
    out = np.einsum("bu,bum->bm", weights.data, memory.data)

    def grad_fn(g):
        return (
            np.einsum("bm,bum->bu", g, memory.data),
            np.einsum("bu,bm->bum", weights.data, g),
        )

    return Tensor(out, (weights, memory), grad_fn)


def frame_rows(x, window, hop):
    """Slice a 1-D signal into overlapping frames [N, window]."""
    x = as_tensor(x)
    if x.ndim != 1 or x.shape[0] < window:
        raise ShapeMismatch(f"frame_rows needs 1-D length >= {window}, got {x.shape}")
    n = 1 + (x.shape[0] - window) // hop
    idx = hop * np.arange(n)[:, None] + np.arange(window)[None, :]
    out = x.data[idx]

    def grad_fn(g):
        gx = np.zeros(x.shape)
        np.add.at(gx, idx, g)
        return (gx,)

    return Tensor(out, (x,), grad_fn)


def shift_rows(x, offset):
    """Row shift with zero fill: out[t] = x[t + offset] where valid, else 0."""
    x = as_tensor(x)
    t = x.shape[0]
    out = np.zeros(x.shape)
    if offset >= 0:
        out[: t - offset] = x.data[offset:]
    else:
        out[-offset:] = x.data[: t + offset]

    def grad_fn(g):
        gx = np.zeros(x.shape)
        if offset >= 0:
            gx[offset:] = g[: t - offset]
        else:
            gx[: t + offset] = g[-offset:]
        return (gx,)

    return Tensor(out, (x,), grad_fn)


# ---------------------------------------------------------------------------
# composites and layers
# ---------------------------------------------------------------------------

def linear(x, w, b=None):
    x, w = as_tensor(x), as_tensor(w)
    out = matmul(x, w)
    return out if b is None else add(out, b)


def conv1d(x, w, b=None):
    """Same-padded 1-D convolution over [T, C_in] with kernel [k, C_in, C_out].

    Odd kernel only, zero padding, cross-correlation orientation:
    out[t] = sum_j x[t + j - k//2] @ w[j].
    """
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 3 or x.ndim != 2 or w.shape[1] != x.shape[1]:
        raise ShapeMismatch(f"conv1d x {x.shape}, w {w.shape}")
    k = w.shape[0]
    if k % 2 == 0:
        raise ShapeMismatch(f"conv1d kernel must be odd, got {k}")
    half = k // 2
    out = None
    for j in range(k):
        tap = reshape(narrow(w, 0, j, 1), (w.shape[1], w.shape[2]))
        term = matmul(shift_rows(x, j - half), tap)
        out = term if out is None else add(out, term)
    return out if b is None else add(out, b)


def dropout(x, keep_prob, rng, active):
    """Inverted dropout; kept units scaled by 1/keep_prob. Identity when
    inactive or keep_prob >= 1 (no random draw consumed)."""
    x = as_tensor(x)
    if not active or keep_prob >= 1.0:
        return x
    mask = (rng.random(x.shape) < keep_prob) / keep_prob
    return mul(x, Tensor(mask))


def mse(pred, target):
    """Mean squared error over every element, as a scalar tensor."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"mse {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    out = np.mean(diff * diff)
    n = pred.size

    def grad_fn(g):
        gp = g * 2.0 * diff / n
        return gp, -gp

    return Tensor(out, (pred, target), grad_fn)


@dataclass
class RunningStats:
    """Exponential running mean/variance for batch norm."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def create(cls, num_features):
        return cls(np.zeros(num_features), np.ones(num_features))

    def copy(self):
        return RunningStats(self.mean.copy(), self.var.copy())


def batch_norm(x, gamma, beta, stats, mode, momentum=0.9, eps=1e-5):
    """Normalize over axis 0 per feature.

    Train mode uses batch statistics and folds them into ``stats`` with the
    given momentum; eval mode uses ``stats`` as constants.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if mode == "train":
        if x.shape[0] < 2:
            raise DegenerateBatch(f"batch of {x.shape[0]} in train mode")
        mu = mean_(x, axis=0, keepdims=True)
        centered = sub(x, mu)
        var = mean_(square(centered), axis=0, keepdims=True)
        inv_std = div(1.0, sqrt(add(var, eps)))
        xhat = mul(centered, inv_std)
        stats.mean[:] = momentum * stats.mean + (1 - momentum) * mu.data[0]
        stats.var[:] = momentum * stats.var + (1 - momentum) * var.data[0]
    elif mode == "eval":
        inv = 1.0 / np.sqrt(stats.var + eps)
        xhat = mul(sub(x, Tensor(stats.mean)), Tensor(inv))
    else:
        raise ValueError(f"unknown batch_norm mode {mode!r}")
    return add(mul(xhat, gamma), beta)


@dataclass
class LstmParams:
    """Fused-gate LSTM parameters; gate order along the last axis is
    (input, forget, candidate, output)."""

    wx: Tensor
    wh: Tensor
    b: Tensor

    @classmethod
    def create(cls, rng, in_dim, hidden, scale=0.075, forget_bias=1.0):
        wx = param(truncated_normal(rng, (in_dim, 4 * hidden), scale))
        wh = param(truncated_normal(rng, (hidden, 4 * hidden), scale))
        b = np.zeros(4 * hidden)
        b[hidden : 2 * hidden] = forget_bias
        return cls(wx, wh, param(b))

    @property
    def hidden(self):
        return self.wh.shape[0]

    def tensors(self):
        return [self.wx, self.wh, self.b]


@dataclass
class LstmState:
    h: Tensor
    c: Tensor

    @classmethod
    def zeros(cls, batch, hidden):
        return cls(Tensor(np.zeros((batch, hidden))), Tensor(np.zeros((batch, hidden))))

    def detach(self):
        return LstmState(self.h.detach(), self.c.detach())


def lstm_step(x, state, params, cell_keep_prob=1.0, rng=None, active=False):
    """One LSTM step over a [B, in_dim] input.

    Cell dropout multiplies the candidate update (the tanh term entering c)
    by a Bernoulli(keep)/keep mask when active.
    """
    x = as_tensor(x)
    hidden = params.hidden
    if x.ndim != 2 or x.shape[1] != params.wx.shape[0]:
        raise ShapeMismatch(f"lstm_step x {x.shape}, wx {params.wx.shape}")
    z = add(add(matmul(x, params.wx), matmul(state.h, params.wh)), params.b)
    i = sigmoid(narrow(z, 1, 0, hidden))
    f = sigmoid(narrow(z, 1, hidden, hidden))
    g = tanh(narrow(z, 1, 2 * hidden, hidden))
    o = sigmoid(narrow(z, 1, 3 * hidden, hidden))
    g = dropout(g, cell_keep_prob, rng, active)
    c = add(mul(f, state.c), mul(i, g))
    h = mul(o, tanh(c))
    return h, LstmState(h, c)


# ---------------------------------------------------------------------------
# backward pass and gradient checking
# ---------------------------------------------------------------------------

def _toposort(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))
    return order


def backward(loss, wrt):
    """Gradients of scalar ``loss`` for each tensor in ``wrt``.

    Purely functional: gradients live in a per-call dict, so one graph can be
    walked any number of times.
    """
    loss = as_tensor(loss)
    if loss.shape != ():
        raise ShapeMismatch(f"backward needs a scalar loss, got {loss.shape}")
    grads = {id(loss): np.ones(())}
    for node in reversed(_toposort(loss)):
        g = grads.get(id(node))
        if g is None or node.grad_fn is None:
            continue
        for parent, pg in zip(node.parents, node.grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            pid = id(parent)
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
    return [grads.get(id(p), np.zeros(p.shape)) for p in wrt]


def grad_check(f, params, eps=1e-5, rng=None, coords_per_param=6):
    """Max relative error between analytic and central-difference gradients.

    ``f`` takes no arguments and must rebuild its graph from the current
    ``params`` data on every call (any randomness inside must be frozen).
    Error metric per coordinate: |analytic - numeric| / max(1, |a|, |n|).
    """
    rng = rng or np.random.default_rng(0)
    loss = f()
    grads = backward(loss, params)
    if not all(np.isfinite(g).all() for g in grads):
        raise NonFiniteGradient("analytic gradient is not finite")
    worst = 0.0
    for p, g in zip(params, grads):
        n = p.data.size
        coords = (
            np.arange(n)
            if n <= coords_per_param
            else rng.choice(n, size=coords_per_param, replace=False)
        )
        for c in coords:
            orig = p.data.flat[c]
            p.data.flat[c] = orig + eps
            hi = float(f().data)
            p.data.flat[c] = orig - eps
            lo = float(f().data)
            p.data.flat[c] = orig
            numeric = (hi - lo) / (2 * eps)
            analytic = g.reshape(-1)[c]
            err = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# initializers
# ---------------------------------------------------------------------------

def truncated_normal(rng, shape, scale, cutoff=2.0):
    """Normal(0, scale) with samples beyond cutoff*sigma redrawn."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > cutoff
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > cutoff
    return out * scale


def orthonormal(rng, shape, gain=1.0):
    """Orthonormal init via QR of a Gaussian; rows or columns orthonormal
    depending on which side is smaller."""
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]
