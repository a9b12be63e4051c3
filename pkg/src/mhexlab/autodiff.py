"""Reverse-mode automatic differentiation over dense float64 numpy arrays.

A ``Tensor`` wraps an ndarray together with backward closures; the recorded
forward graph (the tape) is the DAG of parent links. The graph is retained
after backward passes so several losses from one forward pass can each be
differentiated with respect to the same parameter (``grad_wrt``).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, ConfigurationError


class Tensor:
    """Node of the differentiation tape.

    ``data`` is always float64. ``grad`` stays ``None`` until ``backward``
    populates it; repeated backward calls accumulate.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(_parents)
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def detach(self):
        """Copy of this node cut off from the tape (shares the data buffer)."""
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not a primitive here")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return Tensor(out_data, _parents=(a, b), _backward=backward)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return Tensor(out_data, _parents=(a, b), _backward=backward)


def relu(x):
    x = _as_tensor(x)
    mask = x.data > 0  # subgradient at 0 is 0

    def backward(g):
        return (g * mask,)

    return Tensor(np.where(mask, x.data, 0.0), _parents=(x,), _backward=backward)


def sigmoid(x):
    x = _as_tensor(x)
    d = x.data
    # two-branch form, stable for large |x|
    out_data = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                        np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))

    def backward(g):
        return (g * out_data * (1.0 - out_data),)

    return Tensor(out_data, _parents=(x,), _backward=backward)


def sum_axis(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    out_data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.data.shape).copy(),)
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.data.shape).copy(),)

    return Tensor(out_data, _parents=(x,), _backward=backward)


def mean_all(x):
    x = _as_tensor(x)
    n = x.data.size
    return mul(sum_axis(x), 1.0 / n)


def reshape(x, shape):
    x = _as_tensor(x)

    def backward(g):
        return (g.reshape(x.data.shape),)

    return Tensor(x.data.reshape(shape), _parents=(x,), _backward=backward)


def transpose(x, axes):
    x = _as_tensor(x)
    inv = np.argsort(axes)

    def backward(g):
        return (g.transpose(inv),)

    return Tensor(x.data.transpose(axes), _parents=(x,), _backward=backward)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    """Matrix product; stacked (batched) operands share leading dims, or one
    operand may be a plain 2-D matrix."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    if a.data.ndim > 2 and b.data.ndim > 2 and a.data.shape[:-2] != b.data.shape[:-2]:
        raise DimensionError(f"matmul leading dims differ: {a.shape} @ {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return Tensor(out_data, _parents=(a, b), _backward=backward)


def conv2d(x, w, stride=1, pad=0):
    """Cross-correlation with zero padding.

    ``x`` is (C,H,W) or (N,C,H,W); ``w`` is (O,C,kh,kw). The output extent
    is floor((H + 2*pad - kh) / stride) + 1.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or w.data.ndim != 4:
        raise DimensionError(f"conv2d expects (N,C,H,W) and (O,C,kh,kw), got {x.shape}, {w.shape}")
    n, c, h, wd_ = xd.shape
    o, cw, kh, kw = w.data.shape
    if cw != c:
        raise DimensionError(f"conv2d channel mismatch: input {c} vs kernel {cw}")
    if kh > h + 2 * pad or kw > wd_ + 2 * pad:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{wd_ + 2 * pad}")
    if stride < 1:
        raise ConfigurationError(f"conv2d stride must be >= 1, got {stride}")
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd_ + 2 * pad - kw) // stride + 1

    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    # (N, C, oh, ow, kh, kw) view, then columns (N, C*kh*kw, oh*ow)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, oh * ow)
    wmat = w.data.reshape(o, c * kh * kw)
    out_data = np.matmul(wmat, cols).reshape(n, o, oh, ow)
    if squeeze:
        out_data = out_data[0]

    def backward(g):
        gm = (g[None] if squeeze else g).reshape(n, o, oh * ow)
        gw = np.einsum("nol,nkl->ok", gm, cols).reshape(w.data.shape)
        dcols = np.matmul(wmat.T, gm).reshape(n, c, kh, kw, oh, ow)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += dcols[:, :, i, j]
        gx = gxp[:, :, pad:pad + h, pad:pad + wd_] if pad else gxp
        return (gx[0] if squeeze else gx), gw

    return Tensor(out_data, _parents=(x, w), _backward=backward)


def global_avg_pool(x):
    """Spatial mean over the trailing two axes: (C,H,W)->(C,), (N,C,H,W)->(N,C)."""
    x = _as_tensor(x)
    if x.data.ndim < 3:
        raise DimensionError(f"global_avg_pool expects >=3-D input, got {x.shape}")
    h, w = x.data.shape[-2:]
    out_data = x.data.mean(axis=(-2, -1))

    def backward(g):
        return (np.broadcast_to(g[..., None, None] / (h * w), x.data.shape).copy(),)

    return Tensor(out_data, _parents=(x,), _backward=backward)


def layer_norm(x, gamma=None, beta=None, eps=1e-5):
    """Standardize the last axis, then apply the optional affine map."""
    if eps <= 0:
        raise ConfigurationError(f"layer_norm eps must be > 0, got {eps}")
    x = _as_tensor(x)
    d = x.data.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    gdat = gamma.data if gamma is not None else np.ones(d)
    bdat = beta.data if beta is not None else np.zeros(d)
    out_data = xhat * gdat + bdat
    parents = [x] + ([gamma] if gamma is not None else []) + ([beta] if beta is not None else [])

    def backward(g):
        gxhat = g * gdat
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        grads = [gx]
        if gamma is not None:
            grads.append((g * xhat).reshape(-1, d).sum(axis=0).reshape(gamma.data.shape))
        if beta is not None:
            grads.append(g.reshape(-1, d).sum(axis=0).reshape(bdat.shape))
        return tuple(grads)

    return Tensor(out_data, _parents=parents, _backward=backward)


def softmax_last(x, additive_mask=None):
    """Softmax over the last axis; ``additive_mask`` (ndarray) is added to the
    logits first (large negatives suppress padded positions)."""
    x = _as_tensor(x)
    z = x.data + additive_mask if additive_mask is not None else x.data
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return Tensor(s, _parents=(x,), _backward=backward)


def softmax_cross_entropy(logits, targets):
    """Mean negative log softmax probability of the target classes.

    ``logits`` is (B, C) (or (C,) for a single sample); ``targets`` are class
    indices.
    """
    logits = _as_tensor(logits)
    ld = logits.data[None] if logits.data.ndim == 1 else logits.data
    if ld.ndim != 2:
        raise DimensionError(f"logits must be (B,C) or (C,), got {logits.shape}")
    t = np.atleast_1d(np.asarray(targets, dtype=np.intp))
    b, c = ld.shape
    if t.shape != (b,):
        raise DimensionError(f"targets shape {t.shape} does not match batch {b}")
    if t.min() < 0 or t.max() >= c:
        raise IndexError(f"target out of range [0, {c})")
    z = ld - ld.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(logsumexp - z[np.arange(b), t]))
    probs = np.exp(z - logsumexp[:, None])

    def backward(g):
        gl = probs.copy()
        gl[np.arange(b), t] -= 1.0
        gl *= float(g) / b
        return (gl.reshape(logits.data.shape),)

    return Tensor(loss, _parents=(logits,), _backward=backward)


def nearest_resize(x, out_hw):
    """Nearest-neighbor resize of the trailing two axes."""
    x = _as_tensor(x)
    h, w = x.data.shape[-2:]
    h2, w2 = out_hw
    ir = (np.arange(h2) * h) // h2
    ic = (np.arange(w2) * w) // w2
    out_data = x.data[..., ir[:, None], ic[None, :]]

    def backward(g):
        gx = np.zeros_like(x.data).reshape(-1, h, w)
        gg = g.reshape(-1, h2, w2)
        m = gx.shape[0]
        np.add.at(gx, (np.arange(m)[:, None, None], ir[None, :, None], ic[None, None, :]), gg)
        return (gx.reshape(x.data.shape),)

    return Tensor(out_data, _parents=(x,), _backward=backward)


def embedding(table, ids):
    """Row lookup into ``table`` (V, D) by integer ``ids`` (any shape)."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.intp)

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
        return (gt,)

    return Tensor(table.data[ids], _parents=(table,), _backward=backward)


def masked_seq_mean(x, keep_mask):
    """Mean over the sequence axis of (B, S, D), counting positions where
    ``keep_mask`` (B, S) is truthy."""
    x = _as_tensor(x)
    m = np.asarray(keep_mask, dtype=np.float64)
    counts = m.sum(axis=1)
    if np.any(counts == 0):
        raise ContractError("masked_seq_mean: a sequence has no kept positions")
    out_data = (x.data * m[:, :, None]).sum(axis=1) / counts[:, None]

    def backward(g):
        return (g[:, None, :] * m[:, :, None] / counts[:, None, None],)

    return Tensor(out_data, _parents=(x,), _backward=backward)


# ---------------------------------------------------------------------------
# backward engine


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order  # parents before children


def _adjoints(loss):
    """Reverse sweep; returns {id(tensor): adjoint ndarray} without touching
    any ``.grad`` buffer."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    order = _topo_order(loss)
    adj = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = adj.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None:
                continue
            key = id(parent)
            if key in adj:
                adj[key] = adj[key] + pg
            else:
                adj[key] = pg
    return adj, order


def backward(loss):
    """Populate ``.grad`` of every requires_grad tensor reachable from
    ``loss`` (accumulating on repeated calls). The graph is retained."""
    adj, order = _adjoints(loss)
    for node in order:
        if node.requires_grad and id(node) in adj:
            g = adj[id(node)]
            node.grad = g.copy() if node.grad is None else node.grad + g


def grad_wrt(loss, param):
    """d(loss)/d(param) without disturbing pending ``.grad`` buffers.

    Returns a zero tensor when ``param`` does not influence ``loss``.
    """
    if not isinstance(param, Tensor) or not param.requires_grad:
        raise ContractError("grad_wrt: param is not a differentiable tensor on the tape")
    adj, _ = _adjoints(loss)
    g = adj.get(id(param))
    return Tensor(np.zeros_like(param.data) if g is None else g)
