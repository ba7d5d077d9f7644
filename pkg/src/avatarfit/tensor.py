"""Reverse-mode automatic differentiation over dense numpy arrays.

Graphs are built eagerly: every op returns a Tensor that remembers its
parents and a closure computing their gradients. float32 is the working
precision; building leaves as float64 switches the whole downstream graph
to 64-bit (used by the gradient-check suite).

The op catalogue is fixed: conv2d (stride 1/2), conv_transpose2d (stride 2),
linear/matmul, relu, tanh, sigmoid, add/sub/mul/scale, concat_channels,
flatten/reshape, sum/mean, squared_l2, cosine_similarity,
softmax_cross_entropy, upsample2x, stop_gradient, plus elementwise exp and
div. Everything else in the package is composed from these.
"""

from __future__ import annotations

import logging
import math

import numpy as np

log = logging.getLogger("avatarfit.tensor")

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Operands do not match an op's shape contract."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN/Inf; the graph refuses to commit it."""


class FrozenParameterError(RuntimeError):
    """An optimizer was pointed at frozen weights."""


_FINITE_CHECKS = True


def set_finite_checks(enabled):
    """Toggle the per-op non-finite guard; returns the previous setting."""
    global _FINITE_CHECKS
    prev = _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)
    return prev


def _guard(data, op):
    if _FINITE_CHECKS:
        # sum() propagates NaN/Inf; one cheap reduction instead of isfinite scans
        if not np.isfinite(np.sum(data)):
            if not np.all(np.isfinite(data)):
                raise NonFiniteError(f"non-finite values produced by {op}")
    return data


class Tensor:
    """A dense float array plus the bookkeeping for reverse-mode autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "frozen", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        _guard(arr, "tensor")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.frozen = False
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # -- graph traversal ---------------------------------------------------

    def _toposort(self):
        order, seen = [], set()
        stack = [(self, False)]
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

    def backward(self):
        """Populate .grad on every reachable tensor with requires_grad."""
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.data.shape}")
        order = self._toposort()
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean_(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def _accum(t, g):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _make(data, parents, backward, op):
    out = Tensor.__new__(Tensor)
    out.data = _guard(data, op)
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out.frozen = False
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def gradients(loss, leaves):
    """Backward from scalar `loss`; every tensor in `leaves` ends up with a
    gradient buffer (zeros when unreachable from the loss)."""
    loss.backward()
    out = []
    for leaf in leaves:
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)
        out.append(leaf.grad)
    return out


# -- elementwise -------------------------------------------------------------


def _same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


def add(a, b):
    _same_shape(a, b, "add")

    def bw(g):
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, g)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    _same_shape(a, b, "sub")

    def bw(g):
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, -g)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    _same_shape(a, b, "mul")

    def bw(g):
        if a.requires_grad:
            _accum(a, g * b.data)
        if b.requires_grad:
            _accum(b, g * a.data)

    return _make(a.data * b.data, (a, b), bw, "mul")


def scale(x, c):
    c = float(c)

    def bw(g):
        _accum(x, g * c)

    return _make(x.data * c, (x,), bw, "scale")


def div(x, y):
    _same_shape(x, y, "div")

    def bw(g):
        if x.requires_grad:
            _accum(x, g / y.data)
        if y.requires_grad:
            _accum(y, -g * x.data / (y.data * y.data))

    return _make(x.data / y.data, (x, y), bw, "div")


def exp(x):
    out_data = np.exp(x.data)

    def bw(g):
        _accum(x, g * out_data)

    return _make(out_data, (x,), bw, "exp")


def relu(x):
    mask = x.data > 0

    def bw(g):
        _accum(x, g * mask)

    return _make(np.where(mask, x.data, 0), (x,), bw, "relu")


def tanh(x):
    out_data = np.tanh(x.data)

    def bw(g):
        _accum(x, g * (1.0 - out_data * out_data))

    return _make(out_data, (x,), bw, "tanh")


def sigmoid(x):
    out_data = 1.0 / (1.0 + np.exp(-x.data))

    def bw(g):
        _accum(x, g * out_data * (1.0 - out_data))

    return _make(out_data, (x,), bw, "sigmoid")


def stop_gradient(x):
    """Identity forward; contributes exactly zero gradient to x."""
    out = Tensor.__new__(Tensor)
    out.data = x.data
    out.grad = None
    out.requires_grad = False
    out.frozen = False
    out._parents = ()
    out._backward = None
    return out


def straight_through(value, grad_path):
    """Forward is exactly value.data; backward routes the whole gradient to
    grad_path. Equivalent to grad_path + sg(value - grad_path) without the
    float round-trip, so the quantizer's output equals its code vectors
    bit-for-bit."""
    _same_shape(value, grad_path, "straight_through")

    def bw(g):
        if grad_path.requires_grad:
            _accum(grad_path, g)

    return _make(value.data, (grad_path,), bw, "straight_through")


# -- shape ops ----------------------------------------------------------------


def reshape(x, shape):
    old = x.data.shape

    def bw(g):
        _accum(x, g.reshape(old))

    return _make(x.data.reshape(shape), (x,), bw, "reshape")


def flatten(x):
    """(N, ...) -> (N, prod(...))."""
    return reshape(x, (x.data.shape[0], -1))


def concat_channels(a, b):
    """Concatenate NCHW maps along the channel axis."""
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError("concat_channels expects NCHW tensors")
    if a.data.shape[0] != b.data.shape[0] or a.data.shape[2:] != b.data.shape[2:]:
        raise ShapeError(f"concat_channels: mismatched extents {a.data.shape} vs {b.data.shape}")
    ca = a.data.shape[1]

    def bw(g):
        if a.requires_grad:
            _accum(a, g[:, :ca])
        if b.requires_grad:
            _accum(b, g[:, ca:])

    return _make(np.concatenate([a.data, b.data], axis=1), (a, b), bw, "concat_channels")


def upsample2x(x):
    """Nearest-neighbor x2 on NCHW maps."""
    if x.data.ndim != 4:
        raise ShapeError("upsample2x expects an NCHW tensor")
    n, c, h, w = x.data.shape

    def bw(g):
        _accum(x, g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    return _make(x.data.repeat(2, axis=2).repeat(2, axis=3), (x,), bw, "upsample2x")


# -- reductions ---------------------------------------------------------------


def sum_(x, axis=None):
    def bw(g):
        if axis is None:
            _accum(x, np.broadcast_to(g, x.data.shape).copy())
        else:
            _accum(x, np.broadcast_to(np.expand_dims(g, axis), x.data.shape).copy())

    return _make(np.sum(x.data, axis=axis), (x,), bw, "sum")


def mean_(x, axis=None):
    if axis is None:
        count = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= x.data.shape[ax]
    inv = 1.0 / count

    def bw(g):
        if axis is None:
            _accum(x, np.broadcast_to(g * inv, x.data.shape).copy())
        else:
            _accum(x, np.broadcast_to(np.expand_dims(g * inv, axis), x.data.shape).copy())

    return _make(np.mean(x.data, axis=axis), (x,), bw, "mean")


def squared_l2(a, b):
    """sum((a - b)^2) over all elements -> scalar."""
    _same_shape(a, b, "squared_l2")
    diff = a.data - b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, (2.0 * g) * diff)
        if b.requires_grad:
            _accum(b, (-2.0 * g) * diff)

    return _make(np.asarray(np.sum(diff * diff), dtype=a.data.dtype), (a, b), bw, "squared_l2")


# -- linear algebra -----------------------------------------------------------


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} @ {b.data.shape}")

    def bw(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def linear(x, w, b):
    """x (N,K) @ w (K,M) + b (M,)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(f"linear: incompatible shapes {x.data.shape} @ {w.data.shape}")
    if b.data.shape != (w.data.shape[1],):
        raise ShapeError(f"linear: bias shape {b.data.shape} != ({w.data.shape[1]},)")

    def bw(g):
        if x.requires_grad:
            _accum(x, g @ w.data.T)
        if w.requires_grad:
            _accum(w, x.data.T @ g)
        if b.requires_grad:
            _accum(b, g.sum(axis=0))

    return _make(x.data @ w.data + b.data, (x, w, b), bw, "linear")


# -- convolution --------------------------------------------------------------


def _im2col(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    hp, wp = x.shape[2], x.shape[3]
    hout = (hp - kh) // stride + 1
    wout = (wp - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * hout * wout, c * kh * kw)
    return cols, hout, wout


def _col2im(dcols, xshape, kh, kw, stride, pad):
    n, c, h, w = xshape
    hp, wp = h + 2 * pad, w + 2 * pad
    hout = (hp - kh) // stride + 1
    wout = (wp - kw) // stride + 1
    dxp = np.zeros((n, c, hp, wp), dtype=dcols.dtype)
    d6 = dcols.reshape(n, hout, wout, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    for u in range(kh):
        for v in range(kw):
            dxp[:, :, u : u + stride * hout : stride, v : v + stride * wout : stride] += d6[:, :, :, :, u, v]
    if pad:
        return dxp[:, :, pad : pad + h, pad : pad + w]
    return dxp


def conv2d(x, w, b, stride=1, pad=1):
    """NCHW conv; w is (Cout, Cin, kh, kw). Zero padding; with the default
    k=3, pad=1 the spatial extents are preserved (stride 1) or exactly
    halved (stride 2, power-of-two inputs)."""
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d: input must be NCHW, got {x.data.shape}")
    cout, cin, kh, kw = w.data.shape
    if x.data.shape[1] != cin:
        raise ShapeError(f"conv2d: input has {x.data.shape[1]} channels, kernel expects {cin}")
    if b.data.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {b.data.shape} != ({cout},)")
    n = x.data.shape[0]
    cols, hout, wout = _im2col(x.data, kh, kw, stride, pad)
    wmat = w.data.reshape(cout, cin * kh * kw)
    out = cols @ wmat.T + b.data
    out = out.reshape(n, hout, wout, cout).transpose(0, 3, 1, 2)

    def bw(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * hout * wout, cout)
        if w.requires_grad:
            _accum(w, (gmat.T @ cols).reshape(w.data.shape))
        if b.requires_grad:
            _accum(b, gmat.sum(axis=0))
        if x.requires_grad:
            dcols = gmat @ wmat
            _accum(x, _col2im(dcols, x.data.shape, kh, kw, stride, pad))

    return _make(np.ascontiguousarray(out), (x, w, b), bw, "conv2d")


def conv_transpose2d(x, w, b):
    """Stride-2 transposed conv with a 2x2 kernel (exact x2 upsampling).
    w is (Cin, Cout, 2, 2)."""
    if x.data.ndim != 4:
        raise ShapeError(f"conv_transpose2d: input must be NCHW, got {x.data.shape}")
    cin, cout, kh, kw = w.data.shape
    if (kh, kw) != (2, 2):
        raise ShapeError("conv_transpose2d supports kernel 2x2 (stride 2) only")
    if x.data.shape[1] != cin:
        raise ShapeError(f"conv_transpose2d: input has {x.data.shape[1]} channels, kernel expects {cin}")
    if b.data.shape != (cout,):
        raise ShapeError(f"conv_transpose2d: bias shape {b.data.shape} != ({cout},)")
    n, _, h, wd = x.data.shape
    xmat = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)).reshape(n * h * wd, cin)
    wmat = w.data.reshape(cin, cout * 4)
    out = (xmat @ wmat).reshape(n, h, wd, cout, 2, 2).transpose(0, 3, 1, 4, 2, 5)
    out = np.ascontiguousarray(out).reshape(n, cout, 2 * h, 2 * wd) + b.data.reshape(1, cout, 1, 1)

    def bw(g):
        g6 = g.reshape(n, cout, h, 2, wd, 2).transpose(0, 2, 4, 1, 3, 5)
        gmat = np.ascontiguousarray(g6).reshape(n * h * wd, cout * 4)
        if w.requires_grad:
            _accum(w, (xmat.T @ gmat).reshape(w.data.shape))
        if b.requires_grad:
            _accum(b, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dx = (gmat @ wmat.T).reshape(n, h, wd, cin).transpose(0, 3, 1, 2)
            _accum(x, np.ascontiguousarray(dx))

    return _make(out, (x, w, b), bw, "conv_transpose2d")


# -- fused similarity / classification ops -------------------------------------


def cosine_similarity(a, b, eps=1e-12):
    """Row-wise cosine similarity of (N, D) tensors -> (N,)."""
    if a.data.ndim != 2 or a.data.shape != b.data.shape:
        raise ShapeError(f"cosine_similarity expects matching (N, D) tensors, got {a.data.shape} vs {b.data.shape}")
    na = np.sqrt(np.sum(a.data * a.data, axis=1))
    nb = np.sqrt(np.sum(b.data * b.data, axis=1))
    dot = np.sum(a.data * b.data, axis=1)
    denom = na * nb + eps
    cos = dot / denom

    def bw(g):
        # d cos/da = b/denom - dot*nb/(na*denom^2) * a   (and symmetrically for b)
        if a.requires_grad:
            da = b.data / denom[:, None] - (dot * nb / ((na + eps) * denom * denom))[:, None] * a.data
            _accum(a, g[:, None] * da)
        if b.requires_grad:
            db = a.data / denom[:, None] - (dot * na / ((nb + eps) * denom * denom))[:, None] * b.data
            _accum(b, g[:, None] * db)

    return _make(cos, (a, b), bw, "cosine_similarity")


def softmax_cross_entropy(logits, labels):
    """Per-row cross-entropy of (N, K) logits against integer labels (N,),
    computed with max-subtraction. Returns (N,)."""
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects (N, K) logits, got {logits.data.shape}")
    labels = np.asarray(labels)
    n, k = logits.data.shape
    if labels.shape != (n,):
        raise ShapeError(f"softmax_cross_entropy: labels shape {labels.shape} != ({n},)")
    if labels.min() < 0 or labels.max() >= k:
        raise ShapeError("softmax_cross_entropy: label out of range")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    sez = ez.sum(axis=1)
    lse = np.log(sez)
    rows = np.arange(n)
    losses = lse - z[rows, labels]

    def bw(g):
        p = ez / sez[:, None]
        p[rows, labels] -= 1.0
        _accum(logits, p * g[:, None])

    return _make(losses, (logits,), bw, "softmax_cross_entropy")


# -- parameter containers ------------------------------------------------------


def he_normal(rng, shape, fan_in, dtype=DEFAULT_DTYPE):
    """Weights ~ N(0, 2/fan_in); biases elsewhere start at zero."""
    w = rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)
    return Tensor(w.astype(dtype), requires_grad=True)


def zeros_param(shape, dtype=DEFAULT_DTYPE):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


class Net:
    """Base weight container: ordered named parameters, freezing, casting."""

    def __init__(self):
        self._params = {}

    def _param(self, name, tensor):
        self._params[name] = tensor
        return tensor

    def parameters(self):
        return list(self._params.values())

    def named_parameters(self):
        return dict(self._params)

    def freeze(self):
        for t in self._params.values():
            t.frozen = True
            t.requires_grad = False
        return self

    @property
    def frozen(self):
        return all(t.frozen for t in self._params.values()) and bool(self._params)

    def astype(self, dtype):
        for t in self._params.values():
            t.data = t.data.astype(dtype)
        return self

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None


class Adam:
    """Adam with bias correction. Steps are rejected wholesale (state
    untouched, incident logged) when any gradient is non-finite."""

    def __init__(self, params, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        for p in self.params:
            if p.frozen:
                raise FrozenParameterError("refusing to optimize frozen weights")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        """Apply one update from the .grad buffers. Returns False if the
        step was rejected because of a non-finite gradient."""
        grads = []
        for p in self.params:
            if p.frozen:
                raise FrozenParameterError("refusing to optimize frozen weights")
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.isfinite(np.sum(g)) and not np.all(np.isfinite(g)):
                log.warning("adam: non-finite gradient at t=%d, step rejected", self.t + 1)
                return False
            grads.append(g)
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)
            _guard(p.data, "adam_step")
        return True

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def state_dict(self):
        return {
            "t": self.t,
            "m": [m.copy() for m in self.m],
            "v": [v.copy() for v in self.v],
        }

    def load_state_dict(self, state):
        self.t = int(state["t"])
        self.m = [np.array(m, dtype=p.data.dtype) for m, p in zip(state["m"], self.params)]
        self.v = [np.array(v, dtype=p.data.dtype) for v, p in zip(state["v"], self.params)]
