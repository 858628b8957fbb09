"""Reverse-mode autodiff over dense float64 numpy arrays.

The engine is deliberately small: a dynamic tape rebuilt on every forward
pass, exactly the operations the rest of the package needs, and nothing
else (no GPU, no mixed precision, no arbitrary-rank broadcasting beyond
what numpy alignment gives us).

Feature maps are plain rank-3 tensors laid out channels x height x width.

Gradients accumulate: calling ``backward()`` twice without ``zero_grad()``
doubles every gradient.  Within a single backward pass fresh buffers are
used, so stale gradients are never re-propagated.
"""

from __future__ import annotations

import itertools

import numpy as np
import scipy.sparse as sp

from .errors import ConfigurationError

_ids = itertools.count()


class Tensor:
    """A dense float64 array plus an optional gradient and tape node.

    ``_parents`` and ``_vjp`` are set by the op that produced the tensor;
    leaves have neither.  Node ids increase monotonically with creation
    order, so descending id order is a valid reverse-topological order of
    any dynamic graph.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_id")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None
        self._id = next(_ids)

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _result(data, parents, vjp):
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._vjp = vjp
        return out

    def detach(self):
        """A new leaf sharing this tensor's data, cut off from the tape."""
        return Tensor(self.data)

    def copy(self):
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    # -- bookkeeping -----------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        # never mutate in place: grads may alias vjp views of other buffers
        self.grad = g if self.grad is None else self.grad + g

    def backward(self):
        """Backpropagate from a scalar, accumulating into ``grad`` fields."""
        if self.data.size != 1:
            raise ConfigurationError(
                f"backward() requires a scalar, got shape {self.data.shape}"
            )
        if not self.requires_grad:
            return
        # Reachable requires-grad subgraph, then reverse creation order.
        nodes = {}
        stack = [self]
        while stack:
            t = stack.pop()
            if t._id in nodes:
                continue
            nodes[t._id] = t
            for p in t._parents:
                if p.requires_grad:
                    stack.append(p)
        order = sorted(nodes.values(), key=lambda t: -t._id)
        flows = {self._id: np.ones_like(self.data)}
        for t in order:
            g = flows.pop(t._id, None)
            if g is None:
                continue
            t._accumulate(g)
            if t._vjp is None:
                continue
            for p, pg in zip(t._parents, t._vjp(g)):
                if pg is None or not p.requires_grad:
                    continue
                if p._id in flows:
                    flows[p._id] = flows[p._id] + pg
                else:
                    flows[p._id] = pg

    # -- operator sugar ----------------------------------------------------------

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

    def __pow__(self, k):
        return power(self, k)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic ---------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._result(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._result(
        a.data / b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        ),
    )


def power(a, k):
    a = as_tensor(a)
    k = float(k)
    return Tensor._result(
        a.data**k, (a,), lambda g: (g * k * a.data ** (k - 1.0),)
    )


def maximum(a, b):
    """Elementwise max; ties route the gradient to the first argument."""
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data >= b.data
    return Tensor._result(
        np.where(take_a, a.data, b.data),
        (a, b),
        lambda g: (
            _unbroadcast(g * take_a, a.data.shape),
            _unbroadcast(g * ~take_a, b.data.shape),
        ),
    )


def absolute(a):
    """|a| with the subgradient convention sign(0) = 0."""
    a = as_tensor(a)
    return Tensor._result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    return Tensor._result(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return Tensor._result(out, (a,), lambda g: (g * 0.5 / out,))


def sigmoid(a):
    a = as_tensor(a)
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ex = np.exp(a.data[~pos])
    out[~pos] = ex / (1.0 + ex)
    return Tensor._result(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return Tensor._result(a.data * mask, (a,), lambda g: (g * mask,))


# -- shape manipulation --------------------------------------------------------


def reshape(a, shape):
    a = as_tensor(a)
    return Tensor._result(
        a.data.reshape(shape), (a,), lambda g: (g.reshape(a.data.shape),)
    )


def transpose(a, axes):
    a = as_tensor(a)
    inv = tuple(np.argsort(axes))
    return Tensor._result(
        np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),)
    )


def concat(tensors, axis=0):
    """Concatenate along ``axis`` (channel concat for feature maps)."""
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._result(
        np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), vjp
    )


def take_columns(a, idx):
    """Gather columns of a 2-D tensor; scatter-adds on the way back."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)

    def vjp(g):
        out = np.zeros_like(a.data)
        np.add.at(out, (slice(None), idx), g)
        return (out,)

    return Tensor._result(a.data[:, idx], (a,), vjp)


def take_channels(a, lo, hi):
    """Contiguous slice [lo:hi) along the leading axis."""
    a = as_tensor(a)

    def vjp(g):
        out = np.zeros_like(a.data)
        out[lo:hi] = g
        return (out,)

    return Tensor._result(a.data[lo:hi], (a,), vjp)


# -- reductions -----------------------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return Tensor._result(a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.data.shape[i] for i in axes]))

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / n, a.data.shape).copy(),)

    return Tensor._result(a.data.mean(axis=axis, keepdims=keepdims), (a,), vjp)


def spatial_mean(fm):
    """Per-channel mean of a C x H x W map over its spatial dims -> (C,1,1)."""
    return tmean(fm, axis=(1, 2), keepdims=True)


def spatial_var(fm):
    """Per-channel population variance over spatial dims -> (C,1,1)."""
    mu = spatial_mean(fm)
    d = sub(fm, mu)
    return tmean(mul(d, d), axis=(1, 2), keepdims=True)


def l2_norm(a):
    """Euclidean norm of all entries, smoothed at exactly zero.

    The 1e-24 pad keeps the gradient finite when the argument vanishes;
    for any norm above 1e-8 the padding is below double resolution.
    """
    return sqrt(add(tsum(mul(a, a)), 1e-24))


# -- losses ----------------------------------------------------------------------


def smooth_l1(pred, target, delta=1.0):
    """Elementwise smooth-L1 (Huber) against a constant target."""
    pred = as_tensor(pred)
    t = np.asarray(target, dtype=np.float64)
    d = pred.data - t
    small = np.abs(d) < delta
    out = np.where(small, 0.5 * d * d / delta, np.abs(d) - 0.5 * delta)

    def vjp(g):
        return (g * np.where(small, d / delta, np.sign(d)),)

    return Tensor._result(out, (pred,), vjp)


def bce_with_logits(logits, targets):
    """Elementwise binary cross-entropy on logits, numerically stable.

    ``targets`` is a constant array (may be soft, in [0, 1]).
    """
    x = as_tensor(logits)
    t = np.asarray(targets, dtype=np.float64)
    out = np.maximum(x.data, 0.0) - x.data * t + np.log1p(np.exp(-np.abs(x.data)))
    sig = 1.0 / (1.0 + np.exp(-np.clip(x.data, -500, 500)))
    return Tensor._result(out, (x,), lambda g: (g * (sig - t),))


def softmax_cross_entropy(logits, labels):
    """Per-row cross-entropy of an (N, K) logits tensor vs int labels (N,)."""
    x = as_tensor(logits)
    lab = np.asarray(labels, dtype=np.int64)
    m = x.data.max(axis=1, keepdims=True)
    ex = np.exp(x.data - m)
    z = ex.sum(axis=1, keepdims=True)
    probs = ex / z
    rows = np.arange(x.data.shape[0])
    losses = np.log(z[:, 0]) + m[:, 0] - x.data[rows, lab]

    def vjp(g):
        gx = probs * g[:, None]
        gx[rows, lab] -= g
        return (gx,)

    return Tensor._result(losses, (x,), vjp)


def l1_loss(a, b):
    """Mean absolute difference of two tensors (both may carry gradients)."""
    return tmean(absolute(sub(a, b)))


# -- linear algebra ----------------------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ConfigurationError("matmul expects 2-D operands")
    return Tensor._result(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


# -- structured image ops -----------------------------------------------------------


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D convolution of a C_in x H x W map with an OIHW weight tensor.

    Spatial arithmetic is the usual floor((H + 2p - kh)/s) + 1.  Gradients
    are defined with respect to the input, the weight, and the bias.
    Accumulation is one matmul per kernel tap in (i, j) order; the
    deformable variant relies on matching this order exactly.
    """
    x, w = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ConfigurationError("conv2d expects a 3-D input and a 4-D weight")
    cin, h, wid = x.data.shape
    cout, cin_w, kh, kw = w.data.shape
    if cin != cin_w:
        raise ConfigurationError(
            f"conv2d channel mismatch: input has {cin}, weight expects {cin_w}"
        )
    b = as_tensor(bias) if bias is not None else None
    if b is not None and b.data.shape != (cout,):
        raise ConfigurationError(f"conv2d bias must have shape ({cout},)")
    s, p = int(stride), int(padding)
    ho = (h + 2 * p - kh) // s + 1
    wo = (wid + 2 * p - kw) // s + 1
    if ho <= 0 or wo <= 0:
        raise ConfigurationError("conv2d output would be empty")
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p))) if p else x.data

    # im2col with rows ordered (channel, tap): matches weight.reshape below,
    # and matches the column tensor a deformable conv gathers bilinearly.
    kk = kh * kw
    col = np.empty((cin, kk, ho, wo))
    for i in range(kh):
        for j in range(kw):
            col[:, i * kw + j] = xp[:, i : i + s * ho : s, j : j + s * wo : s]
    col2 = col.reshape(cin * kk, ho * wo)
    w2 = w.data.reshape(cout, cin * kk)
    out = (w2 @ col2).reshape(cout, ho, wo)
    if b is not None:
        out += b.data[:, None, None]

    def vjp(g):
        g2 = g.reshape(cout, -1)
        gw = (g2 @ col2.T).reshape(w.data.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcol = (w2.T @ g2).reshape(cin, kk, ho, wo)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + s * ho : s, j : j + s * wo : s] += gcol[:, i * kw + j]
            gx = gxp[:, p : p + h, p : p + wid] if p else gxp
        grads = [gx, gw]
        if b is not None:
            grads.append(g2.sum(axis=1) if b.requires_grad else None)
        return tuple(grads)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._result(out, parents, vjp)


def bilinear_sample(x, coords):
    """Sample a C x H x W map at fractional (y, x) locations.

    ``coords`` has shape (2, *S) in input pixel coordinates; the output has
    shape (C, *S).  Locations outside the map read zeros (border-zero), and
    the op is differentiable with respect to both the map and the coords.
    """
    x, c = as_tensor(x), as_tensor(coords)
    if x.data.ndim != 3 or c.data.shape[0] != 2:
        raise ConfigurationError("bilinear_sample expects C x H x W input and (2,*) coords")
    ch, h, w = x.data.shape
    out_shape = c.data.shape[1:]
    ys = c.data[0].ravel()
    xs = c.data[1].ravel()
    n = ys.size

    y0 = np.floor(ys)
    x0 = np.floor(xs)
    wy = ys - y0
    wx = xs - x0
    y0i = y0.astype(np.int64)
    x0i = x0.astype(np.int64)

    # corner order: (0,0), (0,1), (1,0), (1,1); weights fold in validity
    yy = np.stack([y0i, y0i, y0i + 1, y0i + 1])
    xx = np.stack([x0i, x0i + 1, x0i, x0i + 1])
    valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
    idx = np.clip(yy, 0, h - 1) * w + np.clip(xx, 0, w - 1)  # (4, N)
    wgt = np.stack(
        [(1.0 - wy) * (1.0 - wx), (1.0 - wy) * wx, wy * (1.0 - wx), wy * wx]
    )
    wgt_v = wgt * valid
    # Interpolation as one sparse gather/scatter matrix: row n holds the
    # (validity-masked) corner weights of sample n.  Summing explicit
    # zero-weight terms is exact, so lattice sampling stays bit-exact.
    scatter = sp.csr_matrix(
        (wgt_v.ravel(), (np.tile(np.arange(n), 4), idx.ravel())), shape=(n, h * w)
    )
    flat_t = np.ascontiguousarray(x.data.reshape(ch, h * w).T)  # (HW, C)
    out = (scatter @ flat_t).T

    def vjp(g):
        g_t = np.ascontiguousarray(g.reshape(ch, n).T)  # (N, C)
        gx = gc = None
        if x.requires_grad:
            gx = (scatter.T @ g_t).T.reshape(ch, h, w)
        if c.requires_grad:
            dy_w = (-(1.0 - wx), -wx, (1.0 - wx), wx)
            dx_w = (-(1.0 - wy), (1.0 - wy), -wy, wy)
            gy_c = np.zeros(n)
            gx_c = np.zeros(n)
            for k in range(4):
                vals_k = flat_t[idx[k]]  # (N, C) contiguous row gather
                gdotv = np.einsum("nc,nc->n", g_t, vals_k) * valid[k]
                gy_c += gdotv * dy_w[k]
                gx_c += gdotv * dx_w[k]
            gc = np.stack([gy_c.reshape(out_shape), gx_c.reshape(out_shape)], axis=0)
        return gx, gc

    return Tensor._result(out.reshape(ch, *out_shape), (x, c), vjp)


def max_pool2(x):
    """2x2 max pooling with stride 2; spatial dims must be even."""
    x = as_tensor(x)
    ch, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ConfigurationError("max_pool2 requires even spatial dims")
    win = x.data.reshape(ch, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4)
    win = win.reshape(ch, h // 2, w // 2, 4)
    arg = win.argmax(axis=3)
    out = np.take_along_axis(win, arg[..., None], axis=3)[..., 0]

    def vjp(g):
        gwin = np.zeros_like(win)
        np.put_along_axis(gwin, arg[..., None], g[..., None], axis=3)
        gx = gwin.reshape(ch, h // 2, w // 2, 2, 2).transpose(0, 1, 3, 2, 4)
        return (gx.reshape(ch, h, w),)

    return Tensor._result(out, (x,), vjp)
