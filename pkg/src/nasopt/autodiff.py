"""Dense-tensor reverse-mode autodiff with exactly the layers the cell space needs.

Tensors are float64 numpy arrays wrapped in graph nodes.  A forward pass
records parent links and backward closures; calling :func:`backward` on a
scalar node fills the gradient buffers of every :class:`ParamStore`
parameter that participated.  The layer set is deliberately small:
convolution, max/average pooling, dense, channel concatenation,
elementwise add, flatten, sum/mean reductions and a bounds-mapping scaled
tanh.  No broadcasting, no GPU, no mixed precision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Raised when tensor shapes cannot be combined by an operation."""


class GraphStateError(RuntimeError):
    """Raised on invalid tape usage, e.g. backward() twice on one graph."""


class NumericError(ArithmeticError):
    """Raised when a non-finite value blocks an update."""


def conv_output_size(n, k, p, s):
    """Spatial extent after a k-window op with padding p and stride s."""
    if n + 2 * p < k:
        raise ShapeError(f"window {k} larger than padded input {n + 2 * p}")
    if s < 1:
        raise ShapeError(f"stride must be >= 1, got {s}")
    return (n - k + 2 * p) // s + 1


class Value:
    """One node of the recorded computation graph."""

    __slots__ = ("data", "parents", "grad", "_backward", "name")

    def __init__(self, data, parents=(), backward=None, name=""):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents = parents
        self.grad = None
        self._backward = backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g


class ParamStore:
    """Named parameter tensors with gradient buffers and Adam state.

    Each parameter carries a first/second moment pair and its own step
    counter, all initialized to zero.  ``frozen`` parameters keep their
    values through :func:`adam_step` (their step counters do not move).
    """

    def __init__(self):
        self.params = {}     # name -> np.ndarray (float64)
        self.grads = {}      # name -> np.ndarray or None
        self.adam_m = {}
        self.adam_v = {}
        self.adam_t = {}
        self.frozen = {}

    def add(self, name, array, frozen=False):
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        arr = np.asarray(array, dtype=np.float64)
        self.params[name] = arr
        self.grads[name] = None
        self.adam_m[name] = np.zeros_like(arr)
        self.adam_v[name] = np.zeros_like(arr)
        self.adam_t[name] = 0
        self.frozen[name] = bool(frozen)
        return arr

    def remove(self, name):
        for d in (self.params, self.grads, self.adam_m, self.adam_v,
                  self.adam_t, self.frozen):
            del d[name]

    def names(self):
        return list(self.params)

    def num_params(self, only=None):
        names = self.params if only is None else only
        return int(sum(self.params[n].size for n in names))

    def zero_grads(self):
        for name in self.grads:
            self.grads[name] = None

    def leaf(self, name):
        """Graph node for a parameter; backward accumulates into the store."""
        store = self

        def bw(g):
            if store.grads[name] is None:
                store.grads[name] = np.array(g, dtype=np.float64)
            else:
                store.grads[name] += g

        node = Value(self.params[name], parents=(), backward=None, name=name)
        node._backward = bw
        return node


@dataclass
class AdamConfig:
    """Adam hyperparameters (defaults follow the usual reference settings)."""

    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not (self.lr > 0 and self.eps > 0):
            raise ValueError("lr and eps must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("decay rates must lie in [0, 1)")


def adam_step(store, cfg):
    """One bias-corrected Adam update on every unfrozen parameter with a grad.

    Gradients are cleared afterwards.  A non-finite gradient aborts the
    whole step (no parameter is touched) and names the offender.
    """
    updates = []
    for name, g in store.grads.items():
        if g is None or store.frozen[name]:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        updates.append((name, g))

    for name, g in updates:
        t = store.adam_t[name] + 1
        m = store.adam_m[name]
        v = store.adam_v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        m_hat = m / (1.0 - cfg.beta1 ** t)
        v_hat = v / (1.0 - cfg.beta2 ** t)
        store.params[name] -= cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
        store.adam_t[name] = t
    store.zero_grads()


# ---------------------------------------------------------------------------
# forward ops
# ---------------------------------------------------------------------------

def _window_view(x, k, s):
    """Sliding k-by-k windows of x[N,C,H,W] as a strided view.

    Returns view of shape [N, C, Ho, Wo, k, k]; no copy.
    """
    n, c, h, w = x.shape
    ho = (h - k) // s + 1
    wo = (w - k) // s + 1
    sn, sc, sh, sw = x.strides
    return np.lib.stride_tricks.as_strided(
        x, shape=(n, c, ho, wo, k, k),
        strides=(sn, sc, sh * s, sw * s, sh, sw), writeable=False)


def _fold_windows(gwin, in_shape, k, s):
    """Scatter window gradients [N,C,Ho,Wo,k,k] back onto the input grid."""
    gx = np.zeros(in_shape, dtype=np.float64)
    ho, wo = gwin.shape[2], gwin.shape[3]
    for di in range(k):
        for dj in range(k):
            gx[:, :, di:di + s * ho:s, dj:dj + s * wo:s] += gwin[:, :, :, :, di, dj]
    return gx


def _conv1x1(x, w, b, stride):
    """Channel-mix fast path: a 1x1 conv is a per-pixel matmul."""
    xd = x.data if stride == 1 else np.ascontiguousarray(
        x.data[:, :, ::stride, ::stride])
    n, cin, ho, wo = xd.shape
    cout = w.data.shape[0]
    wmat = w.data.reshape(cout, cin)
    xflat = xd.reshape(n, cin, ho * wo)
    out = np.matmul(wmat[None], xflat).reshape(n, cout, ho, wo)
    out += b.data[None, :, None, None]
    node = Value(out, parents=(x, w, b))

    def bw(g):
        gflat = g.reshape(n, cout, ho * wo)
        gw = np.matmul(gflat, xflat.transpose(0, 2, 1)).sum(axis=0)
        w._accumulate(gw.reshape(w.data.shape))
        b._accumulate(gflat.sum(axis=(0, 2)))
        gx_s = np.matmul(wmat.T[None], gflat).reshape(n, cin, ho, wo)
        if stride == 1:
            x._accumulate(gx_s)
        else:
            gx = np.zeros_like(x.data)
            gx[:, :, ::stride, ::stride] = gx_s
            x._accumulate(gx)

    node._backward = bw
    return node


def _im2col(xd, k, stride):
    """Window columns of xd[N,C,H,W] as [N, C*k*k, Ho*Wo] without transposes."""
    n, cin, h, wid = xd.shape
    ho = (h - k) // stride + 1
    wo = (wid - k) // stride + 1
    cols = np.empty((n, cin, k, k, ho, wo))
    for di in range(k):
        for dj in range(k):
            cols[:, :, di, dj] = xd[:, :, di:di + stride * ho:stride,
                                    dj:dj + stride * wo:stride]
    return cols.reshape(n, cin * k * k, ho * wo), ho, wo


def _corr_gemm(xd, wmat, k, cout, stride=1):
    """Valid cross-correlation of xd[N,C,H,W] with wmat[Cout, C*k*k]."""
    n = xd.shape[0]
    cols, ho, wo = _im2col(xd, k, stride)
    out = np.matmul(wmat[None], cols).reshape(n, cout, ho, wo)
    return out, cols


def conv2d(x, w, b, stride=1, padding=0):
    """2-D convolution (cross-correlation) with bias.

    x: [N, Cin, H, W]; w: [Cout, Cin, k, k]; b: [Cout].
    Output spatial size follows floor((n - k + 2p)/s) + 1.
    """
    xd, wd, bd = x.data, w.data, b.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input/weights, got {xd.shape} and {wd.shape}")
    if xd.shape[1] != wd.shape[1]:
        raise ShapeError(
            f"input channels {xd.shape[1]} (input {xd.shape}) do not match "
            f"filter channels {wd.shape[1]} (weights {wd.shape})")
    n, cin, h, wid = xd.shape
    cout, _, k, k2 = wd.shape
    if k != k2:
        raise ShapeError(f"only square filters supported, got {wd.shape}")
    ho = conv_output_size(h, k, padding, stride)
    wo = conv_output_size(wid, k, padding, stride)
    if k == 1 and padding == 0:
        return _conv1x1(x, w, b, stride)

    xp = xd if padding == 0 else np.pad(
        xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    wmat = wd.reshape(cout, cin * k * k)
    out, cols = _corr_gemm(xp, wmat, k, cout, stride)
    out += bd[None, :, None, None]
    node = Value(out, parents=(x, w, b))

    def bw(g):
        gout = g.reshape(n, cout, ho * wo)
        gw = np.matmul(gout, cols.transpose(0, 2, 1)).sum(axis=0)
        w._accumulate(gw.reshape(wd.shape))
        b._accumulate(gout.sum(axis=(0, 2)))
        if stride == 1:
            # input gradient = full correlation with spatially flipped kernels
            gp = np.pad(g, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
            wflip = wd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            fmat = np.ascontiguousarray(wflip.reshape(cin, cout * k * k))
            gx, _ = _corr_gemm(gp, fmat, k, cin)
        else:
            gcols = np.matmul(wmat.T[None], gout)        # [N, C*k*k, Ho*Wo]
            gwin = gcols.reshape(n, cin, k, k, ho, wo).transpose(0, 1, 4, 5, 2, 3)
            gx = _fold_windows(gwin, xp.shape, k, stride)
        if padding:
            gx = gx[:, :, padding:-padding, padding:-padding]
        x._accumulate(gx)

    node._backward = bw
    return node


def pool2d(x, kind, window, stride=1):
    """Max or average pooling over window-by-window patches (no padding)."""
    if kind not in ("max", "avg"):
        raise ValueError(f"unknown pooling kind {kind!r}")
    xd = x.data
    n, c, h, w = xd.shape
    ho = conv_output_size(h, window, 0, stride)
    wo = conv_output_size(w, window, 0, stride)
    win = _window_view(xd, window, stride)
    flat = win.reshape(n, c, ho, wo, window * window)

    if kind == "max":
        # first row-major maximum wins the gradient on ties
        idx = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    else:
        out = flat.mean(axis=-1)

    node = Value(out, parents=(x,))

    def bw(g):
        gwin = np.zeros((n, c, ho, wo, window * window), dtype=np.float64)
        if kind == "max":
            np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        else:
            gwin += (g / (window * window))[..., None]
        gwin = gwin.reshape(n, c, ho, wo, window, window)
        x._accumulate(_fold_windows(gwin, xd.shape, window, stride))

    node._backward = bw
    return node


def dense(x, w, b):
    """Affine map: x[N,F] @ w[F,D] + b[D]."""
    xd, wd = x.data, w.data
    if xd.ndim != 2 or wd.ndim != 2:
        raise ShapeError(f"dense expects 2-D input/weights, got {xd.shape} and {wd.shape}")
    if xd.shape[1] != wd.shape[0]:
        raise ShapeError(
            f"feature count {xd.shape[1]} does not match weight rows {wd.shape[0]}")
    out = xd @ wd + b.data
    node = Value(out, parents=(x, w, b))

    def bw(g):
        x._accumulate(g @ wd.T)
        w._accumulate(xd.T @ g)
        b._accumulate(g.sum(axis=0))

    node._backward = bw
    return node


def concat_channels(inputs):
    """Concatenate [N,Ci,H,W] tensors along the channel axis, in order."""
    if not inputs:
        raise ShapeError("concat_channels needs at least one input")
    first = inputs[0].data.shape
    for t in inputs[1:]:
        s = t.data.shape
        if s[0] != first[0] or s[2:] != first[2:]:
            raise ShapeError(f"spatial/batch mismatch in concat: {first} vs {s}")
    out = np.concatenate([t.data for t in inputs], axis=1)
    node = Value(out, parents=tuple(inputs))

    def bw(g):
        ofs = 0
        for t in inputs:
            c = t.data.shape[1]
            t._accumulate(g[:, ofs:ofs + c])
            ofs += c

    node._backward = bw
    return node


def add(a, b):
    """Elementwise sum of two same-shape tensors."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")
    node = Value(a.data + b.data, parents=(a, b))

    def bw(g):
        a._accumulate(g)
        b._accumulate(g)

    node._backward = bw
    return node


def crop_center(x, h, w):
    """Center-crop spatial dims of x[N,C,H,W] down to h-by-w."""
    _, _, hh, ww = x.data.shape
    if hh < h or ww < w:
        raise ShapeError(f"cannot crop {x.data.shape} up to {(h, w)}")
    i = (hh - h) // 2
    j = (ww - w) // 2
    out = x.data[:, :, i:i + h, j:j + w]
    node = Value(out.copy(), parents=(x,))

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[:, :, i:i + h, j:j + w] = g
        x._accumulate(gx)

    node._backward = bw
    return node


def flatten(x):
    """Collapse all non-batch axes: [N, ...] -> [N, F]."""
    n = x.data.shape[0]
    out = x.data.reshape(n, -1)
    node = Value(out.copy(), parents=(x,))
    node._backward = lambda g: x._accumulate(g.reshape(x.data.shape))
    return node


def scaled_tanh(x, lo, hi):
    """Map activations into the open box (lo, hi) via tanh.

    out_j = lo_j + (hi_j - lo_j) * (tanh(z_j) + 1) / 2, applied along the
    last axis.  lo/hi are per-coordinate vectors (or scalars).
    """
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    if np.any(lo >= hi):
        raise ValueError("scaled_tanh requires lo < hi elementwise")
    t = np.tanh(x.data)
    out = lo + (hi - lo) * (t + 1.0) / 2.0
    # f64 tanh saturates to exactly +-1; keep outputs strictly interior
    out = np.clip(out, np.nextafter(lo, hi), np.nextafter(hi, lo))
    node = Value(out, parents=(x,))

    def bw(g):
        x._accumulate(g * (hi - lo) / 2.0 * (1.0 - t * t))

    node._backward = bw
    return node


def tensor_sum(x):
    """Scalar sum of all entries."""
    node = Value(x.data.sum(), parents=(x,))
    node._backward = lambda g: x._accumulate(np.full(x.data.shape, float(g)))
    return node


def tensor_mean(x):
    """Scalar mean of all entries."""
    n = x.data.size
    node = Value(x.data.mean(), parents=(x,))
    node._backward = lambda g: x._accumulate(np.full(x.data.shape, float(g) / n))
    return node


def add_const(x, c):
    """Shift by a constant (no gradient through c)."""
    node = Value(x.data + c, parents=(x,))
    node._backward = lambda g: x._accumulate(np.asarray(g, dtype=np.float64))
    return node


def scale(x, c):
    """Multiply by a constant."""
    node = Value(x.data * c, parents=(x,))
    node._backward = lambda g: x._accumulate(np.asarray(g, dtype=np.float64) * c)
    return node


def apply_objective(x, objective):
    """Evaluate an objective on each row of x[N,D]; charges N evaluations.

    The backward pass injects the objective's analytic gradient row by
    row.  Gradient calls are not charged to the evaluation counter.
    """
    xd = x.data
    if xd.ndim != 2:
        raise ShapeError(f"apply_objective expects [N,D] solutions, got {xd.shape}")
    vals = objective.value_batch(xd)
    node = Value(vals, parents=(x,))

    def bw(g):
        x._accumulate(np.asarray(g)[:, None] * objective.gradient_batch(xd))

    node._backward = bw
    return node


def backward(loss):
    """Reverse pass from a scalar node; fills parameter gradient buffers.

    The tape is single-use: a second call without a fresh forward raises
    :class:`GraphStateError`.
    """
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if loss._backward is None:
        if loss.parents:
            raise GraphStateError("backward already called on this graph")
        raise GraphStateError("node has no recorded computation")

    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.asarray(1.0)
    for node in reversed(order):
        if node.grad is None or node._backward is None:
            continue
        node._backward(node.grad)
        node._backward = None       # consume the tape
    loss._backward = None
