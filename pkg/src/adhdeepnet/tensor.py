"""Minimal n-dimensional tensors with reverse-mode automatic differentiation.

Covers exactly the operations the EEG classifier needs: dense matmul,
2-D/depthwise/separable convolution, batch normalization, ELU/ReLU/sigmoid/
softmax, average and global-average pooling, dropout, and the reductions
used by the loss. Data is float32 by default (float64 supported, e.g. for
finite-difference checks); reductions accumulate in float64.

The computation graph is rebuilt on every forward pass (define-by-run):
each op returns a new Tensor holding a backward closure plus references to
its parents. ``backward()`` on a scalar tensor walks the graph once in
reverse topological order and accumulates gradients on every tensor that
requires them.
"""

from __future__ import annotations

import struct
import warnings

import numpy as np
from numpy.lib.stride_tricks import as_strided


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class GraphError(RuntimeError):
    """Misuse of the autodiff graph (non-scalar backward, repeated backward)."""


def _as_array(data, dtype):
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """An n-d float array, an optional gradient, and a place in the graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn",
                 "_backward_done")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None
        self._backward_done = False

    # -- construction of graph nodes -------------------------------------

    @staticmethod
    def _from_op(data, parents, backward_fn):
        out = Tensor(data)
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward_fn = backward_fn
        return out

    # -- basic introspection ----------------------------------------------

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
        return float(self.data)

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None
        self._backward_done = False

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, _ensure_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_ensure_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _ensure_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_ensure_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _ensure_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_ensure_tensor(other, self.dtype), self)

    def __truediv__(self, scalar):
        return mul(self, _ensure_tensor(1.0 / float(scalar), self.dtype))

    def __neg__(self):
        return mul(self, _ensure_tensor(-1.0, self.dtype))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    # -- backward ------------------------------------------------------------

    def backward(self):
        """Populate ``grad`` on every requires_grad tensor reachable from here.

        The tensor must be scalar. A second call on the same graph without
        resetting (``zero_grad`` on the loss) raises.
        """
        if self.size != 1:
            raise GraphError(
                f"backward() requires a scalar tensor, got shape {self.shape}")
        if not self.requires_grad:
            raise GraphError("backward() on a tensor with no graph attached")
        if self._backward_done:
            raise GraphError("backward() called twice on the same graph; "
                             "reset with zero_grad() and rebuild the forward pass")
        self._backward_done = True

        order = []
        seen = set()
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.grad is None:
                node.grad = g.copy() if node._backward_fn is None else g
            else:
                node.grad = node.grad + g
            if node._backward_fn is None:
                continue
            parent_grads = node._backward_fn(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                pg = pg.astype(parent.data.dtype, copy=False)
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _ensure_tensor(value, dtype):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise arithmetic ---------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape))

    return Tensor._from_op(out, (a, b), backward)


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul needs [m,k] x [k,n], got {a.shape} x {b.shape}")
    out = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor._from_op(out, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Dense layer y = x @ W^T + b with W of shape [out, in]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"linear needs x [n,in] and weight [out,in], got {x.shape} and "
            f"{weight.shape}")
    out = x.data @ weight.data.T + bias.data

    def backward(g):
        return g @ weight.data, g.T @ x.data, g.sum(axis=0)

    return Tensor._from_op(out, (x, weight, bias), backward)


# -- shape manipulation --------------------------------------------------------


def reshape(t: Tensor, shape) -> Tensor:
    out = t.data.reshape(shape)
    old = t.shape

    def backward(g):
        return (g.reshape(old),)

    return Tensor._from_op(out, (t,), backward)


def concat(tensors, axis=1) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._from_op(out, tuple(tensors), backward)


# -- reductions (float64 accumulation) -----------------------------------------


def tsum(t: Tensor) -> Tensor:
    out = t.data.sum(dtype=np.float64).astype(t.dtype)

    def backward(g):
        return (np.broadcast_to(g, t.shape),)

    return Tensor._from_op(np.asarray(out), (t,), backward)


def tmean(t: Tensor) -> Tensor:
    out = t.data.mean(dtype=np.float64).astype(t.dtype)
    n = t.size

    def backward(g):
        return (np.broadcast_to(g / n, t.shape).astype(t.dtype),)

    return Tensor._from_op(np.asarray(out), (t,), backward)


# -- activations ----------------------------------------------------------------


def relu(t: Tensor) -> Tensor:
    out = np.maximum(t.data, 0)

    def backward(g):
        return (g * (t.data > 0),)

    return Tensor._from_op(out, (t,), backward)


def elu(t: Tensor, alpha=1.0) -> Tensor:
    neg = np.expm1(np.minimum(t.data, 0)) * alpha
    out = np.where(t.data >= 0, t.data, neg)

    def backward(g):
        return (g * np.where(t.data >= 0, 1.0, neg + alpha).astype(t.dtype),)

    return Tensor._from_op(out, (t,), backward)


def sigmoid(t: Tensor) -> Tensor:
    out = np.empty_like(t.data)
    pos = t.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t.data[pos]))
    e = np.exp(t.data[~pos])
    out[~pos] = e / (1.0 + e)

    def backward(g):
        return (g * out * (1.0 - out),)

    return Tensor._from_op(out, (t,), backward)


def _softmax_data(x, axis):
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted, dtype=np.float64)
    return (e / e.sum(axis=axis, keepdims=True)).astype(x.dtype)


def softmax(t: Tensor, axis=-1) -> Tensor:
    out = _softmax_data(t.data, axis)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return Tensor._from_op(out, (t,), backward)


def log_softmax(t: Tensor, axis=-1) -> Tensor:
    shifted = t.data - t.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted, dtype=np.float64).sum(axis=axis, keepdims=True))
    out = (shifted - lse).astype(t.dtype)

    def backward(g):
        soft = np.exp(out)
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(out, (t,), backward)


# -- convolution ------------------------------------------------------------------


def _same_pad(k):
    lo = (k - 1) // 2
    return lo, (k - 1) - lo  # extra row/column goes on the high side


def _conv_geometry(h, w, kh, kw, padding):
    if padding == "same":
        ph, pw = _same_pad(kh), _same_pad(kw)
    elif padding == "valid":
        ph = pw = (0, 0)
    else:
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    ho = h + ph[0] + ph[1] - kh + 1
    wo = w + pw[0] + pw[1] - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"kernel {kh}x{kw} larger than padded input {h}x{w} ({padding})")
    return ph, pw, ho, wo


def _im2col(xp, kh, kw, ho, wo):
    """Patches of padded input xp [N,C,Hp,Wp] -> [N*ho*wo, C*kh*kw] (copy)."""
    n, c = xp.shape[:2]
    s0, s1, s2, s3 = xp.strides
    view = as_strided(xp, (n, ho, wo, c, kh, kw), (s0, s2, s3, s1, s2, s3))
    return np.ascontiguousarray(view).reshape(n * ho * wo, c * kh * kw)


def conv2d(x: Tensor, kernel: Tensor, padding="valid") -> Tensor:
    """Cross-correlation of x [N,C,H,W] with kernel [F,C,kh,kw]."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(
            f"conv2d needs 4-d input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    f, ck, kh, kw = kernel.shape
    if ck != c:
        raise ShapeError(
            f"conv2d channel mismatch: input has {c} channels, kernel expects {ck}")
    ph, pw, ho, wo = _conv_geometry(h, w, kh, kw, padding)

    if kh == 1 and kw == 1 and padding in ("same", "valid"):
        # pointwise: pure channel mixing, no patch extraction needed
        xm = x.data.transpose(0, 2, 3, 1).reshape(-1, c)
        out = (xm @ kernel.data.reshape(f, c).T).reshape(n, h, w, f)
        out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

        def backward_pw(g):
            gm = g.transpose(0, 2, 3, 1).reshape(-1, f)
            dx = (gm @ kernel.data.reshape(f, c)).reshape(n, h, w, c)
            dk = (gm.T @ xm).reshape(f, c, 1, 1)
            return np.ascontiguousarray(dx.transpose(0, 3, 1, 2)), dk

        return Tensor._from_op(out, (x, kernel), backward_pw)

    xp = np.pad(x.data, ((0, 0), (0, 0), ph, pw))
    cols = _im2col(xp, kh, kw, ho, wo)
    wmat = kernel.data.reshape(f, c * kh * kw)
    out = (cols @ wmat.T).reshape(n, ho, wo, f)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        # columns are rebuilt rather than saved: trades one extra copy for
        # not holding kernel-width-times-input memory across the whole pass
        xp2 = np.pad(x.data, ((0, 0), (0, 0), ph, pw))
        cols2 = _im2col(xp2, kh, kw, ho, wo)
        dk = (gm.T @ cols2).reshape(f, c, kh, kw)
        dcols = gm @ wmat  # [n*ho*wo, c*kh*kw]
        dxp = np.zeros_like(xp2)
        dcols = dcols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + ho, j:j + wo] += dcols[:, :, i, j]
        dx = dxp[:, :, ph[0]:ph[0] + h, pw[0]:pw[0] + w]
        return dx, dk

    return Tensor._from_op(out, (x, kernel), backward)


def depthwise_conv2d(x: Tensor, kernel: Tensor, padding="valid") -> Tensor:
    """Per-channel convolution: x [N,C,H,W], kernel [C,D,kh,kw] -> [N,C*D,H',W'].

    Input channel c convolves only with kernels of group c; output channels
    are channel-major (c*D + d).
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(
            f"depthwise_conv2d needs 4-d input and kernel, got {x.shape} and "
            f"{kernel.shape}")
    n, c, h, w = x.shape
    ck, d, kh, kw = kernel.shape
    if ck != c:
        raise ShapeError(
            f"depthwise_conv2d channel mismatch: input has {c} channels, "
            f"kernel has {ck} groups")
    ph, pw, ho, wo = _conv_geometry(h, w, kh, kw, padding)

    xp = np.pad(x.data, ((0, 0), (0, 0), ph, pw))
    out = np.zeros((n, c, d, ho, wo), dtype=x.dtype)
    # tap loop keeps memory at O(input) even for wide kernels
    for i in range(kh):
        for j in range(kw):
            window = xp[:, :, i:i + ho, j:j + wo]
            out += kernel.data[None, :, :, i, j, None, None] * window[:, :, None]
    out = out.reshape(n, c * d, ho, wo)

    def backward(g):
        gg = g.reshape(n, c, d, ho, wo)
        xp2 = np.pad(x.data, ((0, 0), (0, 0), ph, pw))
        dk = np.zeros_like(kernel.data)
        dxp = np.zeros_like(xp2)
        for i in range(kh):
            for j in range(kw):
                window = xp2[:, :, i:i + ho, j:j + wo]
                dk[:, :, i, j] = np.einsum("nchw,ncdhw->cd", window, gg,
                                           optimize=True)
                dxp[:, :, i:i + ho, j:j + wo] += np.einsum(
                    "cd,ncdhw->nchw", kernel.data[:, :, i, j], gg, optimize=True)
        dx = dxp[:, :, ph[0]:ph[0] + h, pw[0]:pw[0] + w]
        return dx, dk

    return Tensor._from_op(out, (x, kernel), backward)


def separable_conv2d(x: Tensor, depth_kernel: Tensor, point_kernel: Tensor,
                     padding="same") -> Tensor:
    """Depthwise convolution followed by a pointwise (1x1) convolution."""
    c, d = depth_kernel.shape[0], depth_kernel.shape[1]
    if point_kernel.shape[1] != c * d:
        raise ShapeError(
            f"separable_conv2d chain mismatch: depthwise produces {c * d} "
            f"channels, pointwise expects {point_kernel.shape[1]}")
    mid = depthwise_conv2d(x, depth_kernel, padding=padding)
    return conv2d(mid, point_kernel, padding="valid")


# -- normalization -----------------------------------------------------------------


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean,
               running_var, training, momentum=0.1, eps=1e-5) -> Tensor:
    """Per-channel batch normalization over [N,C,H,W].

    Training mode normalizes by batch statistics and updates the running
    arrays in place by exponential moving average; inference mode uses the
    running statistics.
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    if n == 0:
        raise ValueError("batch_norm on an empty batch")
    if gamma.size != c or beta.size != c:
        raise ShapeError(
            f"batch_norm gamma/beta must have length {c}, got "
            f"{gamma.size}/{beta.size}")

    if training:
        mean = x.data.mean(axis=(0, 2, 3), dtype=np.float64)
        var = x.data.var(axis=(0, 2, 3), dtype=np.float64)
        running_mean *= (1.0 - momentum)
        running_mean += momentum * mean.astype(running_mean.dtype)
        running_var *= (1.0 - momentum)
        running_var += momentum * var.astype(running_var.dtype)
    else:
        mean = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)

    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    mean = mean.astype(x.dtype)
    xhat = (x.data - mean[:, None, None]) * inv_std[:, None, None]
    out = gamma.data[:, None, None] * xhat + beta.data[:, None, None]

    def backward(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3), dtype=np.float64).astype(x.dtype)
        dbeta = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(x.dtype)
        gxhat = g * gamma.data[:, None, None]
        if training:
            # d/dx of ((x - mu) / sigma): mean and variance depend on x
            t1 = gxhat
            t2 = gxhat.mean(axis=(0, 2, 3), dtype=np.float64).astype(x.dtype)
            t3 = (gxhat * xhat).mean(axis=(0, 2, 3),
                                     dtype=np.float64).astype(x.dtype)
            dx = inv_std[:, None, None] * (
                t1 - t2[:, None, None] - xhat * t3[:, None, None])
        else:
            dx = gxhat * inv_std[:, None, None]
        return dx, dgamma, dbeta

    return Tensor._from_op(out, (x, gamma, beta), backward)


# -- pooling ------------------------------------------------------------------------


def avg_pool(x: Tensor, window=(1, 2), stride=None, padding="valid") -> Tensor:
    """Average pooling. Default 1x2 window halves the time axis.

    With the default valid padding an odd trailing extent is truncated and a
    warning is recorded. Same padding averages over the full window size
    (zero padding included in the divisor).
    """
    if x.ndim != 4:
        raise ShapeError(f"avg_pool expects [N,C,H,W], got {x.shape}")
    kh, kw = window
    sh, sw = (kh, kw) if stride is None else stride
    n, c, h, w = x.shape

    if padding == "same":
        ph, pw = _same_pad(kh), _same_pad(kw)
    else:
        ph = pw = (0, 0)
        if h % sh or w % sw:
            warnings.warn(
                f"avg_pool truncating input {h}x{w} to a multiple of the "
                f"{sh}x{sw} stride", RuntimeWarning, stacklevel=2)
    xp = np.pad(x.data, ((0, 0), (0, 0), ph, pw))
    hp, wp = xp.shape[2], xp.shape[3]
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"pool window {kh}x{kw} larger than input {h}x{w}")

    s0, s1, s2, s3 = xp.strides
    view = as_strided(xp, (n, c, ho, wo, kh, kw),
                      (s0, s1, s2 * sh, s3 * sw, s2, s3))
    out = view.mean(axis=(4, 5), dtype=np.float64).astype(x.dtype)
    scale = 1.0 / (kh * kw)

    def backward(g):
        dxp = np.zeros_like(xp)
        gs = g * scale
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + ho * sh:sh, j:j + wo * sw:sw] += gs
        return (dxp[:, :, ph[0]:ph[0] + h, pw[0]:pw[0] + w],)

    return Tensor._from_op(out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial extent per channel: [N,C,H,W] -> [N,C,1,1]."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), dtype=np.float64).astype(x.dtype)
    out = out.reshape(n, c, 1, 1)
    scale = 1.0 / (h * w)

    def backward(g):
        return (np.broadcast_to(g * scale, x.shape).astype(x.dtype),)

    return Tensor._from_op(out, (x,), backward)


# -- regularization -------------------------------------------------------------------


def dropout(x: Tensor, rate, training, rng) -> Tensor:
    """Inverted dropout: zero with probability ``rate``, scale survivors."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        def backward_id(g):
            return (g,)
        return Tensor._from_op(x.data, (x,), backward_id)

    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep).astype(x.dtype) / keep
    out = x.data * mask

    def backward(g):
        return (g * mask,)

    return Tensor._from_op(out, (x,), backward)


# -- weight serialization ---------------------------------------------------------------

_MAGIC = b"ADNW"
_VERSION = 1


def save_tensors(path, named_arrays):
    """Write named float32 arrays to the flat binary weight container."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        for name, arr in named_arrays.items():
            arr = np.asarray(arr, dtype=np.float32)  # 0-d rank preserved
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f4").tobytes())


def load_tensors(path):
    """Read the weight container back into an ordered name->array dict."""
    out = {}
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ValueError(f"not a weight file: bad magic {magic!r}")
        version = struct.unpack("<I", fh.read(4))[0]
        if version != _VERSION:
            raise ValueError(f"unsupported weight file version {version}")
        while True:
            head = fh.read(4)
            if not head:
                break
            name_len = struct.unpack("<I", head)[0]
            name = fh.read(name_len).decode("utf-8")
            rank = struct.unpack("<I", fh.read(4))[0]
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
            count = int(np.prod(dims)) if dims else 1
            data = np.frombuffer(fh.read(4 * count), dtype="<f4").reshape(dims)
            out[name] = data.astype(np.float32)
    return out
