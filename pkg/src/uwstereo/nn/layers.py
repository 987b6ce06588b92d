"""Layer primitives with explicit forward/backward passes.

All feature maps are numpy arrays in (batch, channels, height, width)
layout. Six layer kinds cover every network in the pipeline: conv2d,
maxpool2, upsample2, relu, concat, linear. Convolutions run through
im2col + BLAS matmul; backward rebuilds the column view chunk-wise so
activation memory stays bounded on large images.
"""

import math

import numpy as np

# Rows of output processed per im2col chunk, sized so the column buffer
# stays ~64 MB even for wide feature maps.
_CHUNK_BUDGET = 16 * 1024 * 1024


class ShapeError(ValueError):
    """Input shape inconsistent with a layer's contract."""


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int,
                   dtype=np.float32) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Layer:
    """One node's operation: kind, optional parameters, hyperparameters.

    Parameterless kinds (maxpool2, upsample2, relu, concat) keep
    ``weight`` and ``bias`` as None.
    """

    KINDS = ("conv2d", "maxpool2", "upsample2", "relu", "concat", "linear")

    def __init__(self, kind: str, name: str, weight=None, bias=None, hyper=None):
        if kind not in self.KINDS:
            raise ValueError(f"unknown layer kind {kind!r}")
        self.kind = kind
        self.name = name
        self.weight = weight
        self.bias = bias
        self.hyper = dict(hyper or {})
        if kind == "conv2d":
            k = self.hyper["kernel"]
            if k % 2 == 0:
                raise ValueError(f"{name}: conv kernel must be odd, got {k}")

    @property
    def has_params(self) -> bool:
        return self.weight is not None

    def param_count(self) -> int:
        n = 0
        if self.weight is not None:
            n += self.weight.size
        if self.bias is not None:
            n += self.bias.size
        return n

    # -- forward ---------------------------------------------------------

    def forward(self, xs: list, record: bool):
        """Run the op on input arrays; returns (output, cache).

        cache is None when record is False.
        """
        fn = getattr(self, f"_fwd_{self.kind}")
        return fn(xs, record)

    def backward(self, grad: np.ndarray, cache):
        """Returns (input_grads: list, weight_grad, bias_grad)."""
        fn = getattr(self, f"_bwd_{self.kind}")
        return fn(grad, cache)

    # -- conv2d ----------------------------------------------------------

    def _conv_geometry(self, x):
        k = self.hyper["kernel"]
        s = self.hyper.get("stride", 1)
        p = self.hyper.get("pad", k // 2)
        n, c, h, w = x.shape
        if c != self.hyper["in_ch"]:
            raise ShapeError(
                f"{self.name}: expected {self.hyper['in_ch']} input channels, got {c}")
        oh = (h + 2 * p - k) // s + 1
        ow = (w + 2 * p - k) // s + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"{self.name}: input {h}x{w} too small for kernel {k}")
        return k, s, p, oh, ow

    def _fwd_conv2d(self, xs, record):
        (x,) = xs
        k, s, p, oh, ow = self._conv_geometry(x)
        n, c, h, w = x.shape
        out_ch = self.weight.shape[0]
        w_mat = self.weight.reshape(out_ch, c * k * k).astype(x.dtype, copy=False)
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        out = np.empty((n, out_ch, oh, ow), dtype=x.dtype)
        for r0, r1 in _row_chunks(oh, n * c * k * k * ow, x.dtype.itemsize):
            cols = _im2col(xp, k, s, r0, r1, ow)
            seg = np.matmul(w_mat, cols.reshape(n, c * k * k, (r1 - r0) * ow))
            out[:, :, r0:r1, :] = seg.reshape(n, out_ch, r1 - r0, ow)
        out += self.bias.astype(x.dtype, copy=False)[:, None, None]
        return out, (x.shape, xp if record else None)

    def _bwd_conv2d(self, grad, cache):
        x_shape, xp = cache
        n, c, h, w = x_shape
        k = self.hyper["kernel"]
        s = self.hyper.get("stride", 1)
        p = self.hyper.get("pad", k // 2)
        oh, ow = grad.shape[2], grad.shape[3]
        out_ch = self.weight.shape[0]
        w_mat = self.weight.reshape(out_ch, c * k * k).astype(grad.dtype, copy=False)
        dw = np.zeros((out_ch, c * k * k), dtype=grad.dtype)
        dxp = np.zeros_like(xp, dtype=grad.dtype)
        for r0, r1 in _row_chunks(oh, n * c * k * k * ow, grad.dtype.itemsize):
            cols = _im2col(xp, k, s, r0, r1, ow).reshape(n, c * k * k, (r1 - r0) * ow)
            g = grad[:, :, r0:r1, :].reshape(n, out_ch, (r1 - r0) * ow)
            dw += np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0)
            dcols = np.matmul(w_mat.T, g).reshape(n, c, k, k, r1 - r0, ow)
            _col2im_add(dxp, dcols, k, s, r0, ow)
        dx = dxp[:, :, p:p + h, p:p + w]
        db = grad.sum(axis=(0, 2, 3))
        return [dx], dw.reshape(self.weight.shape), db

    # -- maxpool2 --------------------------------------------------------

    def _fwd_maxpool2(self, xs, record):
        (x,) = xs
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"{self.name}: maxpool2 needs even spatial dims, got {h}x{w}")
        win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        win = win.reshape(n, c, h // 2, w // 2, 4)
        idx = win.argmax(axis=-1)
        out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        return out, ((n, c, h, w), idx) if record else (None, None)

    def _bwd_maxpool2(self, grad, cache):
        (n, c, h, w), idx = cache
        dwin = np.zeros((n, c, h // 2, w // 2, 4), dtype=grad.dtype)
        np.put_along_axis(dwin, idx[..., None], grad[..., None], axis=-1)
        dx = dwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return [dx.reshape(n, c, h, w)], None, None

    # -- upsample2 (bilinear, half-pixel centers) ---------------------------

    def _fwd_upsample2(self, xs, record):
        (x,) = xs
        out = _bilinear_up(_bilinear_up(x, axis=2), axis=3)
        return out, x.shape if record else None

    def _bwd_upsample2(self, grad, cache):
        dx = _bilinear_up_adj(_bilinear_up_adj(grad, axis=3), axis=2)
        return [dx], None, None

    # -- relu --------------------------------------------------------------

    def _fwd_relu(self, xs, record):
        (x,) = xs
        out = np.maximum(x, 0)
        return out, (x > 0) if record else None

    def _bwd_relu(self, grad, cache):
        return [grad * cache], None, None

    # -- concat (channel axis) ---------------------------------------------

    def _fwd_concat(self, xs, record):
        ref = xs[0].shape
        for x in xs[1:]:
            if x.shape[0] != ref[0] or x.shape[2:] != ref[2:]:
                raise ShapeError(f"{self.name}: concat inputs disagree on batch/spatial dims")
        out = np.concatenate(xs, axis=1)
        return out, [x.shape[1] for x in xs] if record else None

    def _bwd_concat(self, grad, cache):
        grads, at = [], 0
        for ch in cache:
            grads.append(grad[:, at:at + ch])
            at += ch
        return grads, None, None

    # -- linear --------------------------------------------------------------

    def _fwd_linear(self, xs, record):
        (x,) = xs
        if x.ndim != 2 or x.shape[1] != self.hyper["in_features"]:
            raise ShapeError(
                f"{self.name}: linear expects (batch, {self.hyper['in_features']}), "
                f"got {x.shape}")
        w = self.weight.astype(x.dtype, copy=False)
        out = x @ w.T + self.bias.astype(x.dtype, copy=False)
        return out, x if record else None

    def _bwd_linear(self, grad, cache):
        x = cache
        dw = grad.T @ x
        db = grad.sum(axis=0)
        dx = grad @ self.weight.astype(grad.dtype, copy=False)
        return [dx], dw, db


def make_conv(name, in_ch, out_ch, kernel=3, stride=1, pad=None, rng=None,
              dtype=np.float32, zero_init=False):
    if pad is None:
        pad = kernel // 2
    fan_in = in_ch * kernel * kernel
    fan_out = out_ch * kernel * kernel
    if zero_init:
        w = np.zeros((out_ch, in_ch, kernel, kernel), dtype=dtype)
    else:
        w = glorot_uniform(rng, (out_ch, in_ch, kernel, kernel), fan_in, fan_out, dtype)
    b = np.zeros(out_ch, dtype=dtype)
    return Layer("conv2d", name, w, b,
                 {"in_ch": in_ch, "out_ch": out_ch, "kernel": kernel,
                  "stride": stride, "pad": pad})


def make_linear(name, in_features, out_features, rng=None, dtype=np.float32):
    w = glorot_uniform(rng, (out_features, in_features), in_features, out_features, dtype)
    b = np.zeros(out_features, dtype=dtype)
    return Layer("linear", name, w, b,
                 {"in_features": in_features, "out_features": out_features})


def _row_chunks(oh, elems_per_row, itemsize):
    rows = max(1, _CHUNK_BUDGET // max(1, elems_per_row * itemsize))
    for r0 in range(0, oh, rows):
        yield r0, min(oh, r0 + rows)


def _im2col(xp, k, s, r0, r1, ow):
    """Column view of padded input for output rows [r0, r1)."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, r1 - r0, ow), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, r0 * s + i:r1 * s + i:s, j:j + s * ow:s]
    return cols

def _col2im_add(dxp, dcols, k, s, r0, ow):
    r1 = r0 + dcols.shape[4]
    for i in range(k):
        for j in range(k):
            dxp[:, :, r0 * s + i:r1 * s + i:s, j:j + s * ow:s] += dcols[:, :, i, j]


def _shift_clamp(x, axis, step):
    """x[i + step] along axis with edge clamping."""
    lead = (slice(None),) * axis
    if step == -1:
        body = x[lead + (slice(None, -1),)]
        edge = x[lead + (slice(None, 1),)]
        return np.concatenate([edge, body], axis=axis)
    body = x[lead + (slice(1, None),)]
    edge = x[lead + (slice(-1, None),)]
    return np.concatenate([body, edge], axis=axis)


def _bilinear_up(x, axis):
    """Double one axis with half-pixel-center bilinear weights (3/4, 1/4)."""
    even = 0.75 * x + 0.25 * _shift_clamp(x, axis, -1)
    odd = 0.75 * x + 0.25 * _shift_clamp(x, axis, +1)
    shape = list(x.shape)
    shape[axis] *= 2
    out = np.empty(shape, dtype=x.dtype)
    lead = (slice(None),) * axis
    out[lead + (slice(0, None, 2),)] = even
    out[lead + (slice(1, None, 2),)] = odd
    return out


def _bilinear_up_adj(g, axis):
    """Adjoint of _bilinear_up along the same axis."""
    lead = (slice(None),) * axis
    ge = g[lead + (slice(0, None, 2),)]
    go = g[lead + (slice(1, None, 2),)]
    dx = 0.75 * (ge + go)
    # adjoint of the clamped -1 shift feeding the even samples
    n = ge.shape[axis]
    head = ge[lead + (slice(0, min(2, n)),)].sum(axis=axis, keepdims=True)
    rest = ge[lead + (slice(2, None),)]
    pad = np.zeros_like(ge[lead + (slice(0, 1),)])
    dx += 0.25 * np.concatenate([head, rest, pad][:2 if n == 1 else 3], axis=axis)
    # adjoint of the clamped +1 shift feeding the odd samples
    tail = go[lead + (slice(max(n - 2, 0), None),)].sum(axis=axis, keepdims=True)
    first = go[lead + (slice(None, max(n - 2, 0)),)]
    dx += 0.25 * np.concatenate([pad, first, tail] if n > 1 else [tail], axis=axis)
    return dx.astype(g.dtype, copy=False)
