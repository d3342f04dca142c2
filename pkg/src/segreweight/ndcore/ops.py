"""Differentiable primitives.

Images are laid out ``[batch, channels, height, width]``.  Every primitive
implements a value rule, a reverse (vector-Jacobian) rule and a forward
(Jacobian-vector) rule.  There is no general broadcasting: elementwise
binary operations require equal shapes unless one side is a constant.
"""
from __future__ import annotations

import numpy as np

from ..errors import ContractError
from .autodiff import Primitive, Var, apply


def _shape(x):
    return x.shape if isinstance(x, Var) else np.shape(x)


def _require(cond, msg):
    if not cond:
        raise ContractError(msg)


def _same_shape(a, b, op):
    if isinstance(a, Var) and isinstance(b, Var):
        _require(a.shape == b.shape, f"{op}: shape mismatch {a.shape} vs {b.shape}")


class _Add(Primitive):
    name = "add"

    def forward(self, a, b):
        return a + b, None

    def vjp(self, ctx, g, needs):
        return g, g

    def jvp(self, ctx, da, db):
        if da is None:
            return db
        if db is None:
            return da
        return da + db


class _Sub(Primitive):
    name = "sub"

    def forward(self, a, b):
        return a - b, None

    def vjp(self, ctx, g, needs):
        return g, -g

    def jvp(self, ctx, da, db):
        if db is None:
            return da
        if da is None:
            return -db
        return da - db


class _Mul(Primitive):
    name = "mul"

    def forward(self, a, b):
        return a * b, (a, b)

    def vjp(self, ctx, g, needs):
        a, b = ctx
        return (g * b if needs[0] else None), (g * a if needs[1] else None)

    def jvp(self, ctx, da, db):
        a, b = ctx
        t = None
        if da is not None:
            t = da * b
        if db is not None:
            t = a * db if t is None else t + a * db
        return t


class _Scale(Primitive):
    name = "scale"

    def forward(self, x, c):
        return x * c, c

    def vjp(self, ctx, g, needs):
        return g * ctx, None

    def jvp(self, ctx, dx, _dc=None):
        return None if dx is None else dx * ctx


class _Log(Primitive):
    name = "log"

    def forward(self, x):
        _require(np.all(x > 0), "log: input must be positive")
        return np.log(x), x

    def vjp(self, ctx, g, needs):
        return (g / ctx,)

    def jvp(self, ctx, dx):
        return dx / ctx


class _Sum(Primitive):
    name = "sum"

    def forward(self, x):
        return np.asarray(np.sum(x)), x.shape

    def vjp(self, ctx, g, needs):
        return (np.broadcast_to(g, ctx).copy(),)

    def jvp(self, ctx, dx):
        return np.asarray(np.sum(dx))


class _WeightedSum(Primitive):
    name = "weighted_sum"

    def forward(self, x, w):
        _require(np.shape(x) == np.shape(w), f"weighted_sum: shape mismatch {np.shape(x)} vs {np.shape(w)}")
        return np.asarray(np.sum(x * w)), (x, w)

    def vjp(self, ctx, g, needs):
        x, w = ctx
        return (g * w if needs[0] else None), (g * x if needs[1] else None)

    def jvp(self, ctx, dx, dw):
        x, w = ctx
        t = np.asarray(0.0)
        if dx is not None:
            t = t + np.sum(dx * w)
        if dw is not None:
            t = t + np.sum(x * dw)
        return np.asarray(t)


class _Concat(Primitive):
    name = "concat"

    def forward(self, *xs, axis=1):
        sizes = [x.shape[axis] for x in xs]
        return np.concatenate(xs, axis=axis), (axis, sizes, [x.shape for x in xs], xs[0].dtype)

    def vjp(self, ctx, g, needs):
        axis, sizes, _, _ = ctx
        cuts = np.cumsum(sizes)[:-1]
        return tuple(np.split(g, cuts, axis=axis))

    def jvp(self, ctx, *dxs):
        axis, _, shapes, dtype = ctx
        parts = [np.zeros(s, dtype=dtype) if d is None else d for d, s in zip(dxs, shapes)]
        return np.concatenate(parts, axis=axis)


class _Relu(Primitive):
    name = "relu"

    def forward(self, x):
        active = x > 0
        return np.where(active, x, 0.0).astype(x.dtype, copy=False), active

    def vjp(self, ctx, g, needs):
        return (np.where(ctx, g, 0.0),)

    def jvp(self, ctx, dx):
        return np.where(ctx, dx, 0.0)


def _im2col(x, k):
    """[B,C,H,W] -> [B, C*k*k, H*W] with zero padding k//2 (stride 1)."""
    b, c, h, w = x.shape
    p = k // 2
    if p:
        xp = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=x.dtype)
        xp[:, :, p:p + h, p:p + w] = x
    else:
        xp = x
    cols = np.empty((b, c, k * k, h, w), dtype=x.dtype)
    for u in range(k):
        for v in range(k):
            cols[:, :, u * k + v] = xp[:, :, u:u + h, v:v + w]
    return cols.reshape(b, c * k * k, h * w)


def _col2im(dcols, shape, k):
    b, c, h, w = shape
    p = k // 2
    dcols = dcols.reshape(b, c, k * k, h, w)
    gxp = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=dcols.dtype)
    for u in range(k):
        for v in range(k):
            gxp[:, :, u:u + h, v:v + w] += dcols[:, :, u * k + v]
    return gxp[:, :, p:p + h, p:p + w]


class _Conv2d(Primitive):
    """Square odd kernel, stride 1, zero padding k//2 ("same" output size).

    x: [B,C,H,W], w: [O,C,k,k], b: [O] -> [B,O,H,W]
    """

    name = "conv2d"

    def forward(self, x, w, b):
        _require(x.ndim == 4, f"conv2d: input must be 4-D, got shape {x.shape}")
        _require(w.ndim == 4 and w.shape[2] == w.shape[3] and w.shape[2] % 2 == 1,
                 f"conv2d: kernel must be [O,C,k,k] with odd k, got {w.shape}")
        _require(w.shape[1] == x.shape[1], f"conv2d: kernel expects {w.shape[1]} channels, input has {x.shape[1]}")
        _require(b.shape == (w.shape[0],), f"conv2d: bias shape {b.shape} != ({w.shape[0]},)")
        bsz, _, h, wd = x.shape
        o, k = w.shape[0], w.shape[2]
        cols = _im2col(x, k)
        out = np.matmul(w.reshape(o, -1), cols).reshape(bsz, o, h, wd)
        out += b[None, :, None, None]
        return out, (x, w, cols)

    def vjp(self, ctx, g, needs):
        x, w, cols = ctx
        o, k = w.shape[0], w.shape[2]
        g2 = g.reshape(g.shape[0], o, -1)
        gx = gw = gb = None
        if needs[0]:
            gx = _col2im(np.matmul(w.reshape(o, -1).T, g2), x.shape, k)
        if needs[1]:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        if needs[2]:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    def jvp(self, ctx, dx, dw, db):
        x, w, cols = ctx
        bsz, _, h, wd = x.shape
        o, k = w.shape[0], w.shape[2]
        t = np.zeros((bsz, o, h * wd), dtype=x.dtype)
        if dx is not None:
            t += np.matmul(w.reshape(o, -1), _im2col(dx, k))
        if dw is not None:
            t += np.matmul(dw.reshape(o, -1), cols)
        t = t.reshape(bsz, o, h, wd)
        if db is not None:
            t += db[None, :, None, None]
        return t


def _blocks(x):
    """[B,C,H,W] -> [B,C,H/2,W/2,4] view of 2x2 windows."""
    b, c, h, w = x.shape
    return x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)


def _unblocks(xb, shape):
    b, c, h, w = shape
    return xb.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(shape)


class _MaxPool2(Primitive):
    """2x2 max pooling, stride 2.  Ties go to the first element in row-major order."""

    name = "maxpool2"

    def forward(self, x):
        _require(x.ndim == 4 and x.shape[2] % 2 == 0 and x.shape[3] % 2 == 0,
                 f"maxpool2: need [B,C,H,W] with even H, W; got {x.shape}")
        xb = _blocks(x)
        idx = np.argmax(xb, axis=-1)[..., None]
        return np.take_along_axis(xb, idx, axis=-1)[..., 0], (idx, x.shape)

    def vjp(self, ctx, g, needs):
        idx, shape = ctx
        gb = np.zeros(shape[:2] + (shape[2] // 2, shape[3] // 2, 4), dtype=g.dtype)
        np.put_along_axis(gb, idx, g[..., None], axis=-1)
        return (_unblocks(gb, shape),)

    def jvp(self, ctx, dx):
        idx, _ = ctx
        return np.take_along_axis(_blocks(dx), idx, axis=-1)[..., 0]


class _Upsample2(Primitive):
    """Nearest-neighbour upsampling by 2 along H and W."""

    name = "upsample2"

    def forward(self, x):
        _require(x.ndim == 4, f"upsample2: need [B,C,H,W], got {x.shape}")
        return x.repeat(2, axis=2).repeat(2, axis=3), x.shape

    def vjp(self, ctx, g, needs):
        b, c, h, w = ctx
        return (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),)

    def jvp(self, ctx, dx):
        return dx.repeat(2, axis=2).repeat(2, axis=3)


class _Softmax(Primitive):
    name = "softmax"

    def forward(self, z, axis=1):
        e = np.exp(z - z.max(axis=axis, keepdims=True))
        s = e / e.sum(axis=axis, keepdims=True)
        return s, (s, axis)

    def vjp(self, ctx, g, needs):
        s, axis = ctx
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    def jvp(self, ctx, dz):
        s, axis = ctx
        return s * (dz - (dz * s).sum(axis=axis, keepdims=True))


class _PixelNLL(Primitive):
    """-log(max(prob[label], eps)) per pixel: [B,K,H,W] x int[B,H,W] -> [B,H,W]."""

    name = "pixel_nll"

    def forward(self, prob, labels, eps=1e-12):
        _require(prob.ndim == 4 and labels.shape == prob.shape[:1] + prob.shape[2:],
                 f"pixel_nll: prob {prob.shape} and labels {labels.shape} disagree")
        lab = labels.astype(np.intp)[:, None]
        sel = np.take_along_axis(prob, lab, axis=1)[:, 0]
        clamped = np.maximum(sel, eps)
        active = sel > eps
        return -np.log(clamped), (lab, clamped, active, prob.shape, prob.dtype)

    def vjp(self, ctx, g, needs):
        lab, clamped, active, shape, dtype = ctx
        gp = np.zeros(shape, dtype=dtype)
        np.put_along_axis(gp, lab, np.where(active, -g / clamped, 0.0)[:, None], axis=1)
        return gp, None

    def jvp(self, ctx, dprob, _dlabels=None):
        lab, clamped, active, _, _ = ctx
        dsel = np.take_along_axis(dprob, lab, axis=1)[:, 0]
        return np.where(active, -dsel / clamped, 0.0)


_add, _sub, _mul, _scale, _log = _Add(), _Sub(), _Mul(), _Scale(), _Log()
_sum, _wsum, _concat, _relu = _Sum(), _WeightedSum(), _Concat(), _Relu()
_conv, _pool, _up, _softmax, _nll = _Conv2d(), _MaxPool2(), _Upsample2(), _Softmax(), _PixelNLL()


def add(a, b):
    _same_shape(a, b, "add")
    return apply(_add, a, b)


def sub(a, b):
    _same_shape(a, b, "sub")
    return apply(_sub, a, b)


def mul(a, b):
    _same_shape(a, b, "mul")
    return apply(_mul, a, b)


def scale(x, c: float):
    return apply(_scale, x, float(c))


def log(x):
    return apply(_log, x)


def total(x):
    """Sum of all elements, as a 0-d value."""
    return apply(_sum, x)


def mean(x):
    return scale(total(x), 1.0 / int(np.prod(_shape(x))))


def weighted_sum(x, w):
    return apply(_wsum, x, w)


def concat(xs, axis=1):
    return apply(_concat, *xs, axis=axis)


def relu(x):
    return apply(_relu, x)


def conv2d(x, w, b):
    return apply(_conv, x, w, b)


def maxpool2(x):
    return apply(_pool, x)


def upsample2(x):
    return apply(_up, x)


def softmax(z, axis=1):
    return apply(_softmax, z, axis=axis)


def pixel_nll(prob, labels, eps=1e-12):
    if isinstance(labels, Var):
        raise ContractError("pixel_nll: labels are not differentiable")
    return apply(_nll, prob, np.asarray(labels), eps=eps)
