"""Differentiation rules for the supported op set.

Every op provides four rules used by the engine:

``forward(ins, a)``                              -> (out, cache)
``jvp(ins, dins, out, cache, a)``                -> tangent of out
``vjp(ins, out, cache, g, a, need)``             -> adjoints of inputs
``rvjp(ins, dins, out, dout, cache, g, dg, a, need)``
    -> tangent of the adjoints (the R-operator applied to ``vjp``).

A tangent or adjoint of ``None`` means an exact zero. ``need[i]`` is False for
inputs that do not depend on parameters; their adjoints may be skipped.
The tensor convention is channels-first, batch on axis 0.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _add(*terms):
    out = None
    for t in terms:
        if t is None:
            continue
        out = t if out is None else out + t
    return out


def _mm(a, b):
    if a is None or b is None:
        return None
    return a @ b


def _mul(a, b):
    if a is None or b is None:
        return None
    return a * b


class Op:
    @staticmethod
    def forward(ins, a):
        raise NotImplementedError

    @staticmethod
    def jvp(ins, dins, out, cache, a):
        raise NotImplementedError

    @staticmethod
    def vjp(ins, out, cache, g, a, need):
        raise NotImplementedError

    @classmethod
    def rvjp(cls, ins, dins, out, dout, cache, g, dg, a, need):
        # Valid for ops that are linear in their inputs.
        if dg is None:
            return [None] * len(ins)
        return cls.vjp(ins, out, cache, dg, a, need)


class Dense(Op):
    """Y = X @ W.T with X [B, in] and W [out, in]."""

    @staticmethod
    def forward(ins, a):
        x, w = ins
        return x @ w.T, None

    @staticmethod
    def jvp(ins, dins, out, cache, a):
        x, w = ins
        dx, dw = dins
        return _add(_mm(dx, w.T), _mm(x, None if dw is None else dw.T))

    @staticmethod
    def vjp(ins, out, cache, g, a, need):
        x, w = ins
        return [g @ w if need[0] else None, g.T @ x if need[1] else None]

    @staticmethod
    def rvjp(ins, dins, out, dout, cache, g, dg, a, need):
        x, w = ins
        dx, dw = dins
        gx = _add(_mm(dg, w), _mm(g, dw)) if need[0] else None
        gw = _add(_mm(None if dg is None else dg.T, x), _mm(g.T, dx)) if need[1] else None
        return [gx, gw]


def _im2col(x, kh, kw):
    b, c, h, w = x.shape
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))  # [B, C, Ho, Wo, kh, kw]
    ho, wo = h - kh + 1, w - kw + 1
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b, ho, wo, c * kh * kw)


def _col2im(cols, x_shape, kh, kw):
    b, c, h, w = x_shape
    ho, wo = h - kh + 1, w - kw + 1
    cols = cols.reshape(b, ho, wo, c, kh, kw)
    out = np.zeros(x_shape)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + ho, j:j + wo] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return out


class Conv2d(Op):
    """Valid-padding, stride-1 cross-correlation. X [B, Cin, H, W], K [Cout, Cin, kh, kw]."""

    @staticmethod
    def forward(ins, a):
        x, k = ins
        cout, _, kh, kw = k.shape
        cols = _im2col(x, kh, kw)
        y = cols @ k.reshape(cout, -1).T
        return np.ascontiguousarray(y.transpose(0, 3, 1, 2)), cols

    @staticmethod
    def jvp(ins, dins, out, cols, a):
        x, k = ins
        dx, dk = dins
        cout, _, kh, kw = k.shape
        y = None
        if dk is not None:
            y = cols @ dk.reshape(cout, -1).T
        if dx is not None:
            y = _add(y, _im2col(dx, kh, kw) @ k.reshape(cout, -1).T)
        return None if y is None else np.ascontiguousarray(y.transpose(0, 3, 1, 2))

    @staticmethod
    def vjp(ins, out, cols, g, a, need):
        x, k = ins
        cout, _, kh, kw = k.shape
        g2 = g.transpose(0, 2, 3, 1)
        gk = np.tensordot(g2, cols, axes=([0, 1, 2], [0, 1, 2])).reshape(k.shape) if need[1] else None
        gx = _col2im(g2 @ k.reshape(cout, -1), x.shape, kh, kw) if need[0] else None
        return [gx, gk]

    @staticmethod
    def rvjp(ins, dins, out, dout, cols, g, dg, a, need):
        x, k = ins
        dx, dk = dins
        cout, _, kh, kw = k.shape
        kmat = k.reshape(cout, -1)
        g2 = g.transpose(0, 2, 3, 1)
        dg2 = None if dg is None else dg.transpose(0, 2, 3, 1)
        gx = gk = None
        if need[0]:
            t = _add(_mm(dg2, kmat), _mm(g2, None if dk is None else dk.reshape(cout, -1)))
            gx = None if t is None else _col2im(t, x.shape, kh, kw)
        if need[1]:
            axes = ([0, 1, 2], [0, 1, 2])
            t1 = None if dg2 is None else np.tensordot(dg2, cols, axes=axes)
            t2 = None if dx is None else np.tensordot(g2, _im2col(dx, kh, kw), axes=axes)
            t = _add(t1, t2)
            gk = None if t is None else t.reshape(k.shape)
        return [gx, gk]


class MaxPool2(Op):
    """2x2 max pooling, stride 2. Odd edges use a clipped window (ceil mode).

    Ties resolve to the first maximal element in row-major window order.
    """

    @staticmethod
    def _windows(x, fill):
        b, c, h, w = x.shape
        ho, wo = -(-h // 2), -(-w // 2)
        if (h, w) != (2 * ho, 2 * wo):
            x = np.pad(x, ((0, 0), (0, 0), (0, 2 * ho - h), (0, 2 * wo - w)), constant_values=fill)
        return x.reshape(b, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho, wo, 4)

    @classmethod
    def _route(cls, dx, idx):
        return np.take_along_axis(cls._windows(dx, 0.0), idx, axis=-1)[..., 0]

    @staticmethod
    def _scatter(g, idx, x_shape):
        b, c, h, w = x_shape
        ho, wo = g.shape[2], g.shape[3]
        win = np.zeros((b, c, ho, wo, 4))
        np.put_along_axis(win, idx, g[..., None], axis=-1)
        full = win.reshape(b, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, 2 * ho, 2 * wo)
        return np.ascontiguousarray(full[:, :, :h, :w])

    @classmethod
    def forward(cls, ins, a):
        (x,) = ins
        win = cls._windows(x, -np.inf)
        idx = np.argmax(win, axis=-1)[..., None]
        return np.take_along_axis(win, idx, axis=-1)[..., 0], idx

    @classmethod
    def jvp(cls, ins, dins, out, idx, a):
        (dx,) = dins
        return None if dx is None else cls._route(dx, idx)

    @classmethod
    def vjp(cls, ins, out, idx, g, a, need):
        return [cls._scatter(g, idx, ins[0].shape) if need[0] else None]


class Relu(Op):
    """max(x, 0). Derivative at 0 is 0; second derivative is 0 everywhere."""

    @staticmethod
    def forward(ins, a):
        (x,) = ins
        mask = x > 0
        return np.where(mask, x, 0.0), mask

    @staticmethod
    def jvp(ins, dins, out, mask, a):
        (dx,) = dins
        return None if dx is None else dx * mask

    @staticmethod
    def vjp(ins, out, mask, g, a, need):
        return [g * mask if need[0] else None]


class Tanh(Op):
    @staticmethod
    def forward(ins, a):
        y = np.tanh(ins[0])
        return y, 1.0 - y * y

    @staticmethod
    def jvp(ins, dins, out, slope, a):
        (dx,) = dins
        return None if dx is None else dx * slope

    @staticmethod
    def vjp(ins, out, slope, g, a, need):
        return [g * slope if need[0] else None]

    @staticmethod
    def rvjp(ins, dins, out, dout, slope, g, dg, a, need):
        if not need[0]:
            return [None]
        # d(1 - y^2) = -2 y dy
        curv = None if dout is None else g * (-2.0 * out * dout)
        return [_add(_mul(dg, slope), curv)]


def _channel_shape(x):
    return (1, x.shape[1]) + (1,) * (x.ndim - 2)


def _reduce_channel(t):
    axes = (0,) + tuple(range(2, t.ndim))
    return t.sum(axis=axes)


class BiasAdd(Op):
    """X + b broadcast along the channel axis (axis 1)."""

    @staticmethod
    def forward(ins, a):
        x, b = ins
        return x + b.reshape(_channel_shape(x)), None

    @staticmethod
    def jvp(ins, dins, out, cache, a):
        x, _ = ins
        dx, db = dins
        return _add(dx, None if db is None else np.broadcast_to(db.reshape(_channel_shape(x)), x.shape))

    @staticmethod
    def vjp(ins, out, cache, g, a, need):
        return [g if need[0] else None, _reduce_channel(g) if need[1] else None]


class BatchNorm(Op):
    """Inference-style batch norm: gamma * (x - mean) / sqrt(var + eps) + beta.

    ``mean`` and ``var`` are fixed running statistics stored as attributes.
    """

    @staticmethod
    def forward(ins, a):
        x, gamma, beta = ins
        cs = _channel_shape(x)
        inv = 1.0 / np.sqrt(np.asarray(a["var"]) + a.get("eps", 1e-5))
        xhat = (x - np.asarray(a["mean"]).reshape(cs)) * inv.reshape(cs)
        return gamma.reshape(cs) * xhat + beta.reshape(cs), (xhat, inv.reshape(cs))

    @staticmethod
    def jvp(ins, dins, out, cache, a):
        x, gamma, _ = ins
        dx, dgamma, dbeta = dins
        xhat, inv = cache
        cs = _channel_shape(x)
        return _add(None if dx is None else gamma.reshape(cs) * inv * dx,
                    None if dgamma is None else dgamma.reshape(cs) * xhat,
                    None if dbeta is None else np.broadcast_to(dbeta.reshape(cs), x.shape))

    @staticmethod
    def vjp(ins, out, cache, g, a, need):
        x, gamma, _ = ins
        xhat, inv = cache
        cs = _channel_shape(x)
        return [g * gamma.reshape(cs) * inv if need[0] else None,
                _reduce_channel(g * xhat) if need[1] else None,
                _reduce_channel(g) if need[2] else None]

    @staticmethod
    def rvjp(ins, dins, out, dout, cache, g, dg, a, need):
        x, gamma, _ = ins
        dx, dgamma, _ = dins
        xhat, inv = cache
        cs = _channel_shape(x)
        gx = ggamma = gbeta = None
        if need[0]:
            gx = _add(None if dg is None else dg * gamma.reshape(cs) * inv,
                      None if dgamma is None else g * dgamma.reshape(cs) * inv)
        if need[1]:
            t = _add(_mul(dg, xhat), None if dx is None else g * dx * inv)
            ggamma = None if t is None else _reduce_channel(t)
        if need[2] and dg is not None:
            gbeta = _reduce_channel(dg)
        return [gx, ggamma, gbeta]


class Flatten(Op):
    @staticmethod
    def forward(ins, a):
        (x,) = ins
        return x.reshape(x.shape[0], -1), x.shape

    @staticmethod
    def jvp(ins, dins, out, shape, a):
        (dx,) = dins
        return None if dx is None else dx.reshape(out.shape)

    @staticmethod
    def vjp(ins, out, shape, g, a, need):
        return [g.reshape(shape) if need[0] else None]


class Add(Op):
    @staticmethod
    def forward(ins, a):
        return ins[0] + ins[1], None

    @staticmethod
    def jvp(ins, dins, out, cache, a):
        return _add(*dins)

    @staticmethod
    def vjp(ins, out, cache, g, a, need):
        return [g if need[0] else None, g if need[1] else None]


class Mul(Op):
    """Elementwise product of two same-shape tensors."""

    @staticmethod
    def forward(ins, a):
        return ins[0] * ins[1], None

    @staticmethod
    def jvp(ins, dins, out, cache, a):
        x, y = ins
        dx, dy = dins
        return _add(_mul(dx, y), _mul(x, dy))

    @staticmethod
    def vjp(ins, out, cache, g, a, need):
        x, y = ins
        return [g * y if need[0] else None, g * x if need[1] else None]

    @staticmethod
    def rvjp(ins, dins, out, dout, cache, g, dg, a, need):
        x, y = ins
        dx, dy = dins
        return [_add(_mul(dg, y), _mul(g, dy)) if need[0] else None,
                _add(_mul(dg, x), _mul(g, dx)) if need[1] else None]


class Scale(Op):
    """Multiply by the constant attribute ``c``."""

    @staticmethod
    def forward(ins, a):
        return ins[0] * a["c"], None

    @staticmethod
    def jvp(ins, dins, out, cache, a):
        return None if dins[0] is None else dins[0] * a["c"]

    @staticmethod
    def vjp(ins, out, cache, g, a, need):
        return [g * a["c"] if need[0] else None]


class Sum(Op):
    """Sum of all elements, producing a scalar."""

    @staticmethod
    def forward(ins, a):
        return np.asarray(ins[0].sum()), None

    @staticmethod
    def jvp(ins, dins, out, cache, a):
        return None if dins[0] is None else np.asarray(dins[0].sum())

    @staticmethod
    def vjp(ins, out, cache, g, a, need):
        return [np.full(ins[0].shape, float(g)) if need[0] else None]


class SoftmaxCrossEntropy(Op):
    """Mean softmax cross-entropy. Inputs: logits [B, C] and integer labels [B]."""

    @staticmethod
    def forward(ins, a):
        z, labels = ins
        labels = labels.astype(np.int64)
        b = z.shape[0]
        shifted = z - z.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        s = e.sum(axis=1, keepdims=True)
        p = e / s
        rows = np.arange(b)
        loss = np.mean(np.log(s[:, 0]) - shifted[rows, labels])
        resid = p.copy()
        resid[rows, labels] -= 1.0
        return np.asarray(loss), (p, resid / b)

    @staticmethod
    def jvp(ins, dins, out, cache, a):
        dz = dins[0]
        return None if dz is None else np.asarray(np.sum(cache[1] * dz))

    @staticmethod
    def vjp(ins, out, cache, g, a, need):
        return [float(g) * cache[1] if need[0] else None, None]

    @staticmethod
    def rvjp(ins, dins, out, dout, cache, g, dg, a, need):
        if not need[0]:
            return [None, None]
        p, resid = cache
        dz = dins[0]
        curv = None
        if dz is not None:
            dp = p * (dz - np.sum(p * dz, axis=1, keepdims=True))
            curv = float(g) * dp / p.shape[0]
        return [_add(None if dg is None else float(dg) * resid, curv), None]


class MeanSquaredError(Op):
    """Mean over all elements of (Y - T)^2."""

    @staticmethod
    def forward(ins, a):
        y, t = ins
        r = y - t.reshape(y.shape)
        return np.asarray(np.mean(r * r)), 2.0 * r / r.size

    @staticmethod
    def jvp(ins, dins, out, c, a):
        dy, dt = dins
        d = _add(dy, None if dt is None else -dt.reshape(c.shape))
        return None if d is None else np.asarray(np.sum(c * d))

    @staticmethod
    def vjp(ins, out, c, g, a, need):
        return [float(g) * c if need[0] else None, None]

    @staticmethod
    def rvjp(ins, dins, out, dout, c, g, dg, a, need):
        if not need[0]:
            return [None, None]
        dy = dins[0]
        curv = None if dy is None else float(g) * 2.0 * dy / c.size
        return [_add(None if dg is None else float(dg) * c, curv), None]


OPS = {
    "dense": Dense,
    "conv2d": Conv2d,
    "maxpool2": MaxPool2,
    "relu": Relu,
    "tanh": Tanh,
    "bias_add": BiasAdd,
    "batchnorm": BatchNorm,
    "flatten": Flatten,
    "add": Add,
    "mul": Mul,
    "scale": Scale,
    "sum": Sum,
    "softmax_xent": SoftmaxCrossEntropy,
    "mse": MeanSquaredError,
}

LOSS_OPS = ("softmax_xent", "mse")
