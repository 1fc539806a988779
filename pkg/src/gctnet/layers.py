"""Differentiable layers with hand-written backward passes.

Every layer follows the same small protocol:

* ``forward(x, train=False)`` caches what ``backward`` needs and returns the output;
* ``backward(grad)`` fills ``self.grads`` (same keys/shapes as ``self.params``)
  and returns the gradient w.r.t. the forward input;
* ``cost(in_shape)`` returns ``(multiply_adds, out_shape)`` without touching data.

Parameters live in ``self.params`` (trainable) and ``self.buffers`` (running
statistics). A layer built with ``materialize=False`` holds zero-stride
placeholders of the right shape, which is enough for cost accounting.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import gct as G
from .tensor import ShapeError, conv2d_backward, conv2d_im2col, conv_output_size, pad_spatial


def _placeholder(shape, dtype):
    return np.broadcast_to(np.zeros((), dtype=dtype), shape)


def he_normal(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Layer:
    kind = "layer"

    def __init__(self, name: str = ""):
        self.name = name
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def cost(self, in_shape):
        return 0, tuple(in_shape)

    def param_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def walk(self):
        yield self

    def astype(self, dtype):
        for d in (self.params, self.buffers):
            for k, v in d.items():
                d[k] = np.array(v, dtype=dtype)
        return self

    def __repr__(self):
        return f"{type(self).__name__}({self.name!r})"


class Conv2d(Layer):
    kind = "conv"

    def __init__(self, c_in, c_out, kernel=3, stride=1, padding=None, bias=False,
                 rng=None, dtype=np.float32, materialize=True, name=""):
        super().__init__(name)
        self.c_in, self.c_out, self.kernel, self.stride = c_in, c_out, kernel, stride
        self.padding = kernel // 2 if padding is None else padding
        shape = (c_out, c_in, kernel, kernel)
        if materialize:
            rng = np.random.default_rng() if rng is None else rng
            self.params["weight"] = he_normal(rng, shape, c_in * kernel * kernel, dtype)
            if bias:
                self.params["bias"] = np.zeros(c_out, dtype=dtype)
        else:
            self.params["weight"] = _placeholder(shape, dtype)
            if bias:
                self.params["bias"] = _placeholder((c_out,), dtype)

    def forward(self, x, train=False):
        self._x = x
        out, self._cols = conv2d_im2col(x, self.params["weight"], self.stride, self.padding)
        if "bias" in self.params:
            out += self.params["bias"].reshape(1, -1, 1, 1)
        return out

    def backward(self, grad):
        gx, gw, gb = conv2d_backward(self._x, self.params["weight"], grad,
                                     self.stride, self.padding, cols=self._cols)
        self.grads["weight"] = gw
        if "bias" in self.params:
            self.grads["bias"] = gb
        self._cols = None
        return gx

    def cost(self, in_shape):
        n, c, h, w = in_shape
        if c != self.c_in:
            raise ShapeError(f"{self.name}: expects {self.c_in} channels, got {c}")
        ho = conv_output_size(h, self.kernel, self.stride, self.padding)
        wo = conv_output_size(w, self.kernel, self.stride, self.padding)
        macs = n * self.c_out * self.c_in * self.kernel * self.kernel * ho * wo
        return macs, (n, self.c_out, ho, wo)


class BatchNorm2d(Layer):
    kind = "bn"

    def __init__(self, channels, momentum=0.9, eps=1e-5, dtype=np.float32,
                 materialize=True, name=""):
        super().__init__(name)
        self.channels, self.momentum, self.eps = channels, momentum, eps
        make = (lambda v: np.full(channels, v, dtype=dtype)) if materialize else \
            (lambda v: _placeholder((channels,), dtype))
        self.params["weight"] = make(1.0)
        self.params["bias"] = make(0.0)
        self.buffers["running_mean"] = make(0.0)
        self.buffers["running_var"] = make(1.0)

    def forward(self, x, train=False):
        w = self.params["weight"].reshape(1, -1, 1, 1)
        b = self.params["bias"].reshape(1, -1, 1, 1)
        if train:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            m = x.size // x.shape[1]
            unbiased = var * (m / (m - 1)) if m > 1 else var
            mom = self.momentum
            self.buffers["running_mean"] = (mom * self.buffers["running_mean"]
                                            + (1 - mom) * mean).astype(x.dtype)
            self.buffers["running_var"] = (mom * self.buffers["running_var"]
                                           + (1 - mom) * unbiased).astype(x.dtype)
        else:
            mean, var = self.buffers["running_mean"], self.buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean.reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)
        self._xhat, self._inv_std, self._train = xhat, inv_std, train
        return (xhat * w + b).astype(x.dtype, copy=False)

    def backward(self, grad):
        xhat, inv_std = self._xhat, self._inv_std.reshape(1, -1, 1, 1)
        w = self.params["weight"].reshape(1, -1, 1, 1)
        self.grads["weight"] = (grad * xhat).sum(axis=(0, 2, 3))
        self.grads["bias"] = grad.sum(axis=(0, 2, 3))
        gxhat = grad * w
        if not self._train:
            return gxhat * inv_std
        mean_g = gxhat.mean(axis=(0, 2, 3), keepdims=True)
        mean_gx = (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
        return (gxhat - mean_g - xhat * mean_gx) * inv_std


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False):
        self._x = x
        return np.where(x > 0, x, 0).astype(x.dtype, copy=False)

    def backward(self, grad):
        return np.where(self._x > 0, grad, 0).astype(grad.dtype, copy=False)


class MaxPool2d(Layer):
    kind = "maxpool"

    def __init__(self, kernel=2, stride=None, padding=0, name=""):
        super().__init__(name)
        self.kernel = kernel
        self.stride = kernel if stride is None else stride
        self.padding = padding

    def forward(self, x, train=False):
        k, s, p = self.kernel, self.stride, self.padding
        xp = pad_spatial(x, p, value=-np.inf)
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        flat = win.reshape(win.shape[:4] + (k * k,))
        idx = flat.argmax(axis=-1)
        self._idx, self._x = idx, x
        return np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        k, s, p = self.kernel, self.stride, self.padding
        n, c, h, w = self._x.shape
        ho, wo = grad.shape[2:]
        out = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=grad.dtype)
        for off in range(k * k):
            i, j = divmod(off, k)
            sel = self._idx == off
            if sel.any():
                out[:, :, i:i + s * ho:s, j:j + s * wo:s] += grad * sel
        if p:
            out = out[:, :, p:-p, p:-p]
        return out

    def cost(self, in_shape):
        n, c, h, w = in_shape
        k, s, p = self.kernel, self.stride, self.padding
        return 0, (n, c, conv_output_size(h, k, s, p), conv_output_size(w, k, s, p))


class GlobalAvgPool(Layer):
    """Spatial mean, (N, C, H, W) -> (N, C)."""

    kind = "gap"

    def forward(self, x, train=False):
        self._in_shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, grad):
        n, c, h, w = self._in_shape
        return np.broadcast_to((grad / (h * w))[:, :, None, None], self._in_shape).copy()

    def cost(self, in_shape):
        return 0, tuple(in_shape[:2])


class Linear(Layer):
    kind = "linear"

    def __init__(self, c_in, c_out, rng=None, dtype=np.float32, materialize=True, name=""):
        super().__init__(name)
        self.c_in, self.c_out = c_in, c_out
        if materialize:
            rng = np.random.default_rng() if rng is None else rng
            bound = 1.0 / np.sqrt(c_in)
            self.params["weight"] = rng.uniform(-bound, bound, (c_out, c_in)).astype(dtype)
            self.params["bias"] = np.zeros(c_out, dtype=dtype)
        else:
            self.params["weight"] = _placeholder((c_out, c_in), dtype)
            self.params["bias"] = _placeholder((c_out,), dtype)

    def forward(self, x, train=False):
        self._in_shape = x.shape
        x2 = x.reshape(x.shape[0], -1)
        if x2.shape[1] != self.c_in:
            raise ShapeError(f"{self.name}: expects {self.c_in} features, got {x2.shape[1]}")
        self._x = x2
        return x2 @ self.params["weight"].T + self.params["bias"]

    def backward(self, grad):
        self.grads["weight"] = grad.T @ self._x
        self.grads["bias"] = grad.sum(axis=0)
        return (grad @ self.params["weight"]).reshape(self._in_shape)

    def cost(self, in_shape):
        feats = int(np.prod(in_shape[1:]))
        if feats != self.c_in:
            raise ShapeError(f"{self.name}: expects {self.c_in} features, got {feats}")
        return in_shape[0] * self.c_in * self.c_out, (in_shape[0], self.c_out)


class GctLayer(Layer):
    """Layer wrapper around :func:`gctnet.gct.gct_forward` / ``gct_backward``.

    Setting ``capture = True`` keeps the last eval-mode input and output for analysis.
    """

    kind = "gct"

    def __init__(self, channels, dtype=np.float32, materialize=True, name="", **variant):
        super().__init__(name)
        self.channels = channels
        p = G.GctParams.init(channels, dtype=dtype, **variant)
        self.variant = p.variant()
        if materialize:
            self.params.update(alpha=p.alpha, gamma=p.gamma, beta=p.beta)
        else:
            self.params.update({k: _placeholder((channels,), dtype)
                                for k in ("alpha", "gamma", "beta")})
        self.capture = False
        self.captured = None

    def gct_params(self) -> G.GctParams:
        return G.GctParams(alpha=self.params["alpha"], gamma=self.params["gamma"],
                           beta=self.params["beta"], **self.variant)

    def forward(self, x, train=False):
        out, self._cache = G.gct_forward(x, self.gct_params())
        if self.capture:
            self.captured = (x, out)
        return out

    def backward(self, grad):
        gx, ga, gg, gb = G.gct_backward(self._cache, grad, self.gct_params())
        self.grads.update(alpha=ga, gamma=gg, beta=gb)
        self._cache = None
        return gx

    def cost(self, in_shape):
        n, c, h, w = in_shape
        if c != self.channels:
            raise ShapeError(f"{self.name}: expects {self.channels} channels, got {c}")
        return n * (2 * c * h * w + 4 * c), tuple(in_shape)


def se_reduction(channels: int, reduction: int = 16) -> int:
    """Largest ratio <= ``reduction`` that divides ``channels`` and keeps C/r >= 4."""
    if channels < 4:
        return 1
    for r in range(min(reduction, channels // 4), 0, -1):
        if channels % r == 0:
            return r
    return 1


@dataclass
class SeParams:
    w1: np.ndarray  # (C/r, C)
    w2: np.ndarray  # (C, C/r)
    reduction: int

    def __post_init__(self):
        c = self.w2.shape[0]
        if self.reduction < 1 or c % self.reduction:
            raise ShapeError(f"SE reduction {self.reduction} must divide channel count {c}")
        if self.w1.shape != (c // self.reduction, c) or self.w2.shape != (c, c // self.reduction):
            raise ShapeError(f"SE weights {self.w1.shape}, {self.w2.shape} inconsistent "
                             f"with C={c}, r={self.reduction}")


def se_forward(x, p: SeParams):
    """Squeeze-and-excitation: x * sigmoid(w2 @ relu(w1 @ mean_hw(x))). Returns (out, cache)."""
    if x.shape[1] != p.w2.shape[0]:
        raise ShapeError(f"SE expects {p.w2.shape[0]} channels, got {x.shape[1]}")
    z = x.mean(axis=(2, 3))
    h_pre = z @ p.w1.T
    h = np.maximum(h_pre, 0)
    a = G.logistic(h @ p.w2.T)
    return x * a[:, :, None, None], (x, z, h_pre, h, a)


def se_backward(cache, grad, p: SeParams):
    x, z, h_pre, h, a = cache
    g_a = (grad * x).sum(axis=(2, 3))
    g_u = g_a * a * (1.0 - a)
    g_w2 = g_u.T @ h
    g_h = (g_u @ p.w2) * (h_pre > 0)
    g_w1 = g_h.T @ z
    g_z = g_h @ p.w1
    hw = x.shape[2] * x.shape[3]
    gx = grad * a[:, :, None, None] + (g_z / hw)[:, :, None, None]
    return gx, g_w1, g_w2


class SEBlock(Layer):
    kind = "se"

    def __init__(self, channels, reduction=16, rng=None, dtype=np.float32,
                 materialize=True, name=""):
        super().__init__(name)
        self.channels = channels
        self.reduction = se_reduction(channels, reduction)
        hidden = channels // self.reduction
        if materialize:
            rng = np.random.default_rng() if rng is None else rng
            self.params["w1"] = he_normal(rng, (hidden, channels), channels, dtype)
            self.params["w2"] = he_normal(rng, (channels, hidden), hidden, dtype)
        else:
            self.params["w1"] = _placeholder((hidden, channels), dtype)
            self.params["w2"] = _placeholder((channels, hidden), dtype)

    def se_params(self) -> SeParams:
        return SeParams(self.params["w1"], self.params["w2"], self.reduction)

    def forward(self, x, train=False):
        out, self._cache = se_forward(x, self.se_params())
        return out

    def backward(self, grad):
        gx, g1, g2 = se_backward(self._cache, grad, self.se_params())
        self.grads.update(w1=g1, w2=g2)
        self._cache = None
        return gx

    def cost(self, in_shape):
        n, c, h, w = in_shape
        return n * (2 * c * c // self.reduction + c * h * w), tuple(in_shape)


class Sequential(Layer):
    kind = "sequential"

    def __init__(self, layers, name=""):
        super().__init__(name)
        self.layers = list(layers)

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def cost(self, in_shape):
        total = 0
        for layer in self.layers:
            macs, in_shape = layer.cost(in_shape)
            total += macs
        return total, in_shape

    def param_count(self):
        return sum(layer.param_count() for layer in self.layers)

    def walk(self):
        for layer in self.layers:
            yield from layer.walk()

    def astype(self, dtype):
        for layer in self.layers:
            layer.astype(dtype)
        return self


class Residual(Layer):
    """``post(body(x) + shortcut(x))`` where an empty shortcut is the identity."""

    kind = "residual"

    def __init__(self, body, shortcut=(), post_relu=True, name=""):
        super().__init__(name)
        self.body = Sequential(body, name=f"{name}/body")
        self.shortcut = Sequential(shortcut, name=f"{name}/shortcut")
        self.post_relu = post_relu

    def forward(self, x, train=False):
        y = self.body.forward(x, train) + self.shortcut.forward(x, train)
        if self.post_relu:
            self._y = y
            y = np.where(y > 0, y, 0).astype(y.dtype, copy=False)
        return y

    def backward(self, grad):
        if self.post_relu:
            grad = np.where(self._y > 0, grad, 0).astype(grad.dtype, copy=False)
        return self.body.backward(grad) + self.shortcut.backward(grad)

    def cost(self, in_shape):
        m1, s1 = self.body.cost(in_shape)
        m2, s2 = self.shortcut.cost(in_shape)
        if tuple(s1) != tuple(s2):
            raise ShapeError(f"{self.name}: body output {s1} does not match shortcut {s2}")
        return m1 + m2, s1

    def param_count(self):
        return self.body.param_count() + self.shortcut.param_count()

    def walk(self):
        yield from self.body.walk()
        yield from self.shortcut.walk()

    def astype(self, dtype):
        self.body.astype(dtype)
        self.shortcut.astype(dtype)
        return self


class SoftmaxXent:
    """Mean softmax cross-entropy over the batch; ``backward`` gives d(loss)/d(logits)."""

    kind = "softmax_xent"

    def forward(self, logits, labels):
        shifted = logits - logits.max(axis=1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        logp = shifted - logz
        self._p = np.exp(logp)
        self._labels = np.asarray(labels)
        n = logits.shape[0]
        return float(-logp[np.arange(n), self._labels].mean())

    def backward(self):
        n = self._p.shape[0]
        g = self._p.copy()
        g[np.arange(n), self._labels] -= 1.0
        return g / n
