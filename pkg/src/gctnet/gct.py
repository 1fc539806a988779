"""Gated Channel Transformation.

For an input ``x`` of shape (N, C, H, W) and per-channel parameters
``alpha``, ``gamma``, ``beta``::

    s_c     = alpha_c * ||x_c||_p                  (global context embedding)
    s_hat_c = sqrt(C) * s_c / ||s||_2              (channel normalization)
    out_c   = x_c * (1 + tanh(gamma_c * s_hat_c + beta_c))   (gating adaptation)

with ``epsilon`` added inside each root/denominator. With ``gamma = beta = 0``
the gate is exactly one, so a freshly initialized layer is the identity map.
Every step is computed per sample; the batch is never mixed.

The embedding, normalization and gate each have ablation variants (see
:class:`EmbedNorm`, :class:`ChannelNorm`, :class:`Adaptation`).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .tensor import ShapeError, as_tensor4

DEFAULT_EPSILON = 1e-5


class EmbedNorm(str, Enum):
    L1 = "l1"
    L2 = "l2"
    LINF = "linf"


class ChannelNorm(str, Enum):
    L1 = "l1"
    L2 = "l2"
    MEAN_VARIANCE = "mean_variance"


class Adaptation(str, Enum):
    ONE_PLUS_TANH = "one_plus_tanh"
    SIGMOID = "sigmoid"
    ONE_PLUS_ELU = "one_plus_elu"


@dataclass
class GctParams:
    alpha: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    epsilon: float = DEFAULT_EPSILON
    embed_norm: EmbedNorm = EmbedNorm.L2
    channel_norm: ChannelNorm = ChannelNorm.L2
    adaptation: Adaptation = Adaptation.ONE_PLUS_TANH
    # Reference-code placement of epsilon: s / sqrt(mean(s^2) + eps) instead of
    # sqrt(C) * s / sqrt(sum(s^2) + eps). Only affects the L2 channel norm.
    eps_on_mean: bool = False

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha)
        self.gamma = np.asarray(self.gamma)
        self.beta = np.asarray(self.beta)
        self.embed_norm = EmbedNorm(self.embed_norm)
        self.channel_norm = ChannelNorm(self.channel_norm)
        self.adaptation = Adaptation(self.adaptation)
        shapes = {self.alpha.shape, self.gamma.shape, self.beta.shape}
        if len(shapes) != 1 or self.alpha.ndim != 1:
            raise ShapeError(
                f"alpha, gamma, beta must be equal-length vectors, got "
                f"{self.alpha.shape}, {self.gamma.shape}, {self.beta.shape}")
        # epsilon = 0 is accepted for exact-arithmetic checks
        if not self.epsilon >= 0:
            raise ValueError(f"epsilon must be non-negative, got {self.epsilon}")

    @classmethod
    def init(cls, channels: int, dtype=np.float32, **kwargs) -> "GctParams":
        """Identity initialization: alpha = 1, gamma = 0, beta = 0."""
        return cls(alpha=np.ones(channels, dtype=dtype),
                   gamma=np.zeros(channels, dtype=dtype),
                   beta=np.zeros(channels, dtype=dtype), **kwargs)

    @property
    def channels(self) -> int:
        return self.alpha.shape[0]

    def variant(self) -> dict:
        return {"epsilon": float(self.epsilon), "embed_norm": self.embed_norm.value,
                "channel_norm": self.channel_norm.value,
                "adaptation": self.adaptation.value, "eps_on_mean": self.eps_on_mean}

    def to_dict(self) -> dict:
        d = {"alpha": self.alpha.tolist(), "gamma": self.gamma.tolist(),
             "beta": self.beta.tolist()}
        d.update(self.variant())
        return d

    @classmethod
    def from_dict(cls, d: dict, dtype=np.float32) -> "GctParams":
        return cls(alpha=np.asarray(d["alpha"], dtype=dtype),
                   gamma=np.asarray(d["gamma"], dtype=dtype),
                   beta=np.asarray(d["beta"], dtype=dtype),
                   epsilon=float(d.get("epsilon", DEFAULT_EPSILON)),
                   embed_norm=d.get("embed_norm", "l2"),
                   channel_norm=d.get("channel_norm", "l2"),
                   adaptation=d.get("adaptation", "one_plus_tanh"),
                   eps_on_mean=bool(d.get("eps_on_mean", False)))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str, dtype=np.float32) -> "GctParams":
        return cls.from_dict(json.loads(text), dtype=dtype)


@dataclass
class GctForwardCache:
    x: np.ndarray
    norm: np.ndarray     # (N, C) unscaled channel norm, s = alpha * norm
    s: np.ndarray        # (N, C)
    s_hat: np.ndarray    # (N, C)
    z: np.ndarray        # (N, C) gate pre-activation
    gate: np.ndarray     # (N, C)
    argmax: np.ndarray | None = field(default=None, repr=False)  # Linf only


def _check_channels(x, params):
    if x.shape[1] != params.channels:
        raise ShapeError(
            f"input has {x.shape[1]} channels, GCT parameters have {params.channels}")


def _channel_sum(v: np.ndarray) -> np.ndarray:
    # Summing in sorted order makes the result independent of channel order,
    # so permuting channels permutes the output bit-exactly.
    return np.sort(v, axis=1).sum(axis=1, keepdims=True)


def _embed_norm(x: np.ndarray, params: GctParams):
    eps = params.epsilon
    n, c = x.shape[:2]
    flat = x.reshape(n, c, -1)
    if params.embed_norm is EmbedNorm.L2:
        return np.sqrt(np.square(flat).sum(axis=2) + eps), None
    if params.embed_norm is EmbedNorm.L1:
        return np.abs(flat).sum(axis=2) + eps, None
    a = np.abs(flat)
    idx = a.argmax(axis=2)
    return np.take_along_axis(a, idx[..., None], axis=2)[..., 0] + eps, idx


def embed(x, params: GctParams) -> np.ndarray:
    """Global context embedding ``s`` of shape (N, C)."""
    x = as_tensor4(x)
    _check_channels(x, params)
    norm, _ = _embed_norm(x, params)
    return params.alpha * norm


def channel_normalize(s, params: GctParams) -> np.ndarray:
    """Normalize the embedding across channels, independently for each sample."""
    s = np.asarray(s)
    c = s.shape[1]
    eps = params.epsilon
    kind = params.channel_norm
    if kind is ChannelNorm.L2:
        if params.eps_on_mean:
            return s / np.sqrt(_channel_sum(s * s) / c + eps)
        return math.sqrt(c) * s / np.sqrt(_channel_sum(s * s) + eps)
    if kind is ChannelNorm.L1:
        return c * s / (_channel_sum(np.abs(s)) + eps)
    mu = _channel_sum(s) / c
    d = s - mu
    sigma = np.sqrt(_channel_sum(d * d) / c)
    return d / (sigma + eps)


def logistic(z):
    """1 / (1 + exp(-z)) without overflow, and without rounding to 0 for very negative z."""
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0, e) / (1.0 + e)


def _activate(z: np.ndarray, kind: Adaptation) -> np.ndarray:
    if kind is Adaptation.ONE_PLUS_TANH:
        # 1 + tanh(z) = 2 * logistic(2z); this form stays positive where 1 + tanh(z)
        # would round to zero, and is exactly 1 at z = 0
        return 2.0 * logistic(2.0 * z)
    if kind is Adaptation.SIGMOID:
        return logistic(z)
    return 1.0 + np.where(z >= 0, z, np.expm1(np.minimum(z, 0)))


def _activate_grad(z: np.ndarray, gate: np.ndarray, kind: Adaptation) -> np.ndarray:
    if kind is Adaptation.ONE_PLUS_TANH:
        return gate * (2.0 - gate)
    if kind is Adaptation.SIGMOID:
        return gate * (1.0 - gate)
    return np.where(z >= 0, 1.0, gate)


def gate_values(s_hat, params: GctParams):
    z = params.gamma * s_hat + params.beta
    return z, _activate(z, params.adaptation)


def gate_adapt(x, s_hat, params: GctParams) -> np.ndarray:
    x = as_tensor4(x)
    _, gate = gate_values(s_hat, params)
    return x * gate[:, :, None, None]


def gct_forward(x, params: GctParams):
    """Full transform. Returns ``(out, cache)``; pass the cache to :func:`gct_backward`."""
    x = as_tensor4(x)
    _check_channels(x, params)
    norm, argmax = _embed_norm(x, params)
    s = params.alpha * norm
    s_hat = channel_normalize(s, params)
    z, gate = gate_values(s_hat, params)
    out = x * gate[:, :, None, None]
    return out, GctForwardCache(x=x, norm=norm, s=s, s_hat=s_hat, z=z, gate=gate, argmax=argmax)


def _channel_normalize_backward(g_hat, s, s_hat, params: GctParams):
    """Vector-Jacobian product of :func:`channel_normalize` w.r.t. ``s``."""
    c = s.shape[1]
    eps = params.epsilon
    kind = params.channel_norm
    if kind is ChannelNorm.L2:
        if params.eps_on_mean:
            k, a = 1.0, 1.0 / c
            d = np.sqrt((s * s).sum(axis=1, keepdims=True) / c + eps)
        else:
            k, a = math.sqrt(c), 1.0
            d = np.sqrt((s * s).sum(axis=1, keepdims=True) + eps)
        gs = (g_hat * s).sum(axis=1, keepdims=True)
        return k / d * (g_hat - a * s * gs / (d * d))
    if kind is ChannelNorm.L1:
        d = np.abs(s).sum(axis=1, keepdims=True) + eps
        gs = (g_hat * s).sum(axis=1, keepdims=True)
        return c / d * (g_hat - np.sign(s) * gs / d)
    mu = s.mean(axis=1, keepdims=True)
    dev = s - mu
    sigma = np.sqrt((dev * dev).mean(axis=1, keepdims=True))
    t = sigma + eps
    g_dev = g_hat / t
    # d(sigma)/d(s_j) = dev_j / (C sigma); undefined (taken as 0) when sigma == 0
    safe = np.where(sigma > 0, sigma, 1.0)
    g_sigma = -(g_hat * dev).sum(axis=1, keepdims=True) / (t * t)
    g_dev = g_dev + np.where(sigma > 0, g_sigma * dev / (c * safe), 0.0)
    return g_dev - g_dev.mean(axis=1, keepdims=True)


def gct_backward(cache: GctForwardCache, grad_out, params: GctParams):
    """Exact gradients ``(grad_x, grad_alpha, grad_gamma, grad_beta)``.

    Parameter gradients are summed over the batch.
    """
    x = cache.x
    grad_out = np.asarray(grad_out)
    if grad_out.shape != x.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward input {x.shape}")
    if cache.s.shape[1] != params.channels:
        raise ShapeError("forward cache and GCT parameters disagree on channel count")

    g_gate = (grad_out * x).sum(axis=(2, 3))
    g_z = g_gate * _activate_grad(cache.z, cache.gate, params.adaptation)
    grad_beta = g_z.sum(axis=0)
    grad_gamma = (g_z * cache.s_hat).sum(axis=0)
    g_s = _channel_normalize_backward(g_z * params.gamma, cache.s, cache.s_hat, params)
    grad_alpha = (g_s * cache.norm).sum(axis=0)
    g_norm = g_s * params.alpha  # (N, C)

    grad_x = grad_out * cache.gate[:, :, None, None]
    kind = params.embed_norm
    if kind is EmbedNorm.L2:
        grad_x = grad_x + x * (g_norm / cache.norm)[:, :, None, None]
    elif kind is EmbedNorm.L1:
        grad_x = grad_x + np.sign(x) * g_norm[:, :, None, None]
    else:
        n, c = x.shape[:2]
        flat = grad_x.reshape(n, c, -1)
        sel = np.take_along_axis(x.reshape(n, c, -1), cache.argmax[..., None], axis=2)
        upd = np.sign(sel)[..., 0] * g_norm
        np.put_along_axis(flat, cache.argmax[..., None],
                          np.take_along_axis(flat, cache.argmax[..., None], axis=2)
                          + upd[..., None], axis=2)
        grad_x = flat.reshape(x.shape)
    return grad_x, grad_alpha, grad_gamma, grad_beta
