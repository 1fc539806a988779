"""Central finite-difference gradient checks in float64.

Each case builds a layer and an input, defines the scalar probe loss
``L = sum(layer(x) * R)`` for a fixed random ``R``, and compares every analytic
gradient (input and parameters) against central differences with step ``h``.

The error of one array is ``max|analytic - numeric| / max(max|analytic|, max|numeric|)``;
a case's error is the maximum over its arrays. Finite differences are invalid
at kinks (ReLU at 0, ties in a max), so instances whose kink margin is below
``KINK_MARGIN`` are redrawn; likewise mean/variance-normalized GCT instances
whose channel embeddings are nearly uniform (relative spread < ``MV_MIN_SPREAD``).
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import layers as L
from .gct import Adaptation, ChannelNorm, EmbedNorm
from .tensor import pad_spatial

H = 1e-5
TOLERANCE = 1e-6
KINK_MARGIN = 1e-3
MV_MIN_SPREAD = 0.05

GCT_VARIANTS = [dict(embed_norm=e.value, channel_norm=c.value, adaptation=a.value)
                for e, c, a in itertools.product(EmbedNorm, ChannelNorm, Adaptation)]


def numeric_gradient(f, arr: np.ndarray, h: float = H) -> np.ndarray:
    """d f() / d arr by central differences, perturbing ``arr`` in place."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat, gflat = arr.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic, numeric) -> float:
    analytic, numeric = np.asarray(analytic, np.float64), np.asarray(numeric, np.float64)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    diff = np.abs(analytic - numeric).max(initial=0.0)
    if scale == 0.0:
        return float(diff)
    return float(diff / scale)


def _gct_margin(leaf) -> float:
    p, cache = leaf.gct_params(), leaf._cache
    n, c = cache.x.shape[:2]
    a = np.abs(cache.x).reshape(n, c, -1)
    margin = np.inf
    if p.embed_norm is EmbedNorm.L1:
        margin = min(margin, float(a.min()))
    elif p.embed_norm is EmbedNorm.LINF:
        top2 = np.sort(a, axis=-1)[..., -2:]
        margin = min(margin, float((top2[..., 1] - top2[..., 0]).min()) if a.shape[-1] > 1 else np.inf,
                     float(top2[..., -1].min()))
    if p.channel_norm is ChannelNorm.L1:
        margin = min(margin, float(np.abs(cache.s).min()))
    elif p.channel_norm is ChannelNorm.MEAN_VARIANCE:
        # sigma -> 0 is a singularity of mean/variance normalization; near it the
        # third derivative grows like 1/sigma^3 and swamps the h^2 truncation term
        spread = cache.s.std(axis=1) / np.abs(cache.s).mean(axis=1)
        if spread.min() < MV_MIN_SPREAD:
            return 0.0
    if p.adaptation is Adaptation.ONE_PLUS_ELU:
        margin = min(margin, float(np.abs(cache.z).min()))
    return margin


def kink_margin(layer) -> float:
    """Smallest distance of the last forward pass to a non-differentiable point."""
    margin = np.inf
    for leaf in _leaves_and_blocks(layer):
        if leaf.kind == "relu":
            margin = min(margin, float(np.abs(leaf._x).min()))
        elif leaf.kind == "residual" and leaf.post_relu:
            margin = min(margin, float(np.abs(leaf._y).min()))
        elif leaf.kind == "maxpool":
            k, s, p = leaf.kernel, leaf.stride, leaf.padding
            xp = pad_spatial(leaf._x, p, value=-np.inf)
            win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
            top2 = np.sort(win.reshape(win.shape[:4] + (k * k,)), axis=-1)[..., -2:]
            margin = min(margin, float((top2[..., 1] - top2[..., 0]).min()))
        elif leaf.kind == "gct":
            margin = min(margin, _gct_margin(leaf))
        elif leaf.kind == "se":
            margin = min(margin, float(np.abs(leaf._cache[2]).min()))
    return margin


def _leaves_and_blocks(layer):
    if isinstance(layer, L.Residual):
        yield layer
        yield from _leaves_and_blocks(layer.body)
        yield from _leaves_and_blocks(layer.shortcut)
    elif isinstance(layer, L.Sequential):
        for child in layer.layers:
            yield from _leaves_and_blocks(child)
    else:
        yield layer


def check_layer(layer, x, rng, train=True) -> dict:
    """Relative error per array for one layer instance. Keys: ``input`` and parameter names."""
    y = layer.forward(x, train)
    r = rng.standard_normal(y.shape)

    def loss():
        return float((layer.forward(x, train) * r).sum())

    layer.forward(x, train)
    gx = layer.backward(r)
    analytic = {"input": gx, **{k: v.copy() for k, v in layer.grads.items()}}
    errors = {"input": relative_error(analytic["input"], numeric_gradient(loss, x))}
    for k, p in layer.params.items():
        errors[k] = relative_error(analytic[k], numeric_gradient(loss, p))
    return errors


def check_softmax_xent(logits, labels) -> dict:
    head = L.SoftmaxXent()
    head.forward(logits, labels)
    g = head.backward()
    return {"input": relative_error(g, numeric_gradient(lambda: head.forward(logits, labels), logits))}


@dataclass
class CaseResult:
    name: str
    instances: int
    max_rel_error: float
    worst: str = ""

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


# each factory: rng -> (layer, x, train)

def _gct_case(variant):
    # two-channel mean/variance normalization outputs +-sigma/(sigma+eps), whose
    # gradient is O(eps) and below finite-difference resolution
    low = 3 if variant["channel_norm"] == ChannelNorm.MEAN_VARIANCE.value else 2

    def make(rng):
        c = int(rng.integers(low, 6))
        layer = L.GctLayer(c, dtype=np.float64, **variant)
        layer.params["alpha"][:] = rng.uniform(0.5, 1.5, c) * rng.choice([-1, 1], c)
        layer.params["gamma"][:] = rng.normal(0, 1, c)
        layer.params["beta"][:] = rng.normal(0, 1, c)
        x = rng.standard_normal((int(rng.integers(1, 3)), c, 3, 3))
        return layer, x, True
    return make


def _conv(rng):
    c_in, c_out, k = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.choice([1, 3]))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    layer = L.Conv2d(c_in, c_out, k, stride, pad, bias=True, rng=rng, dtype=np.float64)
    layer.params["bias"][:] = rng.normal(0, 1, c_out)
    return layer, rng.standard_normal((2, c_in, 5, 5)), True


def _bn(train):
    def make(rng):
        c = int(rng.integers(1, 4))
        layer = L.BatchNorm2d(c, dtype=np.float64)
        layer.params["weight"][:] = rng.uniform(0.5, 1.5, c)
        layer.params["bias"][:] = rng.normal(0, 1, c)
        layer.buffers["running_mean"][:] = rng.normal(0, 1, c)
        layer.buffers["running_var"][:] = rng.uniform(0.5, 2, c)
        return layer, rng.standard_normal((3, c, 3, 3)) * 2 + 1, train
    return make


def _relu(rng):
    return L.ReLU(), rng.standard_normal((2, 3, 4, 4)), True


def _maxpool(rng):
    k = int(rng.integers(2, 4))
    s = int(rng.integers(1, k + 1))
    return L.MaxPool2d(k, s, int(rng.integers(0, 2)) if k > 2 else 0), \
        rng.standard_normal((2, 2, 6, 6)), True


def _gap(rng):
    return L.GlobalAvgPool(), rng.standard_normal((2, 3, 4, 5)), True


def _linear(rng):
    c_in, c_out = int(rng.integers(1, 8)), int(rng.integers(1, 6))
    layer = L.Linear(c_in, c_out, rng=rng, dtype=np.float64)
    layer.params["bias"][:] = rng.normal(0, 1, c_out)
    return layer, rng.standard_normal((3, c_in)), True


def _se(rng):
    c = int(rng.choice([4, 8, 16]))
    layer = L.SEBlock(c, reduction=int(rng.choice([1, 2, 4])), rng=rng, dtype=np.float64)
    return layer, rng.standard_normal((2, c, 3, 3)), True


def _residual(rng):
    c = int(rng.integers(2, 4))
    body = [L.Conv2d(c, c, 3, rng=rng, dtype=np.float64),
            L.BatchNorm2d(c, dtype=np.float64), L.ReLU(),
            L.Conv2d(c, c, 3, rng=rng, dtype=np.float64)]
    if rng.random() < 0.5:
        g = L.GctLayer(c, dtype=np.float64, **GCT_VARIANTS[int(rng.integers(len(GCT_VARIANTS)))])
        for k in ("alpha", "gamma", "beta"):
            g.params[k][:] = rng.normal(0, 1, c)
        body.insert(0, g)
    short = [L.Conv2d(c, c, 1, padding=0, rng=rng, dtype=np.float64)] if rng.random() < 0.5 else []
    return L.Residual(body, short), rng.standard_normal((2, c, 4, 4)), True


def default_cases() -> dict:
    cases = {
        "conv": _conv, "bn_train": _bn(True), "bn_eval": _bn(False), "relu": _relu,
        "maxpool": _maxpool, "gap": _gap, "linear": _linear, "se": _se, "residual": _residual,
    }
    for v in GCT_VARIANTS:
        cases[f"gct[{v['embed_norm']},{v['channel_norm']},{v['adaptation']}]"] = _gct_case(v)
    cases["softmax_xent"] = None
    return cases


def run_case(name, factory, instances=50, seed=0) -> CaseResult:
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    worst, worst_key = 0.0, ""
    done = 0
    while done < instances:
        if factory is None:
            k = int(rng.integers(2, 6))
            logits = rng.standard_normal((3, k)) * 2
            errs = check_softmax_xent(logits, rng.integers(0, k, 3))
        else:
            layer, x, train = factory(rng)
            layer.forward(x, train)
            if kink_margin(layer) < KINK_MARGIN:
                continue
            errs = check_layer(layer, x, rng, train)
        for k, e in errs.items():
            if not e <= worst:
                worst, worst_key = e, k
        done += 1
    return CaseResult(name, instances, worst, worst_key)


def run_suite(instances=50, seed=0, cases=None) -> list[CaseResult]:
    cases = default_cases() if cases is None else cases
    return [run_case(name, f, instances, seed) for name, f in cases.items()]
