"""Rank-4 NCHW arrays: validation, elementwise maps, spatial reductions, convolution.

A "Tensor4" here is a plain ``numpy.ndarray`` of shape ``(N, C, H, W)``; the
helpers below validate and operate on it rather than wrapping it in a class.
"""
from __future__ import annotations

from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

TRAIN_DTYPE = np.float32
CHECK_DTYPE = np.float64

REDUCTIONS = ("sum", "sum_of_squares", "max_abs", "sum_abs")


class ShapeError(ValueError):
    pass


def as_tensor4(x, dtype=None) -> np.ndarray:
    """Return ``x`` as a C-contiguous 4-d array, checking the shape invariants."""
    arr = np.ascontiguousarray(x, dtype=dtype)
    if arr.ndim != 4:
        raise ShapeError(f"expected a rank-4 NCHW array, got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ShapeError(f"all shape components must be >= 1, got {arr.shape}")
    return arr


def map_elementwise(t: np.ndarray, f: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    t = as_tensor4(t)
    out = np.asarray(f(t))
    if out.shape != t.shape:
        raise ShapeError(f"elementwise map changed shape {t.shape} -> {out.shape}")
    return out


def reduce_spatial(t: np.ndarray, kind: str) -> np.ndarray:
    """Per-(n, c) reduction over all H*W positions, returned with shape (N, C, 1, 1)."""
    t = as_tensor4(t)
    if kind == "sum":
        return t.sum(axis=(2, 3), keepdims=True)
    if kind == "sum_of_squares":
        return np.square(t).sum(axis=(2, 3), keepdims=True)
    if kind == "max_abs":
        return np.abs(t).max(axis=(2, 3), keepdims=True)
    if kind == "sum_abs":
        return np.abs(t).sum(axis=(2, 3), keepdims=True)
    raise ValueError(f"unknown reduction {kind!r}; expected one of {REDUCTIONS}")


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _check_conv_args(x, weight, stride, padding):
    if weight.ndim != 4:
        raise ShapeError(f"conv weight must be (C_out, C_in, kH, kW), got {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"input has {x.shape[1]} channels but kernel expects {weight.shape[1]}")
    if stride < 1 or padding < 0:
        raise ValueError(f"need stride >= 1 and padding >= 0, got {stride}, {padding}")
    kh, kw = weight.shape[2:]
    ho = conv_output_size(x.shape[2], kh, stride, padding)
    wo = conv_output_size(x.shape[3], kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {kh}x{kw} does not fit input {x.shape[2:]} with padding {padding}")
    return ho, wo


def pad_spatial(x: np.ndarray, padding: int, value: float = 0.0) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                  mode="constant", constant_values=value)


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Patch matrix of shape (C*kh*kw, N*Ho*Wo); row order matches a flattened kernel."""
    xp = pad_spatial(x, padding)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    # (N, C, Ho, Wo, kh, kw) -> (C, kh, kw, N, Ho, Wo)
    return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * kh * kw, n * ho * wo)


def col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch gradients back onto the input."""
    n, c, h, w = x_shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    cols = cols.reshape(c, kh, kw, n, ho, wo)
    out = np.zeros((c, n, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, i, j]
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3))


def conv2d_forward(x, weight, bias=None, stride: int = 1, padding: int = 0,
                   method: str = "im2col") -> np.ndarray:
    """2-d cross-correlation of an NCHW batch with a (C_out, C_in, kH, kW) kernel.

    ``method="im2col"`` lowers to a single matrix product; ``method="direct"``
    accumulates one shifted slice per kernel offset. Both share this contract.
    """
    x = as_tensor4(x)
    weight = np.asarray(weight)
    ho, wo = _check_conv_args(x, weight, stride, padding)
    c_out, c_in, kh, kw = weight.shape
    if method == "im2col":
        out, _ = conv2d_im2col(x, weight, stride, padding)
    elif method == "direct":
        xp = pad_spatial(x, padding)
        out = np.zeros((x.shape[0], c_out, ho, wo), dtype=np.result_type(x, weight))
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
                out += np.einsum("nchw,oc->nohw", patch, weight[:, :, i, j])
    else:
        raise ValueError(f"unknown conv method {method!r}")
    if bias is not None:
        out = out + np.asarray(bias).reshape(1, -1, 1, 1)
    return np.ascontiguousarray(out)


def conv2d_im2col(x, weight, stride: int = 1, padding: int = 0):
    """Convolution as one matrix product. Returns ``(out, cols)``; keep ``cols`` for backward."""
    n = x.shape[0]
    c_out, _, kh, kw = weight.shape
    ho = conv_output_size(x.shape[2], kh, stride, padding)
    wo = conv_output_size(x.shape[3], kw, stride, padding)
    cols = im2col(x, kh, kw, stride, padding)
    out = weight.reshape(c_out, -1) @ cols  # (C_out, N*Ho*Wo)
    return np.ascontiguousarray(out.reshape(c_out, n, ho, wo).transpose(1, 0, 2, 3)), cols


def conv2d_backward(x, weight, grad_out, stride: int = 1, padding: int = 0, cols=None):
    """Gradients of a convolution w.r.t. input, weight and bias.

    ``cols`` may carry the forward pass's im2col matrix to avoid recomputing it.
    """
    c_out, c_in, kh, kw = weight.shape
    if cols is None:
        cols = im2col(x, kh, kw, stride, padding)
    g2 = np.ascontiguousarray(grad_out.transpose(1, 0, 2, 3)).reshape(c_out, -1)
    grad_w = (g2 @ cols.T).reshape(weight.shape)
    grad_b = g2.sum(axis=1)
    grad_cols = weight.reshape(c_out, -1).T @ g2
    grad_x = col2im(grad_cols, x.shape, kh, kw, stride, padding)
    return grad_x, grad_w, grad_b
