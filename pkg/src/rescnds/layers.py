"""Hand-written forward/backward kernels for every layer kind in the network.

Every ``*_forward`` stashes what its backward needs in a :class:`Cache`;
every ``*_backward`` reads it back and checks the incoming gradient against
the shape the forward produced. Convolutions go through im2col + tensordot;
:func:`conv2d_reference` is the slow nested-loop version kept for testing.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ParameterError, ShapeError, StateError
from .tensor import DTYPE, elementwise_add, gaussian_init, zeros


@dataclass
class LayerParams:
    weights: np.ndarray
    bias: np.ndarray

    @classmethod
    def gaussian(cls, weight_shape, std: float, seed) -> "LayerParams":
        return cls(gaussian_init(weight_shape, std, seed), zeros([weight_shape[0]]))

    def copy(self) -> "LayerParams":
        return LayerParams(self.weights.copy(), self.bias.copy())


class Cache:
    """Per-layer scratch space linking one forward call to its backward."""

    def __init__(self):
        self._d: dict = {}

    def put(self, **items) -> None:
        self._d = dict(items)

    def get(self, key):
        if key not in self._d:
            raise StateError(f"no cached {key!r}: backward called without a matching forward")
        return self._d[key]

    def clear(self) -> None:
        self._d = {}

    def __bool__(self) -> bool:
        return bool(self._d)


def _check_grad(grad_out: np.ndarray, cache: Cache) -> None:
    shape = cache.get("out_shape")
    if grad_out.shape != shape:
        raise StateError(f"gradient shape {grad_out.shape} does not match forward output {shape}")


def out_size(n: int, k: int, stride: int, pad: int = 0) -> int:
    return (n + 2 * pad - k) // stride + 1


# -- convolution ------------------------------------------------------------

def _windows(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """[N, C, H', W', k, k] view of the padded input."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    return sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]


def conv2d_forward(x: np.ndarray, params: LayerParams, stride: int, pad: int,
                   cache: Cache | None = None) -> np.ndarray:
    w, b = params.weights, params.bias
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects [N,C,H,W], got {x.shape}")
    o, c, k, k2 = w.shape
    if k != k2:
        raise ShapeError("only square kernels are supported")
    if x.shape[1] != c:
        raise ShapeError(f"input has {x.shape[1]} channels, kernel expects {c}")
    if stride < 1:
        raise ParameterError("stride must be >= 1")
    if x.shape[2] + 2 * pad < k or x.shape[3] + 2 * pad < k:
        raise ShapeError(f"{k}x{k} kernel does not fit input {x.shape[2:]} with pad {pad}")
    cols = _windows(x, k, stride, pad)
    out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))  # [N, H', W', O]
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2)) + b[None, :, None, None]
    if cache is not None:
        cache.put(cols=cols, x_shape=x.shape, out_shape=out.shape)
    return out


def conv2d_backward(grad_out: np.ndarray, params: LayerParams, cache: Cache,
                    stride: int, pad: int):
    _check_grad(grad_out, cache)
    cols = cache.get("cols")
    n, c, h, w_ = cache.get("x_shape")
    w = params.weights
    k = w.shape[2]
    grad_w = np.tensordot(grad_out, cols, axes=([0, 2, 3], [0, 2, 3]))
    grad_b = grad_out.sum(axis=(0, 2, 3))
    dcols = np.tensordot(grad_out, w, axes=([1], [0]))  # [N, H', W', C, k, k]
    ho, wo = grad_out.shape[2:]
    dxp = np.zeros((n, c, h + 2 * pad, w_ + 2 * pad), dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    grad_x = dxp[:, :, pad:pad + h, pad:pad + w_]
    return np.ascontiguousarray(grad_x), grad_w, grad_b


def conv2d_reference(x: np.ndarray, params: LayerParams, stride: int, pad: int) -> np.ndarray:
    """Direct nested-loop cross-correlation. Slow; for tests only."""
    w, b = params.weights, params.bias
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = out_size(h, k, stride, pad), out_size(wd, k, stride, pad)
    out = np.zeros((n, o, ho, wo))
    for bi in range(n):
        for oc in range(o):
            for r in range(ho):
                for s in range(wo):
                    acc = b[oc]
                    for ic in range(c):
                        for i in range(k):
                            for j in range(k):
                                acc += xp[bi, ic, r * stride + i, s * stride + j] * w[oc, ic, i, j]
                    out[bi, oc, r, s] = acc
    return out


# -- pooling ----------------------------------------------------------------

def _pool_check(x: np.ndarray, k: int, stride: int) -> None:
    if x.ndim != 4:
        raise ShapeError(f"pooling expects [N,C,H,W], got {x.shape}")
    if k < 1 or stride < 1:
        raise ParameterError("pool kernel and stride must be >= 1")
    if k > x.shape[2] or k > x.shape[3]:
        raise ShapeError(f"{k}x{k} pool window does not fit input {x.shape[2:]}")


def maxpool_forward(x: np.ndarray, k: int, stride: int, cache: Cache | None = None) -> np.ndarray:
    _pool_check(x, k, stride)
    win = _windows(x, k, stride, 0)
    flat = win.reshape(*win.shape[:4], k * k)
    idx = flat.argmax(axis=-1)  # first maximum wins ties
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    if cache is not None:
        cache.put(idx=idx, k=k, stride=stride, x_shape=x.shape, out_shape=out.shape)
    return np.ascontiguousarray(out)


def maxpool_backward(grad_out: np.ndarray, cache: Cache) -> np.ndarray:
    _check_grad(grad_out, cache)
    idx, k, stride = cache.get("idx"), cache.get("k"), cache.get("stride")
    dx = np.zeros(cache.get("x_shape"), dtype=DTYPE)
    ho, wo = grad_out.shape[2:]
    for i in range(k):
        for j in range(k):
            hit = idx == i * k + j
            if hit.any():
                dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += grad_out * hit
    return dx


def avgpool_forward(x: np.ndarray, k: int = 5, stride: int = 2, cache: Cache | None = None) -> np.ndarray:
    _pool_check(x, k, stride)
    out = _windows(x, k, stride, 0).mean(axis=(4, 5))
    if cache is not None:
        cache.put(k=k, stride=stride, x_shape=x.shape, out_shape=out.shape)
    return np.ascontiguousarray(out)


def avgpool_backward(grad_out: np.ndarray, cache: Cache) -> np.ndarray:
    _check_grad(grad_out, cache)
    k, stride = cache.get("k"), cache.get("stride")
    dx = np.zeros(cache.get("x_shape"), dtype=DTYPE)
    ho, wo = grad_out.shape[2:]
    g = grad_out / (k * k)
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g
    return dx


# -- pointwise --------------------------------------------------------------

def relu_forward(x: np.ndarray, cache: Cache | None = None) -> np.ndarray:
    mask = x > 0
    if cache is not None:
        cache.put(mask=mask, out_shape=x.shape)
    return np.where(mask, x, 0.0)


def relu_backward(grad_out: np.ndarray, cache: Cache) -> np.ndarray:
    _check_grad(grad_out, cache)
    return np.where(cache.get("mask"), grad_out, 0.0)


def dropout_forward(x: np.ndarray, rate: float = 0.5, mode: str = "train", seed=None,
                    cache: Cache | None = None) -> np.ndarray:
    """Inverted dropout. Test mode returns ``x`` itself."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "test":
        if cache is not None:
            cache.put(mask=None, out_shape=x.shape)
        return x
    if mode != "train":
        raise ParameterError(f"unknown mode {mode!r}")
    keep = np.random.default_rng(seed).random(x.shape) >= rate
    scale = 1.0 / (1.0 - rate)
    mask = keep * scale
    if cache is not None:
        cache.put(mask=mask, out_shape=x.shape)
    return x * mask


def dropout_backward(grad_out: np.ndarray, cache: Cache) -> np.ndarray:
    _check_grad(grad_out, cache)
    mask = cache.get("mask")
    return grad_out if mask is None else grad_out * mask


# -- fully connected --------------------------------------------------------

def fc_forward(x: np.ndarray, params: LayerParams, cache: Cache | None = None) -> np.ndarray:
    w, b = params.weights, params.bias
    flat = x.reshape(x.shape[0], -1)
    if flat.shape[1] != w.shape[1]:
        raise ShapeError(f"fc expects {w.shape[1]} inputs, got {flat.shape[1]}")
    out = flat @ w.T + b
    if cache is not None:
        cache.put(x=flat, x_shape=x.shape, out_shape=out.shape)
    return out


def fc_backward(grad_out: np.ndarray, params: LayerParams, cache: Cache):
    _check_grad(grad_out, cache)
    flat = cache.get("x")
    grad_w = grad_out.T @ flat
    grad_b = grad_out.sum(axis=0)
    grad_x = (grad_out @ params.weights).reshape(cache.get("x_shape"))
    return grad_x, grad_w, grad_b


# -- merge ------------------------------------------------------------------

def add_forward(a: np.ndarray, b: np.ndarray, cache: Cache | None = None) -> np.ndarray:
    out = elementwise_add(a, b)
    if cache is not None:
        cache.put(out_shape=out.shape)
    return out


def add_backward(grad_out: np.ndarray, cache: Cache):
    _check_grad(grad_out, cache)
    return grad_out, grad_out
