"""Numerical core: float64 forward ops, their reverse-mode rules, layers and Adam.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Every forward op
has a matching ``*_backward`` that maps the gradient of a scalar loss w.r.t. the
op's output to gradients w.r.t. its inputs.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, NonFiniteError, StateError

GradientSet = dict[str, np.ndarray]


def as_tensor(x, name: str = "tensor") -> np.ndarray:
    """Convert ``x`` to a float64 array and reject NaN/Inf."""
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains non-finite values")
    return arr


# ----------------------------------------------------------------------------
# dense
# ----------------------------------------------------------------------------

def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """y[i, j] = sum_k x[i, k] * w[k, j] + b[j]."""
    x, w, b = np.asarray(x, np.float64), np.asarray(w, np.float64), np.asarray(b, np.float64)
    if x.ndim != 2 or w.ndim != 2 or b.ndim != 1:
        raise DimensionError(f"dense expects 2-D x, 2-D w, 1-D b; got {x.shape}, {w.shape}, {b.shape}")
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise DimensionError(f"dense shape mismatch: x{x.shape} w{w.shape} b{b.shape}")
    return x @ w + b


def dense_backward(x, w, grad_out):
    """Return ``(dx, dw, db)``."""
    return grad_out @ w.T, x.T @ grad_out, grad_out.sum(axis=0)


# ----------------------------------------------------------------------------
# relu
# ----------------------------------------------------------------------------

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x, np.float64), 0.0)


def relu_backward(x, grad_out):
    return grad_out * (x > 0)


# ----------------------------------------------------------------------------
# conv2d (cross-correlation, zero padding)
# ----------------------------------------------------------------------------

def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _im2col(x, kh, kw, stride, padding):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, oh, ow = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    return cols, oh, ow


def conv2d_forward(x, k, b, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Cross-correlate ``x[batch, cin, h, w]`` with ``k[cout, cin, kh, kw]``."""
    x, k, b = np.asarray(x, np.float64), np.asarray(k, np.float64), np.asarray(b, np.float64)
    if x.ndim != 4 or k.ndim != 4 or b.ndim != 1:
        raise DimensionError(f"conv2d expects 4-D x and k, 1-D b; got {x.shape}, {k.shape}, {b.shape}")
    if stride < 1 or padding < 0:
        raise DimensionError("stride must be positive and padding non-negative")
    cout, cin, kh, kw = k.shape
    if x.shape[1] != cin or b.shape[0] != cout:
        raise DimensionError(f"conv2d channel mismatch: x{x.shape} k{k.shape} b{b.shape}")
    if x.shape[2] + 2 * padding < kh or x.shape[3] + 2 * padding < kw:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {x.shape[2:]}")
    cols, oh, ow = _im2col(x, kh, kw, stride, padding)
    out = cols @ k.reshape(cout, -1).T + b
    return out.reshape(x.shape[0], oh, ow, cout).transpose(0, 3, 1, 2)


def conv2d_backward(x, k, grad_out, stride: int = 1, padding: int = 0, cols=None):
    """Return ``(dx, dk, db)``. ``cols`` may pass a cached im2col of ``x``."""
    n, cin, h, w = x.shape
    cout, _, kh, kw = k.shape
    oh, ow = grad_out.shape[2], grad_out.shape[3]
    if cols is None:
        cols, _, _ = _im2col(x, kh, kw, stride, padding)
    g = grad_out.transpose(0, 2, 3, 1).reshape(-1, cout)
    dk = (g.T @ cols).reshape(k.shape)
    db = grad_out.sum(axis=(0, 2, 3))
    dcols = (g @ k.reshape(cout, -1)).reshape(n, oh, ow, cin, kh, kw)
    dxp = np.zeros((n, cin, h + 2 * padding, w + 2 * padding))
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if padding:
        dxp = dxp[:, :, padding:-padding, padding:-padding]
    return dxp, dk, db


# ----------------------------------------------------------------------------
# pooling
# ----------------------------------------------------------------------------

def global_avg_pool(x) -> np.ndarray:
    """Spatial mean of each feature map: ``[batch, c, h, w] -> [batch, c]``."""
    x = np.asarray(x, np.float64)
    if x.ndim != 4 or x.shape[2] < 1 or x.shape[3] < 1:
        raise DimensionError(f"global_avg_pool expects [batch, c, h>=1, w>=1], got {x.shape}")
    return x.mean(axis=(2, 3))


def global_avg_pool_backward(x_shape, grad_out):
    h, w = x_shape[2], x_shape[3]
    return np.broadcast_to(grad_out[:, :, None, None] / (h * w), x_shape).copy()


def max_pool2d_forward(x, size: int = 2):
    """Non-overlapping max pooling; trailing rows/cols that do not fill a window are dropped.

    Returns ``(out, argmax)`` where ``argmax`` indexes the winning element of each window.
    """
    n, c, h, w = x.shape
    oh, ow = h // size, w // size
    if oh < 1 or ow < 1:
        raise DimensionError(f"pool size {size} larger than input {x.shape[2:]}")
    xc = x[:, :, :oh * size, :ow * size]
    win = xc.reshape(n, c, oh, size, ow, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, size * size)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, arg


def max_pool2d_backward(x_shape, arg, grad_out, size: int = 2):
    n, c, h, w = x_shape
    oh, ow = arg.shape[2], arg.shape[3]
    win = np.zeros((n, c, oh, ow, size * size))
    np.put_along_axis(win, arg[..., None], grad_out[..., None], axis=-1)
    dx = np.zeros(x_shape)
    dx[:, :, :oh * size, :ow * size] = (
        win.reshape(n, c, oh, ow, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh * size, ow * size)
    )
    return dx


# ----------------------------------------------------------------------------
# loss
# ----------------------------------------------------------------------------

def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits, labels) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood and its gradient w.r.t. ``logits``."""
    logits = np.asarray(logits, np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"logits {logits.shape} and labels {labels.shape} do not conform")
    n, classes = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise IndexError(f"labels must lie in [0, {classes})")
    logp = log_softmax(logits)
    rows = np.arange(n)
    loss = float(-logp[rows, labels].mean())
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return loss, grad / n


# ----------------------------------------------------------------------------
# layers: a static pipeline of (forward, backward) pairs
# ----------------------------------------------------------------------------

class Layer:
    """Base layer. ``forward`` returns ``(y, cache)``; ``backward`` consumes the cache."""

    param_ids: tuple[str, ...] = ()
    # name of the neuron layer whose post-activation output this layer emits
    tag: str | None = None

    def forward(self, x, params):
        raise NotImplementedError

    def backward(self, grad, cache, params):
        raise NotImplementedError


class Dense(Layer):
    def __init__(self, name: str, n_in: int, n_out: int):
        self.name = name
        self.n_in, self.n_out = n_in, n_out
        self.param_ids = (f"{name}.w", f"{name}.b")

    def forward(self, x, params):
        w, b = params[self.param_ids[0]], params[self.param_ids[1]]
        return dense_forward(x, w, b), x

    def backward(self, grad, cache, params):
        dx, dw, db = dense_backward(cache, params[self.param_ids[0]], grad)
        return dx, {self.param_ids[0]: dw, self.param_ids[1]: db}


class Conv2d(Layer):
    def __init__(self, name: str, c_in: int, c_out: int, kernel: int = 3, stride: int = 1, padding: int = 1):
        self.name = name
        self.c_in, self.c_out = c_in, c_out
        self.kernel, self.stride, self.padding = kernel, stride, padding
        self.param_ids = (f"{name}.w", f"{name}.b")

    def forward(self, x, params):
        k, b = params[self.param_ids[0]], params[self.param_ids[1]]
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise DimensionError(f"{self.name} expects [batch, {self.c_in}, h, w], got {x.shape}")
        cols, oh, ow = _im2col(x, self.kernel, self.kernel, self.stride, self.padding)
        y = (cols @ k.reshape(self.c_out, -1).T + b).reshape(x.shape[0], oh, ow, self.c_out).transpose(0, 3, 1, 2)
        return y, (x, cols)

    def backward(self, grad, cache, params):
        x, cols = cache
        dx, dk, db = conv2d_backward(x, params[self.param_ids[0]], grad, self.stride, self.padding, cols=cols)
        return dx, {self.param_ids[0]: dk, self.param_ids[1]: db}


class ReLU(Layer):
    def __init__(self, tag: str | None = None):
        self.tag = tag

    def forward(self, x, params):
        return relu(x), x

    def backward(self, grad, cache, params):
        return relu_backward(cache, grad), {}


class MaxPool2d(Layer):
    def __init__(self, size: int = 2):
        self.size = size

    def forward(self, x, params):
        out, arg = max_pool2d_forward(x, self.size)
        return out, (x.shape, arg)

    def backward(self, grad, cache, params):
        shape, arg = cache
        return max_pool2d_backward(shape, arg, grad, self.size), {}


class GlobalAvgPool(Layer):
    def forward(self, x, params):
        return global_avg_pool(x), x.shape

    def backward(self, grad, cache, params):
        return global_avg_pool_backward(cache, grad), {}


class Flatten(Layer):
    def forward(self, x, params):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, grad, cache, params):
        return grad.reshape(cache), {}


def run_forward(layers, x, params, tape: list | None = None, taps: dict | None = None):
    """Run ``layers`` in order. Caches go to ``tape``; tagged outputs go to ``taps``."""
    for layer in layers:
        x, cache = layer.forward(x, params)
        if tape is not None:
            tape.append(cache)
        if taps is not None and layer.tag is not None:
            taps[layer.tag] = x
    return x


def run_backward(layers, tape, grad, params, grads: GradientSet):
    """Reverse pass over ``layers``; accumulates parameter gradients into ``grads``."""
    if len(tape) != len(layers):
        raise StateError("backward called without a matching recorded forward pass")
    for layer, cache in zip(reversed(layers), reversed(tape)):
        grad, pg = layer.backward(grad, cache, params)
        grads.update(pg)
    return grad


# ----------------------------------------------------------------------------
# Adam
# ----------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray], **hyper) -> "AdamState":
        state = cls(**hyper)
        state.m = {k: np.zeros_like(p) for k, p in params.items()}
        state.v = {k: np.zeros_like(p) for k, p in params.items()}
        return state


def adam_step(params: dict[str, np.ndarray], grads: GradientSet, state: AdamState) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if set(params) != set(grads) or set(params) != set(state.m):
        raise ContractError("params, grads and Adam moments must share one key set")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for key in params:
        g = grads[key]
        m, v = state.m[key], state.v[key]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        params[key] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params
