"""Dense-tensor kernels: forward/backward for every layer kind, loss, SGD and seeding.

Tensors are plain ``numpy.ndarray`` objects in NCHW (images) or ND (flat)
layout. Kernels keep the dtype of their inputs, so the same code runs in
float32 for training and float64 for gradient checks.
"""
from __future__ import annotations

import os
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32

# Set SPLITLEARN_DEBUG=1 to assert finiteness after every kernel.
CHECK_FINITE = os.environ.get("SPLITLEARN_DEBUG", "") not in ("", "0")

_PURPOSES = {
    "init": 1,
    "shuffle": 2,
    "decoder-init": 3,
    "synthetic": 4,
    "attack": 5,
}


class ShapeError(ValueError):
    """Raised when tensor shapes do not line up for an operation."""


def make_rng(seed: int, purpose: str, *keys: int) -> np.random.Generator:
    """Return a PCG64 generator for one purpose of a run.

    The stream is fully determined by ``(seed, purpose, keys)``: numpy's
    ``SeedSequence`` hashes the run seed together with a per-purpose spawn key,
    and PCG64 output is platform independent.
    """
    if purpose not in _PURPOSES:
        raise ValueError(f"unknown rng purpose {purpose!r}")
    seq = np.random.SeedSequence(entropy=int(seed) & 0xFFFFFFFFFFFFFFFF,
                                 spawn_key=(_PURPOSES[purpose], *map(int, keys)))
    return np.random.Generator(np.random.PCG64(seq))


def as_tensor(x, dtype=DTYPE) -> np.ndarray:
    t = np.ascontiguousarray(x, dtype=dtype)
    if t.ndim == 0 or min(t.shape) < 1:
        raise ShapeError(f"tensor extents must all be >= 1, got {t.shape}")
    return t


def _finite(t: np.ndarray, op: str) -> np.ndarray:
    if CHECK_FINITE and not np.all(np.isfinite(t)):
        raise FloatingPointError(f"{op} produced a non-finite value")
    return t


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeError(msg)


# convolution

def _conv_geometry(in_shape, w_shape, stride, pad):
    _require(len(in_shape) == 4, f"conv input must be 4-D, got {tuple(in_shape)}")
    _require(len(w_shape) == 4 and w_shape[2] == w_shape[3],
             f"conv weight must be [Cout,Cin,k,k], got {tuple(w_shape)}")
    n, c, h, w = in_shape
    _require(c == w_shape[1],
             f"input {tuple(in_shape)} has {c} channels but weight {tuple(w_shape)} expects {w_shape[1]}")
    k = w_shape[2]
    _require(stride >= 1, f"stride must be >= 1, got {stride}")
    _require(pad >= 0, f"pad must be >= 0, got {pad}")
    _require(k <= h + 2 * pad and k <= w + 2 * pad,
             f"kernel {tuple(w_shape)} larger than padded input {tuple(in_shape)} (pad {pad})")
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    return n, c, h, w, k, ho, wo


def _im2col(x: np.ndarray, k: int, stride: int, pad: int, ho: int, wo: int) -> np.ndarray:
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    n, c = x.shape[:2]
    # rows ordered (n, i, j), columns ordered (c, ki, kj) to match weight.reshape(Cout, -1)
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)


def _col2im(cols: np.ndarray, x_shape, k: int, stride: int, pad: int, ho: int, wo: int) -> np.ndarray:
    n, c, h, w = x_shape
    cols = cols.reshape(n, ho, wo, c, k, k)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if pad:
        out = out[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(out)


def conv2d_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray,
                   stride: int = 1, pad: int = 0) -> np.ndarray:
    """Cross-correlation of ``x`` [N,Cin,H,W] with ``weight`` [Cout,Cin,k,k]."""
    n, _, _, _, _, ho, wo = _conv_geometry(x.shape, weight.shape, stride, pad)
    cout = weight.shape[0]
    _require(bias.shape == (cout,), f"bias {bias.shape} does not match weight {weight.shape}")
    cols = _im2col(x, weight.shape[2], stride, pad, ho, wo)
    out = cols @ weight.reshape(cout, -1).T
    out += bias
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    return _finite(np.ascontiguousarray(out), "conv2d_forward")


def conv2d_backward(x: np.ndarray, weight: np.ndarray, grad_out: np.ndarray,
                    stride: int = 1, pad: int = 0):
    """Return ``(grad_input, grad_weight, grad_bias)`` for :func:`conv2d_forward`."""
    n, _, _, _, k, ho, wo = _conv_geometry(x.shape, weight.shape, stride, pad)
    cout = weight.shape[0]
    _require(grad_out.shape == (n, cout, ho, wo),
             f"grad_out {grad_out.shape} does not match forward output {(n, cout, ho, wo)}")
    g = grad_out.transpose(0, 2, 3, 1).reshape(-1, cout)
    cols = _im2col(x, k, stride, pad, ho, wo)
    grad_w = (g.T @ cols).reshape(weight.shape)
    grad_b = grad_out.sum(axis=(0, 2, 3))
    grad_x = _col2im(g @ weight.reshape(cout, -1), x.shape, k, stride, pad, ho, wo)
    return _finite(grad_x, "conv2d_backward"), grad_w, grad_b


def transposed_conv_output_size(size: int, k: int, stride: int, pad: int, output_pad: int = 0) -> int:
    return (size - 1) * stride - 2 * pad + k + output_pad


def transposed_conv2d_forward(y: np.ndarray, weight: np.ndarray, bias: np.ndarray,
                              stride: int = 1, pad: int = 0, output_pad: int = 0) -> np.ndarray:
    """Adjoint of :func:`conv2d_forward` plus bias.

    ``weight`` is laid out [Cin,Cout,k,k] where Cin is the channel count of
    ``y``; it is the same array a convolution from Cout to Cin channels uses.
    """
    _require(y.ndim == 4, f"transposed conv input must be 4-D, got {y.shape}")
    _require(weight.ndim == 4 and weight.shape[2] == weight.shape[3],
             f"transposed conv weight must be [Cin,Cout,k,k], got {weight.shape}")
    _require(y.shape[1] == weight.shape[0],
             f"input {y.shape} has {y.shape[1]} channels but weight {weight.shape} expects {weight.shape[0]}")
    _require(0 <= output_pad < stride or output_pad == 0,
             f"output_pad {output_pad} must be smaller than stride {stride}")
    n, cin, hy, wy = y.shape
    k = weight.shape[2]
    cout = weight.shape[1]
    _require(bias.shape == (cout,), f"bias {bias.shape} does not match weight {weight.shape}")
    h = transposed_conv_output_size(hy, k, stride, pad, output_pad)
    w = transposed_conv_output_size(wy, k, stride, pad, output_pad)
    _require(h >= 1 and w >= 1, f"transposed conv of {y.shape} with {weight.shape} has empty output")
    g = y.transpose(0, 2, 3, 1).reshape(-1, cin)
    out = _col2im(g @ weight.reshape(cin, -1), (n, cout, h, w), k, stride, pad, hy, wy)
    out += bias.reshape(1, cout, 1, 1)
    return _finite(out, "transposed_conv2d_forward")


def transposed_conv2d_backward(y: np.ndarray, weight: np.ndarray, grad_out: np.ndarray,
                               stride: int = 1, pad: int = 0, output_pad: int = 0):
    """Return ``(grad_input, grad_weight, grad_bias)`` for :func:`transposed_conv2d_forward`."""
    n, cin, hy, wy = y.shape
    k = weight.shape[2]
    cout = weight.shape[1]
    h = transposed_conv_output_size(hy, k, stride, pad, output_pad)
    w = transposed_conv_output_size(wy, k, stride, pad, output_pad)
    _require(grad_out.shape == (n, cout, h, w),
             f"grad_out {grad_out.shape} does not match forward output {(n, cout, h, w)}")
    cols = _im2col(grad_out, k, stride, pad, hy, wy)
    grad_y = (cols @ weight.reshape(cin, -1).T).reshape(n, hy, wy, cin).transpose(0, 3, 1, 2)
    g = y.transpose(0, 2, 3, 1).reshape(-1, cin)
    grad_w = (g.T @ cols).reshape(weight.shape)
    grad_b = grad_out.sum(axis=(0, 2, 3))
    return _finite(np.ascontiguousarray(grad_y), "transposed_conv2d_backward"), grad_w, grad_b


# elementwise and pooling

def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    _require(x.shape == grad_out.shape, f"relu grad {grad_out.shape} vs input {x.shape}")
    return grad_out * (x > 0)


def tanh_forward(x: np.ndarray, scaled: bool = False) -> np.ndarray:
    """tanh, or ``(tanh(x) + 1) / 2`` onto [0, 1] when ``scaled``."""
    t = np.tanh(x)
    if scaled:
        t = (t + 1) * x.dtype.type(0.5)
    return t


def tanh_backward(out: np.ndarray, grad_out: np.ndarray, scaled: bool = False) -> np.ndarray:
    """Gradient of :func:`tanh_forward` given its *output*."""
    _require(out.shape == grad_out.shape, f"tanh grad {grad_out.shape} vs output {out.shape}")
    if scaled:
        t = out * 2 - 1
        return grad_out * (1 - t * t) * out.dtype.type(0.5)
    return grad_out * (1 - out * out)


def maxpool2x2_forward(x: np.ndarray):
    """2x2 max pooling with stride 2. Returns ``(out, argmax)``.

    Odd trailing rows/columns are dropped. ``argmax`` holds the flat index
    (0..3) of the winning element inside each window; ties go to the first.
    """
    _require(x.ndim == 4 and x.shape[2] >= 2 and x.shape[3] >= 2,
             f"maxpool2x2 needs a 4-D input with H,W >= 2, got {x.shape}")
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    win = x[:, :, :2 * ho, :2 * wo].reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, ho, wo, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx.astype(np.uint8)


def maxpool2x2_backward(x_shape, argmax: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    n, c, h, w = x_shape
    ho, wo = h // 2, w // 2
    _require(grad_out.shape == (n, c, ho, wo) and argmax.shape == grad_out.shape,
             f"maxpool grad {grad_out.shape} does not match pooled shape {(n, c, ho, wo)}")
    win = np.zeros((n, c, ho, wo, 4), dtype=grad_out.dtype)
    np.put_along_axis(win, argmax[..., None].astype(np.intp), grad_out[..., None], axis=-1)
    win = win.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
    if (2 * ho, 2 * wo) == (h, w):
        return np.ascontiguousarray(win)
    grad = np.zeros(x_shape, dtype=grad_out.dtype)
    grad[:, :, :2 * ho, :2 * wo] = win
    return grad


def upsample2x_forward(x: np.ndarray) -> np.ndarray:
    _require(x.ndim == 4, f"upsample2x needs a 4-D input, got {x.shape}")
    return np.ascontiguousarray(x.repeat(2, axis=2).repeat(2, axis=3))


def upsample2x_backward(grad_out: np.ndarray) -> np.ndarray:
    n, c, h, w = grad_out.shape
    _require(h % 2 == 0 and w % 2 == 0, f"upsample2x grad must have even H,W, got {grad_out.shape}")
    return grad_out.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def dense_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """``x`` [N,D] times ``weight`` [K,D] transposed, plus ``bias`` [K]."""
    _require(x.ndim == 2 and weight.ndim == 2 and x.shape[1] == weight.shape[1],
             f"dense input {x.shape} does not match weight {weight.shape}")
    _require(bias.shape == (weight.shape[0],), f"bias {bias.shape} does not match weight {weight.shape}")
    out = x @ weight.T
    out += bias
    return _finite(out, "dense_forward")


def dense_backward(x: np.ndarray, weight: np.ndarray, grad_out: np.ndarray):
    _require(grad_out.shape == (x.shape[0], weight.shape[0]),
             f"grad_out {grad_out.shape} does not match dense output {(x.shape[0], weight.shape[0])}")
    return grad_out @ weight, grad_out.T @ x, grad_out.sum(axis=0)


# loss and optimizer

def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. ``logits``."""
    labels = np.asarray(labels)
    _require(logits.ndim == 2 and labels.shape == (logits.shape[0],),
             f"logits {logits.shape} and labels {labels.shape} disagree")
    n, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    sz = ez.sum(axis=1, keepdims=True)
    rows = np.arange(n)
    loss = float(np.mean(np.log(sz[:, 0]) - z[rows, labels]))
    grad = ez / sz
    grad[rows, labels] -= 1
    grad /= n
    return loss, grad


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float) -> list[np.ndarray]:
    """Plain SGD: ``p - lr * g`` for each pair, returning new arrays."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} params but {len(grads)} grads")
    out = []
    for p, g in zip(params, grads):
        _require(p.shape == g.shape, f"param {p.shape} vs grad {g.shape}")
        out.append(p - p.dtype.type(lr) * g.astype(p.dtype, copy=False))
    return out


def uniform_fan_in(rng: np.random.Generator, shape, fan_in: int, dtype=DTYPE) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)
