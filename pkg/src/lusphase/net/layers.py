"""Layer primitives with explicit forward/backward passes.

Activations are plain ``(N, C, H, W)`` numpy arrays. Trainable values live in
:class:`Tensor` objects that carry a gradient buffer. Every layer caches what
its backward pass needs during ``forward``; calling ``backward`` first raises
:class:`StateError`.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError, StateError


@dataclass(eq=False)
class Tensor:
    data: np.ndarray
    grad: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        elif self.grad.shape != self.data.shape:
            raise ShapeError(f"gradient shape {self.grad.shape} != data shape {self.data.shape}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad.fill(0.0)


# --------------------------------------------------------------------------- #
# Functional convolution
# --------------------------------------------------------------------------- #

def _pad_index(n: int, pad: int) -> np.ndarray:
    return np.pad(np.arange(n), pad, mode="symmetric")


def _fold_matrix(idx: np.ndarray, n: int, dtype) -> np.ndarray:
    m = np.zeros((idx.size, n), dtype=dtype)
    m[np.arange(idx.size), idx] = 1.0
    return m


@dataclass
class ConvCache:
    x_shape: tuple[int, ...]
    windows: np.ndarray
    w: np.ndarray
    stride: int
    idx_h: np.ndarray
    idx_w: np.ndarray


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1):
    """Same-padded cross-correlation with symmetric border extension.

    Returns ``(out, cache)`` with ``out`` of shape ``(N, D, ceil(H/s), ceil(W/s))``.
    """
    if x.ndim != 4 or w.ndim != 4 or w.shape[1] != x.shape[1] or w.shape[2] != w.shape[3] \
            or w.shape[2] % 2 == 0 or b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {w.shape} / bias {b.shape}")
    k = w.shape[2]
    pad = (k - 1) // 2
    _, _, h, wd = x.shape
    idx_h, idx_w = _pad_index(h, pad), _pad_index(wd, pad)
    xpad = x[:, :, idx_h][:, :, :, idx_w]
    windows = sliding_window_view(xpad, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(windows, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = out + b[None, :, None, None]
    return np.ascontiguousarray(out), ConvCache(x.shape, windows, w, stride, idx_h, idx_w)


def conv2d_backward(upstream: np.ndarray, cache: ConvCache | None):
    """Gradients ``(grad_x, grad_w, grad_b)`` of :func:`conv2d_forward`."""
    if cache is None:
        raise StateError("conv2d_backward called without a forward cache")
    n, c, h, wd = cache.x_shape
    w, s = cache.w, cache.stride
    k = w.shape[2]
    _, _, ho, wo = upstream.shape
    grad_b = upstream.sum(axis=(0, 2, 3))
    grad_w = np.tensordot(upstream, cache.windows, axes=([0, 2, 3], [0, 2, 3]))
    cols = np.tensordot(upstream, w, axes=([1], [0]))  # (N, Ho, Wo, C, k, k)
    gpad = np.zeros((n, c, cache.idx_h.size, cache.idx_w.size), dtype=upstream.dtype)
    for i in range(k):
        for j in range(k):
            gpad[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += \
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    fold_h = _fold_matrix(cache.idx_h, h, upstream.dtype)
    fold_w = _fold_matrix(cache.idx_w, wd, upstream.dtype)
    grad_x = np.matmul(fold_h.T, gpad @ fold_w)
    return grad_x, grad_w, grad_b


# --------------------------------------------------------------------------- #
# Layers
# --------------------------------------------------------------------------- #

class Layer:
    def params(self) -> list[tuple[str, Tensor]]:
        return []

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        """Non-trainable state that must survive a checkpoint."""
        return []

    def set_training(self, flag: bool) -> None:
        pass

    def forward(self, x):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)


class Conv2d(Layer):
    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int = 1, dtype=np.float32):
        if kernel < 1 or kernel % 2 == 0 or stride < 1 or c_in < 1 or c_out < 1:
            raise ShapeError(f"invalid conv spec: {c_in}->{c_out}, kernel {kernel}, stride {stride}")
        self.stride = stride
        self.weight = Tensor(np.zeros((c_out, c_in, kernel, kernel), dtype=dtype))
        self.bias = Tensor(np.zeros(c_out, dtype=dtype))
        self._cache = None

    @property
    def fan_in(self) -> int:
        _, c, k, _ = self.weight.shape
        return c * k * k

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def forward(self, x):
        out, self._cache = conv2d_forward(x, self.weight.data, self.bias.data, self.stride)
        return out

    def backward(self, grad):
        gx, gw, gb = conv2d_backward(grad, self._cache)
        self.weight.grad += gw
        self.bias.grad += gb
        return gx


class ReLU(Layer):
    def __init__(self):
        self._mask = None

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0).astype(x.dtype, copy=False)

    def backward(self, grad):
        if self._mask is None:
            raise StateError("ReLU.backward called before forward")
        return np.where(self._mask, grad, 0).astype(grad.dtype, copy=False)


class GlobalAvgPool(Layer):
    """Average over the spatial axes: ``(N, C, H, W) -> (N, C)``."""

    def __init__(self):
        self._shape = None

    def forward(self, x):
        self._shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, grad):
        if self._shape is None:
            raise StateError("GlobalAvgPool.backward called before forward")
        n, c, h, w = self._shape
        return np.broadcast_to((grad / (h * w))[:, :, None, None], self._shape).copy()


class Linear(Layer):
    def __init__(self, n_in: int, n_out: int, dtype=np.float32):
        self.weight = Tensor(np.zeros((n_out, n_in), dtype=dtype))
        self.bias = Tensor(np.zeros(n_out, dtype=dtype))
        self._x = None

    @property
    def fan_in(self) -> int:
        return self.weight.shape[1]

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.weight.shape[1]:
            raise ShapeError(f"linear: input {x.shape} incompatible with weight {self.weight.shape}")
        self._x = x
        return x @ self.weight.data.T + self.bias.data

    def backward(self, grad):
        if self._x is None:
            raise StateError("Linear.backward called before forward")
        self.weight.grad += grad.T @ self._x
        self.bias.grad += grad.sum(axis=0)
        return grad @ self.weight.data


class BatchNorm2d(Layer):
    """Per-channel normalization over ``(N, H, W)``.

    Training mode uses batch statistics and updates the running estimates;
    inference mode uses the running estimates.
    """

    def __init__(self, channels: int, dtype=np.float32, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(channels, dtype=dtype))
        self.beta = Tensor(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum, self.eps = momentum, eps
        self.training = True
        self._cache = None

    def params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]

    def set_training(self, flag: bool) -> None:
        self.training = bool(flag)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.gamma.shape[0]:
            raise ShapeError(f"batchnorm: input {x.shape} does not have {self.gamma.shape[0]} channels")
        if self.training:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            m = x.shape[0] * x.shape[2] * x.shape[3]
            unbiased = var * (m / (m - 1)) if m > 1 else var
            self.running_mean *= 1 - self.momentum
            self.running_mean += self.momentum * mean
            self.running_var *= 1 - self.momentum
            self.running_var += self.momentum * unbiased
        else:
            mean, var = self.running_mean, self.running_var
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
        self._cache = (xhat, inv, self.training)
        out = xhat * self.gamma.data[None, :, None, None] + self.beta.data[None, :, None, None]
        return out.astype(x.dtype, copy=False)

    def backward(self, grad):
        if self._cache is None:
            raise StateError("BatchNorm2d.backward called before forward")
        xhat, inv, training = self._cache
        self.gamma.grad += (grad * xhat).sum(axis=(0, 2, 3))
        self.beta.grad += grad.sum(axis=(0, 2, 3))
        gxhat = grad * self.gamma.data[None, :, None, None]
        if not training:
            return gxhat * inv[None, :, None, None]
        mean_g = gxhat.mean(axis=(0, 2, 3), keepdims=True)
        mean_gx = (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
        return (gxhat - mean_g - xhat * mean_gx) * inv[None, :, None, None]


class Sequential(Layer):
    def __init__(self, *layers: tuple[str, Layer]):
        self.layers = list(layers)

    def params(self):
        return [(f"{name}.{pname}", t) for name, layer in self.layers for pname, t in layer.params()]

    def buffers(self):
        return [(f"{name}.{bname}", b) for name, layer in self.layers for bname, b in layer.buffers()]

    def set_training(self, flag: bool) -> None:
        for _, layer in self.layers:
            layer.set_training(flag)

    def forward(self, x):
        for _, layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad):
        for _, layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad


class ResidualSubBlock(Layer):
    """``relu(conv2(relu(conv1(x))) + skip(x))``.

    The skip is the identity when shape is preserved, otherwise a strided
    1x1 projection. With ``batch_norm`` each of conv1/conv2 is followed by a
    :class:`BatchNorm2d`.
    """

    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int, dtype=np.float32,
                 batch_norm: bool = False):
        self.conv1 = Conv2d(c_in, c_out, kernel, stride, dtype)
        self.bn1 = BatchNorm2d(c_out, dtype) if batch_norm else None
        self.relu1 = ReLU()
        self.conv2 = Conv2d(c_out, c_out, kernel, 1, dtype)
        self.bn2 = BatchNorm2d(c_out, dtype) if batch_norm else None
        self.proj = Conv2d(c_in, c_out, 1, stride, dtype) if (stride != 1 or c_in != c_out) else None
        self.relu_out = ReLU()

    def _parts(self):
        parts = [("conv1", self.conv1), ("bn1", self.bn1), ("conv2", self.conv2), ("bn2", self.bn2),
                 ("proj", self.proj)]
        return [(n, p) for n, p in parts if p is not None]

    def params(self):
        return [(f"{name}.{n}", t) for name, part in self._parts() for n, t in part.params()]

    def buffers(self):
        return [(f"{name}.{n}", b) for name, part in self._parts() for n, b in part.buffers()]

    def set_training(self, flag: bool) -> None:
        for _, part in self._parts():
            part.set_training(flag)

    def forward(self, x):
        r = self.conv1.forward(x)
        if self.bn1 is not None:
            r = self.bn1.forward(r)
        r = self.conv2.forward(self.relu1.forward(r))
        if self.bn2 is not None:
            r = self.bn2.forward(r)
        skip = x if self.proj is None else self.proj.forward(x)
        return self.relu_out.forward(r + skip)

    def backward(self, grad):
        g = self.relu_out.backward(grad)
        r = g if self.bn2 is None else self.bn2.backward(g)
        r = self.relu1.backward(self.conv2.backward(r))
        if self.bn1 is not None:
            r = self.bn1.backward(r)
        gx = self.conv1.backward(r)
        return gx + (g if self.proj is None else self.proj.backward(g))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy and its gradient with respect to ``logits``."""
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(logsum - z[np.arange(n), labels]))
    grad = softmax(logits)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n
