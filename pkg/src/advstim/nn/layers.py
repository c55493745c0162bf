"""Convnet layers on numpy arrays, channels-last (N, H, W, C).

Every layer provides forward(x) -> (y, cache) and backward(dy, cache) ->
(dx, dparams). Backward passes are exact vector-Jacobian products; the ReLU
subgradient at 0 is taken to be 0 and max-pool ties go to the first maximum
in window scan order, so gradients are deterministic everywhere.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Conv2D:
    """Valid-padding strided convolution (cross-correlation) via im2col."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int, stride: int = 1):
        if kernel < 1 or stride < 1:
            raise ValueError("kernel and stride must be >= 1")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.w = np.zeros((kernel, kernel, in_channels, out_channels), dtype=np.float64)
        self.b = np.zeros(out_channels, dtype=np.float64)

    def init_params(self, rng: np.random.Generator) -> None:
        fan_in = self.kernel * self.kernel * self.in_channels
        self.w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=self.w.shape)
        self.b = np.zeros(self.out_channels, dtype=np.float64)

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        if h < self.kernel or w < self.kernel:
            raise ValueError(f"input {h}x{w} smaller than kernel {self.kernel}")
        return (h - self.kernel) // self.stride + 1, (w - self.kernel) // self.stride + 1

    def _im2col(self, x: np.ndarray) -> np.ndarray:
        n, h, w, _ = x.shape
        h2, w2 = self.out_hw(h, w)
        win = sliding_window_view(x, (self.kernel, self.kernel), axis=(1, 2))
        win = win[:, :: self.stride, :: self.stride][:, :h2, :w2]
        # (N, H2, W2, C, kh, kw) -> (N*H2*W2, kh*kw*C)
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h2 * w2, -1)
        return cols

    def forward(self, x: np.ndarray):
        n, h, w, c = x.shape
        if c != self.in_channels:
            raise ValueError(f"expected {self.in_channels} channels, got {c}")
        h2, w2 = self.out_hw(h, w)
        cols = self._im2col(x)
        wmat = self.w.reshape(-1, self.out_channels)
        y = cols @ wmat + self.b
        y = y.reshape(n, h2, w2, self.out_channels)
        return y, (x.shape, cols)

    def backward(self, dy: np.ndarray, cache):
        x_shape, cols = cache
        n, h, w, _ = x_shape
        h2, w2 = self.out_hw(h, w)
        dy_flat = dy.reshape(n * h2 * w2, self.out_channels)
        dw = (cols.T @ dy_flat).reshape(self.w.shape)
        db = dy_flat.sum(axis=0)
        dcols = dy_flat @ self.w.reshape(-1, self.out_channels).T
        dcols = dcols.reshape(n, h2, w2, self.kernel, self.kernel, self.in_channels)
        dx = np.zeros(x_shape, dtype=dy.dtype)
        s = self.stride
        for p in range(self.kernel):
            for q in range(self.kernel):
                dx[:, p : p + s * h2 : s, q : q + s * w2 : s, :] += dcols[:, :, :, p, q, :]
        return dx, {"w": dw, "b": db}

    def params(self):
        return {"w": self.w, "b": self.b}


class ReLU:
    def forward(self, x: np.ndarray):
        y = np.maximum(x, 0.0)
        return y, (x > 0.0)

    def backward(self, dy: np.ndarray, cache):
        return dy * cache, {}

    def params(self):
        return {}


class MaxPool2D:
    """Non-overlapping max pooling; window dims must divide the input."""

    def __init__(self, size: int = 2):
        if size < 2:
            raise ValueError("pool size must be >= 2")
        self.size = size

    def forward(self, x: np.ndarray):
        n, h, w, c = x.shape
        k = self.size
        if h % k or w % k:
            raise ValueError(f"pool size {k} does not divide input {h}x{w}")
        h2, w2 = h // k, w // k
        xr = x.reshape(n, h2, k, w2, k, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h2, w2, c, k * k)
        idx = np.argmax(xr, axis=-1)
        y = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]
        return y, (x.shape, idx)

    def backward(self, dy: np.ndarray, cache):
        x_shape, idx = cache
        n, h, w, c = x_shape
        k = self.size
        h2, w2 = h // k, w // k
        dxr = np.zeros((n, h2, w2, c, k * k), dtype=dy.dtype)
        np.put_along_axis(dxr, idx[..., None], dy[..., None], axis=-1)
        dx = dxr.reshape(n, h2, w2, c, k, k).transpose(0, 1, 4, 2, 5, 3).reshape(x_shape)
        return dx, {}

    def params(self):
        return {}


class AvgPool2D:
    def __init__(self, size: int = 2):
        if size < 2:
            raise ValueError("pool size must be >= 2")
        self.size = size

    def forward(self, x: np.ndarray):
        n, h, w, c = x.shape
        k = self.size
        if h % k or w % k:
            raise ValueError(f"pool size {k} does not divide input {h}x{w}")
        y = x.reshape(n, h // k, k, w // k, k, c).mean(axis=(2, 4))
        return y, x.shape

    def backward(self, dy: np.ndarray, cache):
        x_shape = cache
        k = self.size
        scale = 1.0 / (k * k)
        dx = np.repeat(np.repeat(dy * scale, k, axis=1), k, axis=2)
        return dx.reshape(x_shape), {}

    def params(self):
        return {}


class Flatten:
    def forward(self, x: np.ndarray):
        n = x.shape[0]
        return x.reshape(n, -1), x.shape

    def backward(self, dy: np.ndarray, cache):
        return dy.reshape(cache), {}

    def params(self):
        return {}


class Dense:
    def __init__(self, in_dim: int, out_dim: int):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.w = np.zeros((in_dim, out_dim), dtype=np.float64)
        self.b = np.zeros(out_dim, dtype=np.float64)

    def init_params(self, rng: np.random.Generator) -> None:
        self.w = rng.normal(0.0, np.sqrt(2.0 / self.in_dim), size=self.w.shape)
        self.b = np.zeros(self.out_dim, dtype=np.float64)

    def forward(self, x: np.ndarray):
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(f"expected (N, {self.in_dim}) input, got {x.shape}")
        return x @ self.w + self.b, x

    def backward(self, dy: np.ndarray, cache):
        x = cache
        dw = x.T @ dy
        db = dy.sum(axis=0)
        dx = dy @ self.w.T
        return dx, {"w": dw, "b": db}

    def params(self):
        return {"w": self.w, "b": self.b}


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, stabilized by max subtraction (shift invariant)."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean softmax cross entropy and its gradient wrt logits."""
    n = logits.shape[0]
    z = logits - logits.max(axis=-1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    loss = -float(log_probs[np.arange(n), labels].mean())
    dlogits = np.exp(log_probs)
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return loss, dlogits
