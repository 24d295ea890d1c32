"""Minimal numpy layers with hand-written reverse-mode gradients.

Only what the convolutional auto-encoder needs: same-padding convolution,
its adjoint (transposed convolution), 2x2 max-pooling with switches,
switch-based unpooling, dense layers, ReLU, and Adam/SGD optimizers.

Tensors are plain ``numpy.ndarray`` objects laid out as ``(N, C, H, W)``.
Single samples ``(C, H, W)`` are accepted by the functional helpers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DivergedError

# Max number of float64 entries in one im2col buffer (~64 MB).
_COLS_BUDGET = 1 << 23


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def cast_layer(layer: "Layer", dtype) -> None:
    """Convert a layer's parameters (and gradient buffers) to ``dtype`` in place."""
    for name in layer.param_names:
        setattr(layer, name, getattr(layer, name).astype(dtype))
    layer.params = tuple(getattr(layer, name) for name in layer.param_names)
    layer.grads = tuple(np.zeros_like(p) for p in layer.params)


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ValueError(f"expected (C, H, W) or (N, C, H, W) tensor, got shape {x.shape}")
    return x, False


def _chunks(n: int, per_sample: int):
    step = max(1, _COLS_BUDGET // max(per_sample, 1))
    for start in range(0, n, step):
        yield start, min(n, start + step)


def _im2col(xpad: np.ndarray, k: int, h: int, w: int) -> np.ndarray:
    """(n, C, h+k-1, w+k-1) -> (C*k*k, n*h*w) patch matrix (image rows stay contiguous)."""
    n, c = xpad.shape[:2]
    win = sliding_window_view(xpad, (k, k), axis=(2, 3))  # n, C, h, w, k, k
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * k * k, n * h * w)


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _shift_sum(z: np.ndarray, k: int, h: int, w: int) -> np.ndarray:
    """out[n, o, a, b] = sum_ij z[n, o, i, j, a+i-p, b+j-p] (zero outside)."""
    p = (k - 1) // 2
    n, o = z.shape[:2]
    out = np.zeros((n, o, h, w), dtype=z.dtype)
    for i in range(k):
        di = i - p
        a0, a1 = max(0, -di), h - max(0, di)
        for j in range(k):
            dj = j - p
            b0, b1 = max(0, -dj), w - max(0, dj)
            out[:, :, a0:a1, b0:b1] += z[:, :, i, j, a0 + di : a1 + di, b0 + dj : b1 + dj]
    return out


def conv_same(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Cross-correlate a batch with ``weight`` of shape (O, C, k, k), zero 'same' padding."""
    n, c, h, w = x.shape
    o, wc, k, k2 = weight.shape
    if wc != c or k != k2:
        raise ValueError(f"input has {c} channels, filters expect {wc} (kernel {k}x{k2})")
    if k % 2 != 1:
        raise ValueError("kernel size must be odd")
    out = np.empty((n, o, h, w), dtype=np.result_type(x, weight))
    if c <= o:
        # patch matrix over the (cheaper) input side
        xpad = _pad(x, (k - 1) // 2)
        wmat = weight.reshape(o, -1)
        for a, b in _chunks(n, h * w * c * k * k):
            res = wmat @ _im2col(xpad[a:b], k, h, w)
            out[a:b] = res.reshape(o, b - a, h, w).transpose(1, 0, 2, 3)
    else:
        # contract channels first, then add the k*k shifted planes
        wmat = weight.transpose(0, 2, 3, 1).reshape(o * k * k, c)
        for a, b in _chunks(n, h * w * o * k * k):
            z = (wmat @ x[a:b].reshape(b - a, c, h * w)).reshape(b - a, o, k, k, h, w)
            out[a:b] = _shift_sum(z, k, h, w)
    if bias is not None:
        out += bias[None, :, None, None]
    return out


def conv_same_weight_grad(x: np.ndarray, grad_out: np.ndarray, k: int) -> np.ndarray:
    """Gradient of ``conv_same(x, W)`` w.r.t. W, given the upstream gradient."""
    n, c, h, w = x.shape
    o = grad_out.shape[1]
    p = (k - 1) // 2
    if c <= o:
        xpad = _pad(x, p)
        dw = np.zeros((o, c * k * k), dtype=x.dtype)
        for a, b in _chunks(n, h * w * c * k * k):
            g = grad_out[a:b].transpose(1, 0, 2, 3).reshape(o, -1)
            dw += g @ _im2col(xpad[a:b], k, h, w).T
        return dw.reshape(o, c, k, k)
    # patch matrix over the gradient instead; it indexes the kernel flipped
    gpad = _pad(grad_out, p)
    dw = np.zeros((c, o * k * k), dtype=x.dtype)
    for a, b in _chunks(n, h * w * o * k * k):
        xs = x[a:b].transpose(1, 0, 2, 3).reshape(c, -1)
        dw += xs @ _im2col(gpad[a:b], k, h, w).T
    return dw.reshape(c, o, k, k).transpose(1, 0, 2, 3)[:, :, ::-1, ::-1].copy()


def adjoint_filters(weight: np.ndarray) -> np.ndarray:
    """Filters of the adjoint of same-padding convolution: swap channels, flip spatially."""
    return weight.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1]


def conv_transpose_same(y: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Adjoint of ``conv_same`` with filters ``weight`` of shape (O, C, k, k): maps O -> C channels."""
    return conv_same(y, np.ascontiguousarray(adjoint_filters(weight)), bias)


# ---------------------------------------------------------------------------
# pooling


@dataclass(frozen=True)
class PoolRecord:
    """Argmax switches of a 2x2 max-pool.

    ``indices[n, c, i, j]`` is the row-major position (0..3) of the maximum
    inside window (i, j).
    """

    indices: np.ndarray
    input_shape: tuple


def maxpool2(x: np.ndarray) -> tuple[np.ndarray, PoolRecord]:
    xb, single = _as_batch(x)
    n, c, h, w = xb.shape
    if h % 2 or w % 2:
        raise ValueError(f"max-pool needs even spatial dims, got {h}x{w}")
    win = xb.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = np.argmax(win, axis=-1)  # first maximum wins ties
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    rec = PoolRecord(idx.astype(np.int8), (n, c, h, w))
    if single:
        return out[0], PoolRecord(rec.indices[0], (c, h, w))
    return out, rec


def unpool2(x: np.ndarray, record: PoolRecord | None) -> np.ndarray:
    if record is None:
        raise ValueError("unpooling requires the pool record of the matching max-pool")
    xb, single = _as_batch(x)
    idx = record.indices if record.indices.ndim == 4 else record.indices[None]
    if idx.shape != xb.shape:
        raise ValueError(f"pool record shape {idx.shape} does not match input {xb.shape}")
    n, c, h, w = xb.shape
    out = np.zeros((n, c, h, w, 4), dtype=xb.dtype)
    np.put_along_axis(out, idx[..., None].astype(np.intp), xb[..., None], axis=-1)
    out = out.reshape(n, c, h, w, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h, 2 * w)
    return out[0] if single else out


def _gather_at_switches(g: np.ndarray, record: PoolRecord) -> np.ndarray:
    n, c, h, w = g.shape
    win = g.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = record.indices if record.indices.ndim == 4 else record.indices[None]
    return np.take_along_axis(win, idx[..., None].astype(np.intp), axis=-1)[..., 0]


# ---------------------------------------------------------------------------
# layers


class Layer:
    """Base layer. Subclasses cache what ``backward`` needs during ``forward``."""

    params: tuple = ()
    grads: tuple = ()
    param_names: tuple = ()

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def zero_grad(self):
        for g in self.grads:
            g[...] = 0.0


class Conv2d(Layer):
    """Same-padding convolution, filters (out, in, k, k)."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int, rng: np.random.Generator | None = None):
        if kernel % 2 != 1:
            raise ValueError("kernel size must be odd")
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in, fan_out = in_channels * kernel * kernel, out_channels * kernel * kernel
        self.input_grad = True  # False on the first layer of a network to skip one conv
        self.weight = glorot_uniform(rng, (out_channels, in_channels, kernel, kernel), fan_in, fan_out)
        self.bias = np.zeros(out_channels)
        self.params = (self.weight, self.bias)
        self.grads = (np.zeros_like(self.weight), np.zeros_like(self.bias))
        self.param_names = ("weight", "bias")
        self._x = None

    @property
    def kernel(self) -> int:
        return self.weight.shape[-1]

    def forward(self, x):
        self._x = x
        return conv_same(x, self.weight, self.bias)

    def backward(self, grad):
        if self._x is None:
            raise RuntimeError("backward called before forward")
        self.grads[0][...] += conv_same_weight_grad(self._x, grad, self.kernel)
        self.grads[1][...] += grad.sum(axis=(0, 2, 3))
        if not self.input_grad:
            return None
        return conv_transpose_same(grad, self.weight)


class ConvTranspose2d(Layer):
    """Size-preserving transposed convolution, filters (in, out, k, k).

    Forward is the adjoint of a same-padding ``Conv2d`` mapping out -> in.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel: int, rng: np.random.Generator | None = None):
        if kernel % 2 != 1:
            raise ValueError("kernel size must be odd")
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in, fan_out = in_channels * kernel * kernel, out_channels * kernel * kernel
        self.weight = glorot_uniform(rng, (in_channels, out_channels, kernel, kernel), fan_in, fan_out)
        self.bias = np.zeros(out_channels)
        self.params = (self.weight, self.bias)
        self.grads = (np.zeros_like(self.weight), np.zeros_like(self.bias))
        self.param_names = ("weight", "bias")
        self._x = None

    @property
    def kernel(self) -> int:
        return self.weight.shape[-1]

    def forward(self, x):
        self._x = x
        return conv_transpose_same(x, self.weight, self.bias)

    def backward(self, grad):
        if self._x is None:
            raise RuntimeError("backward called before forward")
        d_eff = conv_same_weight_grad(self._x, grad, self.kernel)
        self.grads[0][...] += adjoint_filters(d_eff)
        self.grads[1][...] += grad.sum(axis=(0, 2, 3))
        return conv_same(grad, self.weight)


class Dense(Layer):
    """Affine map on (N, in) batches, weight (out, in)."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = glorot_uniform(rng, (out_features, in_features), in_features, out_features)
        self.bias = np.zeros(out_features)
        self.params = (self.weight, self.bias)
        self.grads = (np.zeros_like(self.weight), np.zeros_like(self.bias))
        self.param_names = ("weight", "bias")
        self._x = None

    def forward(self, x):
        self._x = x
        return x @ self.weight.T + self.bias

    def backward(self, grad):
        if self._x is None:
            raise RuntimeError("backward called before forward")
        self.grads[0][...] += grad.T @ self._x
        self.grads[1][...] += grad.sum(axis=0)
        return grad @ self.weight


class ReLU(Layer):
    def __init__(self):
        self._mask = None

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, grad):
        if self._mask is None:
            raise RuntimeError("backward called before forward")
        return np.where(self._mask, grad, 0.0)


class MaxPool2(Layer):
    def __init__(self):
        self.record: PoolRecord | None = None

    def forward(self, x):
        out, self.record = maxpool2(x)
        return out

    def backward(self, grad):
        if self.record is None:
            raise RuntimeError("backward called before forward")
        return unpool2(grad, self.record)


class MaxUnpool2(Layer):
    """Switch unpooling. Uses ``source.record`` unless a record is passed explicitly."""

    def __init__(self, source: MaxPool2):
        self.source = source
        self._record: PoolRecord | None = None

    def forward(self, x, record: PoolRecord | None = None):
        self._record = record if record is not None else self.source.record
        return unpool2(x, self._record)

    def backward(self, grad):
        if self._record is None:
            raise RuntimeError("backward called before forward")
        return _gather_at_switches(grad, self._record)


class Flatten(Layer):
    def __init__(self):
        self._shape = None

    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._shape)


class Reshape(Layer):
    def __init__(self, shape: tuple):
        self.shape = tuple(shape)

    def forward(self, x):
        return x.reshape((x.shape[0],) + self.shape)

    def backward(self, grad):
        return grad.reshape(grad.shape[0], -1)


class Sequential(Layer):
    """Ordered layer list; forward caches per-layer state for ``backward``."""

    def __init__(self, layers):
        self.layers = list(layers)
        self._ran = False

    @property
    def params(self):
        return tuple(p for layer in self.layers for p in layer.params)

    @property
    def grads(self):
        return tuple(g for layer in self.layers for g in layer.grads)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        self._ran = True
        return x

    def backward(self, grad):
        if not self._ran:
            raise RuntimeError("no forward cache; run forward first")
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()


# ---------------------------------------------------------------------------
# functional entry points


def conv2d_forward(x: np.ndarray, layer: Conv2d | ConvTranspose2d) -> np.ndarray:
    xb, single = _as_batch(x)
    if isinstance(layer, ConvTranspose2d):
        out = conv_transpose_same(xb, layer.weight, layer.bias)
    else:
        out = conv_same(xb, layer.weight, layer.bias)
    return out[0] if single else out


def backprop(network: Layer, loss_grad: np.ndarray) -> list[np.ndarray]:
    """Accumulate d(loss)/d(params) through ``network`` after a forward pass.

    Returns fresh copies of the gradients, in ``network.params`` order.
    """
    network.zero_grad()
    network.backward(np.asarray(loss_grad, dtype=network.params[0].dtype if network.params else np.float64))
    return [g.copy() for g in network.grads]


# ---------------------------------------------------------------------------
# optimizers


def _check_finite(grads):
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise DivergedError("diverged: non-finite gradient")


class Adam:
    """Adam with bias correction. Updates the parameter arrays in place."""

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads):
        grads = list(grads)
        if len(grads) != len(self.params):
            raise ValueError("gradient list does not match parameters")
        _check_finite(grads)
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if p.shape != g.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, params, lr: float = 1e-2, momentum: float = 0.0):
        self.params = list(params)
        self.lr, self.momentum = lr, momentum
        self.velocity = [np.zeros_like(p) for p in self.params]

    def step(self, grads):
        grads = list(grads)
        _check_finite(grads)
        for p, g, vel in zip(self.params, grads, self.velocity):
            vel *= self.momentum
            vel -= self.lr * g
            p += vel
