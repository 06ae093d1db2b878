"""Small dense-tensor layer library with hand-written backward passes.

Activations are float64 numpy arrays laid out as ``(batch, height, width,
channels)``; convolution kernels are ``(kh, kw, cin, cout)``. Every layer
caches what it needs during ``forward`` and writes parameter gradients into
``layer.grads`` during ``backward``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericError, ShapeError, StateError

DTYPE = np.float64


def _pair(v) -> tuple[int, int]:
    if isinstance(v, int):
        return (v, v)
    return tuple(int(x) for x in v)


def _padding4(padding) -> tuple[int, int, int, int]:
    """Normalise padding to (top, bottom, left, right)."""
    if isinstance(padding, int):
        return (padding,) * 4
    padding = tuple(int(p) for p in padding)
    if len(padding) == 2:
        return (padding[0], padding[0], padding[1], padding[1])
    if len(padding) == 4:
        return padding
    raise ShapeError(f"padding must have 1, 2 or 4 entries, got {padding}")


def conv_output_size(size: int, k: int, pad_total: int, stride: int) -> int:
    span = size + pad_total - k
    if span < 0 or span % stride:
        raise ShapeError(
            f"conv of input {size} with kernel {k}, padding {pad_total}, "
            f"stride {stride} does not give an integer output size")
    return span // stride + 1


def pool_output_size(size: int, k: int, stride: int) -> int:
    # ceil mode; the last window must start inside the input
    out = -(-(size - k) // stride) + 1 if size >= k else 1
    if (out - 1) * stride >= size:
        out -= 1
    return max(out, 1)


@dataclass(frozen=True)
class LayerSpec:
    """Declarative description of one layer.

    ``kernel`` is ``(kh, kw, cin, cout)`` for conv2d, ``(kh, kw)`` for
    maxpool2d and ``(n_in, n_out)`` for fully-connected.
    """

    kind: str
    kernel: tuple = ()
    padding: tuple = (0, 0, 0, 0)
    stride: int = 1

    def __post_init__(self):
        if self.kind not in ("conv2d", "maxpool2d", "fc", "relu", "flatten"):
            raise ShapeError(f"unknown layer kind {self.kind!r}")
        if self.stride < 1:
            raise ShapeError("stride must be positive")

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        """Shape of one example (no batch axis) after this layer."""
        if self.kind == "conv2d":
            h, w, c = in_shape
            kh, kw, cin, cout = self.kernel
            if c != cin:
                raise ShapeError(f"conv2d expects {cin} channels, input is {in_shape}")
            t, b, l, r = _padding4(self.padding)
            return (conv_output_size(h, kh, t + b, self.stride),
                    conv_output_size(w, kw, l + r, self.stride), cout)
        if self.kind == "maxpool2d":
            h, w, c = in_shape
            kh, kw = self.kernel
            return (pool_output_size(h, kh, self.stride),
                    pool_output_size(w, kw, self.stride), c)
        if self.kind == "fc":
            n_in, n_out = self.kernel
            if in_shape != (n_in,):
                raise ShapeError(f"fc expects ({n_in},), input is {in_shape}")
            return (n_out,)
        if self.kind == "flatten":
            return (int(np.prod(in_shape)),)
        return tuple(in_shape)

    def build(self, rng: np.random.Generator | None = None) -> "Layer":
        if self.kind == "conv2d":
            return Conv2D(self.kernel, self.padding, self.stride, rng=rng)
        if self.kind == "maxpool2d":
            return MaxPool2D(self.kernel, self.stride)
        if self.kind == "fc":
            return Dense(*self.kernel, rng=rng)
        if self.kind == "relu":
            return ReLU()
        return Flatten()


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _take_cache(self):
        if self._cache is None:
            raise StateError(f"{type(self).__name__}.backward called before forward")
        return self._cache

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())


def _uniform_init(rng, shape, fan_in):
    if rng is None:
        return np.zeros(shape, dtype=DTYPE)
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


class Conv2D(Layer):
    kind = "conv2d"

    def __init__(self, kernel, padding=0, stride=1, rng=None):
        super().__init__()
        self.input_grad = True
        kh, kw, cin, cout = (int(k) for k in kernel)
        self.padding = _padding4(padding)
        self.stride = int(stride)
        self.params["weight"] = _uniform_init(rng, (kh, kw, cin, cout), kh * kw * cin)
        self.params["bias"] = np.zeros(cout, dtype=DTYPE)

    def forward(self, x):
        w = self.params["weight"]
        kh, kw, cin, cout = w.shape
        if x.ndim != 4 or x.shape[3] != cin:
            raise ShapeError(f"conv2d input {x.shape} does not match kernel {w.shape}")
        t, b, l, r = self.padding
        s = self.stride
        n, h, wd, _ = x.shape
        ho = conv_output_size(h, kh, t + b, s)
        wo = conv_output_size(wd, kw, l + r, s)
        xp = np.pad(x, ((0, 0), (t, b), (l, r), (0, 0))) if any(self.padding) else x
        win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::s, ::s]
        # (n, ho, wo, c, kh, kw) -> (n*ho*wo, kh*kw*c), matching the kernel layout
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * cin)
        out = cols @ w.reshape(-1, cout) + self.params["bias"]
        self._cache = (x.shape, xp.shape, cols, ho, wo)
        return out.reshape(n, ho, wo, cout)

    def backward(self, dout):
        x_shape, xp_shape, cols, ho, wo = self._take_cache()
        w = self.params["weight"]
        kh, kw, cin, cout = w.shape
        n = x_shape[0]
        s = self.stride
        d2 = dout.reshape(-1, cout)
        self.grads["weight"] = (cols.T @ d2).reshape(w.shape)
        self.grads["bias"] = d2.sum(axis=0)
        if not self.input_grad:
            return None
        dcols = (d2 @ w.reshape(-1, cout).T).reshape(n, ho, wo, kh, kw, cin)
        dxp = np.zeros(xp_shape, dtype=DTYPE)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :] += dcols[:, :, :, i, j, :]
        t, b, l, r = self.padding
        return dxp[:, t:t + x_shape[1], l:l + x_shape[2], :]


class MaxPool2D(Layer):
    """Max pooling with ceil-mode output size and edge-truncated windows."""

    kind = "maxpool2d"

    def __init__(self, kernel=(2, 2), stride=2):
        super().__init__()
        self.kernel = _pair(kernel)
        self.stride = int(stride)

    def forward(self, x):
        if x.ndim != 4:
            raise ShapeError(f"maxpool2d expects a 4-d input, got {x.shape}")
        kh, kw = self.kernel
        s = self.stride
        n, h, w, c = x.shape
        ho, wo = pool_output_size(h, kh, s), pool_output_size(w, kw, s)
        ph = max((ho - 1) * s + kh - h, 0)
        pw = max((wo - 1) * s + kw - w, 0)
        xp = np.pad(x, ((0, 0), (0, ph), (0, pw), (0, 0)), constant_values=-np.inf) if ph or pw else x
        if (kh, kw, s) == (2, 2, 2):
            return self._forward_2x2(x.shape, xp, ho, wo)
        win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::s, ::s][:, :ho, :wo]
        flat = win.reshape(n, ho, wo, c, kh * kw)
        arg = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        self._cache = (x.shape, xp.shape, arg)
        return out

    def _forward_2x2(self, x_shape, xp, ho, wo):
        n, _, _, c = xp.shape
        r = xp.reshape(n, ho, 2, wo, 2, c)
        # reduce rows, then columns; ties resolve to the top row / left column
        take_top = r[:, :, 0] >= r[:, :, 1]
        half = np.where(take_top, r[:, :, 0], r[:, :, 1])
        take_left = half[:, :, :, 0] >= half[:, :, :, 1]
        out = np.where(take_left, half[:, :, :, 0], half[:, :, :, 1])
        self._cache = (x_shape, xp.shape, (take_top, take_left))
        return out

    def backward(self, dout):
        x_shape, xp_shape, arg = self._take_cache()
        kh, kw = self.kernel
        s = self.stride
        if (kh, kw, s) == (2, 2, 2):
            take_top, take_left = arg
            n, ho, wo, c = dout.shape
            left = np.where(take_left, dout, 0.0)
            half = np.stack([left, dout - left], axis=3)
            top = np.where(take_top, half, 0.0)
            dxp = np.empty((n, ho, 2, wo, 2, c), dtype=DTYPE)
            dxp[:, :, 0] = top
            dxp[:, :, 1] = half - top
            return dxp.reshape(xp_shape)[:, :x_shape[1], :x_shape[2], :]
        n, ho, wo, c = arg.shape
        di, dj = np.divmod(arg, kw)
        rows = np.arange(ho)[None, :, None, None] * s + di
        cols = np.arange(wo)[None, None, :, None] * s + dj
        bi = np.broadcast_to(np.arange(n)[:, None, None, None], arg.shape)
        ci = np.broadcast_to(np.arange(c)[None, None, None, :], arg.shape)
        dxp = np.zeros(xp_shape, dtype=DTYPE)
        if kh <= s and kw <= s:
            # windows are disjoint, so each input cell receives at most one value
            dxp[bi, rows, cols, ci] = dout
        else:
            np.add.at(dxp, (bi, rows, cols, ci), dout)
        return dxp[:, :x_shape[1], :x_shape[2], :]


class Dense(Layer):
    kind = "fc"

    def __init__(self, n_in, n_out, rng=None):
        super().__init__()
        self.params["weight"] = _uniform_init(rng, (int(n_in), int(n_out)), int(n_in))
        self.params["bias"] = np.zeros(int(n_out), dtype=DTYPE)

    def forward(self, x):
        w = self.params["weight"]
        if x.ndim != 2 or x.shape[1] != w.shape[0]:
            raise ShapeError(f"fc input {x.shape} does not match weights {w.shape}")
        self._cache = x
        return x @ w + self.params["bias"]

    def backward(self, dout):
        x = self._take_cache()
        self.grads["weight"] = x.T @ dout
        self.grads["bias"] = dout.sum(axis=0)
        return dout @ self.params["weight"].T


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        out = np.maximum(x, 0.0)
        self._cache = out
        return out

    def backward(self, dout):
        return dout * (self._take_cache() > 0)


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._take_cache())


def conv2d_forward(x, kernel, bias, padding=0, stride=1):
    """Functional single-example convolution: ``x`` is (H, W, Cin)."""
    x = np.asarray(x, dtype=DTYPE)
    kernel = np.asarray(kernel, dtype=DTYPE)
    if x.ndim != 3 or kernel.ndim != 4 or x.shape[2] != kernel.shape[2]:
        raise ShapeError(f"cannot convolve input {x.shape} with kernel {kernel.shape}")
    layer = Conv2D(kernel.shape, padding, stride)
    layer.params["weight"] = kernel
    layer.params["bias"] = np.asarray(bias, dtype=DTYPE).reshape(kernel.shape[3])
    return layer.forward(x[None])[0]


def maxpool2d_forward(x, window=(2, 2), stride=2):
    x = np.asarray(x, dtype=DTYPE)
    return MaxPool2D(window, stride).forward(x[None])[0]


def fc_forward(x, weights, bias):
    x = np.asarray(x, dtype=DTYPE)
    weights = np.asarray(weights, dtype=DTYPE)
    if x.ndim != 1 or weights.ndim != 2 or weights.shape[0] != x.shape[0]:
        raise ShapeError(f"cannot apply weights {weights.shape} to vector {x.shape}")
    layer = Dense(*weights.shape)
    layer.params["weight"] = weights
    layer.params["bias"] = np.asarray(bias, dtype=DTYPE)
    return layer.forward(x[None])[0]


class Sequential:
    def __init__(self, layers: Sequence[Layer]):
        self.layers = list(layers)

    @classmethod
    def from_specs(cls, specs: Sequence[LayerSpec], rng=None) -> "Sequential":
        return cls([s.build(rng) for s in specs])

    def forward(self, x, record: list | None = None):
        for layer in self.layers:
            x = layer.forward(x)
            if record is not None:
                record.append(x)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
            if dout is None:
                break
        return dout

    def named_params(self, prefix="") -> Iterator[tuple[str, Layer, str]]:
        for i, layer in enumerate(self.layers):
            for name in layer.params:
                yield f"{prefix}{i}.{layer.kind}.{name}", layer, name

    def n_params(self) -> int:
        return sum(l.n_params() for l in self.layers)


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Batch mean of the squared L2 residual, and its gradient w.r.t. ``pred``."""
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    diff = pred - target
    n = pred.shape[0]
    return float(np.sum(diff * diff) / n), 2.0 * diff / n


@dataclass
class Adadelta:
    """Adadelta with a learning-rate multiplier and L2 decay on weights only."""

    lr: float = 0.1
    rho: float = 0.95
    eps: float = 1e-6
    weight_decay: float = 1e-4
    square_avg: dict = field(default_factory=dict)
    acc_delta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 < self.rho < 1:
            raise ValueError("rho must lie in (0, 1)")
        if self.eps <= 0 or self.lr <= 0 or self.weight_decay < 0:
            raise ValueError("eps and lr must be positive, weight_decay non-negative")

    def step(self, entries):
        """Apply one update in place.

        ``entries`` yields ``(path, param, grad, decay)`` where ``decay`` says
        whether L2 weight decay applies to this parameter.
        """
        for path, param, grad, decay in entries:
            if param.shape != grad.shape:
                raise ShapeError(f"{path}: gradient {grad.shape} vs parameter {param.shape}")
            if not np.all(np.isfinite(grad)):
                raise NumericError(f"non-finite gradient in {path}")
            if decay and self.weight_decay:
                grad = grad + self.weight_decay * param
            sq = self.square_avg.get(path)
            if sq is None:
                sq = self.square_avg[path] = np.zeros_like(param)
                self.acc_delta[path] = np.zeros_like(param)
            acc = self.acc_delta[path]
            sq *= self.rho
            sq += (1 - self.rho) * grad * grad
            delta = np.sqrt(acc + self.eps) / np.sqrt(sq + self.eps) * grad
            acc *= self.rho
            acc += (1 - self.rho) * delta * delta
            param -= self.lr * delta
