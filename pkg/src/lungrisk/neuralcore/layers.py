"""Layers with hand-written forward and backward passes.

Activations are channel-first: ``(N, C, *spatial)``. Each layer caches what
its backward needs during a train-mode forward; backward returns the
gradient with respect to the input and accumulates parameter gradients into
``layer.grads``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ContractError, ShapeError


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    hyper: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"kind": self.kind, "hyper": dict(self.hyper)}


class Layer:
    kind = "layer"

    def __init__(self, name: str = ""):
        self.name = name
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._cache = None

    def hyper(self) -> dict:
        return {}

    @property
    def spec(self) -> LayerSpec:
        return LayerSpec(self.kind, self.hyper())

    def zero_grad(self):
        for k, p in self.params.items():
            self.grads[k] = np.zeros_like(p)

    def forward(self, x, train: bool = False):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def _need_cache(self):
        if self._cache is None:
            raise ContractError(f"layer {self.name or self.kind}: backward without a matching train-mode forward")
        return self._cache

    def _accumulate(self, key, value):
        if key in self.grads and self.grads[key].shape == value.shape:
            self.grads[key] += value
        else:
            self.grads[key] = value

    def __repr__(self):
        return f"{type(self).__name__}({self.name!r}, {self.hyper()})"


def same_padding(size: int, kernel: int, stride: int) -> tuple[int, int, int]:
    """(pad_before, pad_after, out_size) for 'same' padding; out = ceil(size / stride)."""
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2, out


class Conv(Layer):
    """N-d convolution (2d or 3d) with zero 'same' padding, via im2col + GEMM."""

    def __init__(self, ndim, in_channels, out_channels, kernel=3, stride=1, name="", rng=None, dtype=np.float32, kind=None):
        super().__init__(name)
        self.ndim = ndim
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel, self.stride = kernel, stride
        self.kind = kind or f"conv{ndim}d"
        fan_in = in_channels * kernel**ndim
        limit = math.sqrt(6.0 / fan_in)
        rng = rng if rng is not None else np.random.default_rng(0)
        shape = (out_channels, in_channels) + (kernel,) * ndim
        self.params["weight"] = rng.uniform(-limit, limit, size=shape).astype(dtype)
        self.params["bias"] = np.zeros(out_channels, dtype=dtype)
        self.zero_grad()

    def hyper(self):
        return {
            "ndim": self.ndim, "in_channels": self.in_channels, "out_channels": self.out_channels,
            "kernel": self.kernel, "stride": self.stride,
        }

    def _check(self, x):
        if x.ndim != self.ndim + 2 or x.shape[1] != self.in_channels:
            raise ShapeError(
                f"layer {self.name or self.kind}: expected (N, {self.in_channels}, {'x'.join(['*'] * self.ndim)}) "
                f"input, got {x.shape}"
            )

    def _im2col(self, x):
        nd, k, s = self.ndim, self.kernel, self.stride
        pads, outs = [(0, 0), (0, 0)], []
        for size in x.shape[2:]:
            before, after, out = same_padding(size, k, s)
            pads.append((before, after))
            outs.append(out)
        xp = np.pad(x, pads) if any(p != (0, 0) for p in pads[2:]) else x
        if k == 1:
            view = xp[(slice(None), slice(None)) + tuple(slice(0, o * s, s) for o in outs)]
            cols = np.moveaxis(view, 1, -1)
        else:
            view = sliding_window_view(xp, (k,) * nd, axis=tuple(range(2, 2 + nd)))
            view = view[(slice(None), slice(None)) + tuple(slice(0, o * s, s) for o in outs)]
            # (N, C, *out, *k) -> (N, *out, C, *k)
            cols = np.moveaxis(view, 1, 1 + nd)
        n = x.shape[0]
        m = n * math.prod(outs)
        return np.ascontiguousarray(cols).reshape(m, -1), xp.shape, pads, outs

    def forward(self, x, train=False):
        self._check(x)
        cols, padded_shape, pads, outs = self._im2col(x)
        w = self.params["weight"]
        wmat = w.reshape(self.out_channels, -1)
        y = cols @ wmat.T
        y += self.params["bias"]
        y = y.reshape((x.shape[0], *outs, self.out_channels))
        y = np.ascontiguousarray(np.moveaxis(y, -1, 1))
        self._cache = (cols, x.shape, padded_shape, pads, outs) if train else None
        return y

    def backward(self, grad):
        cols, in_shape, padded_shape, pads, outs = self._need_cache()
        nd, k, s = self.ndim, self.kernel, self.stride
        f = self.out_channels
        gmat = np.moveaxis(grad, 1, -1).reshape(-1, f)
        w = self.params["weight"]
        self._accumulate("weight", (gmat.T @ cols).reshape(w.shape).astype(w.dtype, copy=False))
        self._accumulate("bias", gmat.sum(axis=0).astype(w.dtype, copy=False))
        n = in_shape[0]
        # column gradients laid out (C, *k, N, *out) so each kernel offset is one contiguous block
        gcols = (w.reshape(f, -1).T @ gmat.T).reshape((self.in_channels,) + (k,) * nd + (n, *outs))
        gx = np.zeros((padded_shape[1], n) + tuple(padded_shape[2:]), dtype=grad.dtype)
        for offset in np.ndindex(*((k,) * nd)):
            target = (slice(None), slice(None)) + tuple(
                slice(o, o + s * (m - 1) + 1, s) for o, m in zip(offset, outs)
            )
            gx[target] += gcols[(slice(None),) + tuple(offset)]
        crop = (slice(None), slice(None)) + tuple(
            slice(b, b + size) for (b, _), size in zip(pads[2:], in_shape[2:])
        )
        return np.ascontiguousarray(gx[crop].swapaxes(0, 1))


def Conv2d(in_channels, out_channels, kernel=3, stride=1, **kw):
    return Conv(2, in_channels, out_channels, kernel, stride, **kw)


def Conv3d(in_channels, out_channels, kernel=3, stride=1, **kw):
    return Conv(3, in_channels, out_channels, kernel, stride, **kw)


def Project1x1(in_channels, out_channels, stride=1, ndim=2, **kw):
    return Conv(ndim, in_channels, out_channels, 1, stride, kind="project1x1", **kw)


class BatchNorm(Layer):
    kind = "batchnorm"

    def __init__(self, channels, momentum=0.9, eps=1e-5, name="", dtype=np.float32):
        super().__init__(name)
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)
        self.zero_grad()

    def hyper(self):
        return {"channels": self.channels, "momentum": self.momentum, "eps": self.eps}

    def forward(self, x, train=False):
        if x.ndim < 2 or x.shape[1] != self.channels:
            raise ShapeError(f"layer {self.name or self.kind}: expected {self.channels} channels, got shape {x.shape}")
        axes = (0,) + tuple(range(2, x.ndim))
        bshape = (1, -1) + (1,) * (x.ndim - 2)
        if train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            mom = self.momentum
            self.buffers["running_mean"] = (mom * self.buffers["running_mean"] + (1 - mom) * mean).astype(x.dtype)
            self.buffers["running_var"] = (mom * self.buffers["running_var"] + (1 - mom) * var).astype(x.dtype)
        else:
            mean, var = self.buffers["running_mean"], self.buffers["running_var"]
        inv_std = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
        xhat = (x - mean.reshape(bshape)) * inv_std.reshape(bshape)
        self._cache = (xhat, inv_std, axes, bshape) if train else None
        return xhat * self.params["gamma"].reshape(bshape) + self.params["beta"].reshape(bshape)

    def backward(self, grad):
        xhat, inv_std, axes, bshape = self._need_cache()
        m = grad.size // grad.shape[1]
        self._accumulate("gamma", (grad * xhat).sum(axis=axes))
        self._accumulate("beta", grad.sum(axis=axes))
        dxhat = grad * self.params["gamma"].reshape(bshape)
        s1 = dxhat.sum(axis=axes).reshape(bshape)
        s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
        return (inv_std.reshape(bshape) / m) * (m * dxhat - s1 - xhat * s2)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False):
        self._cache = (x > 0) if train else None
        return np.maximum(x, 0)

    def backward(self, grad):
        return grad * self._need_cache()


class LeakyReLU(Layer):
    kind = "leakyrelu"

    def __init__(self, alpha=0.1, name=""):
        super().__init__(name)
        self.alpha = alpha

    def hyper(self):
        return {"alpha": self.alpha}

    def forward(self, x, train=False):
        pos = x > 0
        self._cache = pos if train else None
        return np.where(pos, x, x * x.dtype.type(self.alpha))

    def backward(self, grad):
        pos = self._need_cache()
        return np.where(pos, grad, grad * grad.dtype.type(self.alpha))


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x, train=False):
        # split on sign so exp never overflows
        e = np.exp(-np.abs(x))
        y = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype, copy=False)
        self._cache = y if train else None
        return y

    def backward(self, grad):
        y = self._need_cache()
        return grad * y * (1 - y)


class Upsample2x(Layer):
    """Nearest-neighbour 2x upsampling over the two trailing axes."""

    kind = "upsample2x"

    def forward(self, x, train=False):
        self._cache = x.shape if train else None
        return x.repeat(2, axis=-2).repeat(2, axis=-1)

    def backward(self, grad):
        shape = self._need_cache()
        h, w = shape[-2], shape[-1]
        return grad.reshape(shape[:-2] + (h, 2, w, 2)).sum(axis=(-3, -1))


class MaxPool(Layer):
    """Non-overlapping max pooling (window = stride), floor division of extents."""

    def __init__(self, ndim=3, size=3, name=""):
        super().__init__(name)
        self.ndim, self.size = ndim, size
        self.kind = f"maxpool{ndim}d"

    def hyper(self):
        return {"ndim": self.ndim, "size": self.size}

    def forward(self, x, train=False):
        nd, k = self.ndim, self.size
        if x.ndim != nd + 2:
            raise ShapeError(f"layer {self.name or self.kind}: expected {nd + 2}-d input, got shape {x.shape}")
        outs = [s // k for s in x.shape[2:]]
        if any(o == 0 for o in outs):
            raise ShapeError(f"layer {self.name or self.kind}: spatial extents {x.shape[2:]} smaller than pool {k}")
        cropped = x[(slice(None), slice(None)) + tuple(slice(0, o * k) for o in outs)]
        split = cropped.reshape(x.shape[:2] + tuple(v for o in outs for v in (o, k)))
        # (N, C, o1, k, o2, k, ...) -> (N, C, o1, o2, ..., k*k*...)
        perm = (0, 1) + tuple(2 + 2 * i for i in range(nd)) + tuple(3 + 2 * i for i in range(nd))
        windows = split.transpose(perm).reshape(x.shape[:2] + tuple(outs) + (-1,))
        idx = windows.argmax(axis=-1)
        out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
        self._cache = (x.shape, outs, idx, perm) if train else None
        return out

    def backward(self, grad):
        in_shape, outs, idx, perm = self._need_cache()
        nd, k = self.ndim, self.size
        windows = np.zeros(grad.shape + (k**nd,), dtype=grad.dtype)
        np.put_along_axis(windows, idx[..., None], grad[..., None], axis=-1)
        split_shape = tuple(outs) + (k,) * nd
        windows = windows.reshape(in_shape[:2] + split_shape)
        inverse = np.argsort(perm)
        cropped = windows.transpose(inverse).reshape(in_shape[:2] + tuple(o * k for o in outs))
        gx = np.zeros(in_shape, dtype=grad.dtype)
        gx[(slice(None), slice(None)) + tuple(slice(0, o * k) for o in outs)] = cropped
        return gx


def MaxPool3d(size=3, name=""):
    return MaxPool(3, size, name)


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features, out_features, name="", rng=None, dtype=np.float32):
        super().__init__(name)
        self.in_features, self.out_features = in_features, out_features
        limit = math.sqrt(6.0 / in_features)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["weight"] = rng.uniform(-limit, limit, size=(out_features, in_features)).astype(dtype)
        self.params["bias"] = np.zeros(out_features, dtype=dtype)
        self.zero_grad()

    def hyper(self):
        return {"in_features": self.in_features, "out_features": self.out_features}

    def forward(self, x, train=False):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"layer {self.name or self.kind}: expected (N, {self.in_features}) input, got {x.shape}")
        self._cache = x if train else None
        return x @ self.params["weight"].T + self.params["bias"]

    def backward(self, grad):
        x = self._need_cache()
        self._accumulate("weight", grad.T @ x)
        self._accumulate("bias", grad.sum(axis=0))
        return grad @ self.params["weight"]


class Dropout(Layer):
    """Inverted dropout; identity at inference.

    ``frozen`` reuses the last mask, which keeps finite-difference checks
    comparing the same function.
    """

    kind = "dropout"

    def __init__(self, rate=0.25, rng=None, name=""):
        super().__init__(name)
        if not 0 <= rate < 1:
            raise ContractError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.frozen = False
        self._mask = None

    def hyper(self):
        return {"rate": self.rate}

    def forward(self, x, train=False):
        if not train or self.rate == 0:
            self._cache = np.ones((), dtype=x.dtype) if train else None
            return x
        if not (self.frozen and self._mask is not None and self._mask.shape == x.shape):
            keep = self.rng.random(x.shape) >= self.rate
            self._mask = (keep / (1 - self.rate)).astype(x.dtype)
        self._cache = self._mask
        return x * self._mask

    def backward(self, grad):
        return grad * self._need_cache()


class Concat(Layer):
    """Channel concatenation of two inputs."""

    kind = "concat"

    def forward(self, xs, train=False):
        a, b = xs
        if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
            raise ShapeError(f"layer {self.name or self.kind}: cannot concatenate {a.shape} and {b.shape}")
        self._cache = a.shape[1] if train else None
        return np.concatenate([a, b], axis=1)

    def backward(self, grad):
        split = self._need_cache()
        return grad[:, :split], grad[:, split:]


class ResidualAdd(Layer):
    kind = "residual-add"

    def forward(self, xs, train=False):
        a, b = xs
        if a.shape != b.shape:
            raise ShapeError(f"layer {self.name or self.kind}: residual shapes differ, {a.shape} vs {b.shape}")
        self._cache = True if train else None
        return a + b

    def backward(self, grad):
        self._need_cache()
        return grad, grad
