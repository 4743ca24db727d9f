"""Differentiable 3D layers: convolution, max pooling, batch norm, dense.

Convolutions are zero-padded "same" cross-correlations with fixed 3x3x3
kernels. Two numerically identical kernels are used depending on the channel
ratio: an im2col contraction when output channels dominate, and a
matmul-then-shift-sum on the padded input when input channels dominate
(dense-block layers, where growth is much smaller than the block width).
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError
from .tensor import Tensor, matmul, record, sigmoid, transpose

KERNEL = 3
BN_EPSILON = 1e-3
BN_MOMENTUM = 0.99


def _pad1(x: np.ndarray) -> np.ndarray:
    b, c, X, Y, Z = x.shape
    xp = np.zeros((b, c, X + 2, Y + 2, Z + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1, 1:-1] = x
    return xp


# -- conv kernels on raw arrays -------------------------------------------


def _correlate(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    b, c, X, Y, Z = x.shape
    o = w.shape[0]
    xp = _pad1(x)
    if o < c:
        # project every padded voxel through all 27 taps, then shift-sum
        taps = w.transpose(2, 3, 4, 0, 1).reshape(27 * o, c)
        y = np.matmul(taps, xp.reshape(b, c, -1)).reshape(b, 3, 3, 3, o, X + 2, Y + 2, Z + 2)
        out = y[:, 0, 0, 0, :, :X, :Y, :Z].copy()
        for i in range(3):
            for j in range(3):
                for k in range(3):
                    if i or j or k:
                        out += y[:, i, j, k, :, i : i + X, j : j + Y, k : k + Z]
        return out
    windows = sliding_window_view(xp, (3, 3, 3), axis=(2, 3, 4))
    out = np.tensordot(w, windows, axes=([1, 2, 3, 4], [1, 5, 6, 7]))
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3, 4))


def _weight_grad(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    b, c, X, Y, Z = x.shape
    o = g.shape[1]
    xp = _pad1(x)
    if o < c:
        placed = np.zeros((b, 3, 3, 3, o, X + 2, Y + 2, Z + 2), dtype=g.dtype)
        for i in range(3):
            for j in range(3):
                for k in range(3):
                    placed[:, i, j, k, :, i : i + X, j : j + Y, k : k + Z] = g
        dw = np.tensordot(placed.reshape(b, 27 * o, -1), xp.reshape(b, c, -1), axes=([0, 2], [0, 2]))
        return np.ascontiguousarray(dw.reshape(3, 3, 3, o, c).transpose(3, 4, 0, 1, 2))
    windows = sliding_window_view(xp, (3, 3, 3), axis=(2, 3, 4))
    return np.tensordot(g, windows, axes=([0, 2, 3, 4], [0, 2, 3, 4]))


def _input_grad(g: np.ndarray, w: np.ndarray) -> np.ndarray:
    flipped = np.ascontiguousarray(w.transpose(1, 0, 2, 3, 4)[:, :, ::-1, ::-1, ::-1])
    return _correlate(g, flipped)


# -- functional ops --------------------------------------------------------


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same-size 3x3x3 cross-correlation of ``x [b,c,X,Y,Z]`` with ``weight [o,c,3,3,3]``."""
    if x.ndim != 5:
        raise DimensionError(f"conv3d expects [b,c,X,Y,Z] input, got shape {x.shape}")
    if weight.ndim != 5 or weight.shape[2:] != (KERNEL,) * 3:
        raise DimensionError(f"conv3d expects [o,c,3,3,3] weights, got shape {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(f"conv3d: input has {x.shape[1]} channels, layer expects {weight.shape[1]}")
    out = _correlate(x.data, weight.data)
    inputs = [x, weight]
    if bias is not None:
        out += bias.data[None, :, None, None, None]
        inputs.append(bias)

    def bw(g):
        gx = _input_grad(g, weight.data) if x.requires_grad else None
        gw = _weight_grad(x.data, g) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gb = g.sum(axis=(0, 2, 3, 4)) if bias.requires_grad else None
        return gx, gw, gb

    return record("conv3d", out, inputs, bw)


def pointwise_conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """1x1x1 convolution with ``weight [o,c]``."""
    if x.ndim != 5 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"pointwise conv: input {x.shape} incompatible with weight {weight.shape}")
    b, c = x.shape[:2]
    spatial = x.shape[2:]
    flat = x.data.reshape(b, c, -1)
    out = np.matmul(weight.data, flat)
    if bias is not None:
        out += bias.data[None, :, None]
    inputs = [x, weight] + ([bias] if bias is not None else [])

    def bw(g):
        g = g.reshape(b, weight.shape[0], -1)
        gx = np.matmul(weight.data.T, g).reshape(x.shape) if x.requires_grad else None
        gw = np.tensordot(g, flat, axes=([0, 2], [0, 2])) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2))

    return record("pointwise-conv3d", out.reshape((b, weight.shape[0]) + spatial), inputs, bw)


def max_pool3d(x: Tensor, window: tuple[int, int, int]) -> Tensor:
    """Non-overlapping max pooling; trailing elements that do not fill a window are dropped.

    Gradient goes to the first maximal element of each window in scan order.
    """
    if x.ndim != 5:
        raise DimensionError(f"max_pool3d expects [b,c,X,Y,Z] input, got shape {x.shape}")
    wx, wy, wz = window
    b, c, X, Y, Z = x.shape
    if X < wx or Y < wy or Z < wz:
        raise DimensionError(f"max_pool3d: spatial shape {(X, Y, Z)} smaller than window {window}")
    ox, oy, oz = X // wx, Y // wy, Z // wz
    crop = x.data[:, :, : ox * wx, : oy * wy, : oz * wz]
    blocks = crop.reshape(b, c, ox, wx, oy, wy, oz, wz).transpose(0, 1, 2, 4, 6, 3, 5, 7)
    blocks = blocks.reshape(b, c, ox, oy, oz, wx * wy * wz)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        scattered = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(scattered, idx[..., None], g[..., None], axis=-1)
        scattered = scattered.reshape(b, c, ox, oy, oz, wx, wy, wz).transpose(0, 1, 2, 5, 3, 6, 4, 7)
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, :, : ox * wx, : oy * wy, : oz * wz] = scattered.reshape(b, c, ox * wx, oy * wy, oz * wz)
        return (gx,)

    return record("maxpool3d", out, (x,), bw)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    epsilon: float = BN_EPSILON,
) -> Tensor:
    """Per-channel normalization over every axis except 1.

    In training mode batch statistics (biased variance) are used and the
    running arrays are updated in place as ``r = momentum*r + (1-momentum)*batch``.
    """
    if x.ndim < 2 or x.shape[1] != gamma.shape[0]:
        raise DimensionError(f"batch_norm: input {x.shape} does not have {gamma.shape[0]} channels")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    count = x.size // x.shape[1]
    if training:
        if x.shape[0] < 2:
            raise ContractError("batch_norm in training mode needs a batch of at least 2")
        mean = x.data.mean(axis=axes)
        centered = x.data - mean.reshape(bshape)
        var = (centered * centered).mean(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        var = running_var.astype(x.dtype, copy=False)
        centered = x.data - running_mean.astype(x.dtype, copy=False).reshape(bshape)
    inv_std = (1.0 / np.sqrt(var + epsilon)).astype(x.dtype, copy=False)
    xhat = centered * inv_std.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def bw(g):
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gb = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(bshape)
            if training:
                s1 = dxhat.sum(axis=axes).reshape(bshape)
                s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
                gx = (inv_std.reshape(bshape) / count) * (count * dxhat - s1 - xhat * s2)
            else:
                gx = dxhat * inv_std.reshape(bshape)
        return gx, gg, gb

    return record("batchnorm", out, (x, gamma, beta), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over spatial axes: ``[b,c,X,Y,Z] -> [b,c]``."""
    return x.mean(axis=(2, 3, 4))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = matmul(x, transpose(weight, (1, 0)))
    return out + bias if bias is not None else out


# -- layers ----------------------------------------------------------------


def _uniform_fan_in(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Layer:
    """Base layer. Parameter and buffer names are local (``weight``, ``gamma``...)."""

    def parameters(self) -> dict[str, Tensor]:
        return {}

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def describe(self) -> dict:
        return {"type": type(self).__name__}


class Conv3D(Layer):
    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator, dtype=np.float32):
        if in_channels < 1 or out_channels < 1:
            raise ContractError("conv channels must be positive")
        self.in_channels = in_channels
        self.out_channels = out_channels
        fan_in = in_channels * KERNEL**3
        shape = (out_channels, in_channels, KERNEL, KERNEL, KERNEL)
        self.weight = Tensor(_uniform_fan_in(rng, shape, fan_in, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return conv3d(x, self.weight, self.bias)

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}

    def describe(self):
        return {"type": "conv3d", "in": self.in_channels, "out": self.out_channels, "kernel": [3, 3, 3]}


class PointwiseConv3D(Layer):
    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator, dtype=np.float32):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.weight = Tensor(_uniform_fan_in(rng, (out_channels, in_channels), in_channels, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return pointwise_conv3d(x, self.weight, self.bias)

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}

    def describe(self):
        return {"type": "conv3d", "in": self.in_channels, "out": self.out_channels, "kernel": [1, 1, 1]}


class MaxPool3D(Layer):
    def __init__(self, window: tuple[int, int, int]):
        window = tuple(int(w) for w in window)
        if window not in ((2, 2, 1), (2, 2, 2)):
            raise ContractError(f"pooling window must be 2x2x1 or 2x2x2, got {window}")
        self.window = window

    def __call__(self, x: Tensor) -> Tensor:
        return max_pool3d(x, self.window)

    def output_shape(self, spatial: tuple[int, int, int]) -> tuple[int, int, int]:
        return tuple(s // w for s, w in zip(spatial, self.window))

    def describe(self):
        return {"type": "maxpool3d", "window": list(self.window)}


class BatchNorm(Layer):
    """Batch normalization; a frozen layer always normalizes with running stats."""

    def __init__(self, channels: int, dtype=np.float32, epsilon: float = BN_EPSILON, momentum: float = BN_MOMENTUM):
        self.channels = channels
        self.epsilon = epsilon
        self.momentum = momentum
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.frozen = False

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        return batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            training=training and not self.frozen, momentum=self.momentum, epsilon=self.epsilon,
        )

    def parameters(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def describe(self):
        return {"type": "batchnorm", "channels": self.channels}


class Dense(Layer):
    """Fully-connected layer, ``weight [out, in]``."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, dtype=np.float32):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Tensor(_uniform_fan_in(rng, (out_features, in_features), in_features, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}

    def reset(self, rng: np.random.Generator) -> None:
        self.weight.data[...] = _uniform_fan_in(rng, self.weight.shape, self.in_features, self.weight.dtype)
        self.bias.data[...] = 0

    def describe(self):
        return {"type": "dense", "in": self.in_features, "out": self.out_features}


class ClassifierHead(Dense):
    """Dense layer to a single logit followed by a sigmoid."""

    def __init__(self, in_features: int, rng: np.random.Generator, dtype=np.float32):
        if in_features < 1:
            raise ContractError("classifier head needs at least one input feature")
        super().__init__(in_features, 1, rng, dtype)

    def __call__(self, features: Tensor) -> Tensor:
        return sigmoid(super().__call__(features))

    def describe(self):
        return {"type": "classifier", "in": self.in_features, "out": 1}


def classifier_head(features: Tensor, head: ClassifierHead) -> Tensor:
    return head(features)
