"""Spatial 1-D convolutions and the U-Net backbone.

``conv1d`` is a zero-padded cross-correlation with stride; its transposed
counterpart is defined as the exact adjoint of the corresponding strided
convolution, which pins the output length of a stride-2 transposed layer to
exactly twice its input length. Both are autodiff primitives implemented as
``k`` channel matmuls per call.

U-Net wiring: six stride-2 residual blocks on the way down, six stride-2
transposed blocks on the way up. Decoder block ``l`` consumes the channel
concatenation of the previous decoder output and the encoder activation at
the matching resolution (the deepest decoder block pairs the bottleneck
with itself), so every transposed layer maps 2c -> c channels. The skip on
a strided residual block subsamples every stride-th position before the
1x1 projection; padding is zero, not circular.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Parameter, ShapeError, Tensor

__all__ = [
    "Conv1dLayer",
    "conv1d",
    "conv1d_transposed",
    "ResidualConvBlock",
    "UNet1d",
]


class Conv1dLayer:
    """Kernel [c_out, c_in, k] with bias [c_out]; k must be odd."""

    def __init__(self, name: str, c_in: int, c_out: int, k: int, stride: int,
                 rng: np.random.Generator, dtype=np.float64):
        if k % 2 != 1:
            raise ValueError("kernel width must be odd for same padding")
        if stride < 1:
            raise ValueError("stride must be positive")
        w, b = T.init_conv_kernel(rng, c_out, c_in, k, dtype)
        self.kernel = Parameter(name + ".kernel", w)
        self.bias = Parameter(name + ".bias", b)
        self.stride = stride
        self.k = k
        self.c_in = c_in
        self.c_out = c_out

    def parameters(self) -> list[Parameter]:
        return [self.kernel, self.bias]


def _windows(x: np.ndarray, k: int, stride: int, s_out: int) -> np.ndarray:
    """Zero-padded sliding windows [c, s_out, k] (im2col view)."""
    c, s = x.shape
    p = (k - 1) // 2
    xpad = np.zeros((c, s + 2 * p), dtype=x.dtype)
    xpad[:, p : p + s] = x
    win = np.lib.stride_tricks.sliding_window_view(xpad, k, axis=1)
    return win[:, ::stride][:, :s_out]


def _conv_forward(x: np.ndarray, kern: np.ndarray, stride: int) -> np.ndarray:
    c_out, c_in, k = kern.shape
    s_out = -(-x.shape[-1] // stride)
    win = _windows(x, k, stride, s_out)
    return np.tensordot(kern, win, axes=([1, 2], [0, 2]))


def _conv_backward_input(g: np.ndarray, kern: np.ndarray, stride: int, s: int) -> np.ndarray:
    """Adjoint of :func:`_conv_forward` with respect to the input."""
    c_out, c_in, k = kern.shape
    p = (k - 1) // 2
    s_out = g.shape[-1]
    contrib = np.tensordot(kern, g, axes=([0], [0]))  # [c_in, k, s_out]
    dpad = np.zeros((c_in, s + 2 * p), dtype=g.dtype)
    for j in range(k):
        dpad[:, j : j + stride * (s_out - 1) + 1 : stride] += contrib[:, j, :]
    return dpad[:, p : p + s]


def _conv_backward_kernel(g: np.ndarray, x: np.ndarray, k: int, stride: int) -> np.ndarray:
    win = _windows(x, k, stride, g.shape[-1])
    return np.tensordot(g, win, axes=([1], [1]))


def conv1d(x: Tensor, layer: Conv1dLayer) -> Tensor:
    """Strided cross-correlation with zero padding (k-1)/2 on each side.

    [c_in, s] -> [c_out, ceil(s / stride)].
    """
    if x.ndim != 2:
        raise ShapeError(f"conv1d expects [channels, length], got {x.shape}")
    if x.shape[0] != layer.c_in:
        raise ShapeError(f"input has {x.shape[0]} channels, layer expects {layer.c_in}")
    kern, bias, stride = layer.kernel.value, layer.bias.value, layer.stride
    s = x.shape[-1]
    data = _conv_forward(x.data, kern.data, stride) + bias.data[:, None]

    def backward(g):
        if x.requires_grad:
            x._accumulate(_conv_backward_input(g, kern.data, stride, s))
        if kern.requires_grad:
            kern._accumulate(_conv_backward_kernel(g, x.data, layer.k, stride))
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=1))

    return T._node(data, (x, kern, bias), backward)


def conv1d_transposed(x: Tensor, layer: Conv1dLayer) -> Tensor:
    """Adjoint of the stride-2 conv1d that maps [c_out, 2s] -> [c_in, s].

    The layer kernel is stored [c_out, c_in, k] where c_in is the input
    channel count of this transposed op; [c_in, s] -> [c_out, 2s].
    """
    if layer.stride != 2:
        raise ShapeError("conv1d_transposed is defined for stride 2")
    if x.ndim != 2:
        raise ShapeError(f"conv1d_transposed expects [channels, length], got {x.shape}")
    if x.shape[0] != layer.c_in:
        raise ShapeError(f"input has {x.shape[0]} channels, layer expects {layer.c_in}")
    kern, bias = layer.kernel.value, layer.bias.value
    s = x.shape[-1]
    s_out = 2 * s
    # forward = adjoint of conv1d with the channel-swapped kernel
    swapped = np.swapaxes(kern.data, 0, 1)  # [c_in, c_out, k] viewed as fwd-conv kernel
    data = _conv_backward_input(x.data, swapped, 2, s_out) + bias.data[:, None]

    def backward(g):
        if x.requires_grad:
            x._accumulate(_conv_forward(g, swapped, 2))
        if kern.requires_grad:
            dk = _conv_backward_kernel(x.data, g, layer.k, 2)  # [c_in, c_out, k]
            kern._accumulate(np.swapaxes(dk, 0, 1))
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=1))

    return T._node(data, (x, kern, bias), backward)


class ResidualConvBlock:
    """relu(conv(x)) + proj(subsample(x)).

    ``proj`` is a 1x1 convolution only when the channel counts differ; the
    subsampling takes every stride-th position so the skip matches the conv
    output length.
    """

    def __init__(self, name: str, c_in: int, c_out: int, k: int, stride: int,
                 rng: np.random.Generator, dtype=np.float64):
        self.conv = Conv1dLayer(name + ".conv", c_in, c_out, k, stride, rng, dtype)
        self.proj: Parameter | None = None
        if c_in != c_out:
            w, _ = T.init_linear(rng, c_in, c_out, dtype)
            self.proj = Parameter(name + ".proj", w.T)  # [c_out, c_in]
        self.stride = stride

    def parameters(self) -> list[Parameter]:
        ps = self.conv.parameters()
        if self.proj is not None:
            ps.append(self.proj)
        return ps

    def __call__(self, x: Tensor) -> Tensor:
        y = T.relu(conv1d(x, self.conv))
        skip = x[:, :: self.stride] if self.stride > 1 else x
        if skip.shape[-1] != y.shape[-1]:
            skip = skip[:, : y.shape[-1]]
        if self.proj is not None:
            skip = T.matmul(self.proj.value, skip)
        return y + skip


class UNet1d:
    """Six stride-2 residual blocks down, six transposed blocks up.

    Input spatial length must be divisible by 64; the output keeps the input
    shape [channels, s].
    """

    DEPTH = 6

    def __init__(self, name: str, channels: int, k: int, rng: np.random.Generator,
                 dtype=np.float64):
        self.channels = channels
        self.encoder = [
            ResidualConvBlock(f"{name}.enc{i}", channels, channels, k, 2, rng, dtype)
            for i in range(self.DEPTH)
        ]
        self.decoder = [
            Conv1dLayer(f"{name}.dec{i}", 2 * channels, channels, k, 2, rng, dtype)
            for i in range(self.DEPTH)
        ]

    def parameters(self) -> list[Parameter]:
        ps: list[Parameter] = []
        for b in self.encoder:
            ps.extend(b.parameters())
        for b in self.decoder:
            ps.extend(b.parameters())
        return ps

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[0] != self.channels:
            raise ShapeError(f"unet expects {self.channels} channels, got {x.shape[0]}")
        if x.shape[-1] % 64 != 0:
            raise ShapeError(f"unet input length {x.shape[-1]} is not divisible by 64")
        acts = []
        h = x
        for block in self.encoder:
            h = block(h)
            acts.append(h)
        u = acts[-1]
        for i, layer in enumerate(self.decoder):
            skip = acts[self.DEPTH - 1 - i]
            u = T.relu(conv1d_transposed(T.concat([u, skip], axis=0), layer))
        return u
