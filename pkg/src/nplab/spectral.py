"""FFT primitives and frequency-domain convolution layers.

The transforms fix one normalization convention: the forward transform is
unnormalized and the inverse divides by the signal length, so
``irfft(rfft(x), n) == x``. Spectra of real signals are stored one-sided as
a real tensor with a (re, im) channel pair, which keeps the whole pipeline
inside the real-valued autodiff engine.

A spectral convolution multiplies the truncated input spectrum by learnable
complex weights per (output channel, input channel, mode) and transforms
back. Because the kernel lives on discrete harmonics the layer is exactly
equivariant to circular shifts of its input grid.

Block-design notes (choices the layer family does not force):

* resampling between spatial sizes is done in the frequency domain by
  zero-padding or truncating bins with an ``s_out / s_in`` amplitude
  rescale, so band-limited signals resample exactly and constants are
  preserved;
* in ``residual_fourier_block`` the pointwise (residual) linear path is
  summed with the spectral path before the GELU, and resampling runs last.
  This is one consistent reading of the block family; alternatives (resample
  first, activation outside the sum) exist and were not benchmarked here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Parameter, ShapeError, Tensor

__all__ = [
    "ComplexSpectrum",
    "SpectralConvLayer",
    "FourierBlockConfig",
    "ResidualFourierBlock",
    "rfft",
    "irfft",
    "spectral_conv",
    "fourier_resample",
]


@dataclass
class ComplexSpectrum:
    """One-sided spectrum of a real signal of length ``n``.

    ``packed`` has shape [..., 2, n//2 + 1]; index 0 of the pair axis is the
    real part, index 1 the imaginary part.
    """

    packed: Tensor
    n: int

    @property
    def num_bins(self) -> int:
        return self.packed.shape[-1]

    @property
    def re(self) -> Tensor:
        return self.packed[(slice(None),) * (self.packed.ndim - 2) + (0,)]

    @property
    def im(self) -> Tensor:
        return self.packed[(slice(None),) * (self.packed.ndim - 2) + (1,)]

    def bins(self) -> np.ndarray:
        """Complex view of the raw bins (no gradient tracking)."""
        d = self.packed.data
        return d[..., 0, :] + 1j * d[..., 1, :]


def rfft(x: Tensor | np.ndarray) -> ComplexSpectrum:
    """One-sided DFT along the last axis, differentiable.

    bins[k] = sum_j x[j] exp(-2i pi k j / n) for k = 0..n//2.
    """
    x = T.as_tensor(x)
    n = x.shape[-1]
    if n < 1:
        raise ShapeError("rfft needs a signal of length >= 1")
    spec = np.fft.rfft(x.data, axis=-1)
    data = np.stack([spec.real, spec.imag], axis=-2)

    def backward(g):
        if not x.requires_grad:
            return
        G = g[..., 0, :] + 1j * g[..., 1, :]
        full = np.zeros(g.shape[:-2] + (n,), dtype=complex)
        full[..., : n // 2 + 1] = G
        # adjoint of the linear map x -> (Re bins, Im bins)
        x._accumulate((np.fft.ifft(full, axis=-1) * n).real.astype(x.dtype))

    return ComplexSpectrum(T._node(data.astype(x.dtype), (x,), backward), n)


def irfft(spectrum: ComplexSpectrum, n: int | None = None) -> Tensor:
    """Inverse of :func:`rfft`; divides by ``n``.

    The imaginary parts of the DC bin (and the Nyquist bin for even ``n``)
    do not influence a real signal and are ignored, with zero gradient.
    """
    if n is None:
        n = spectrum.n
    packed = spectrum.packed
    bins = packed.shape[-1]
    if bins != n // 2 + 1:
        raise ShapeError(f"spectrum with {bins} bins is inconsistent with length {n}")
    comp = packed.data[..., 0, :] + 1j * packed.data[..., 1, :]
    comp = comp.copy()
    comp[..., 0] = comp[..., 0].real
    if n % 2 == 0:
        comp[..., -1] = comp[..., -1].real
    data = np.fft.irfft(comp, n=n, axis=-1)  # numpy's irfft divides by n

    def backward(g):
        if not packed.requires_grad:
            return
        G = np.fft.rfft(g, axis=-1)
        scale = np.full(bins, 2.0 / n)
        scale[0] = 1.0 / n
        if n % 2 == 0:
            scale[-1] = 1.0 / n
        gre = G.real * scale
        gim = G.imag * scale
        gim[..., 0] = 0.0
        if n % 2 == 0:
            gim[..., -1] = 0.0
        packed._accumulate(np.stack([gre, gim], axis=-2).astype(packed.dtype))

    return T._node(data.astype(packed.dtype), (packed,), backward)


class SpectralConvLayer:
    """Learnable complex kernel on a truncated set of low-frequency modes.

    Weights are stored as a real tensor of shape [c_out, c_in, m_f, 2] whose
    trailing pair is (re, im); checkpoints therefore hold interleaved
    (re, im) float pairs. Real and imaginary parts are initialized uniform in
    +-(c_in * m_f)^(-1/2) scaled by 1/c_in, keeping the spectral path small
    against the pointwise path at the start of training.
    """

    def __init__(self, name: str, c_in: int, c_out: int, m_f: int,
                 rng: np.random.Generator, dtype=np.float64):
        if m_f < 1:
            raise ValueError("m_f must be >= 1")
        self.c_in = c_in
        self.c_out = c_out
        self.m_f = m_f
        bound = 1.0 / (c_in * math.sqrt(c_in * m_f))
        w = rng.uniform(-bound, bound, size=(c_out, c_in, m_f, 2)).astype(dtype)
        self.weights = Parameter(name + ".w", w, complex_pairs=True)

    def parameters(self) -> list[Parameter]:
        return [self.weights]


def spectral_conv(x: Tensor, layer: SpectralConvLayer) -> Tensor:
    """Convolution via pointwise complex multiplication in frequency space.

    ``x`` has shape [c_in, s]; the result has shape [c_out, s]. Only the
    lowest min(m_f, s//2 + 1) bins are mixed; the rest of the output
    spectrum is zero. Implemented as one fused primitive (transform, mode
    mixing, inverse transform) so a forward pass allocates no full-size
    weight temporaries.
    """
    if x.ndim != 2:
        raise ShapeError(f"spectral_conv expects [channels, length], got {x.shape}")
    if x.shape[0] != layer.c_in:
        raise ShapeError(f"input has {x.shape[0]} channels, layer expects {layer.c_in}")
    s = x.shape[-1]
    bins = s // 2 + 1
    modes = min(layer.m_f, bins)
    w = layer.weights.value
    c_out = layer.c_out

    X = np.fft.rfft(x.data, axis=-1)[:, :modes]  # [c_in, modes]
    Wc = w.data[:, :, :modes, 0] + 1j * w.data[:, :, :modes, 1]  # [c_out, c_in, modes]
    Y = np.einsum("oik,ik->ok", Wc, X)
    Yfull = np.zeros((c_out, bins), dtype=Y.dtype)
    Yfull[:, :modes] = Y
    Yfull[:, 0] = Yfull[:, 0].real
    if s % 2 == 0:
        Yfull[:, -1] = Yfull[:, -1].real
    data = np.fft.irfft(Yfull, n=s, axis=-1).astype(x.dtype)

    def backward(g):
        # adjoint of irfft: complex cotangent with bin weights c_k / s
        Z = np.fft.rfft(g, axis=-1)
        scale = np.full(bins, 2.0 / s)
        scale[0] = 1.0 / s
        if s % 2 == 0:
            scale[-1] = 1.0 / s
        G = Z * scale
        G[:, 0] = G[:, 0].real  # imaginary DC/Nyquist components carry no signal
        if s % 2 == 0:
            G[:, -1] = G[:, -1].real
        G = G[:, :modes]
        if w.requires_grad:
            dW = np.einsum("ok,ik->oik", G, np.conj(X))
            if modes == layer.m_f:
                buf = np.empty_like(w.data)
            else:
                buf = np.zeros_like(w.data)
            buf[:, :, :modes, 0] = dW.real
            buf[:, :, :modes, 1] = dW.imag
            w._accumulate(buf)
        if x.requires_grad:
            # sum_o G conj(W) == conj(sum_o conj(G) W); conjugating the small
            # factors avoids materializing conj(W)
            dX = np.conj(np.einsum("ok,oik->ik", np.conj(G), Wc))
            full = np.zeros((layer.c_in, s), dtype=dX.dtype)
            full[:, :modes] = dX
            # adjoint of rfft: unnormalized inverse on the zero-padded grads
            x._accumulate((np.fft.ifft(full, axis=-1) * s).real.astype(x.dtype))

    return T._node(data, (x, w), backward)


def fourier_resample(x: Tensor, s_out: int) -> Tensor:
    """Resample [c, s_in] -> [c, s_out] by padding/truncating the spectrum.

    Amplitudes are rescaled by s_out/s_in so sinusoids keep their height;
    a former Nyquist bin is halved when it becomes an interior bin on the
    way up, and a new Nyquist bin is doubled on the way down, which makes
    the map exact on band-limited signals and the identity on constants.
    """
    if x.ndim != 2:
        raise ShapeError(f"fourier_resample expects [channels, length], got {x.shape}")
    s_in = x.shape[-1]
    if s_in < 2 or s_out < 2:
        raise ShapeError("fourier_resample needs lengths >= 2")
    if s_out == s_in:
        return x
    spec = rfft(x).packed  # [c, 2, bins_in]
    bins_in = s_in // 2 + 1
    bins_out = s_out // 2 + 1
    scale = float(s_out) / float(s_in)

    if s_out > s_in:
        kept = spec * scale
        if s_in % 2 == 0:
            kept = T.concat([kept[:, :, : bins_in - 1], kept[:, :, bins_in - 1 :] * 0.5], axis=2)
        pad = T.zeros((x.shape[0], 2, bins_out - bins_in), dtype=x.dtype)
        packed = T.concat([kept, pad], axis=2)
    else:
        kept = spec[:, :, :bins_out] * scale
        if s_out % 2 == 0:
            kept = T.concat([kept[:, :, : bins_out - 1], kept[:, :, bins_out - 1 :] * 2.0], axis=2)
        packed = kept
    return irfft(ComplexSpectrum(packed, s_out), s_out)


@dataclass(frozen=True)
class FourierBlockConfig:
    """Shape tuple of one residual Fourier block."""

    c_in: int
    c_out: int
    s_in: int
    s_out: int
    m_f: int


class ResidualFourierBlock:
    """gelu(spectral_conv(x) + pointwise_linear(x)), then resample to s_out.

    The pointwise path is a per-position affine map c_in -> c_out. Spatial
    sizes are supplied per call so one block serves task-dependent grids.
    """

    def __init__(self, name: str, c_in: int, c_out: int, m_f: int,
                 rng: np.random.Generator, dtype=np.float64):
        self.c_in = c_in
        self.c_out = c_out
        self.spectral = SpectralConvLayer(name + ".spectral", c_in, c_out, m_f, rng, dtype)
        w, b = T.init_linear(rng, c_in, c_out, dtype)
        self.pw_w = Parameter(name + ".pw.w", w)
        self.pw_b = Parameter(name + ".pw.b", b)

    def parameters(self) -> list[Parameter]:
        return self.spectral.parameters() + [self.pw_w, self.pw_b]

    def __call__(self, x: Tensor, s_out: int | None = None) -> Tensor:
        if x.shape[0] != self.c_in:
            raise ShapeError(f"block expects {self.c_in} channels, got {x.shape[0]}")
        spectral = spectral_conv(x, self.spectral)
        pointwise = T.transpose(T.matmul(T.transpose(x, (1, 0)), self.pw_w.value) + self.pw_b.value, (1, 0))
        y = T.gelu(spectral + pointwise)
        if s_out is not None and s_out != x.shape[-1]:
            y = fourier_resample(y, s_out)
        return y


def residual_fourier_block(x: Tensor, cfg: FourierBlockConfig, block: ResidualFourierBlock) -> Tensor:
    """Functional wrapper checking the declared config before applying."""
    if x.shape != (cfg.c_in, cfg.s_in):
        raise ShapeError(f"input {x.shape} does not match config ({cfg.c_in}, {cfg.s_in})")
    if block.c_in != cfg.c_in or block.c_out != cfg.c_out:
        raise ShapeError("block channels do not match config")
    return block(x, cfg.s_out)
