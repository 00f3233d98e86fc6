"""The three prediction-map variants and their Gaussian output head.

Every model maps a context set and query locations to an independent
Gaussian per query point and output dimension. The head applies a softplus
to the raw scale half and adds a 1e-6 noise floor, so predictive standard
deviations are strictly positive.

Variants:

* ``cnp`` pools per-pair MLP embeddings into one vector (width 256 stack);
* ``convcnp`` smooths the context onto a grid (64 points per unit, count
  padded to a multiple of 64), runs a pointwise MLP and a 1-D U-Net, and
  reads queries out by kernel interpolation;
* ``sconvcnp`` swaps the U-Net for a U-shaped stack of residual Fourier
  blocks (grid count padded to a multiple of 4) and can append the grid
  coordinates as an input channel (`positional_encoding`).

Parameter registration order is the construction order, which fixes the
checkpoint manifest layout.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .conv import UNet1d
from .embedding import (
    GaussianKernelParams,
    build_grid,
    embed_context,
    interpolate_queries,
    positional_augment,
)
from .nn import MLP
from .rng import RngStream
from .spectral import ResidualFourierBlock
from .tensor import Parameter, ShapeError, Tensor

__all__ = [
    "ModelConfig",
    "GaussianPrediction",
    "NonFiniteError",
    "predictive_head",
    "Model",
    "CNP",
    "ConvCNP",
    "SConvCNP",
    "build_model",
    "count_parameters",
]

MIN_STD = 1e-6

VARIANTS = ("cnp", "convcnp", "sconvcnp")


class NonFiniteError(FloatingPointError):
    """Raised when a forward pass produces non-finite head inputs."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture knobs; defaults reproduce the benchmark models."""

    variant: str = "sconvcnp"
    d_y: int = 1
    resolution: int = 64
    margin: float = 0.1
    m_f: int = 32
    positional_encoding: bool = True
    # width of the L3 expansion in the Fourier stack; 128 selects the
    # smaller ablation-study model
    bottleneck_channels: int = 256
    cnp_width: int = 256
    unet_channels: int = 128
    unet_kernel: int = 11
    fno_width: int = 64
    decoder_width: int = 128
    dtype: str = "f64"

    def np_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class GaussianPrediction:
    """Mean-field Gaussian marginals: mean and std, each [n_q, d_y]."""

    mean: Tensor
    std: Tensor

    def mean_array(self) -> np.ndarray:
        return self.mean.data

    def std_array(self) -> np.ndarray:
        return self.std.data


def predictive_head(raw: Tensor) -> GaussianPrediction:
    """Split [n_q, 2 d_y] into mean and softplus scale with a 1e-6 floor."""
    if raw.ndim != 2 or raw.shape[1] % 2 != 0:
        raise ShapeError(f"head expects [n_q, 2*d_y], got {raw.shape}")
    if not np.all(np.isfinite(raw.data)):
        raise NonFiniteError("non-finite values reached the predictive head")
    d_y = raw.shape[1] // 2
    mean = raw[:, :d_y]
    std = T.softplus(raw[:, d_y:]) + MIN_STD
    return GaussianPrediction(mean=mean, std=std)


class Model:
    """Base class holding the ordered parameter registry."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self._params: list[Parameter] = []
        self._names: set[str] = set()

    def _register(self, params: list[Parameter]):
        for p in params:
            if p.name in self._names:
                raise ValueError(f"duplicate parameter name {p.name!r}")
            self._names.add(p.name)
            self._params.append(p)

    def parameters(self) -> list[Parameter]:
        return list(self._params)

    def zero_grad(self):
        for p in self._params:
            p.zero_grad()

    def forward(self, x_c, y_c, x_q) -> GaussianPrediction:
        raise NotImplementedError

    def __call__(self, x_c, y_c, x_q) -> GaussianPrediction:
        return self.forward(x_c, y_c, x_q)


def _as_columns(x, d: int, dtype) -> Tensor:
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[1] != d:
        raise ShapeError(f"expected [n, {d}] inputs, got {arr.shape}")
    return Tensor(arr)


class CNP(Model):
    """Mean-pooled deep-set encoder with an MLP decoder."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__(config)
        w = config.cnp_width
        dt = config.np_dtype()
        self.x_mlp = MLP("enc.x", 1, [w, w], w, rng, "relu", dt)
        self.y_mlp = MLP("enc.y", config.d_y, [w, w], w, rng, "relu", dt)
        self.pair_mlp = MLP("enc.pair", 2 * w, [w] * 6, w, rng, "relu", dt)
        self.decoder = MLP("dec", 1 + w, [w] * 6, 2 * config.d_y, rng, "relu", dt)
        for m in (self.x_mlp, self.y_mlp, self.pair_mlp, self.decoder):
            self._register(m.parameters())

    def forward(self, x_c, y_c, x_q) -> GaussianPrediction:
        dt = self.config.np_dtype()
        xc = _as_columns(x_c, 1, dt)
        if xc.shape[0] < 1:
            raise ShapeError("CNP needs at least one context point")
        yc = _as_columns(y_c, self.config.d_y, dt)
        xq = _as_columns(x_q, 1, dt)
        # canonical ordering makes mean pooling bit-identical under permutation
        order = np.argsort(xc.data[:, 0], kind="stable")
        xc, yc = T.take_rows(xc, order), T.take_rows(yc, order)
        pair = self.pair_mlp(T.concat([self.x_mlp(xc), self.y_mlp(yc)], axis=1))
        pooled = T.reduce_mean(pair, axis=0, keepdims=True)  # [1, w]
        n_q = xq.shape[0]
        dec_in = T.concat([xq, T.broadcast_to(pooled, (n_q, pooled.shape[1]))], axis=1)
        return predictive_head(self.decoder(dec_in))


class ConvCNP(Model):
    """Gridded set embedding, pointwise MLP, U-Net, kernel readout."""

    GRID_PAD = 64

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__(config)
        ch = config.unet_channels
        dt = config.np_dtype()
        self.psi_e = GaussianKernelParams.for_resolution("psi_e", config.resolution, dt)
        self.psi_d = GaussianKernelParams.for_resolution("psi_d", config.resolution, dt)
        self.pre_mlp = MLP("pre", 1 + config.d_y, [ch, ch], ch, rng, "relu", dt)
        self.unet = UNet1d("unet", ch, config.unet_kernel, rng, dt)
        self.decoder = MLP("dec", ch, [config.decoder_width] * 2, 2 * config.d_y, rng, "relu", dt)
        self._register(self.psi_e.parameters())
        self._register(self.psi_d.parameters())
        self._register(self.pre_mlp.parameters())
        self._register(self.unet.parameters())
        self._register(self.decoder.parameters())

    def forward(self, x_c, y_c, x_q) -> GaussianPrediction:
        cfg = self.config
        dt = cfg.np_dtype()
        x_c = np.asarray(x_c, dtype=np.float64).ravel()
        x_q = np.asarray(x_q, dtype=np.float64).ravel()
        if x_c.size < 1:
            raise ShapeError("ConvCNP needs at least one context point")
        yc = _as_columns(y_c, cfg.d_y, dt)
        grid = build_grid(x_c, x_q, cfg.margin, cfg.resolution, self.GRID_PAD)
        channels = embed_context(x_c, yc, grid, self.psi_e)
        h = T.transpose(channels.stacked(), (1, 0))  # [G, 1 + d_y]
        h = T.transpose(self.pre_mlp(h), (1, 0))  # [ch, G]
        h = self.unet(h)
        feats = interpolate_queries(h, grid, x_q, self.psi_d)  # [n_q, ch]
        return predictive_head(self.decoder(feats))


class SConvCNP(Model):
    """Gridded set embedding with a U-shaped stack of Fourier blocks.

    Blocks run at grid fractions (1, 1/2, 1/4, 1/4, 1/2, 1); the last block
    consumes the concatenation of the fourth and first block outputs, and
    the final pointwise MLP additionally sees the initial features.
    """

    GRID_PAD = 4

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__(config)
        dt = config.np_dtype()
        w0 = config.fno_width
        cb = config.bottleneck_channels
        m = config.m_f
        self.psi_e = GaussianKernelParams.for_resolution("psi_e", config.resolution, dt)
        self.psi_d = GaussianKernelParams.for_resolution("psi_d", config.resolution, dt)
        in_ch = 1 + config.d_y + (1 if config.positional_encoding else 0)
        self.pre_mlp = MLP("pre", in_ch, [w0], w0, rng, "gelu", dt)
        self.blocks = [
            ResidualFourierBlock("fno.l1", w0, 128, m, rng, dt),
            ResidualFourierBlock("fno.l2", 128, 128, m, rng, dt),
            ResidualFourierBlock("fno.l3", 128, cb, m, rng, dt),
            ResidualFourierBlock("fno.l4", cb, 128, m, rng, dt),
            ResidualFourierBlock("fno.l5", 256, 128, m, rng, dt),
        ]
        self.post_mlp = MLP("post", 128 + w0, [128], 128, rng, "gelu", dt)
        # the decoder mirrors the convcnp decoder, relu included
        self.decoder = MLP("dec", 128, [config.decoder_width] * 2, 2 * config.d_y, rng, "relu", dt)
        self._register(self.psi_e.parameters())
        self._register(self.psi_d.parameters())
        self._register(self.pre_mlp.parameters())
        for b in self.blocks:
            self._register(b.parameters())
        self._register(self.post_mlp.parameters())
        self._register(self.decoder.parameters())

    def forward(self, x_c, y_c, x_q) -> GaussianPrediction:
        cfg = self.config
        dt = cfg.np_dtype()
        x_c = np.asarray(x_c, dtype=np.float64).ravel()
        x_q = np.asarray(x_q, dtype=np.float64).ravel()
        if x_c.size < 1:
            raise ShapeError("SConvCNP needs at least one context point")
        yc = _as_columns(y_c, cfg.d_y, dt)
        grid = build_grid(x_c, x_q, cfg.margin, cfg.resolution, self.GRID_PAD)
        g = grid.count
        channels = embed_context(x_c, yc, grid, self.psi_e)
        channels = positional_augment(channels, grid, enabled=cfg.positional_encoding)
        h0 = T.transpose(self.pre_mlp(T.transpose(channels.stacked(), (1, 0))), (1, 0))  # [w0, G]
        h1 = self.blocks[0](h0, g // 2)
        h2 = self.blocks[1](h1, g // 4)
        h3 = self.blocks[2](h2, g // 4)
        h4 = self.blocks[3](h3, g // 2)
        h5 = self.blocks[4](T.concat([h4, h1], axis=0), g)
        h = T.concat([h5, h0], axis=0)  # [128 + w0, G]
        h = T.transpose(self.post_mlp(T.transpose(h, (1, 0))), (1, 0))
        feats = interpolate_queries(h, grid, x_q, self.psi_d)
        return predictive_head(self.decoder(feats))


def build_model(config: ModelConfig, stream: RngStream | None = None,
                rng: np.random.Generator | None = None) -> Model:
    if rng is None:
        stream = stream or RngStream(seed=0, purpose="init")
        rng = stream.generator()
    if config.variant == "cnp":
        return CNP(config, rng)
    if config.variant == "convcnp":
        return ConvCNP(config, rng)
    if config.variant == "sconvcnp":
        return SConvCNP(config, rng)
    raise ValueError(f"unknown model variant {config.variant!r}")


def count_parameters(model: Model) -> int:
    """Learnable parameter count; a complex (re, im) pair counts once."""
    return sum(p.numel() for p in model.parameters())
