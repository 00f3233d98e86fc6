"""Grid construction and Gaussian-kernel set embeddings.

A finite context set is turned into functions on a uniform grid: a density
channel (raw kernel mass) plus density-normalized smoothed output channels.
Grid-resident features travel back to arbitrary query locations through a
second, unnormalized kernel interpolation with its own learnable length
scale.

The kernel is the unnormalized Gaussian ``psi(r) = exp(-r^2 / (2 l^2))`` so
``psi(0) = 1`` and a context point sitting exactly on a grid node recovers
its own value after normalization. Context points are summed in ascending
input order, which makes the embedding bit-identical under permutations of
the context set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor

__all__ = [
    "Grid",
    "GridError",
    "GaussianKernelParams",
    "EmbeddingChannels",
    "build_grid",
    "embed_context",
    "positional_augment",
    "interpolate_queries",
]

# Floor for the normalizing division. Grid regions far from every context
# point underflow the kernel mass to zero; the floor must be large enough
# that its square is still representable, or the division backward turns
# 0/0 into NaN.
_DENSITY_FLOOR = 1e-12


class GridError(ValueError):
    """Raised for empty input sets or out-of-range queries."""


@dataclass(frozen=True)
class Grid:
    """Uniform 1-D grid: points[g] = lo + g / resolution."""

    lo: float
    hi: float
    resolution: int
    points: np.ndarray = field(repr=False)

    @property
    def count(self) -> int:
        return len(self.points)

    @property
    def spacing(self) -> float:
        return 1.0 / self.resolution

    def contains(self, x: np.ndarray) -> bool:
        return bool(np.all(x >= self.lo) and np.all(x <= self.hi))


def build_grid(x_c, x_q=None, margin: float = 0.1, resolution: int = 64,
               pad_multiple: int = 64) -> Grid:
    """Cover all inputs with margin, then pad the point count to a multiple.

    The raw count is ceil((hi - lo) * resolution); the extension needed to
    reach the next multiple is split half per side with the odd point going
    to the high side, and points are regenerated from the extended lower
    bound at the same resolution.
    """
    xs = [np.asarray(x_c, dtype=np.float64).ravel()]
    if x_q is not None:
        xs.append(np.asarray(x_q, dtype=np.float64).ravel())
    allx = np.concatenate(xs)
    if allx.size == 0:
        raise GridError("cannot build a grid from an empty input set")
    lo = float(allx.min()) - margin
    hi = float(allx.max()) + margin
    count = int(math.ceil((hi - lo) * resolution))
    count = max(count, 1)
    if count % pad_multiple != 0:
        extra = pad_multiple - count % pad_multiple
        lo -= (extra // 2) / resolution
        hi += (extra - extra // 2) / resolution
        count += extra
    points = lo + np.arange(count, dtype=np.float64) / resolution
    return Grid(lo=lo, hi=hi, resolution=resolution, points=points)


class GaussianKernelParams:
    """One learnable log length scale; ``lengthscale = exp(log_lengthscale)``.

    Default init is twice the grid spacing (2 / resolution).
    """

    def __init__(self, name: str, init_lengthscale: float, dtype=np.float64):
        if init_lengthscale <= 0:
            raise ValueError("lengthscale must be positive")
        self.log_lengthscale = Parameter(
            name + ".log_lengthscale", np.array([math.log(init_lengthscale)], dtype=dtype)
        )

    @classmethod
    def for_resolution(cls, name: str, resolution: int, dtype=np.float64):
        return cls(name, 2.0 / resolution, dtype=dtype)

    def parameters(self) -> list[Parameter]:
        return [self.log_lengthscale]

    @property
    def lengthscale(self) -> float:
        return float(np.exp(self.log_lengthscale.data[0]))

    def weight_matrix(self, diffs: np.ndarray, dtype=np.float64) -> Tensor:
        """exp(-d^2 / (2 l^2)) as a graph node differentiable in the scale."""
        d2 = Tensor((diffs * diffs).astype(dtype))
        inv_two_l2 = T.exp(self.log_lengthscale.value * (-2.0)) * 0.5
        return T.exp(d2 * inv_two_l2 * (-1.0))


@dataclass
class EmbeddingChannels:
    """Grid-resident channels: density [1, G], values [d_y, G], positions [1, G]."""

    density: Tensor
    values: Tensor
    positions: Tensor | None = None

    def stacked(self) -> Tensor:
        parts = [self.density, self.values]
        if self.positions is not None:
            parts.append(self.positions)
        return T.concat(parts, axis=0)

    @property
    def num_channels(self) -> int:
        n = self.density.shape[0] + self.values.shape[0]
        if self.positions is not None:
            n += self.positions.shape[0]
        return n


def embed_context(x_c, y_c, grid: Grid, psi_e: GaussianKernelParams) -> EmbeddingChannels:
    """Density channel plus density-normalized smoothed output channels.

    density(x_g) = sum_c psi_e(x_g - x_c)
    values_j(x_g) = sum_c y_cj psi_e(x_g - x_c) / density(x_g)

    Differentiable with respect to y_c and the kernel length scale. The
    division clamps the density at 1e-12, which only matters in regions
    where numerator and denominator have both underflowed toward zero.
    """
    x_c = np.asarray(x_c, dtype=np.float64).ravel()
    if x_c.size == 0:
        raise GridError("embed_context needs at least one context point")
    y = y_c if isinstance(y_c, Tensor) else Tensor(np.asarray(y_c, dtype=np.float64))
    if y.ndim == 1:
        y = T.reshape(y, (y.shape[0], 1))
    order = np.argsort(x_c, kind="stable")
    x_sorted = x_c[order]
    y_sorted = take_rows_if_needed(y, order)

    diffs = grid.points[None, :] - x_sorted[:, None]  # [n_c, G]
    w = psi_e.weight_matrix(diffs, dtype=y.dtype)  # [n_c, G]
    density = T.reduce_sum(w, axis=0, keepdims=True)  # [1, G]
    numer = T.matmul(T.transpose(y_sorted, (1, 0)), w)  # [d_y, G]
    values = numer / T.clamp_min(density, _DENSITY_FLOOR)
    return EmbeddingChannels(density=density, values=values)


def take_rows_if_needed(y: Tensor, order: np.ndarray) -> Tensor:
    if np.array_equal(order, np.arange(len(order))):
        return y
    return T.take_rows(y, order)


def positional_augment(channels: EmbeddingChannels, grid: Grid,
                       enabled: bool = True) -> EmbeddingChannels:
    """Append the grid coordinates as an extra channel when enabled."""
    if not enabled:
        return channels
    pos = Tensor(grid.points[None, :].astype(channels.density.dtype))
    return EmbeddingChannels(channels.density, channels.values, positions=pos)


def interpolate_queries(features: Tensor, grid: Grid, x_q,
                        psi_d: GaussianKernelParams) -> Tensor:
    """Unnormalized kernel readout: out[l] = sum_g features[:, g] psi_d(x_ql - x_g).

    [c, G] -> [n_q, c]; queries must lie inside the grid bounds.
    """
    x_q = np.asarray(x_q, dtype=np.float64).ravel()
    if not grid.contains(x_q):
        raise GridError("query location outside the grid bounds")
    diffs = x_q[:, None] - grid.points[None, :]  # [n_q, G]
    w = psi_d.weight_matrix(diffs, dtype=features.dtype)
    return T.matmul(w, T.transpose(features, (1, 0)))
