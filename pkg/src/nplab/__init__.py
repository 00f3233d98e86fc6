"""nplab: conditional neural processes with spectral and spatial backbones.

A small, numpy-backed meta-learning lab: a reverse-mode autodiff tensor
engine, frequency-domain and spatial convolution stacks, three prediction
map variants (deep-set, U-Net, Fourier-operator), synthetic task
generators, and a reproducible training/evaluation CLI.
"""

from . import tensor
from .tensor import Parameter, ShapeError, Tensor, no_grad
from .rng import RngStream
from .spectral import (
    ComplexSpectrum,
    FourierBlockConfig,
    ResidualFourierBlock,
    SpectralConvLayer,
    fourier_resample,
    irfft,
    rfft,
    spectral_conv,
)
from .conv import Conv1dLayer, ResidualConvBlock, UNet1d, conv1d, conv1d_transposed
from .embedding import (
    GaussianKernelParams,
    Grid,
    GridError,
    build_grid,
    embed_context,
    interpolate_queries,
    positional_augment,
)
from .models import (
    CNP,
    ConvCNP,
    GaussianPrediction,
    Model,
    ModelConfig,
    NonFiniteError,
    SConvCNP,
    build_model,
    count_parameters,
    predictive_head,
)
from .taskgen import (
    GeneratorError,
    LotkaVolterraConfig,
    MaternConfig,
    PeriodicConfig,
    SawtoothConfig,
    SquareConfig,
    Task,
    build_eval_set,
    gp_sample_task,
    load_eval_set,
    make_batch,
    matern52_kernel,
    periodic_kernel,
    save_eval_set,
    simulate_lotka_volterra,
)
from .training import (
    AdamW,
    Metrics,
    TrainConfig,
    TrainingDiverged,
    clip_grad_norm,
    evaluate,
    gaussian_nll,
    rmse_metric,
    run_training,
)
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, load_experiment_config

__version__ = "0.1.0"
