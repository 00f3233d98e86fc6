"""Meta-training loop, AdamW, gradient clipping and evaluation metrics.

The loss is the mean negative Gaussian log density per query point and
output dimension, so batches with different query counts are comparable and
the logged log-likelihood is directly the negated loss. Only query points
enter the loss.

Determinism contract: with a fixed seed and serial execution, a training
run is a pure function of its configuration, and resuming from a checkpoint
replays exactly the iterations a straight-through run would have produced
(task streams are keyed by epoch and iteration, not by draw order).
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .models import GaussianPrediction, Model, NonFiniteError
from .rng import RngStream
from .taskgen import Task, build_eval_set, make_batch
from .tensor import Parameter, ShapeError, Tensor

__all__ = [
    "TrainConfig",
    "Metrics",
    "TrainingDiverged",
    "gaussian_nll",
    "rmse_metric",
    "clip_grad_norm",
    "AdamW",
    "evaluate",
    "evaluate_tasks",
    "run_training",
]

_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class TrainingDiverged(RuntimeError):
    """Raised after three consecutive non-finite training steps."""


@dataclass
class TrainConfig:
    epochs: int = 50
    iters_per_epoch: int = 250
    batch_size: int = 16
    lr: float = 5e-4
    clip_norm: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 0
    n_c_range: tuple = (5, 25)
    n_q_range: tuple = (5, 25)
    val_batches: int = 256
    val_n_q: int = 256
    val_seed: int = 77_000

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["n_c_range"] = list(self.n_c_range)
        d["n_q_range"] = list(self.n_q_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        for key in ("n_c_range", "n_q_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


# --------------------------------------------------------------------------
# losses and metrics


def gaussian_nll(pred: GaussianPrediction, y_q) -> Tensor:
    """Mean negative log density over query points and output dimensions."""
    y = y_q if isinstance(y_q, Tensor) else Tensor(np.asarray(y_q, dtype=pred.mean.dtype))
    if y.ndim == 1:
        y = T.reshape(y, (y.shape[0], 1))
    if y.shape != pred.mean.shape:
        raise ShapeError(f"targets {y.shape} do not match predictions {pred.mean.shape}")
    z = (y - pred.mean) / pred.std
    point = T.log(pred.std) + T.square(z) * 0.5 + _HALF_LOG_2PI
    return T.reduce_mean(point)


def rmse_metric(pred_mean, y_q) -> float:
    """Root mean squared error over all query points and output dims."""
    mean = pred_mean.data if isinstance(pred_mean, Tensor) else np.asarray(pred_mean)
    y = np.asarray(y_q, dtype=np.float64).reshape(mean.shape)
    return float(np.sqrt(np.mean((mean - y) ** 2)))


def clip_grad_norm(params: list[Parameter], max_norm: float = 0.5) -> float:
    """Scale all gradients so the global L2 norm is at most ``max_norm``.

    Returns the applied scale (1.0 when no clipping happened).
    """
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    norm = math.sqrt(total)
    if norm <= max_norm or norm == 0.0:
        return 1.0
    scale = max_norm / norm
    for p in params:
        if p.grad is not None:
            p.value.grad = p.grad * scale
    return scale


# --------------------------------------------------------------------------
# optimizer


class AdamW:
    """AdamW with decoupled weight decay applied before the adaptive update."""

    def __init__(self, params: list[Parameter], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0):
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for p in self.params:
            g = p.grad
            if g is None:
                continue
            if self.weight_decay:
                p.data = p.data - self.lr * self.weight_decay * p.data
            m = self.m[p.name]
            v = self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data - self.lr * update

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def state_dict(self) -> dict:
        return {
            "step_count": self.step_count,
            "m": {k: v.copy() for k, v in self.m.items()},
            "v": {k: v.copy() for k, v in self.v.items()},
        }

    def load_state_dict(self, state: dict):
        self.step_count = int(state["step_count"])
        for k in self.m:
            self.m[k] = np.array(state["m"][k], dtype=self.m[k].dtype)
            self.v[k] = np.array(state["v"][k], dtype=self.v[k].dtype)


# --------------------------------------------------------------------------
# evaluation


@dataclass
class Metrics:
    """Per-point aggregates plus the per-task means used for standard errors."""

    loglik: float
    rmse: float
    n_tasks: int
    n_points: int
    task_logliks: np.ndarray = field(repr=False)
    task_rmses: np.ndarray = field(repr=False)

    @property
    def loglik_stderr(self) -> float:
        if self.n_tasks < 2:
            return float("nan")
        return float(np.std(self.task_logliks, ddof=1) / math.sqrt(self.n_tasks))

    @property
    def rmse_stderr(self) -> float:
        if self.n_tasks < 2:
            return float("nan")
        return float(np.std(self.task_rmses, ddof=1) / math.sqrt(self.n_tasks))


def _task_eval(model: Model, task: Task) -> tuple[float, float, int]:
    with T.no_grad():
        pred = model(task.x_c, task.y_c, task.x_q)
    mean, std = pred.mean.data, pred.std.data
    y = task.y_q.reshape(mean.shape)
    logdens = -0.5 * ((y - mean) / std) ** 2 - np.log(std) - _HALF_LOG_2PI
    return float(logdens.sum()), float(((mean - y) ** 2).sum()), mean.size


def evaluate_tasks(model: Model, tasks: list, threads: int = 1) -> Metrics:
    """Equal weight per query point across all tasks; no gradient tracking."""
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(lambda t: _task_eval(model, t), tasks))
    else:
        rows = [_task_eval(model, t) for t in tasks]
    logsum = sum(r[0] for r in rows)
    sqsum = sum(r[1] for r in rows)
    count = sum(r[2] for r in rows)
    task_ll = np.array([r[0] / r[2] for r in rows])
    task_rmse = np.array([math.sqrt(r[1] / r[2]) for r in rows])
    return Metrics(
        loglik=logsum / count,
        rmse=math.sqrt(sqsum / count),
        n_tasks=len(rows),
        n_points=count,
        task_logliks=task_ll,
        task_rmses=task_rmse,
    )


def evaluate(model: Model, eval_set: list, threads: int = 1) -> Metrics:
    return evaluate_tasks(model, eval_set, threads=threads)


# --------------------------------------------------------------------------
# training loop


@dataclass
class EpochRecord:
    epoch: int
    iteration: int
    split: str
    loglik: float
    rmse: float
    grad_scale: float
    wall_seconds: float


@dataclass
class TrainResult:
    records: list
    best_val_loglik: float
    best_epoch: int
    final_epoch: int
    skipped_steps: int


def _train_step(model: Model, optimizer: AdamW, batch: list, clip_norm: float):
    losses = []
    for task in batch:
        pred = model(task.x_c, task.y_c, task.x_q)
        losses.append(gaussian_nll(pred, task.y_q))
    loss = losses[0]
    for extra in losses[1:]:
        loss = loss + extra
    loss = loss * (1.0 / len(losses))
    value = loss.item()
    if not math.isfinite(value):
        return value, None
    model.zero_grad()
    loss.backward()
    scale = clip_grad_norm(model.parameters(), clip_norm)
    optimizer.step()
    return value, scale


def run_training(model: Model, generator, cfg: TrainConfig,
                 optimizer: AdamW | None = None,
                 start_epoch: int = 0,
                 val_tasks: list | None = None,
                 on_epoch=None,
                 log=None) -> TrainResult:
    """Sample, step, validate; retains the best-validation snapshot via hook.

    ``on_epoch(epoch, model, metrics, is_best, record)`` runs after each
    validation; checkpoint writing lives in the CLI layer so the loop stays
    file-free. Three consecutive non-finite losses abort with
    :class:`TrainingDiverged`.
    """
    if optimizer is None:
        optimizer = AdamW(model.parameters(), lr=cfg.lr, beta1=cfg.beta1,
                          beta2=cfg.beta2, eps=cfg.eps, weight_decay=cfg.weight_decay)
    if val_tasks is None:
        val_tasks = build_eval_set(
            generator, cfg.val_seed, "val", cfg.val_batches, cfg.batch_size,
            n_q=cfg.val_n_q, n_c_range=cfg.n_c_range,
        )
    records: list[EpochRecord] = []
    best_val = -math.inf
    best_epoch = -1
    skipped = 0
    consecutive_bad = 0
    t0 = time.perf_counter()

    for epoch in range(start_epoch, cfg.epochs):
        scale_sum, scale_n = 0.0, 0
        for it in range(cfg.iters_per_epoch):
            stream = RngStream(seed=cfg.seed, purpose="train", epoch=epoch, iteration=it)
            batch = make_batch(generator, stream, cfg.batch_size,
                               cfg.n_c_range, n_q=None, n_q_range=cfg.n_q_range)
            try:
                value, scale = _train_step(model, optimizer, batch, cfg.clip_norm)
            except NonFiniteError:
                value, scale = float("nan"), None
            if scale is None:
                skipped += 1
                consecutive_bad += 1
                if log:
                    log(f"epoch {epoch} iter {it}: non-finite loss {value}, step skipped")
                if consecutive_bad >= 3:
                    raise TrainingDiverged(
                        f"three consecutive non-finite losses at epoch {epoch} iter {it}"
                    )
                continue
            consecutive_bad = 0
            scale_sum += scale
            scale_n += 1

        metrics = evaluate(model, val_tasks)
        is_best = metrics.loglik > best_val
        if is_best:
            best_val = metrics.loglik
            best_epoch = epoch
        record = EpochRecord(
            epoch=epoch,
            iteration=(epoch + 1) * cfg.iters_per_epoch,
            split="val",
            loglik=metrics.loglik,
            rmse=metrics.rmse,
            grad_scale=scale_sum / max(scale_n, 1),
            wall_seconds=time.perf_counter() - t0,
        )
        records.append(record)
        if on_epoch is not None:
            on_epoch(epoch, model, metrics, is_best, record)

    return TrainResult(
        records=records,
        best_val_loglik=best_val,
        best_epoch=best_epoch,
        final_epoch=cfg.epochs - 1,
        skipped_steps=skipped,
    )
