"""Reproducible task sampling from synthetic stochastic processes.

Four 1-D families (two GP kernels, sawtooth and square waves) plus a
two-species stochastic predator-prey system integrated with Euler-Maruyama.
All randomness flows through counter-based streams (:mod:`nplab.rng`), so a
task is a pure function of ``(seed, purpose, epoch, iteration, task_index)``.

GP observation noise is folded into the covariance (K + sigma0^2 I), so
context and query values share one noisy function draw; the waveform
families add i.i.d. Gaussian noise to an exact mean function.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .rng import RngStream

__all__ = [
    "Task",
    "Batch",
    "GeneratorError",
    "MaternConfig",
    "PeriodicConfig",
    "SawtoothConfig",
    "SquareConfig",
    "LotkaVolterraConfig",
    "generator_from_dict",
    "matern52_kernel",
    "periodic_kernel",
    "gp_sample_values",
    "gp_sample_task",
    "sawtooth_task",
    "square_task",
    "simulate_lotka_volterra",
    "make_batch",
    "save_eval_set",
    "load_eval_set",
    "build_eval_set",
]


class GeneratorError(RuntimeError):
    """Raised when a generator cannot produce a valid task."""


@dataclass
class Task:
    """One regression task: context pairs plus query pairs."""

    x_c: np.ndarray
    y_c: np.ndarray
    x_q: np.ndarray
    y_q: np.ndarray

    def __post_init__(self):
        self.x_c = np.asarray(self.x_c, dtype=np.float64).ravel()
        self.x_q = np.asarray(self.x_q, dtype=np.float64).ravel()
        self.y_c = np.atleast_2d(np.asarray(self.y_c, dtype=np.float64))
        self.y_q = np.atleast_2d(np.asarray(self.y_q, dtype=np.float64))
        if self.y_c.shape[0] != self.x_c.size:
            self.y_c = self.y_c.T
        if self.y_q.shape[0] != self.x_q.size:
            self.y_q = self.y_q.T

    @property
    def n_c(self) -> int:
        return self.x_c.size

    @property
    def n_q(self) -> int:
        return self.x_q.size

    @property
    def d_y(self) -> int:
        return self.y_c.shape[1]


Batch = list


# --------------------------------------------------------------------------
# kernels


def matern52_kernel(r, lam: float):
    """Matern covariance with smoothness 5/2, unit variance.

    Closed form (1 + sqrt5 r/l + 5 r^2 / (3 l^2)) exp(-sqrt5 r/l); equal to
    the Bessel-function form of the same kernel (checked in the tests).
    """
    r = np.abs(np.asarray(r, dtype=np.float64))
    z = math.sqrt(5.0) * r / lam
    return (1.0 + z + z * z / 3.0) * np.exp(-z)


def periodic_kernel(r, rho: float, lam: float):
    """exp(-2 sin^2(pi r / rho) / lam^2), unit variance."""
    r = np.abs(np.asarray(r, dtype=np.float64))
    s = np.sin(math.pi * r / rho)
    return np.exp(-2.0 * s * s / (lam * lam))


# --------------------------------------------------------------------------
# generator configs


@dataclass(frozen=True)
class MaternConfig:
    name = "matern"
    d_y = 1
    lengthscale_range: tuple = (0.25, 1.0)
    sigma0: float = 0.1
    x_range: tuple = (-3.0, 3.0)

    def kernel(self, rng: np.random.Generator) -> Callable:
        lam = rng.uniform(*self.lengthscale_range)
        return lambda r: matern52_kernel(r, lam)


@dataclass(frozen=True)
class PeriodicConfig:
    name = "periodic"
    d_y = 1
    period_range: tuple = (0.5, 2.0)
    lengthscale_range: tuple = (0.25, 1.0)
    sigma0: float = 0.1
    x_range: tuple = (-3.0, 3.0)

    def kernel(self, rng: np.random.Generator) -> Callable:
        rho = rng.uniform(*self.period_range)
        lam = rng.uniform(*self.lengthscale_range)
        return lambda r: periodic_kernel(r, rho, lam)


@dataclass(frozen=True)
class SawtoothConfig:
    name = "sawtooth"
    d_y = 1
    freq_range: tuple = (0.5, 5.0)
    sigma0: float = 0.05
    x_range: tuple = (-3.0, 3.0)


@dataclass(frozen=True)
class SquareConfig:
    name = "square"
    d_y = 1
    freq_range: tuple = (0.5, 5.0)
    duty_range: tuple = (0.25, 0.75)
    sigma0: float = 0.05
    x_range: tuple = (-3.0, 3.0)


@dataclass(frozen=True)
class LotkaVolterraConfig:
    """Stochastic predator-prey system with multiplicative noise.

    ``printed_drift`` switches the predator decay term from the classical
    -gamma V to the alternative -gamma U for comparison runs.
    """

    name = "lotka_volterra"
    d_y = 2
    alpha_range: tuple = (1.0, 5.0)
    beta_range: tuple = (0.04, 0.08)
    gamma_range: tuple = (1.0, 2.0)
    delta_range: tuple = (0.04, 0.08)
    sigma_range: tuple = (0.5, 10.0)
    init_range: tuple = (5.0, 100.0)
    nu: float = 1.0 / 6.0
    dt: float = 0.022
    record_spacing: float = 0.05
    t_start: float = -10.0
    t_end: float = 100.0
    time_scale: float = 0.1
    population_scale: float = 0.01
    printed_drift: bool = False


GENERATORS = {
    "matern": MaternConfig,
    "periodic": PeriodicConfig,
    "sawtooth": SawtoothConfig,
    "square": SquareConfig,
    "lotka_volterra": LotkaVolterraConfig,
}


def generator_from_dict(d: dict):
    d = dict(d)
    name = d.pop("name", None)
    if name not in GENERATORS:
        raise GeneratorError(f"unknown generator {name!r}")
    cls = GENERATORS[name]
    try:
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})
    except TypeError as e:
        raise GeneratorError(f"invalid generator options for {name!r}: {e}") from None


# --------------------------------------------------------------------------
# Gaussian-process tasks


def gp_sample_values(kernel: Callable, xs: np.ndarray, sigma0: float,
                     rng: np.random.Generator, jitter: float = 1e-6,
                     max_retries: int = 3) -> np.ndarray:
    """Draw y ~ N(0, K + sigma0^2 I) at the given inputs via Cholesky.

    The jitter escalates by 10x up to ``max_retries`` times before giving
    up, which the caller treats as a resample signal.
    """
    n = xs.size
    K = kernel(np.abs(xs[:, None] - xs[None, :]))
    K = K + (sigma0 * sigma0) * np.eye(n)
    z = rng.standard_normal(n)
    eps = jitter
    for _ in range(max_retries + 1):
        try:
            L = np.linalg.cholesky(K + eps * np.eye(n))
            return L @ z
        except np.linalg.LinAlgError:
            eps *= 10.0
    raise GeneratorError("Cholesky failed after jitter escalation")


def gp_sample_task(config, n_c: int, n_q: int, stream: RngStream,
                   max_resamples: int = 5) -> Task:
    """Inputs uniform on the x range; one joint noisy GP draw, then split."""
    n = n_c + n_q
    if n < 1:
        raise GeneratorError("need at least one point")
    for attempt in range(max_resamples):
        rng = stream.child(purpose=stream.purpose + f"/try{attempt}").generator() \
            if attempt else stream.generator()
        xs = rng.uniform(*config.x_range, size=n)
        kernel = config.kernel(rng)
        try:
            ys = gp_sample_values(kernel, xs, config.sigma0, rng)
        except GeneratorError:
            continue
        return Task(xs[:n_c], ys[:n_c], xs[n_c:], ys[n_c:])
    raise GeneratorError("GP task resampling exhausted")


# --------------------------------------------------------------------------
# waveform tasks


def sawtooth_mean(x, freq: float, direction: float, phase: float):
    return 2.0 * np.mod(freq * (direction * np.asarray(x) - phase), 1.0) - 1.0


def square_mean(x, freq: float, phase: float, duty: float):
    return 2.0 * (np.mod(freq * np.asarray(x) - phase, 1.0) < duty) - 1.0


def sawtooth_task(config: SawtoothConfig, n_c: int, n_q: int, stream: RngStream) -> Task:
    rng = stream.generator()
    n = n_c + n_q
    xs = rng.uniform(*config.x_range, size=n)
    freq = rng.uniform(*config.freq_range)
    direction = 1.0 if rng.uniform() < 0.5 else -1.0
    phase = rng.uniform(0.0, 1.0)
    ys = sawtooth_mean(xs, freq, direction, phase) + config.sigma0 * rng.standard_normal(n)
    return Task(xs[:n_c], ys[:n_c], xs[n_c:], ys[n_c:])


def square_task(config: SquareConfig, n_c: int, n_q: int, stream: RngStream) -> Task:
    rng = stream.generator()
    n = n_c + n_q
    xs = rng.uniform(*config.x_range, size=n)
    freq = rng.uniform(*config.freq_range)
    duty = rng.uniform(*config.duty_range)
    phase = rng.uniform(0.0, 1.0)
    ys = square_mean(xs, freq, phase, duty) + config.sigma0 * rng.standard_normal(n)
    return Task(xs[:n_c], ys[:n_c], xs[n_c:], ys[n_c:])


# --------------------------------------------------------------------------
# predator-prey tasks


@dataclass
class Trajectory:
    times: np.ndarray  # recorded times, already burn-in-trimmed and rescaled
    values: np.ndarray  # [n, 2] rescaled populations


def _lv_drift(u, v, alpha, beta, gamma, delta, printed_drift: bool):
    du = alpha * u - beta * u * v
    dv = (-gamma * (u if printed_drift else v)) + delta * u * v
    return du, dv


def simulate_lotka_volterra(config: LotkaVolterraConfig, stream: RngStream,
                            params: dict | None = None,
                            max_resamples: int = 5) -> Trajectory:
    """Euler-Maruyama integration with a reflecting boundary at zero.

    Negative excursions from the multiplicative noise are reflected
    (absolute value) rather than clamped: an absorbing zero makes predator
    extinction permanent, after which the prey population grows as
    exp(alpha t) for the rest of the horizon, and at the sampled noise
    levels that degenerates most trajectories.

    Runs on the solver step ``dt`` over [t_start, t_end); states are
    recorded at the latest solver step at or before each multiple of the
    record spacing. Times before zero are discarded as burn-in, then time is
    multiplied by ``time_scale`` and populations by ``population_scale``.
    Non-finite or exploding states (beyond 1e6) trigger a resimulation with
    fresh parameters.
    """
    for attempt in range(max_resamples):
        key = stream if attempt == 0 else stream.child(purpose=stream.purpose + f"/try{attempt}")
        rng = key.generator()
        if params is None:
            p = {
                "alpha": rng.uniform(*config.alpha_range),
                "beta": rng.uniform(*config.beta_range),
                "gamma": rng.uniform(*config.gamma_range),
                "delta": rng.uniform(*config.delta_range),
                "sigma": rng.uniform(*config.sigma_range),
                "u0": rng.uniform(*config.init_range),
                "v0": rng.uniform(*config.init_range),
            }
        else:
            p = dict(params)
        traj = _integrate_lv(config, p, rng)
        if traj is not None:
            return traj
    raise GeneratorError("predator-prey simulation kept producing non-finite states")


def _integrate_lv(config: LotkaVolterraConfig, p: dict,
                  rng: np.random.Generator) -> Trajectory | None:
    dt = config.dt
    n_steps = int(round((config.t_end - config.t_start) / dt))
    sqrt_dt = math.sqrt(dt)
    record_every = config.record_spacing
    n_records = int(math.floor((config.t_end - config.t_start) / record_every))
    rec_times = config.t_start + record_every * np.arange(n_records)
    # solver index holding the state at or before each record time
    rec_idx = np.floor((rec_times - config.t_start) / dt + 1e-9).astype(int)

    u, v = p["u0"], p["v0"]
    sigma, nu = p["sigma"], config.nu
    states = np.empty((n_steps + 1, 2))
    states[0] = (u, v)
    if sigma > 0:
        noise = rng.standard_normal((n_steps, 2))
    else:
        noise = np.zeros((n_steps, 2))
    for i in range(n_steps):
        du, dv = _lv_drift(u, v, p["alpha"], p["beta"], p["gamma"], p["delta"],
                           config.printed_drift)
        u = abs(u + du * dt + sigma * (u ** nu) * sqrt_dt * noise[i, 0])
        v = abs(v + dv * dt + sigma * (v ** nu) * sqrt_dt * noise[i, 1])
        if not (math.isfinite(u) and math.isfinite(v)) or u > 1e6 or v > 1e6:
            return None
        states[i + 1] = (u, v)

    recorded = states[rec_idx]
    keep = rec_times >= 0.0
    times = rec_times[keep] * config.time_scale
    values = recorded[keep] * config.population_scale
    return Trajectory(times=times, values=values)


def _lv_task(config: LotkaVolterraConfig, n_c: int, n_q: int, stream: RngStream) -> Task:
    traj = simulate_lotka_volterra(config, stream.child(purpose=stream.purpose + "/sim"))
    n = n_c + n_q
    if n > traj.times.size:
        raise GeneratorError(
            f"requested {n} points but the trajectory holds {traj.times.size}"
        )
    rng = stream.child(purpose=stream.purpose + "/subsample").generator()
    idx = rng.choice(traj.times.size, size=n, replace=False)
    xs = traj.times[idx]
    ys = traj.values[idx]
    return Task(xs[:n_c], ys[:n_c], xs[n_c:], ys[n_c:])


# --------------------------------------------------------------------------
# batches


def sample_task(config, n_c: int, n_q: int, stream: RngStream) -> Task:
    if isinstance(config, (MaternConfig, PeriodicConfig)):
        return gp_sample_task(config, n_c, n_q, stream)
    if isinstance(config, SawtoothConfig):
        return sawtooth_task(config, n_c, n_q, stream)
    if isinstance(config, SquareConfig):
        return square_task(config, n_c, n_q, stream)
    if isinstance(config, LotkaVolterraConfig):
        return _lv_task(config, n_c, n_q, stream)
    raise GeneratorError(f"unknown generator config {type(config).__name__}")


def make_batch(config, stream: RngStream, batch_size: int = 16,
               n_c_range: tuple = (5, 25), n_q: int | None = None,
               n_q_range: tuple = (5, 25)) -> Batch:
    """One (n_c, n_q) draw shared by all tasks of the batch.

    ``stream`` identifies the batch; per-task streams are derived from it by
    task index, so tasks can be generated independently in any order.
    """
    shape_rng = stream.child(purpose=stream.purpose + "/shape").generator()
    n_c = int(shape_rng.integers(n_c_range[0], n_c_range[1]))
    if n_q is None:
        n_q = int(shape_rng.integers(n_q_range[0], n_q_range[1]))
    return [
        sample_task(config, n_c, n_q, stream.child(task_index=i))
        for i in range(batch_size)
    ]


# --------------------------------------------------------------------------
# fixed evaluation sets

_MAGIC = b"NPEV"
_VERSION = 1


def save_eval_set(path, tasks: list, generator_name: str, seed: int):
    """Binary layout: header, then per task length-prefixed f64 arrays."""
    with open(path, "wb") as f:
        name = generator_name.encode("utf-8")
        f.write(_MAGIC)
        f.write(struct.pack("<IQH", _VERSION, seed, len(name)))
        f.write(name)
        f.write(struct.pack("<I", len(tasks)))
        for t in tasks:
            for arr in (t.x_c, t.y_c, t.x_q, t.y_q):
                a = np.ascontiguousarray(arr, dtype="<f8")
                f.write(struct.pack("<II", a.shape[0], a.shape[1] if a.ndim == 2 else 1))
                f.write(a.tobytes())


def load_eval_set(path):
    with open(path, "rb") as f:
        data = f.read()
    buf = io.BytesIO(data)
    if buf.read(4) != _MAGIC:
        raise GeneratorError(f"{path}: not an evaluation-set file")
    version, seed, name_len = struct.unpack("<IQH", buf.read(14))
    if version != _VERSION:
        raise GeneratorError(f"{path}: unsupported version {version}")
    generator_name = buf.read(name_len).decode("utf-8")
    (count,) = struct.unpack("<I", buf.read(4))
    tasks = []
    for _ in range(count):
        arrays = []
        for _ in range(4):
            rows, cols = struct.unpack("<II", buf.read(8))
            arr = np.frombuffer(buf.read(rows * cols * 8), dtype="<f8").reshape(rows, cols)
            arrays.append(arr if cols > 1 else arr.ravel())
        tasks.append(Task(*arrays))
    return tasks, generator_name, seed


def build_eval_set(config, seed: int, purpose: str, n_batches: int,
                   batch_size: int = 16, n_q: int = 256,
                   n_c_range: tuple = (5, 25)) -> list:
    """The fixed validation/test protocol: n_q fixed, n_c drawn per batch."""
    tasks: list = []
    for b in range(n_batches):
        stream = RngStream(seed=seed, purpose=purpose, iteration=b)
        tasks.extend(make_batch(config, stream, batch_size, n_c_range, n_q=n_q))
    return tasks
