"""Acceptance gate: every release criterion at its pinned tolerance.

Each check prints one ``[A<n>] PASS/FAIL`` line (bypassing capture) so a
plain ``pytest tests/test_acceptance.py`` run reads as a checklist.

Criteria A5a-A5c compare desk-scale training runs (hours of CPU); they are
skipped unless ``NPLAB_DESK_DIR`` points at a directory of finished runs
produced with the configs under ``configs/`` (see README). Everything else
runs in minutes.
"""

import csv
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np
import pytest

import nplab.tensor as T
from nplab.conv import Conv1dLayer, conv1d, conv1d_transposed
from nplab.models import ModelConfig, build_model, count_parameters
from nplab.rng import RngStream
from nplab.spectral import SpectralConvLayer, irfft, rfft, spectral_conv
from nplab.taskgen import (
    LotkaVolterraConfig,
    SawtoothConfig,
    gp_sample_values,
    make_batch,
    matern52_kernel,
    simulate_lotka_volterra,
    square_mean,
)
from nplab.tensor import Tensor
from nplab.training import AdamW, clip_grad_norm, gaussian_nll

from conftest import ACCEPTANCE_LINES, fd_gradient, rel_err


def report(tag: str, ok: bool, detail: str):
    line = f"[{tag}] {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line, file=sys.__stdout__, flush=True)
    assert ok, line


def toy_inputs(rng, span=0.4):
    x_c = rng.uniform(-span, span, size=3)
    y_c = rng.uniform(-1, 1, size=(3, 1))
    x_q = rng.uniform(-span, span, size=2)
    y_q = rng.uniform(-1, 1, size=(2, 1))
    return x_c, y_c, x_q, y_q


# =========================================================================
# A1: oracle equivalences


class TestA1OracleEquivalences:
    def test_spectral_conv_vs_circular_convolution(self, rng):
        worst = 0.0
        for s in (8, 16, 64, 384):
            c_in, c_out = 2, 3
            layer = SpectralConvLayer("w", c_in, c_out, s // 2 + 1,
                                      np.random.default_rng(s))
            layer.weights.data = np.random.default_rng(s + 1).uniform(
                -1, 1, size=layer.weights.data.shape)
            x = rng.uniform(-1, 1, size=(c_in, s))
            got = spectral_conv(Tensor(x), layer).data
            idx = (np.arange(s)[:, None] - np.arange(s)[None, :]) % s
            expected = np.zeros((c_out, s))
            for o in range(c_out):
                for i in range(c_in):
                    comp = (layer.weights.data[o, i, :, 0]
                            + 1j * layer.weights.data[o, i, :, 1])
                    comp[0] = comp[0].real
                    comp[-1] = comp[-1].real
                    kern = np.fft.irfft(comp, s)
                    expected[o] += kern[idx] @ x[i]
            worst = max(worst, float(np.max(np.abs(got - expected))))
        report("A1", worst < 1e-9, f"spectral conv vs circular oracle, max err {worst:.2e}")

    def test_rfft_irfft_vs_naive_dft(self, rng):
        worst = 0.0
        for n in (8, 16, 33, 64):
            x = rng.uniform(-1, 1, size=n)
            ks = np.arange(n // 2 + 1)
            js = np.arange(n)
            naive = (x[None, :] * np.exp(-2j * np.pi * ks[:, None] * js / n)).sum(axis=1)
            got = rfft(Tensor(x)).bins()
            worst = max(worst, float(np.max(np.abs(got - naive))))
            back = irfft(rfft(Tensor(x)), n).data
            worst = max(worst, float(np.max(np.abs(back - x))))
        report("A1", worst < 1e-10, f"rfft/irfft vs naive DFT, max err {worst:.2e}")

    def test_conv1d_vs_direct_sum(self, rng):
        worst = 0.0
        for c, s, k, stride in ((2, 12, 5, 1), (3, 20, 11, 2), (1, 7, 3, 1)):
            layer = Conv1dLayer("c", c, c + 1, k, stride, np.random.default_rng(s))
            layer.kernel.data = np.random.default_rng(s + 1).uniform(
                -1, 1, size=layer.kernel.data.shape)
            x = rng.uniform(-1, 1, size=(c, s))
            got = conv1d(Tensor(x), layer).data
            p = (k - 1) // 2
            s_out = -(-s // stride)
            expected = np.zeros((c + 1, s_out))
            for o in range(c + 1):
                for t in range(s_out):
                    acc = layer.bias.data[o]
                    for i in range(c):
                        for j in range(k):
                            src = t * stride + j - p
                            if 0 <= src < s:
                                acc += layer.kernel.data[o, i, j] * x[i, src]
                    expected[o, t] = acc
            worst = max(worst, float(np.max(np.abs(got - expected))))
        report("A1", worst < 1e-12, f"conv1d vs direct sum, max err {worst:.2e}")

    def test_transposed_conv_adjointness(self, rng):
        worst = 0.0
        for c1, c2, s in ((2, 3, 8), (4, 2, 12)):
            tlayer = Conv1dLayer("t", c1, c2, 11, 2, np.random.default_rng(s))
            tlayer.kernel.data = np.random.default_rng(s + 3).uniform(
                -1, 1, size=tlayer.kernel.data.shape)
            tlayer.bias.data = np.zeros(c2)
            flayer = Conv1dLayer("f", c2, c1, 11, 2, np.random.default_rng(0))
            flayer.kernel.data = np.swapaxes(tlayer.kernel.data, 0, 1).copy()
            flayer.bias.data = np.zeros(c1)
            x = rng.uniform(-1, 1, size=(c2, 2 * s))
            y = rng.uniform(-1, 1, size=(c1, s))
            lhs = float(np.sum(conv1d(Tensor(x), flayer).data * y))
            rhs = float(np.sum(x * conv1d_transposed(Tensor(y), tlayer).data))
            worst = max(worst, abs(lhs - rhs))
        report("A1", worst < 1e-10, f"transposed-conv adjoint identity, max err {worst:.2e}")


# =========================================================================
# A2: gradient suite


class TestA2Gradients:
    def test_elementwise_and_structural_ops(self, rng):
        """Analytic gradients of every differentiable op vs central FD."""
        worst = 0.0
        x0 = rng.uniform(-2, 2, size=12)
        x0 = x0[np.abs(x0) > 1e-3]
        w = rng.uniform(-1, 1, size=x0.shape)
        cases = {
            "relu": lambda v: np.maximum(v, 0),
            "gelu": lambda v: v * 0.5 * (1 + np.vectorize(math.erf)(v / math.sqrt(2))),
            "softplus": lambda v: np.log1p(np.exp(-np.abs(v))) + np.maximum(v, 0),
            "sigmoid": lambda v: 1 / (1 + np.exp(-v)),
            "exp": np.exp,
            "sin": np.sin,
            "square": np.square,
        }
        for kind, ref in cases.items():
            expected = fd_gradient(lambda v: float(np.sum(ref(v) * w)), x0.copy())
            xt = Tensor(x0, requires_grad=True)
            T.reduce_sum(T.activation(xt, kind) * Tensor(w)).backward()
            worst = max(worst, rel_err(xt.grad, expected))
        # log on positive inputs
        xp = rng.uniform(0.3, 2.5, size=10)
        expected = fd_gradient(lambda v: float(np.sum(np.log(v))), xp.copy())
        xt = Tensor(xp, requires_grad=True)
        T.reduce_sum(T.log(xt)).backward()
        worst = max(worst, rel_err(xt.grad, expected))
        # binary ops, matmul, reductions, data movement in one expression
        a0 = rng.uniform(0.5, 2, size=(3, 4))
        b0 = rng.uniform(0.5, 2, size=(4, 2))

        def composite(a):
            h = a @ b0
            h = np.concatenate([h, h[:, :1]], axis=1)
            return float(np.mean((h * h)[1:, :].sum(axis=0) / h.shape[0]))

        expected = fd_gradient(composite, a0.copy())
        at = Tensor(a0, requires_grad=True)
        h = T.matmul(at, Tensor(b0))
        h = T.concat([h, h[:, :1]], axis=1)
        T.reduce_mean(T.reduce_sum(T.square(h)[1:, :], axis=0) * (1.0 / 3.0)).backward()
        worst = max(worst, rel_err(at.grad, expected))
        report("A2", worst < 1e-4, f"op-level gradients vs FD, worst rel err {worst:.2e}")

    @pytest.mark.parametrize("variant", ["cnp", "convcnp", "sconvcnp"])
    def test_full_model_loss_gradients(self, variant):
        """20 sampled parameters per default model vs FD at 1e-3 relative."""
        rng = np.random.default_rng({"cnp": 101, "convcnp": 102, "sconvcnp": 103}[variant])
        model = build_model(ModelConfig(variant=variant),
                            RngStream(seed=17, purpose="init"))
        x_c, y_c, x_q, y_q = toy_inputs(rng)
        loss = gaussian_nll(model(x_c, y_c, x_q), y_q)
        model.zero_grad()
        loss.backward()
        candidates = []
        for p in model.parameters():
            if p.grad is None:
                continue
            flat = np.argsort(-np.abs(p.grad.ravel()))[:4]
            for i in flat:
                idx = np.unravel_index(int(i), p.value.shape)
                if abs(p.grad[idx]) > 1e-7:
                    candidates.append((p, idx))
        order = rng.permutation(len(candidates))[:20]
        assert len(order) == 20
        worst = 0.0
        for j in order:
            p, idx = candidates[int(j)]
            analytic = p.grad[idx]
            orig = p.data[idx]
            eps = 1e-6
            for sign in (+1, -1):
                p.value.data[idx] = orig + sign * eps
                with T.no_grad():
                    val = gaussian_nll(model(x_c, y_c, x_q), y_q).item()
                if sign > 0:
                    up = val
                else:
                    down = val
            p.value.data[idx] = orig
            fd = (up - down) / (2 * eps)
            worst = max(worst, rel_err(analytic, fd, floor=1e-6))
        report("A2", worst < 1e-3,
               f"{variant} end-to-end loss gradients (20 params), worst rel err {worst:.2e}")


# =========================================================================
# A3: structural invariants


class TestA3Structure:
    @pytest.mark.parametrize("variant", ["cnp", "convcnp", "sconvcnp"])
    def test_context_permutation_invariance(self, variant, rng):
        model = build_model(ModelConfig(variant=variant, resolution=16),
                            RngStream(seed=23, purpose="init"))
        x_c = rng.uniform(-1, 1, size=8)
        y_c = rng.uniform(-1, 1, size=(8, 1))
        x_q = rng.uniform(-1, 1, size=5)
        base = model(x_c, y_c, x_q)
        perm = rng.permutation(8)
        other = model(x_c[perm], y_c[perm], x_q)
        ok = (np.array_equal(base.mean.data, other.mean.data)
              and np.array_equal(base.std.data, other.std.data))
        report("A3", ok, f"{variant} permutation invariance (bit-identical)")

    def test_convcnp_translation(self, rng):
        model = build_model(ModelConfig(variant="convcnp"),
                            RngStream(seed=29, purpose="init"))
        x_c = rng.uniform(-1.8, 1.8, size=6)
        y_c = rng.uniform(-1, 1, size=(6, 1))
        x_q = rng.uniform(-1.8, 1.8, size=5)
        base = model(x_c, y_c, x_q)
        tau = 5.0 / 64
        shifted = model(x_c + tau, y_c, x_q + tau)
        err = max(float(np.max(np.abs(shifted.mean.data - base.mean.data))),
                  float(np.max(np.abs(shifted.std.data - base.std.data))))
        report("A3", err < 1e-6, f"convcnp grid-aligned translation, max err {err:.2e}")

    def test_sconvcnp_translation_without_positions(self, rng):
        model = build_model(ModelConfig(variant="sconvcnp", positional_encoding=False),
                            RngStream(seed=31, purpose="init"))
        x_c = rng.uniform(-1.8, 1.8, size=6)
        y_c = rng.uniform(-1, 1, size=(6, 1))
        x_q = rng.uniform(-1.8, 1.8, size=5)
        base = model(x_c, y_c, x_q)
        tau = 9.0 / 64
        shifted = model(x_c + tau, y_c, x_q + tau)
        err = max(float(np.max(np.abs(shifted.mean.data - base.mean.data))),
                  float(np.max(np.abs(shifted.std.data - base.std.data))))
        report("A3", err < 1e-5,
               f"sconvcnp translation, positions off, max err {err:.2e}")

    @pytest.mark.parametrize("variant", ["cnp", "convcnp", "sconvcnp"])
    def test_std_floor(self, variant, rng):
        model = build_model(ModelConfig(variant=variant, resolution=16),
                            RngStream(seed=37, purpose="init"))
        x_c, y_c, x_q, _ = toy_inputs(rng, span=1.0)
        pred = model(x_c, y_c, x_q)
        lo = float(pred.std.data.min())
        report("A3", lo > 1e-6 - 1e-18, f"{variant} std floor, min std {lo:.3e}")

    def test_one_training_step_bit_exact(self):
        def one_step():
            model = build_model(ModelConfig(variant="sconvcnp", resolution=16),
                                RngStream(seed=41, purpose="init"))
            opt = AdamW(model.parameters(), lr=5e-4, weight_decay=0.01)
            batch = make_batch(SawtoothConfig(), RngStream(seed=41, purpose="train"),
                               batch_size=2, n_c_range=(4, 8), n_q=5)
            losses = [gaussian_nll(model(t.x_c, t.y_c, t.x_q), t.y_q) for t in batch]
            loss = (losses[0] + losses[1]) * 0.5
            model.zero_grad()
            loss.backward()
            clip_grad_norm(model.parameters(), 0.5)
            opt.step()
            return np.concatenate([p.data.ravel() for p in model.parameters()])

        a, b = one_step(), one_step()
        report("A3", np.array_equal(a, b), "one training step bit-exact across two runs")


# =========================================================================
# A4: generator statistics


class TestA4Generators:
    def test_gp_covariances_within_3se(self):
        n = 10_000
        rng = np.random.default_rng(61)
        draws = np.array([
            gp_sample_values(lambda r: matern52_kernel(r, 0.5),
                             np.array([0.0, 0.5]), 0.1, rng)
            for _ in range(n)
        ])
        v = 1.01
        se_var = v * math.sqrt(2.0 / (n - 1))
        var_err = abs(np.var(draws[:, 0], ddof=1) - v)
        target = matern52_kernel(0.5, 0.5)
        se_cov = math.sqrt((v * v + target * target) / n)
        cov_err = abs(np.cov(draws[:, 0], draws[:, 1], ddof=1)[0, 1] - target)
        ok = var_err < 3 * se_var and cov_err < 3 * se_cov
        report("A4", ok, f"GP sampler moments: var err {var_err:.4f} (3SE {3*se_var:.4f}), "
                         f"cov err {cov_err:.4f} (3SE {3*se_cov:.4f})")

    def test_square_wave_duty_fraction(self):
        n = 100_000
        rng = np.random.default_rng(62)
        duty = 0.61
        x = rng.uniform(0, 40, size=n)
        frac = float(np.mean(square_mean(x, 2.3, 0.17, duty) > 0))
        se = math.sqrt(duty * (1 - duty) / n)
        report("A4", abs(frac - duty) < 3 * se,
               f"square duty fraction {frac:.4f} vs {duty} (3SE {3*se:.4f})")

    def test_lv_invariant_order_one_convergence(self):
        p = dict(alpha=1.0, beta=0.05, gamma=1.0, delta=0.05, sigma=0.0,
                 u0=25.0, v0=15.0)
        stream = RngStream(seed=63, purpose="lv")
        dts = np.array([0.0044, 0.0022, 0.0011, 0.00055])
        drifts = []
        for dt in dts:
            traj = simulate_lotka_volterra(LotkaVolterraConfig(dt=dt), stream, params=p)
            u = traj.values[:, 0] / 0.01
            v = traj.values[:, 1] / 0.01
            H = p["delta"] * u - p["gamma"] * np.log(u) + p["beta"] * v - p["alpha"] * np.log(v)
            drifts.append(float(np.max(np.abs(H - H[0]))))
        slope = float(np.polyfit(np.log(dts), np.log(drifts), 1)[0])
        report("A4", 0.8 <= slope <= 1.2,
               f"deterministic LV invariant drift slope {slope:.3f} in [0.8, 1.2]")


# =========================================================================
# A5: desk-scale reproduction trends (opt-in; hours of CPU to produce)


def _desk_dir(tag: str):
    d = os.environ.get("NPLAB_DESK_DIR")
    if not d:
        msg = ("needs desk-scale runs: set NPLAB_DESK_DIR to a directory of "
               "finished runs (see configs/ and README)")
        ACCEPTANCE_LINES.append(f"[{tag}] SKIP  {msg}")
        pytest.skip(msg)
    return Path(d)


def _best_val_loglik(run_dir: Path) -> float:
    with open(run_dir / "manifest.json") as f:
        return float(json.load(f)["metrics"]["val_loglik"])


def _ablation_logliks(table: Path) -> dict:
    with open(table) as f:
        return {row["value"]: float(row["loglik"]) for row in csv.DictReader(f)}


@pytest.mark.desk
class TestA5DeskTrends:
    def test_a5a_matern_absolute_level(self):
        ll = _best_val_loglik(_desk_dir("A5a") / "matern_sconvcnp")
        report("A5a", ll >= -0.60,
               f"desk sconvcnp matern loglik {ll:.3f} >= -0.60 "
               f"(uninformed baseline is about -1.42)")

    def test_a5b_sawtooth_ordering(self):
        d = _desk_dir("A5b")
        s = _best_val_loglik(d / "sawtooth_sconvcnp")
        c = _best_val_loglik(d / "sawtooth_convcnp")
        n = _best_val_loglik(d / "sawtooth_cnp")
        report("A5b", s > n and s > c,
               f"desk sawtooth ordering sconvcnp {s:.3f} > convcnp {c:.3f}, cnp {n:.3f}")

    def test_a5c_ablation_directions(self):
        d = _desk_dir("A5c") / "sawtooth_ablation"
        modes = _ablation_logliks(d / "ablation_modes.csv")
        pos = _ablation_logliks(d / "ablation_positional.csv")
        res = _ablation_logliks(d / "ablation_resolution.csv")
        ok = (modes["32"] > modes["8"]
              and pos["True"] > pos["False"]
              and res["64"] >= res["16"])
        report("A5c", ok,
               f"ablations: modes 32 {modes['32']:.3f} > 8 {modes['8']:.3f}; "
               f"pos on {pos['True']:.3f} > off {pos['False']:.3f}; "
               f"res 64 {res['64']:.3f} >= 16 {res['16']:.3f}")


# =========================================================================
# A6: model-size sanity


class TestA6ModelSize:
    def test_default_model_budget(self):
        n = count_parameters(build_model(ModelConfig(variant="sconvcnp"),
                                         RngStream(seed=0, purpose="init")))
        dev = abs(n - 3.7e6) / 3.7e6
        report("A6", dev < 0.10,
               f"default sconvcnp {n:,} params vs 3.7M budget (dev {dev:.1%}); "
               f"the pinned block table cannot reach the window, see notes")

    def test_ablation_model_budget(self):
        n = count_parameters(build_model(
            ModelConfig(variant="sconvcnp", bottleneck_channels=128),
            RngStream(seed=0, purpose="init")))
        dev = abs(n - 3.1e6) / 3.1e6
        report("A6", dev < 0.10, f"ablation sconvcnp {n:,} params vs 3.1M budget (dev {dev:.1%})")


# =========================================================================
# A7: complexity contract


class TestA7Complexity:
    def test_forward_time_grows_subquadratically(self):
        layer = SpectralConvLayer("w", 4, 4, 32, np.random.default_rng(0))
        xs = {s: Tensor(np.random.default_rng(1).uniform(size=(4, s)))
              for s in (512, 4096)}
        times = {}
        for s, x in xs.items():
            with T.no_grad():
                spectral_conv(x, layer)
            t0 = time.perf_counter()
            for _ in range(30):
                with T.no_grad():
                    spectral_conv(x, layer)
            times[s] = (time.perf_counter() - t0) / 30
        ratio = times[4096] / times[512]
        report("A7", ratio < 10.0,
               f"spectral conv wall time 4096/512 ratio {ratio:.2f} < 10")
