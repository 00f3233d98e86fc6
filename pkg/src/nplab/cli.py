"""Command-line entry points: train, eval, ablate, export.

Runs are config-driven (JSON, strict schema) and land in
``<output_dir>/<run_name>/``:

* ``manifest.json`` + ``params.bin``: best-validation checkpoint,
* ``last_manifest.json`` + ``last_params.bin``: final-epoch checkpoint,
* ``optim_last.npz``: optimizer state for bit-identical resume,
* ``metrics.csv``: one validation row per epoch (plus appended eval rows),
* ``metrics.png`` and friends: figures rendered next to each CSV.

``NP_LAB_THREADS`` caps evaluation worker threads (default 1; training
stays serial for bit-reproducibility).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, load_experiment_config
from .models import build_model, count_parameters
from .rng import RngStream
from .taskgen import (
    LotkaVolterraConfig,
    build_eval_set,
    load_eval_set,
    make_batch,
    save_eval_set,
)
from .training import AdamW, TrainingDiverged, evaluate, run_training
from . import report

__all__ = ["main"]

METRIC_COLUMNS = ["epoch", "iteration", "split", "loglik", "rmse", "grad_scale", "wall_seconds"]


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("NP_LAB_THREADS", "1")))
    except ValueError:
        return 1


def _append_metric_rows(path: Path, rows: list[dict]):
    new_file = not path.exists()
    with open(path, "a", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=METRIC_COLUMNS)
        if new_file:
            writer.writeheader()
        for row in rows:
            writer.writerow(row)


def _metric_row(epoch, iteration, split, loglik, rmse, grad_scale, wall_seconds) -> dict:
    return {
        "epoch": epoch,
        "iteration": iteration,
        "split": split,
        "loglik": f"{loglik:.6f}",
        "rmse": f"{rmse:.6f}",
        "grad_scale": f"{grad_scale:.6f}" if np.isfinite(grad_scale) else "nan",
        "wall_seconds": f"{wall_seconds:.3f}",
    }


# --------------------------------------------------------------------------
# train


def _run_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.output_dir) / cfg.run_name


def _save_optimizer(path: Path, optimizer: AdamW):
    state = optimizer.state_dict()
    arrays = {"step_count": np.array([state["step_count"]], dtype=np.int64)}
    for k, v in state["m"].items():
        arrays["m::" + k] = v
    for k, v in state["v"].items():
        arrays["v::" + k] = v
    np.savez(path, **arrays)


def _load_optimizer(path: Path, optimizer: AdamW):
    with np.load(path) as data:
        state = {
            "step_count": int(data["step_count"][0]),
            "m": {k[3:]: data[k] for k in data.files if k.startswith("m::")},
            "v": {k[3:]: data[k] for k in data.files if k.startswith("v::")},
        }
    optimizer.load_state_dict(state)


def cmd_train(args) -> int:
    cfg = load_experiment_config(args.config, scale_override=args.scale)
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.out is not None:
        cfg.output_dir = args.out
    run_dir = _run_dir(cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    with open(run_dir / "config.json", "w") as f:
        json.dump(cfg.to_dict(), f, indent=2, sort_keys=True)

    model = build_model(cfg.model, RngStream(seed=cfg.train.seed, purpose="init"))
    optimizer = AdamW(model.parameters(), lr=cfg.train.lr, beta1=cfg.train.beta1,
                      beta2=cfg.train.beta2, eps=cfg.train.eps,
                      weight_decay=cfg.train.weight_decay)
    start_epoch = 0
    if args.resume:
        loaded, manifest = load_checkpoint(run_dir, prefix="last_")
        for p, q in zip(model.parameters(), loaded.parameters()):
            p.data = q.data
        _load_optimizer(run_dir / "optim_last.npz", optimizer)
        start_epoch = int(manifest["rng_state"]["next_epoch"])
        print(f"resuming {cfg.run_name} at epoch {start_epoch}")

    print(f"training {cfg.model.variant} on {cfg.generator.name} "
          f"({count_parameters(model):,} parameters, scale={cfg.scale})")
    metrics_path = run_dir / "metrics.csv"

    def on_epoch(epoch, mdl, metrics, is_best, record):
        _append_metric_rows(metrics_path, [_metric_row(
            record.epoch, record.iteration, record.split,
            record.loglik, record.rmse, record.grad_scale, record.wall_seconds,
        )])
        extra = {
            "run_name": cfg.run_name,
            "generator": cfg.to_dict()["generator"],
            "train_config": cfg.train.to_dict(),
            "rng_state": {"seed": cfg.train.seed, "next_epoch": epoch + 1},
            "metrics": {"val_loglik": metrics.loglik, "val_rmse": metrics.rmse,
                        "epoch": epoch},
            "status": "running",
        }
        save_checkpoint(run_dir, mdl, extra=dict(extra, status="last"), prefix="last_")
        _save_optimizer(run_dir / "optim_last.npz", optimizer)
        if is_best:
            save_checkpoint(run_dir, mdl, extra=dict(extra, status="best"))
        print(f"epoch {epoch}: val loglik {metrics.loglik:.4f} rmse {metrics.rmse:.4f}"
              + (" (best)" if is_best else ""))

    try:
        result = run_training(model, cfg.generator, cfg.train, optimizer=optimizer,
                              start_epoch=start_epoch, on_epoch=on_epoch,
                              log=lambda msg: print(msg, file=sys.stderr))
    except TrainingDiverged as e:
        save_checkpoint(run_dir, model, extra={"status": "aborted", "error": str(e)},
                        prefix="last_")
        print(f"error: {e}", file=sys.stderr)
        return 1
    report.render_training_curves(run_dir / "metrics.png", result.records,
                                  title=f"{cfg.model.variant} / {cfg.generator.name}")
    print(f"done: best val loglik {result.best_val_loglik:.4f} "
          f"(epoch {result.best_epoch}); artifacts in {run_dir}")
    return 0


# --------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    ckpt_dir = Path(args.checkpoint)
    model, manifest = load_checkpoint(ckpt_dir)
    if args.eval_set:
        tasks, gen_name, seed = load_eval_set(args.eval_set)
        source = f"eval set {args.eval_set}"
    else:
        from .taskgen import generator_from_dict

        gen_cfg = dict(manifest.get("generator", {}))
        if args.generator:
            gen_cfg = {"name": args.generator}
        if not gen_cfg:
            print("error: checkpoint has no generator and none was supplied", file=sys.stderr)
            return 2
        generator = generator_from_dict(gen_cfg)
        seed = args.seed if args.seed is not None else 90_000
        tasks = build_eval_set(generator, seed, "test", args.batches, n_q=args.n_q)
        source = f"{gen_cfg['name']} seed {seed} ({args.batches} batches)"
    metrics = evaluate(model, tasks, threads=_threads())
    print(f"eval on {source}: "
          f"loglik {metrics.loglik:.4f} +- {metrics.loglik_stderr:.4f}, "
          f"rmse {metrics.rmse:.4f} +- {metrics.rmse_stderr:.4f} "
          f"({metrics.n_tasks} tasks)")
    out_dir = Path(args.out) if args.out else ckpt_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    _append_metric_rows(out_dir / "metrics.csv", [_metric_row(
        manifest.get("metrics", {}).get("epoch", -1), -1, "test",
        metrics.loglik, metrics.rmse, float("nan"), 0.0,
    )])
    return 0


# --------------------------------------------------------------------------
# ablate

ABLATION_AXES = {
    "modes": ("m_f", [8, 16, 32]),
    "resolution": ("resolution", [16, 32, 64]),
    "positional": ("positional_encoding", [True, False]),
}


def cmd_ablate(args) -> int:
    cfg = load_experiment_config(args.config, scale_override=args.scale)
    if cfg.model.variant != "sconvcnp":
        print(f"error: axis {args.axis!r} applies to the sconvcnp variant only",
              file=sys.stderr)
        return 2
    field_name, values = ABLATION_AXES[args.axis]
    if args.seed is not None:
        cfg.train.seed = args.seed
    base_dir = _run_dir(cfg)
    base_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for value in values:
        model_cfg = replace(cfg.model, **{field_name: value})
        model = build_model(model_cfg, RngStream(seed=cfg.train.seed, purpose="init"))
        optimizer = AdamW(model.parameters(), lr=cfg.train.lr, beta1=cfg.train.beta1,
                          beta2=cfg.train.beta2, eps=cfg.train.eps,
                          weight_decay=cfg.train.weight_decay)
        print(f"[{args.axis}={value}] training ({count_parameters(model):,} parameters)")
        # the task streams depend only on cfg.train.seed, so every ablation
        # run sees the identical task sequence
        run_training(model, cfg.generator, cfg.train, optimizer=optimizer)
        test_tasks = build_eval_set(cfg.generator, cfg.train.seed + 123_456, "ablate-test",
                                    args.test_batches, cfg.train.batch_size,
                                    n_q=cfg.train.val_n_q, n_c_range=cfg.train.n_c_range)
        metrics = evaluate(model, test_tasks, threads=_threads())
        run_dir = base_dir / f"{args.axis}_{value}"
        save_checkpoint(run_dir, model, extra={
            "run_name": f"{cfg.run_name}/{args.axis}_{value}",
            "generator": cfg.to_dict()["generator"],
            "train_config": cfg.train.to_dict(),
            "rng_state": {"seed": cfg.train.seed, "next_epoch": cfg.train.epochs},
            "metrics": {"test_loglik": metrics.loglik, "test_rmse": metrics.rmse},
            "status": "best",
        })
        rows.append({
            "axis": args.axis,
            "value": value,
            "seed": cfg.train.seed,
            "loglik": metrics.loglik,
            "loglik_stderr": metrics.loglik_stderr,
            "rmse": metrics.rmse,
            "rmse_stderr": metrics.rmse_stderr,
            "parameters": count_parameters(model),
            "run_dir": str(run_dir),
        })
        print(f"[{args.axis}={value}] loglik {metrics.loglik:.4f} rmse {metrics.rmse:.4f}")

    table_path = base_dir / f"ablation_{args.axis}.csv"
    with open(table_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    report.render_ablation(
        base_dir / f"ablation_{args.axis}.png", args.axis,
        [r["value"] for r in rows], [r["loglik"] for r in rows],
        [r["loglik_stderr"] for r in rows],
        title=f"{cfg.generator.name}: {args.axis} ablation",
    )
    print(f"ablation table: {table_path}")
    return 0


# --------------------------------------------------------------------------
# export


def cmd_export(args) -> int:
    ckpt_dir = Path(args.checkpoint)
    model, manifest = load_checkpoint(ckpt_dir)
    from .taskgen import generator_from_dict

    gen_cfg = dict(manifest.get("generator", {}))
    if args.generator:
        gen_cfg = {"name": args.generator}
    if not gen_cfg:
        print("error: checkpoint has no generator and none was supplied", file=sys.stderr)
        return 2
    generator = generator_from_dict(gen_cfg)
    seed = args.seed if args.seed is not None else 4242
    stream = RngStream(seed=seed, purpose="export")
    [task] = make_batch(generator, stream, batch_size=1,
                        n_c_range=(args.n_context, args.n_context + 1), n_q=1)
    if isinstance(generator, LotkaVolterraConfig):
        grid_x = np.linspace(float(task.x_c.min()), float(task.x_c.max()), args.points)
    else:
        lo, hi = generator.x_range
        grid_x = np.linspace(lo, hi, args.points)

    from . import tensor as T

    with T.no_grad():
        pred = model(task.x_c, task.y_c, grid_x)
        ctx_pred = model(task.x_c, task.y_c, task.x_c)
    mean, std = pred.mean.data, pred.std.data
    cmean, cstd = ctx_pred.mean.data, ctx_pred.std.data

    out_dir = Path(args.out) if args.out else ckpt_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    d_y = mean.shape[1]

    def cols(base):
        return [base] if d_y == 1 else [f"{base}_{j}" for j in range(d_y)]

    headers = ["x"] + cols("pred_mean") + cols("pred_std") + ["is_context"] + cols("y_true")
    csv_path = out_dir / "prediction.csv"
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(headers)
        for i, x in enumerate(grid_x):
            writer.writerow([f"{x:.8f}"] + [f"{v:.8f}" for v in mean[i]]
                            + [f"{v:.8f}" for v in std[i]] + [0] + [""] * d_y)
        for i, x in enumerate(task.x_c):
            writer.writerow([f"{x:.8f}"] + [f"{v:.8f}" for v in cmean[i]]
                            + [f"{v:.8f}" for v in cstd[i]] + [1]
                            + [repr(float(v)) for v in task.y_c[i]])
    fig_path = report.render_prediction(
        out_dir / "prediction.png", grid_x, mean, std, task.x_c, task.y_c,
        title=f"{model.config.variant} on {gen_cfg.get('name', '?')}",
    )
    print(f"wrote {csv_path} and {fig_path}")
    return 0


# --------------------------------------------------------------------------
# generate fixed eval sets (helper verb for reproducible test sets)


def cmd_make_eval_set(args) -> int:
    from .taskgen import generator_from_dict

    generator = generator_from_dict({"name": args.generator})
    tasks = build_eval_set(generator, args.seed, "test", args.batches, n_q=args.n_q)
    save_eval_set(args.out, tasks, args.generator, args.seed)
    print(f"wrote {len(tasks)} tasks to {args.out}")
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nplab", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--scale", choices=["paper", "desk", "custom"], default=None,
                   help="override the config's scale preset")
    p.add_argument("--out", default=None, help="override output_dir")
    p.add_argument("--resume", action="store_true", help="continue from last_ checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--eval-set", default=None, help="serialized eval-set file")
    p.add_argument("--generator", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--batches", type=int, default=1000)
    p.add_argument("--n-q", type=int, default=256)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="sweep one model axis under a shared budget")
    p.add_argument("--config", required=True)
    p.add_argument("--axis", required=True, choices=sorted(ABLATION_AXES))
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--scale", choices=["paper", "desk", "custom"], default=None,
                   help="override the config's scale preset")
    p.add_argument("--test-batches", type=int, default=64)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export", help="dense predictions for one task, CSV + figure")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--generator", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--n-context", type=int, default=10)
    p.add_argument("--points", type=int, default=256)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("make-eval-set", help="serialize a fixed evaluation set")
    p.add_argument("--generator", required=True)
    p.add_argument("--seed", type=int, default=90_000)
    p.add_argument("--batches", type=int, default=1000)
    p.add_argument("--n-q", type=int, default=256)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_eval_set)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
