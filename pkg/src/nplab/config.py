"""Experiment configuration: a strict, versioned JSON schema with presets.

Configs are plain JSON objects with four sections (model, generator, train)
plus run metadata. Unknown keys anywhere are rejected by name. The ``scale``
preset resolves budgets:

* ``paper``: 500 epochs x 1000 iterations x batch 16 (8M tasks),
  256 validation batches;
* ``desk``: 50 epochs x 250 iterations x batch 16 (200k tasks),
  32 validation batches (kept small so a desk run stays a few CPU-hours);
* ``custom``: nothing is filled in, every budget comes from the file.

The preset also picks the learning rate by generator family: 5e-4 for the
synthetic processes, 1e-4 for the predator-prey system.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .models import ModelConfig
from .taskgen import GENERATORS, generator_from_dict
from .training import TrainConfig

__all__ = ["ConfigError", "ExperimentConfig", "load_experiment_config", "resolve_preset"]

SCHEMA_VERSION = 1

PRESETS = {
    "paper": {"epochs": 500, "iters_per_epoch": 1000, "batch_size": 16, "val_batches": 256},
    "desk": {"epochs": 50, "iters_per_epoch": 250, "batch_size": 16, "val_batches": 32},
}


class ConfigError(ValueError):
    """Raised for malformed experiment configurations."""


@dataclass
class ExperimentConfig:
    run_name: str
    output_dir: str
    scale: str
    model: ModelConfig
    generator: object
    train: TrainConfig
    generator_options: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        gen = {"name": self.generator.name}
        gen.update(self.generator_options)
        return {
            "schema_version": SCHEMA_VERSION,
            "run_name": self.run_name,
            "output_dir": self.output_dir,
            "scale": self.scale,
            "model": self.model.to_dict(),
            "generator": gen,
            "train": self.train.to_dict(),
        }


def _check_keys(section: dict, allowed: set, where: str):
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"unknown key {where}.{unknown[0]!r}" if where else
                          f"unknown key {unknown[0]!r}")


def resolve_preset(scale: str, generator_name: str, train_section: dict) -> dict:
    """Fill unset budget fields from the scale preset; file values win."""
    if scale not in ("paper", "desk", "custom"):
        raise ConfigError(f"unknown scale {scale!r}; expected paper, desk or custom")
    resolved = dict(train_section)
    if scale != "custom":
        for k, v in PRESETS[scale].items():
            resolved.setdefault(k, v)
    resolved.setdefault("lr", 1e-4 if generator_name == "lotka_volterra" else 5e-4)
    return resolved


def parse_experiment_config(raw: dict, path: str = "<config>") -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    top_allowed = {"schema_version", "run_name", "output_dir", "scale",
                   "model", "generator", "train"}
    _check_keys(raw, top_allowed, "")
    version = raw.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"{path}: schema_version must be {SCHEMA_VERSION}, got {version!r}")
    for req in ("run_name", "output_dir", "generator"):
        if req not in raw:
            raise ConfigError(f"{path}: missing required key {req!r}")

    scale = raw.get("scale", "desk")
    model_section = dict(raw.get("model", {}))
    model_allowed = {f.name for f in fields(ModelConfig)}
    _check_keys(model_section, model_allowed, "model")
    try:
        model = ModelConfig(**model_section)
    except TypeError as e:
        raise ConfigError(f"{path}: bad model section: {e}") from None
    if model.variant not in ("cnp", "convcnp", "sconvcnp"):
        raise ConfigError(f"{path}: model.variant must be cnp, convcnp or sconvcnp")

    gen_section = dict(raw["generator"])
    gen_name = gen_section.get("name")
    if gen_name not in GENERATORS:
        raise ConfigError(
            f"{path}: generator.name must be one of {sorted(GENERATORS)}, got {gen_name!r}"
        )
    gen_fields = {f.name for f in fields(GENERATORS[gen_name])} | {"name"}
    _check_keys(gen_section, gen_fields, "generator")
    generator = generator_from_dict(gen_section)
    if gen_name == "lotka_volterra" and model.d_y != 2:
        raise ConfigError(f"{path}: the predator-prey generator needs model.d_y = 2")

    train_section = dict(raw.get("train", {}))
    train_allowed = {f.name for f in fields(TrainConfig)}
    _check_keys(train_section, train_allowed, "train")
    resolved = resolve_preset(scale, gen_name, train_section)
    try:
        train = TrainConfig.from_dict(resolved)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: bad train section: {e}") from None

    gen_options = {k: v for k, v in gen_section.items() if k != "name"}
    return ExperimentConfig(
        run_name=str(raw["run_name"]),
        output_dir=str(raw["output_dir"]),
        scale=scale,
        model=model,
        generator=generator,
        train=train,
        generator_options=gen_options,
    )


def load_experiment_config(path, scale_override: str | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        with open(path) as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    if scale_override is not None:
        raw["scale"] = scale_override
        if scale_override in PRESETS and isinstance(raw.get("train"), dict):
            # an explicit override makes the preset authoritative for budgets
            for key in PRESETS[scale_override]:
                raw["train"].pop(key, None)
    return parse_experiment_config(raw, str(path))
