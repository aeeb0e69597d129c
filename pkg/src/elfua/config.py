"""Dataclass configs and TOML loading.

Precedence when building a run config: CLI flags > config file > defaults.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import tomli


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    backbone_depth: str = "full"  # "full" | "tiny"
    embed_hidden: int = 256
    embed_out: int = 128
    M: int = 31
    grid: int = 4
    image_size: int = 224
    in_channels: int = 3
    # Name prefixes of the adaptable parameters. None selects the final
    # backbone stage plus the embedding, gaze and permutation heads.
    adaptable_scope: Optional[tuple[str, ...]] = None
    taps: tuple[str, ...] = ("embedding", "gaze_output")
    # Stop-gradient between the embedding and the permutation head.
    detach_pretext_head: bool = False
    dtype: str = "float32"

    def validate(self) -> "ModelConfig":
        if self.backbone_depth not in ("full", "tiny"):
            raise ConfigError(f"backbone_depth must be 'full' or 'tiny', got {self.backbone_depth!r}")
        for name in ("embed_hidden", "embed_out", "M", "grid", "image_size", "in_channels"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.image_size % self.grid:
            raise ConfigError(f"image_size {self.image_size} not divisible by grid {self.grid}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if not self.taps:
            raise ConfigError("at least one feature tap is required")
        return self


@dataclass(frozen=True)
class TrainConfig:
    total_outer_steps: int
    alpha: float = 1e-2
    beta: float = 1e-4
    gamma: float = 0.1
    inner_steps: int = 3
    shots: int = 5
    query_size: int = 5
    n_tasks: int = 10
    source_batch: int = 32
    second_order: bool = False
    pretext_include_original: bool = True
    checkpoint_every: int = 100
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.alpha <= 0:
            raise ConfigError(f"alpha must be > 0, got {self.alpha}")
        if self.beta < 0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")
        if self.gamma < 0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        if self.inner_steps < 1:
            raise ConfigError(f"inner_steps (G) must be >= 1, got {self.inner_steps}")
        for name in ("shots", "query_size", "n_tasks", "source_batch"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.total_outer_steps < 0:
            raise ConfigError(f"total_outer_steps must be >= 0, got {self.total_outer_steps}")
        return self


@dataclass(frozen=True)
class KernelSpec:
    """Gaussian kernel family for the joint MMD.

    Either fixed ``bandwidths`` or a median-heuristic base bandwidth scaled by
    ``multipliers``; the per-tap kernel is the mean over the resulting widths.
    """

    family: str = "gaussian"
    bandwidths: Optional[tuple[float, ...]] = None
    multipliers: tuple[float, ...] = (0.5, 1.0, 2.0)

    def __post_init__(self):
        if self.family != "gaussian":
            raise ConfigError(f"unsupported kernel family {self.family!r}")
        if self.bandwidths is not None:
            if not self.bandwidths or any(b <= 0 for b in self.bandwidths):
                raise ConfigError("bandwidths must be a non-empty list of positive reals")
        elif not self.multipliers or any(m <= 0 for m in self.multipliers):
            raise ConfigError("multipliers must be a non-empty list of positive reals")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(total_outer_steps=0))
    kernel: KernelSpec = field(default_factory=KernelSpec)

    def to_dict(self) -> dict[str, Any]:
        return {
            "model": dataclasses.asdict(self.model),
            "train": dataclasses.asdict(self.train),
            "kernel": dataclasses.asdict(self.kernel),
        }


def _coerce(cls, values: dict[str, Any]):
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    out = {}
    for k, v in values.items():
        out[k] = tuple(v) if isinstance(v, list) else v
    return out


def build_run_config(
    file_values: Optional[dict[str, Any]] = None,
    overrides: Optional[dict[str, dict[str, Any]]] = None,
) -> RunConfig:
    """Merge defaults, file values and CLI overrides (highest precedence)."""
    merged: dict[str, dict[str, Any]] = {"model": {}, "train": {}, "kernel": {}}
    for src in (file_values or {}, overrides or {}):
        for section, values in src.items():
            if section not in merged:
                raise ConfigError(f"unknown config section [{section}]")
            merged[section].update({k: v for k, v in values.items() if v is not None})
    train_vals = _coerce(TrainConfig, merged["train"])
    train_vals.setdefault("total_outer_steps", 0)
    seed_env = os.environ.get("ELFUA_SEED")
    if seed_env is not None:
        train_vals["seed"] = int(seed_env)
    return RunConfig(
        model=ModelConfig(**_coerce(ModelConfig, merged["model"])).validate(),
        train=TrainConfig(**train_vals).validate(),
        kernel=KernelSpec(**_coerce(KernelSpec, merged["kernel"])),
    )


def load_config(path: str | Path, overrides: Optional[dict[str, dict[str, Any]]] = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    with open(path, "rb") as fh:
        values = tomli.load(fh)
    return build_run_config(values, overrides)


def tiny_model_config(**kw) -> ModelConfig:
    """Desk-scale model: tiny backbone on 32x32 inputs."""
    base = dict(backbone_depth="tiny", image_size=32)
    base.update(kw)
    return ModelConfig(**base).validate()
