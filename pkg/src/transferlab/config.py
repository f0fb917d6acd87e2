"""Experiment configuration: a YAML file validated against a strict schema."""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .attacks import TABLE1, AttackConfig
from .compression import FixedPointFormat, PruneConfig
from .data import DATA_ENV, MNIST_FILES, find_file
from .model import Architecture, lenet5, parse_architecture
from .trainer import TrainConfig

__all__ = ["ConfigError", "ExperimentConfig", "load_config", "DEFAULT_DENSITIES", "DEFAULT_BITWIDTHS"]

DEFAULT_DENSITIES = [1.0, 0.9, 0.7, 0.5, 0.3, 0.1, 0.05, 0.02]
DEFAULT_BITWIDTHS = [32, 16, 8, 4]


class ConfigError(ValueError):
    """Invalid configuration or unresolvable path; ``path`` names the offender when there is one."""

    def __init__(self, message: str, path: str | os.PathLike | None = None):
        super().__init__(message)
        self.path = None if path is None else str(path)


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DataSection(_Strict):
    root: Path | None = None  # falls back to $TRANSFERLAB_DATA
    pad: int = Field(0, ge=0)
    attack_subset: int = Field(1000, ge=1)
    cdf_images: int = Field(10, ge=1)


class TrainSection(_Strict):
    epochs: int = Field(10, ge=0)
    base_lr: float = Field(0.01, gt=0)
    decay_points: list[int] = [5, 7, 9]
    decay_factor: float = Field(10.0, gt=1)
    batch_size: int = Field(64, ge=1)
    momentum: float = Field(0.9, ge=0, lt=1)
    max_grad_norm: float | None = Field(None, gt=0)  # null disables gradient clipping

    def build(self, seed: int) -> TrainConfig:
        return TrainConfig(seed=seed, **self.model_dump())


class FineTuneSection(TrainSection):
    epochs: int = Field(3, ge=0)
    decay_points: list[int] = [1, 2]
    # sparse DNS fine-tuning diverges without it (density 0.05 blew up at step 250)
    max_grad_norm: float | None = Field(5.0, gt=0)


class PruneSection(_Strict):
    mode: Literal["dns", "one_shot"] = "dns"
    densities: list[float] = Field(default_factory=lambda: list(DEFAULT_DENSITIES), min_length=1)
    dns_margin: float = Field(0.1, ge=0)
    reeval_period: int | None = Field(30, ge=1)  # null re-evaluates once per epoch
    fine_tune: FineTuneSection = FineTuneSection()

    @field_validator("densities")
    @classmethod
    def _densities(cls, v):
        for d in v:
            if not 0 < d <= 1:
                raise ValueError(f"density {d} outside (0, 1]")
        if len(set(v)) != len(v):
            raise ValueError("duplicate densities")
        return v

    def build(self, density: float, seed: int) -> PruneConfig:
        return PruneConfig(density, self.mode, self.dns_margin, self.reeval_period, self.fine_tune.build(seed))


class QuantiseSection(_Strict):
    bitwidths: list[int] = Field(default_factory=lambda: list(DEFAULT_BITWIDTHS), min_length=1)
    integer_bits: dict[int, int] = {}  # per-bitwidth override of the default rule
    activations: bool = True
    fine_tune: FineTuneSection = FineTuneSection()

    @field_validator("bitwidths")
    @classmethod
    def _bitwidths(cls, v):
        if any(b < 2 or b > 32 for b in v):
            raise ValueError(f"bitwidths must lie in [2, 32], got {v}")
        if len(set(v)) != len(v):
            raise ValueError("duplicate bitwidths")
        return v

    def format(self, bitwidth: int) -> FixedPointFormat:
        if bitwidth in self.integer_bits:
            return FixedPointFormat(bitwidth, self.integer_bits[bitwidth])
        return FixedPointFormat.for_bitwidth(bitwidth)


class AttackSection(_Strict):
    method: Literal["fgm", "fgsm", "ifgm", "ifgsm", "deepfool"]
    epsilon: float | None = Field(None, ge=0)
    iterations: int | None = Field(None, ge=1)
    clip_reference: Literal["previous", "original"] = "previous"

    def build(self, network: str) -> AttackConfig:
        eps, iters = TABLE1.get(network, {}).get(self.method, (None, 1))
        eps = self.epsilon if self.epsilon is not None else eps
        if eps is None:
            raise ConfigError(f"attack {self.method} has no default epsilon for {network}; set one")
        iters = self.iterations if self.iterations is not None else iters
        return AttackConfig(self.method, eps, iters, clip_reference=self.clip_reference)


class ExperimentConfig(_Strict):
    seed: int = Field(0, ge=0)
    output_dir: Path = Path("runs/lenet5")
    architecture: str = "lenet5"  # builtin name or path to an architecture file
    network: Literal["lenet5", "cifarnet"] = "lenet5"  # which row of attack defaults applies
    workers: int = Field(1, ge=1)
    data: DataSection = DataSection()
    train: TrainSection = TrainSection()
    prune: PruneSection = PruneSection()
    quantise: QuantiseSection = QuantiseSection()
    attacks: list[AttackSection] = Field(
        default_factory=lambda: [AttackSection(method=m) for m in ("ifgsm", "ifgm", "deepfool")]
    )

    # ---------------------------------------------------------------- builders

    def data_root(self) -> Path:
        if self.data.root is not None:
            return self.data.root
        env = os.environ.get(DATA_ENV)
        if not env:
            raise ConfigError(f"no data root configured and ${DATA_ENV} is unset", "data.root")
        return Path(env)

    def build_architecture(self) -> Architecture:
        if self.architecture == "lenet5":
            return lenet5(28 + 2 * self.data.pad)
        path = Path(self.architecture)
        if not path.is_file():
            raise ConfigError(f"architecture file not found: {path}", path)
        try:
            return parse_architecture(path.read_text())
        except ValueError as exc:
            raise ConfigError(f"{path}: {exc}", path) from exc

    def train_config(self) -> TrainConfig:
        return self.train.build(self.seed)

    def attack_configs(self) -> list[AttackConfig]:
        if not self.attacks:
            raise ConfigError("no attacks configured")
        return [a.build(self.network) for a in self.attacks]

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True)

    def with_overrides(self, **scalars) -> ExperimentConfig:
        """Copy with top-level or dotted (``train.epochs``) scalars replaced; ``None`` values are ignored."""
        raw = self.model_dump(mode="json")
        for key, value in scalars.items():
            if value is None:
                continue
            *parents, leaf = key.split(".")
            node = raw
            for p in parents:
                node = node[p]
            if leaf not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[leaf] = value
        return _parse(raw)

    # -------------------------------------------------------------- validation

    def validate_paths(self) -> None:
        """Raise :class:`ConfigError` naming the first referenced path that does not resolve."""
        root = self.data_root()
        if not root.is_dir():
            raise ConfigError(f"data root not found: {root}", root)
        for split in ("train", "test"):
            for stem in MNIST_FILES[split]:
                try:
                    find_file(root, stem)
                except FileNotFoundError as exc:
                    raise ConfigError(str(exc), root / stem) from exc
        self.build_architecture()
        self.attack_configs()


def _parse(raw) -> ExperimentConfig:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping at the top level")
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        first = exc.errors()[0]
        where = ".".join(str(p) for p in first["loc"])
        raise ConfigError(f"{where}: {first['msg']}") from exc


def load_config(path=None) -> ExperimentConfig:
    """Parse a YAML experiment file; ``None`` gives the defaults."""
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}", path)
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}", path) from exc
    return _parse(raw)
