"""Experiment configuration: schema, loading, dotted overrides, hashing."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SyntheticOptions(_Strict):
    num_classes: int = 8
    train_per_class: int = 100
    test_per_class: int = 50
    channels: int = 3
    noise: float = 0.6
    max_shift: int = 2
    seed: int = 0


class DatasetConfig(_Strict):
    kind: Literal["synthetic", "folder", "cifar-archive"] = "synthetic"
    path: Optional[str] = None
    image_size: int = 16
    mean: Optional[list[float]] = None
    std: Optional[list[float]] = None
    # random crop + horizontal flip on plain training images
    augment: Literal["none", "crop_flip"] = "none"
    synthetic: SyntheticOptions = Field(default_factory=SyntheticOptions)


class ProtocolConfig(_Strict):
    total_classes: int = 8
    initial_classes: int = 0
    num_incremental_rounds: int = 2
    # None: use each run's seed as its class-order seed
    class_order_seed: Optional[int] = None

    @model_validator(mode="after")
    def _divisible(self):
        if not 0 <= self.initial_classes < self.total_classes:
            raise ValueError("initial_classes must be in [0, total_classes)")
        if self.num_incremental_rounds < 1:
            raise ValueError("num_incremental_rounds must be >= 1")
        if (self.total_classes - self.initial_classes) % self.num_incremental_rounds:
            raise ValueError("incremental classes not divisible by num_incremental_rounds")
        return self


class BackboneConfig(_Strict):
    arch: Literal["plain", "resnet18"] = "plain"
    channels: list[int] = [16, 32, 64, 128]
    embed_dim: int = 128
    head: Literal["linear", "cosine"] = "linear"


class ScheduleConfig(_Strict):
    epochs: int = 160
    batch_size: int = 128
    weight_decay: float = 5e-4
    momentum: float = 0.9
    lr: float = 0.01
    warmup_epochs: int = 10
    milestones: list[int] = [100, 120]
    gamma: float = 0.1

    @model_validator(mode="after")
    def _check(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if any(m >= self.epochs for m in self.milestones):
            raise ValueError("every milestone must be < epochs")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ValueError("warmup_epochs must be within [0, epochs]")
        return self


class WeightsConfig(_Strict):
    lambda_a: float = Field(0.5, ge=0)
    lambda_u: float = Field(1.0, ge=0)
    lambda_f: float = Field(0.5, ge=0)


class ComponentsConfig(_Strict):
    aikd: bool = True
    uct: bool = True
    finetune: bool = False
    feature_distill: bool = True


class DistillConfig(_Strict):
    kind: Literal["pod", "mse"] = "pod"
    # integrated: AIM fusion; layer_to_layer: plain block-wise distillation
    mode: Literal["integrated", "layer_to_layer"] = "integrated"


class AimConfig(_Strict):
    variant: Literal["block_wise_maps", "channel_wise_maps", "block_wise_weights", "none"] = "block_wise_maps"
    count_k: Optional[int] = None
    stop_gradient_target: bool = False


class UncertaintyConfig(_Strict):
    kind: Literal["kl", "cross_entropy"] = "kl"
    temperature: float = Field(1.0, gt=0)


class CutmixConfig(_Strict):
    enabled: bool = True
    alpha: float = Field(1.0, gt=0)
    tau: float = Field(0.6, ge=0, le=1)


class MemoryConfig(_Strict):
    policy: Literal["fixed_total", "per_class"] = "fixed_total"
    budget: int = Field(2000, ge=1)
    per_class: int = Field(20, ge=1)


class FinetuneConfig(_Strict):
    epochs: int = 20
    lr: float = 0.01
    batch_size: int = 128


class TrainerConfig(_Strict):
    seeds: list[int] = [0, 1, 2, 3, 4]
    num_threads: int = 1
    log_every: int = 0
    device: str = "cpu"


class ExperimentConfig(_Strict):
    name: str = "experiment"
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    protocol: ProtocolConfig = Field(default_factory=ProtocolConfig)
    backbone: BackboneConfig = Field(default_factory=BackboneConfig)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    weights: WeightsConfig = Field(default_factory=WeightsConfig)
    components: ComponentsConfig = Field(default_factory=ComponentsConfig)
    distill: DistillConfig = Field(default_factory=DistillConfig)
    aim: AimConfig = Field(default_factory=AimConfig)
    uncertainty: UncertaintyConfig = Field(default_factory=UncertaintyConfig)
    cutmix: CutmixConfig = Field(default_factory=CutmixConfig)
    memory: MemoryConfig = Field(default_factory=MemoryConfig)
    finetune: FinetuneConfig = Field(default_factory=FinetuneConfig)
    trainer: TrainerConfig = Field(default_factory=TrainerConfig)
    output_dir: str = "runs/experiment"

    @model_validator(mode="after")
    def _cross_checks(self):
        n_blocks = len(self.backbone.channels)
        k = self.aim.count_k
        if k is not None and not 1 <= k <= n_blocks:
            raise ValueError(f"aim.count_k must be in [1, {n_blocks}]")
        if self.dataset.image_size < 2 ** n_blocks:
            raise ValueError("dataset.image_size too small for the number of blocks")
        if self.dataset.kind == "synthetic" and self.dataset.synthetic.num_classes != self.protocol.total_classes:
            raise ValueError("protocol.total_classes must equal dataset.synthetic.num_classes")
        if not self.trainer.seeds:
            raise ValueError("trainer.seeds must not be empty")
        return self


class ConfigValidationError(ValueError):
    """Carries every problem found, one string per error."""

    def __init__(self, errors: list[str]):
        self.errors = errors
        super().__init__("; ".join(errors))


def _format_errors(err: ValidationError) -> list[str]:
    out = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        out.append(f"{loc}: {e['msg']}")
    return out


def validate(data: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data or {})
    except ValidationError as err:
        raise ConfigValidationError(_format_errors(err)) from None


def parse_override(item: str) -> tuple[list[str], Any]:
    if "=" not in item:
        raise ConfigValidationError([f"override {item!r} is not key=value"])
    key, raw = item.split("=", 1)
    return key.strip().split("."), yaml.safe_load(raw)


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    data = json.loads(json.dumps(data or {}))
    for item in overrides:
        path, value = parse_override(item)
        node = data
        for p in path[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigValidationError([f"override {item!r} descends into a non-table"])
        node[path[-1]] = value
    return data


def load_config(path: str | Path, overrides: list[str] | None = None) -> ExperimentConfig:
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ConfigValidationError([f"{path}: top level must be a mapping"])
    return validate(apply_overrides(data, overrides or []))


def config_hash(cfg: ExperimentConfig) -> str:
    """Git-style SHA-1 of the canonical config, ignoring where outputs go."""
    d = cfg.model_dump(mode="json")
    d.pop("output_dir", None)
    blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha1(b"blob %d\0" % len(blob) + blob).hexdigest()


def dump_config(cfg: ExperimentConfig, path: str | Path):
    Path(path).write_text(yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False))
