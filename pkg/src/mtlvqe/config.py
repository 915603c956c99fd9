"""Declarative run configuration: one YAML file plus dotted-key overrides."""

from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .data.degrade import PLACEHOLDERS, DegraderSpec
from .model import NetworkConfig
from .training import PAPER_QPS, TABLE1_ARMS, AblationArm, OptimizerConfig, ScheduleConfig, TrainConfig


class ConfigError(ValueError):
    """Every problem found in a config, reported together."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid config:\n  " + "\n  ".join(problems))


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


def _network_problems(n: "Network") -> list[str]:
    try:
        NetworkConfig.from_dict(n.model_dump())
    except ValueError as exc:
        return str(exc).removeprefix("invalid NetworkConfig: ").split("; ")
    return []


class Paths(_Section):
    hr_dir: Optional[str] = None          # source images for `prepare`
    data_dir: str = "data"                # prepared dataset, holds manifest.csv
    pretrain_data_dir: Optional[str] = None  # uncompressed dataset for `pretrain` (defaults to data_dir)
    run_dir: str = "runs/default"
    pretrained: Optional[str] = None      # SR pretraining checkpoint for fine-tuned arms
    checkpoint: Optional[str] = None      # model under test for `eval` / `inspect`
    qe_checkpoint: Optional[str] = None   # first stage of a sequential pair for `eval`


class Network(_Section):
    num_blocks: int = 8
    trunk_width: int = 256
    kernel_size: int = 3
    scale_factor: int = 2
    in_channels: int = 4
    out_channels: int = 3
    heads: list[str] = ["SR", "QE"]
    alpha: float = 0.9
    init_seed: int = 0

    @model_validator(mode="after")
    def _architecture(self):
        problems = _network_problems(self)
        if problems:
            raise ValueError("; ".join(problems))
        return self


class Optimizer(_Section):
    lr0: float = Field(1e-4, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    epsilon: float = Field(1e-8, gt=0)
    batch_size: int = Field(8, ge=1)


class Schedule(_Section):
    gamma: float = Field(0.5, gt=0, le=1)
    step_epochs: int = Field(75, ge=1)
    total_epochs: int = Field(250, ge=1)
    epoch_multiplier: int = Field(1, ge=1)


class Train(_Section):
    patch_size: int = Field(64, ge=1)
    patches_per_image: int = Field(1, ge=1)
    validation: bool = True  # score the val split after every epoch
    max_val_images: Optional[int] = Field(None, ge=1)


class Arm(_Section):
    name: str = ""
    multi_qp: bool = True
    use_qp_map: bool = True
    fine_tune: bool = True
    qps: Optional[list[int]] = None   # defaults to degrader.qps


class Degrader(_Section):
    kind: Literal["null", "synthetic", "external_codec"] = "synthetic"
    qps: list[int] = list(PAPER_QPS)
    command_template: str = ""
    block_size: int = Field(8, ge=1)
    workers: int = Field(1, ge=1)
    val_fraction: float = Field(0.0, ge=0, le=1)
    test_fraction: float = Field(0.0, ge=0, le=1)
    val_names: list[str] = []
    test_names: list[str] = []

    @model_validator(mode="after")
    def _template(self):
        if self.kind == "external_codec":
            missing = [p for p in PLACEHOLDERS if p not in self.command_template]
            if missing:
                raise ValueError(f"command_template lacks placeholders {missing}")
        return self

    @field_validator("kind", mode="before")
    @classmethod
    def _yaml_null(cls, v):
        # `kind: null` reads back from YAML as None
        return "null" if v is None else v

    @field_validator("qps")
    @classmethod
    def _qp_range(cls, v):
        bad = [q for q in v if not 0 <= q <= 63]
        if bad:
            raise ValueError(f"QPs must lie in [0, 63], got {bad}")
        if not v:
            raise ValueError("at least one QP is required")
        return v


class Evaluation(_Section):
    split: str = "test"
    dataset: str = ""
    ssim: bool = True
    format: Literal["table-text", "csv"] = "table-text"
    mode: Literal["joint", "sequential"] = "joint"
    use_qp_map: bool = True


class Inspect(_Section):
    layers: list[str] = ["conv_in", "rb_4", "conv_17"]
    images: list[str] = []   # decoded LR images; empty = first `count` entries of the eval split
    count: int = Field(1, ge=1)
    qp: Optional[int] = Field(None, ge=0, le=63)


class BDRate(_Section):
    measurements: Optional[str] = None   # CSV: dataset,sequence,method,qp,rate,<metric columns>
    test: str = "test"
    reference: str = "reference"
    anchor: Optional[str] = "anchor"


class RunConfig(_Section):
    seed: int = 0
    paths: Paths = Field(default_factory=Paths)
    network: Network = Field(default_factory=Network)
    optimizer: Optimizer = Field(default_factory=Optimizer)
    schedule: Schedule = Field(default_factory=Schedule)
    train: Train = Field(default_factory=Train)
    arm: Arm = Field(default_factory=Arm)
    arms: Optional[list[Arm]] = None     # `ablate`; defaults to the four table arms
    degrader: Degrader = Field(default_factory=Degrader)
    eval: Evaluation = Field(default_factory=Evaluation)
    inspect: Inspect = Field(default_factory=Inspect)
    bdrate: BDRate = Field(default_factory=BDRate)

    # --- conversion into library objects ---

    def network_config(self) -> NetworkConfig:
        return NetworkConfig.from_dict(self.network.model_dump())

    def optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(**self.optimizer.model_dump())

    def schedule_config(self) -> ScheduleConfig:
        return ScheduleConfig(**self.schedule.model_dump())

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(t.patch_size, t.patches_per_image, self.seed, t.validation, t.max_val_images)

    def degrader_spec(self) -> DegraderSpec:
        d = self.degrader
        return DegraderSpec(d.kind, 0, d.command_template, d.block_size)

    def to_arm(self, arm: Arm) -> AblationArm:
        qps = tuple(arm.qps) if arm.qps is not None else tuple(self.degrader.qps)
        return AblationArm(arm.multi_qp, arm.use_qp_map, arm.fine_tune, qps, arm.name)

    def ablation_arms(self) -> list[AblationArm]:
        if self.arms is not None:
            return [self.to_arm(a) for a in self.arms]
        qps = tuple(self.degrader.qps)
        return [AblationArm(a.multi_qp, a.use_qp_map, a.fine_tune, qps, a.name) for a in TABLE1_ARMS]

    def problems(self) -> list[str]:
        """Cross-field checks that single-field validation cannot see."""
        out = []
        arms = [("arm", self.arm)] + [(f"arms[{i}]", a) for i, a in enumerate(self.arms or [])]
        for where, a in arms:
            if a.qps is not None:
                extra = sorted(set(a.qps) - set(self.degrader.qps))
                if extra:
                    out.append(f"{where}.qps: {extra} not among degrader.qps {self.degrader.qps}")
        if self.arms is not None:
            names = [self.to_arm(a).label for a in self.arms]
            dupes = sorted({n for n in names if names.count(n) > 1})
            if dupes:
                out.append(f"arms: duplicate arm names {dupes}")
        return out


def _format_errors(exc: ValidationError) -> list[str]:
    out = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        msg = err["msg"].removeprefix("Value error, ")
        if err["type"] == "extra_forbidden":
            msg = "unknown key"
        out.append(f"{loc}: {msg}")
    return out


def parse_override(text: str) -> tuple[list[str], object]:
    key, sep, raw = text.partition("=")
    if not sep or not key.strip():
        raise ConfigError([f"override {text!r} is not of the form key.path=value"])
    return key.strip().split("."), yaml.safe_load(raw) if raw.strip() else None


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    for text in overrides:
        path, value = parse_override(text)
        node = data
        for k in path[:-1]:
            child = node.get(k)
            if not isinstance(child, dict):
                child = {}
                node[k] = child
            node = child
        node[path[-1]] = value
    return data


def load_config(path: str | Path | None = None, overrides: list[str] = ()) -> RunConfig:
    """Read, override and validate; raises ConfigError listing every violation."""
    data: dict = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError([f"config file not found: {path}"])
        loaded = yaml.safe_load(path.read_text(encoding="utf-8"))
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigError([f"{path}: top level must be a mapping"])
        data = loaded or {}
    data = apply_overrides(data, list(overrides))
    try:
        cfg = RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None
    problems = cfg.problems()
    if problems:
        raise ConfigError(problems)
    return cfg


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=True, default_flow_style=False)

