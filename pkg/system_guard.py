"""
System Guard - configuration contract for fleets and experiments.

Every JSON config that reaches a tool passes through here first. Validation
failures surface as ConfigError with field paths, e.g.
    fleet.legit.0.count: Input should be greater than or equal to 1
"""

import hashlib
import json
import os
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from tools.errors import PufAuthError

BASE_DIR = os.path.dirname(os.path.abspath(__file__))
DEFAULT_FLEET_PATH = os.path.join(BASE_DIR, "data", "fleet_default.json")
DEFAULT_EXPERIMENT_PATH = os.path.join(BASE_DIR, "data", "experiment_default.json")

# Fibonacci taps (1-based, MSB-first) for maximal-length sequences
MAXIMAL_TAPS = {
    4: [4, 3],
    8: [8, 6, 5, 4],
    16: [16, 14, 13, 11],
    20: [20, 17],
    24: [24, 23, 22, 17],
    32: [32, 22, 2, 1],
}

FULL_CLOSED_SET = {"epochs": 10, "lr": 1e-4, "weight_decay": 1e-3, "batch_size": 32}
FULL_GAN = {"epochs": 50, "batch_size": 256, "lr_g": 3e-4, "lr_d": 1.2e-4, "weight_decay": 1e-3, "n_g": 256, "n_d": 256}


class ConfigError(PufAuthError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


def _format_errors(exc: ValidationError) -> List[str]:
    lines = []
    for err in exc.errors():
        path = ".".join(str(p) for p in err.get("loc", ())) or "<root>"
        lines.append(f"{path}: {err.get('msg', 'invalid')}")
    return lines


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


# ============================================================================
# FLEET
# ============================================================================

class FleetGroup(_Strict):
    kind: Literal["arbiter", "sram", "dram"]
    count: int = Field(ge=1)
    start_id: Optional[int] = Field(default=None, ge=0)

    # arbiter
    stages: int = Field(default=32, ge=2)
    flip_rate: float = Field(default=0.05, ge=0.0, lt=0.5)
    noise_sigma: Optional[float] = Field(default=None, ge=0.0)

    # memory (sram / dram)
    rows: int = Field(default=220, ge=1)
    cols: int = Field(default=200, ge=1)
    stable_weight: float = Field(default=0.95, ge=0.0, le=1.0)
    beta_sharpness: float = Field(default=20.0, gt=0.0)
    leaky_fraction: float = Field(default=0.2, ge=0.0, le=1.0)
    stress_flip: Tuple[float, float] = (0.0, 0.0)

    @field_validator("stress_flip")
    @classmethod
    def _stress_range(cls, value):
        lo, hi = value
        if not (0.0 <= lo <= hi < 0.5):
            raise ValueError("stress_flip must satisfy 0 <= lo <= hi < 0.5")
        return value

    @property
    def cell_count(self) -> int:
        return self.rows * self.cols


class FleetConfig(_Strict):
    master_seed: int = 2024
    lfsr_width: int = Field(default=32, ge=2, le=64)
    lfsr_taps: Optional[List[int]] = None
    legit: List[FleetGroup] = Field(min_length=1)
    impostors: List[FleetGroup] = []

    @model_validator(mode="after")
    def _check_fleet(self):
        if self.lfsr_taps is None:
            if self.lfsr_width not in MAXIMAL_TAPS:
                raise ValueError(f"no default taps for lfsr_width {self.lfsr_width}; set lfsr_taps")
            self.lfsr_taps = list(MAXIMAL_TAPS[self.lfsr_width])
        if not self.lfsr_taps or any(t < 1 or t > self.lfsr_width for t in self.lfsr_taps):
            raise ValueError("lfsr_taps must be positions in 1..lfsr_width")
        if self.lfsr_width not in self.lfsr_taps:
            raise ValueError("lfsr_taps must include the output position lfsr_width")

        for group in self.legit + self.impostors:
            if group.kind == "arbiter" and group.stages != self.lfsr_width:
                raise ValueError(f"arbiter stages ({group.stages}) must equal lfsr_width ({self.lfsr_width})")

        # Assign sequential ids where start_id is omitted, then check disjointness
        next_id = 0
        seen = {}
        for role, groups in (("legit", self.legit), ("impostors", self.impostors)):
            for i, group in enumerate(groups):
                if group.start_id is None:
                    group.start_id = next_id
                for device_id in range(group.start_id, group.start_id + group.count):
                    if device_id in seen:
                        raise ValueError(f"{role}.{i}: device id {device_id} already used by {seen[device_id]}")
                    seen[device_id] = f"{role}.{i}"
                next_id = max(next_id, group.start_id + group.count)
        return self

    def device_ids(self, role: str) -> List[int]:
        groups = self.legit if role == "legit" else self.impostors
        return [d for g in groups for d in range(g.start_id, g.start_id + g.count)]


# ============================================================================
# HYPERPARAMETERS
# ============================================================================

class ClosedSetParams(_Strict):
    epochs: int = Field(default=12, ge=1)
    lr: float = Field(default=1e-3, gt=0.0)
    weight_decay: float = Field(default=1e-3, ge=0.0)
    batch_size: int = Field(default=16, ge=1)
    feature_dim: int = Field(default=64, ge=2)
    pool_grid: int = Field(default=4, ge=1)


class GanParams(_Strict):
    epochs: int = Field(default=50, ge=1)
    batch_size: int = Field(default=256, ge=1)
    lr_g: float = Field(default=3e-4, gt=0.0)
    lr_d: float = Field(default=1.2e-4, gt=0.0)
    weight_decay: float = Field(default=1e-3, ge=0.0)
    betas: Tuple[float, float] = (0.9, 0.999)
    z_dim: int = Field(default=100, ge=1)
    n_g: int = Field(default=256, ge=1)
    n_d: int = Field(default=256, ge=1)
    lambda_g: float = Field(default=1.0, ge=0.0)
    real_label: float = Field(default=0.95, gt=0.0, le=1.0)
    fake_label: float = Field(default=0.05, ge=0.0, lt=1.0)


# ============================================================================
# EXPERIMENT
# ============================================================================

class ExperimentConfig(_Strict):
    name: str = "desk"
    profile: Literal["desk", "full"] = "desk"
    fleet: FleetConfig
    image_width: int = Field(default=50, ge=1, le=65535)
    image_height: int = Field(default=50, ge=1, le=65535)
    images_per_device: int = Field(default=60, ge=5)
    split_ratio: Tuple[int, int, int] = (3, 1, 1)
    impostor_val_fraction: float = Field(default=0.5, gt=0.0, lt=1.0)
    open_set: bool = True
    crop_offset: Tuple[int, int] = (0, 0)
    crop_mode: Literal["flatten", "rect"] = "flatten"
    norm_mean: Tuple[float, float, float] = (0.5, 0.5, 0.5)
    norm_std: Tuple[float, float, float] = (0.5, 0.5, 0.5)
    closed_set: ClosedSetParams = Field(default_factory=ClosedSetParams)
    gan: GanParams = Field(default_factory=GanParams)
    threshold_rule: Literal["f1", "eer"] = "f1"
    repeats: int = Field(default=5, ge=1)
    parallel_seeds: int = Field(default=1, ge=1)

    @model_validator(mode="before")
    @classmethod
    def _apply_profile(cls, data):
        if isinstance(data, dict) and data.get("profile") == "full":
            data = dict(data)
            data["closed_set"] = {**FULL_CLOSED_SET, **(data.get("closed_set") or {})}
            data["gan"] = {**FULL_GAN, **(data.get("gan") or {})}
        return data

    @model_validator(mode="after")
    def _check_experiment(self):
        if any(r < 1 for r in self.split_ratio):
            raise ValueError("split_ratio entries must be >= 1")
        if min(self.norm_std) <= 0:
            raise ValueError("norm_std components must be > 0")
        bits_needed = 8 * self.image_width * self.image_height
        row, col = self.crop_offset
        for group in self.fleet.legit + self.fleet.impostors:
            if group.kind == "arbiter":
                continue
            if self.crop_mode == "rect":
                if row + self.image_height > group.rows or col + 8 * self.image_width > group.cols:
                    raise ValueError(
                        f"rect crop {self.image_height}x{8 * self.image_width} bits at {self.crop_offset} "
                        f"exceeds {group.kind} array {group.rows}x{group.cols}"
                    )
                continue
            start = row * group.cols + col
            if start + bits_needed > group.cell_count:
                raise ValueError(
                    f"image {self.image_width}x{self.image_height} needs {bits_needed} bits at offset "
                    f"{self.crop_offset}, {group.kind} array {group.rows}x{group.cols} holds {group.cell_count}"
                )
        if self.open_set and sum(g.count for g in self.fleet.impostors) < 2:
            raise ValueError("open_set needs at least 2 impostor devices (validation and test)")
        if len(self.fleet.device_ids("legit")) < 2:
            raise ValueError("at least 2 legitimate devices are required (K >= 2)")
        return self

    @property
    def seeds(self) -> List[int]:
        return [self.fleet.master_seed + i for i in range(self.repeats)]

    def config_hash(self) -> str:
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


ABLATION_AXES = ("image_size", "n_d", "device_count")


# ============================================================================
# LOADERS
# ============================================================================

def _read_json(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        raise ConfigError([f"<file>: {path} not found"])
    except json.JSONDecodeError as e:
        raise ConfigError([f"<file>: {path} is not valid JSON ({e})"])


def validate_fleet_config(data) -> FleetConfig:
    if isinstance(data, FleetConfig):
        return data
    try:
        return FleetConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(_format_errors(e))


def validate_experiment_config(data) -> ExperimentConfig:
    if isinstance(data, ExperimentConfig):
        return data
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(_format_errors(e))


def load_fleet_config(path: Optional[str] = None) -> FleetConfig:
    return validate_fleet_config(_read_json(path or DEFAULT_FLEET_PATH))


def load_experiment_config(path: Optional[str] = None, overrides: Optional[dict] = None) -> ExperimentConfig:
    path = path or DEFAULT_EXPERIMENT_PATH
    data = _read_json(path)
    # "fleet" may name a fleet file relative to the experiment file
    if isinstance(data.get("fleet"), str):
        data["fleet"] = _read_json(os.path.join(os.path.dirname(os.path.abspath(path)), data["fleet"]))
    if overrides:
        data = deep_merge(data, overrides)
    return validate_experiment_config(data)


def deep_merge(base: dict, overrides: dict) -> dict:
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged
