import json
import os
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from app.errors import ConfigError
from app.utils.text import sha256_json
from mixseg.env_loader import load_env_robust

load_env_robust()

# =========================================================
# RUNTIME (process env)
# =========================================================

LOG_LEVEL = os.getenv("MIXSEG_LOG_LEVEL", "INFO").strip().upper() or "INFO"
DEVICE = os.getenv("MIXSEG_DEVICE", "cpu").strip() or "cpu"
NUM_WORKERS = int(os.getenv("MIXSEG_NUM_WORKERS", "0"))
SHOW_PROGRESS = os.getenv("MIXSEG_PROGRESS", "True").lower() == "true"
DATA_ROOT = os.getenv("MIXSEG_DATA_ROOT", "data/cases").strip() or "data/cases"

# HU window applied before normalization
HU_MIN = -200
HU_MAX = 250

# =========================================================
# CONFIG MODELS
# =========================================================


class _Frozen(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class AttentionVariant(str, Enum):
    NONE = "none"                    # plain U-Net, boxes ignored
    MULTICHANNEL = "multichannel"    # one gate from concatenated organ+lesion masks
    SHORTCUT_ONLY = "shortcut_only"  # box features added, no sigmoid weighting
    NO_SHORTCUT = "no_shortcut"      # f * sigma(conv(b)) per stage
    O2L = "o2l"                      # full organ-to-lesion residual attention


class UNetConfig(_Frozen):
    scales: int = 4
    base_channels: int = 32
    in_channels: int = 3
    out_classes: int = 3
    norm: bool = True

    @field_validator("scales")
    @classmethod
    def _scales_range(cls, v: int) -> int:
        if not 2 <= v <= 6:
            raise ValueError(f"scales must be in [2, 6], got {v}")
        return v

    @field_validator("base_channels")
    @classmethod
    def _positive_channels(cls, v: int) -> int:
        if v < 1:
            raise ValueError(f"base_channels must be positive, got {v}")
        return v

    def channels(self, j: int) -> int:
        """Channel count at scale j (1-based)."""
        return self.base_channels * 2 ** (j - 1)


class AugmentConfig(_Frozen):
    enabled: bool = True
    scale_range: Tuple[float, float] = (0.8, 1.2)
    flip_prob: float = 0.5


class PerturbConfig(_Frozen):
    enabled: bool = False
    organ_scale: Tuple[float, float] = (0.95, 1.1)
    organ_shift: float = 1 / 20
    lesion_scale: Tuple[float, float] = (0.9, 1.2)
    lesion_shift: float = 1 / 10

    @classmethod
    def zero(cls) -> "PerturbConfig":
        """Identity draws: scale exactly 1, shift exactly 0."""
        return cls(enabled=True, organ_scale=(1.0, 1.0), organ_shift=0.0,
                   lesion_scale=(1.0, 1.0), lesion_shift=0.0)


class PhantomConfig(_Frozen):
    shape: Tuple[int, int, int] = (12, 64, 64)
    spacing_mm: Tuple[float, float, float] = (2.5, 0.8, 0.8)
    organ_radius_frac: Tuple[float, float] = (0.22, 0.34)   # in-plane semi-axes / H,W
    organ_depth_frac: Tuple[float, float] = (0.35, 0.5)     # z semi-axis / D
    lesion_count: Tuple[int, int] = (0, 3)
    lesion_radius: Tuple[float, float] = (2.0, 6.0)         # in-plane, pixels
    lesion_depth_ratio: float = 0.5
    lesion_offset_hu: Tuple[float, float] = (45.0, 90.0)    # |lesion - organ|, random sign
    background_hu: float = -120.0
    organ_hu: float = 60.0
    distractor_count: Tuple[int, int] = (0, 2)
    noise_sigma: float = 12.0
    max_retries: int = 50
    seed: int = 0


class TrainConfig(_Frozen):
    role: Literal["teacher", "student"]
    lr0: float
    momentum: float = 0.9
    epochs: int
    decay_start: Optional[int] = None
    decay_factor: float = 1.0
    batch_size: int = 2
    alpha: float = 1.0
    loc_class_weights: Tuple[float, float, float] = (1.0, 0.1, 1.0)
    crop: Tuple[int, int, int] = (6, 320, 320)
    seed: int = 0
    val_every: int = 25
    net: UNetConfig = Field(default_factory=UNetConfig)
    augment: AugmentConfig = Field(default_factory=AugmentConfig)
    # teacher only
    attention: AttentionVariant = AttentionVariant.O2L
    # student only
    loc_branch: bool = True
    loc_channels: Optional[int] = None
    balance_mixture: bool = False
    pseudo_mode: Literal["soft", "hard"] = "soft"

    @model_validator(mode="after")
    def _check(self) -> "TrainConfig":
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr0 < 0:
            raise ValueError("lr0 must be >= 0")
        if self.crop[0] < 3:
            raise ValueError("crop depth must be >= 3 to hold one full triplet")
        div = 2 ** (self.net.scales - 1)
        if self.crop[1] % div or self.crop[2] % div:
            raise ValueError(f"crop H, W must be divisible by {div}")
        return self


def teacher_train_config(**overrides: Any) -> TrainConfig:
    base: Dict[str, Any] = dict(role="teacher", lr0=1e-3, momentum=0.9, epochs=1500,
                                decay_start=None, decay_factor=1.0)
    base.update(overrides)
    return TrainConfig(**base)


def student_train_config(**overrides: Any) -> TrainConfig:
    base: Dict[str, Any] = dict(role="student", lr0=3e-4, momentum=0.9, epochs=4000,
                                decay_start=3000, decay_factor=0.95)
    base.update(overrides)
    return TrainConfig(**base)


DEFAULT_SWEEP_RATIOS: List[Tuple[int, int, int]] = [(10, 80, 10), (30, 60, 10), (50, 40, 10), (70, 20, 10)]


class ExperimentConfig(_Frozen):
    dataset_root: Path = Path(DATA_ROOT)
    out_dir: Path = Path("runs/default")
    ratio: Tuple[int, int, int] = (30, 60, 10)
    seed: int = 0
    teacher: TrainConfig = Field(default_factory=teacher_train_config)
    student: TrainConfig = Field(default_factory=student_train_config)
    perturb: PerturbConfig = Field(default_factory=PerturbConfig)
    phantom: PhantomConfig = Field(default_factory=PhantomConfig)
    phantom_cases: int = 60
    sweep_ratios: List[Tuple[int, int, int]] = Field(default_factory=lambda: list(DEFAULT_SWEEP_RATIOS))

    @field_validator("ratio")
    @classmethod
    def _ratio_sums(cls, v: Tuple[int, int, int]) -> Tuple[int, int, int]:
        if sum(v) != 100 or min(v) < 0:
            raise ValueError(f"ratio must be non-negative percentages summing to 100, got {v}")
        return v

    @model_validator(mode="after")
    def _roles(self) -> "ExperimentConfig":
        if self.teacher.role != "teacher" or self.student.role != "student":
            raise ValueError("teacher/student blocks must carry matching roles")
        return self

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return self.model_copy(update={
            "seed": seed,
            "teacher": self.teacher.model_copy(update={"seed": seed}),
            "student": self.student.model_copy(update={"seed": seed}),
        })

    def with_ratio(self, ratio: Tuple[int, int, int], out_dir: Path) -> "ExperimentConfig":
        return self.model_validate({**self.model_dump(), "ratio": tuple(ratio), "out_dir": out_dir})


# =========================================================
# PRESETS / LOADING
# =========================================================

def apply_desk_scale(cfg: ExperimentConfig) -> ExperimentConfig:
    """Reduced preset: 64x64 crops, base 8, 150 teacher / 300 student epochs."""
    net = cfg.teacher.net.model_copy(update={"base_channels": 8})
    teacher = cfg.teacher.model_copy(update={"net": net, "epochs": 150, "crop": (6, 64, 64), "val_every": 25})
    student = cfg.student.model_copy(update={
        "net": net, "epochs": 300, "decay_start": 225, "crop": (6, 64, 64), "val_every": 25,
    })
    return cfg.model_copy(update={"teacher": teacher, "student": student})


def config_hash(cfg: ExperimentConfig) -> str:
    return sha256_json(cfg.model_dump(mode="json", exclude={"out_dir"}))


def _read_config_file(path: Path) -> Dict[str, Any]:
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        if path.suffix.lower() == ".json":
            data = json.loads(text)
        elif path.suffix.lower() in (".yaml", ".yml"):
            data = yaml.safe_load(text)
        else:
            raise ConfigError(f"unsupported config format {path.suffix!r} (use .json, .yaml or .yml)")
    except (json.JSONDecodeError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot parse {path}: {e}") from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def _merge_role(data: Dict[str, Any], key: str, factory) -> None:
    # partial teacher/student blocks override the role defaults
    block = data.get(key)
    if block is None:
        return
    if not isinstance(block, dict):
        raise ConfigError(f"'{key}' must be a mapping")
    data[key] = factory(**block).model_dump()


def load_experiment_config(
    path: Optional[Path] = None,
    desk_scale: bool = False,
    seed: Optional[int] = None,
    out: Optional[Path] = None,
) -> ExperimentConfig:
    data: Dict[str, Any] = _read_config_file(Path(path)) if path else {}
    try:
        _merge_role(data, "teacher", teacher_train_config)
        _merge_role(data, "student", student_train_config)
        cfg = ExperimentConfig(**data)
        if desk_scale:
            cfg = apply_desk_scale(cfg)
        if seed is not None:
            cfg = cfg.with_seed(seed)
        elif "seed" in data:
            cfg = cfg.with_seed(cfg.seed)
        if out is not None:
            cfg = cfg.model_copy(update={"out_dir": Path(out)})
    except ValidationError as e:
        raise ConfigError(f"invalid config: {e}") from e
    return cfg


def require_dataset_root(cfg: ExperimentConfig) -> ExperimentConfig:
    root = Path(cfg.dataset_root)
    if not root.is_dir():
        raise ConfigError(f"dataset_root not found: {root}")
    return cfg
