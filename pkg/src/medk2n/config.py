"""Run configuration: dataclasses, profiles, YAML loading and validation."""

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from typing import List, Optional, Tuple

import yaml

STAGES = ("easy", "medium", "hard", "expert")
ABLATION_STAGES = ("B0", "B1", "B2", "B3", "B4", "B5")


class ConfigValidationError(ValueError):
    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class LossWeights:
    l1: float = 1.0
    ssim: float = 1.0
    causal: float = 0.1
    metric: float = 0.1

    def validate(self, prefix="loss"):
        for f in fields(self):
            v = getattr(self, f.name)
            if v < 0:
                raise ConfigValidationError(f"{prefix}.{f.name}", f"must be >= 0, got {v}")
        if not any(getattr(self, f.name) > 0 for f in fields(self)):
            raise ConfigValidationError(prefix, "at least one loss weight must be positive")

    def as_tuple(self):
        return (self.l1, self.ssim, self.causal, self.metric)


@dataclass
class CurriculumSchedule:
    ratios: Tuple[float, float, float, float] = (0.2, 0.2, 0.3, 0.3)
    total_epochs: int = 100
    enabled: bool = True
    apply_to_validation: bool = False

    def validate(self, prefix="curriculum"):
        if len(self.ratios) != 4:
            raise ConfigValidationError(f"{prefix}.ratios", f"need 4 ratios, got {len(self.ratios)}")
        if any(r < 0 for r in self.ratios):
            raise ConfigValidationError(f"{prefix}.ratios", "ratios must be nonnegative")
        if abs(sum(self.ratios) - 1.0) > 1e-6:
            raise ConfigValidationError(f"{prefix}.ratios", f"ratios must sum to 1, got {sum(self.ratios)}")
        if self.total_epochs < 1:
            raise ConfigValidationError(f"{prefix}.total_epochs", "must be >= 1")

    def boundaries(self):
        """Cumulative stage end epochs, e.g. (20, 40, 70, 100)."""
        acc, out = 0, []
        for r in self.ratios[:3]:
            acc += int(r * self.total_epochs + 1e-9)
            out.append(acc)
        out.append(self.total_epochs)
        return tuple(out)


@dataclass
class AblationConfig:
    pre_weight: bool = True
    threshold: bool = True
    effective_weight: bool = True
    cmim: bool = True
    curriculum: bool = True

    @classmethod
    def stage(cls, name):
        if name not in ABLATION_STAGES:
            raise ConfigValidationError("ablation", f"unknown stage {name!r}; expected one of {ABLATION_STAGES}")
        k = ABLATION_STAGES.index(name)
        return cls(pre_weight=k >= 1, threshold=k >= 2, effective_weight=k >= 3,
                   cmim=k >= 4, curriculum=k >= 5)

    @property
    def baseline_fusion(self):
        return not (self.pre_weight or self.threshold or self.effective_weight)

    def label(self):
        for name in reversed(ABLATION_STAGES):
            if AblationConfig.stage(name) == self:
                return name
        return "custom"


@dataclass
class ModelConfig:
    image_size: int = 64
    dim: int = 32
    mem_slots: int = 8
    k_head: int = 3
    cmim_dim: int = 32
    temperature: float = 0.07
    margin: float = 0.2

    def validate(self, prefix="model"):
        if self.image_size < 16 or self.image_size % 16:
            raise ConfigValidationError(f"{prefix}.image_size", "must be a positive multiple of 16")
        for name in ("dim", "mem_slots", "k_head", "cmim_dim"):
            if getattr(self, name) < 1:
                raise ConfigValidationError(f"{prefix}.{name}", "must be >= 1")
        if self.temperature <= 0:
            raise ConfigValidationError(f"{prefix}.temperature", "must be > 0")
        if self.margin <= 0:
            raise ConfigValidationError(f"{prefix}.margin", "must be > 0")


@dataclass
class DataConfig:
    manifest: Optional[str] = None
    seed: int = 0
    n_cases: int = 16
    modalities: List[str] = field(default_factory=lambda: ["T1n", "T1c", "T2w", "T2f"])
    lesion_count_range: Tuple[int, int] = (1, 3)
    val_fraction: float = 0.2
    augment: bool = True

    def validate(self, prefix="data"):
        if self.manifest is None and self.n_cases < 1:
            raise ConfigValidationError(f"{prefix}.n_cases", "must be >= 1")
        if not (0.0 <= self.val_fraction < 1.0):
            raise ConfigValidationError(f"{prefix}.val_fraction", "must lie in [0, 1)")
        if len(self.modalities) < 2:
            raise ConfigValidationError(f"{prefix}.modalities", "need at least 2 modalities")


@dataclass
class OptimConfig:
    lr: float = 2e-3
    betas: Tuple[float, float] = (0.9, 0.999)
    batch_size: int = 8
    accumulation: int = 3
    epochs: int = 5
    lr_boost_multi_target: bool = False
    grad_clip: float = 1.0

    def validate(self, prefix="optim"):
        if self.lr <= 0:
            raise ConfigValidationError(f"{prefix}.lr", "must be > 0")
        if self.batch_size < 1:
            raise ConfigValidationError(f"{prefix}.batch_size", "must be >= 1")
        if self.accumulation < 1:
            raise ConfigValidationError(f"{prefix}.accumulation", "must be >= 1")
        if self.epochs < 1:
            raise ConfigValidationError(f"{prefix}.epochs", "must be >= 1")


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    curriculum: CurriculumSchedule = field(default_factory=CurriculumSchedule)
    ablation: str = "B5"
    optim: OptimConfig = field(default_factory=OptimConfig)
    seed: int = 0
    out_dir: str = "runs/default"
    profile: str = "desk"

    def validate(self):
        self.data.validate()
        self.model.validate()
        self.loss.validate()
        self.curriculum.validate()
        self.optim.validate()
        AblationConfig.stage(self.ablation)
        if self.curriculum.total_epochs != self.optim.epochs:
            raise ConfigValidationError("curriculum.total_epochs",
                                        f"must equal optim.epochs ({self.optim.epochs})")
        return self

    @property
    def ablation_flags(self):
        return AblationConfig.stage(self.ablation)

    def to_dict(self):
        return asdict(self)

    def architecture(self):
        """Fields that determine parameter names and shapes."""
        return {"modalities": list(self.data.modalities), "image_size": self.model.image_size,
                "dim": self.model.dim, "mem_slots": self.model.mem_slots,
                "k_head": self.model.k_head, "cmim_dim": self.model.cmim_dim}


def architecture_hash(arch: dict) -> bytes:
    return hashlib.sha256(json.dumps(arch, sort_keys=True).encode()).digest()


PROFILES = {
    "desk": {"model": {"image_size": 64, "dim": 32},
             "optim": {"batch_size": 8, "accumulation": 3, "epochs": 5, "lr": 2e-3},
             "data": {"n_cases": 16}},
    "paper": {"model": {"image_size": 256, "dim": 64},
              "optim": {"batch_size": 48, "accumulation": 3, "epochs": 100, "lr": 1e-4},
              "data": {"n_cases": 2547}},
}


def _merge(dc, updates, prefix):
    for key, value in updates.items():
        names = {f.name: f for f in fields(dc)}
        if key not in names:
            raise ConfigValidationError(f"{prefix}{key}", "unknown configuration key")
        current = getattr(dc, key)
        if is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigValidationError(f"{prefix}{key}", "expected a mapping")
            _merge(current, value, f"{prefix}{key}.")
            continue
        if isinstance(current, tuple) and isinstance(value, (list, tuple)):
            value = tuple(value)
        if isinstance(current, bool) and not isinstance(value, bool):
            raise ConfigValidationError(f"{prefix}{key}", f"expected a boolean, got {value!r}")
        if isinstance(current, (int, float)) and not isinstance(current, bool):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigValidationError(f"{prefix}{key}", f"expected a number, got {value!r}")
            if isinstance(current, int) and isinstance(value, float) and not value.is_integer():
                raise ConfigValidationError(f"{prefix}{key}", f"expected an integer, got {value!r}")
            value = type(current)(value)
        setattr(dc, key, value)


def build_config(profile="desk", overrides=None) -> RunConfig:
    if profile not in PROFILES:
        raise ConfigValidationError("profile", f"unknown profile {profile!r}")
    cfg = RunConfig(profile=profile)
    _merge(cfg, copy.deepcopy(PROFILES[profile]), "")
    overrides = copy.deepcopy(overrides or {})
    # the YAML CURRICULUM block is accepted as an alias of `curriculum`
    if "CURRICULUM" in overrides:
        overrides.setdefault("curriculum", {}).update(
            {k.lower(): v for k, v in overrides.pop("CURRICULUM").items()})
    overrides.pop("profile", None)
    _merge(cfg, overrides, "")
    if "total_epochs" not in overrides.get("curriculum", {}):
        cfg.curriculum.total_epochs = cfg.optim.epochs
    return cfg


def load_config(path=None, profile=None, overrides=None) -> RunConfig:
    doc = {}
    if path is not None:
        with open(path) as fh:
            doc = yaml.safe_load(fh) or {}
        if not isinstance(doc, dict):
            raise ConfigValidationError("<root>", "config file must hold a mapping")
    profile = profile or doc.get("profile", "desk")
    merged = copy.deepcopy(doc)
    if "CURRICULUM" in merged:
        # fold the alias in first so explicit overrides still win over the file
        block = {k.lower(): v for k, v in merged.pop("CURRICULUM").items()}
        merged.setdefault("curriculum", {}).update(block)
    for k, v in (overrides or {}).items():
        if isinstance(v, dict) and isinstance(merged.get(k), dict):
            merged[k].update(v)
        else:
            merged[k] = v
    return build_config(profile, merged)


def parse_ratios(text: str):
    try:
        vals = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise ConfigValidationError("curriculum.ratios", f"cannot parse {text!r}")
    if len(vals) != 4:
        raise ConfigValidationError("curriculum.ratios", f"need 4 comma-separated ratios, got {len(vals)}")
    if abs(sum(vals) - 1.0) > 1e-6:
        raise ConfigValidationError("curriculum.ratios", f"ratios must sum to 1, got {sum(vals)}")
    return vals
