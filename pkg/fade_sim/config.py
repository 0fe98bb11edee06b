# Copyright 2025 Zenshiro
# Licensed under the Apache License, Version 2.0

"""
Configuration module for the FADE simulator.

Two layers:
- RuntimeSettings: process-level knobs taken from the environment (.env
  supported). They never change numeric results.
- ExperimentConfig: the experiment file (INI sections of key = value),
  validated with pydantic before any compute. Errors are anchored to the
  offending line as `path:line: [section] key: message`.
"""

import configparser
import copy
import logging
import os
import re
from dataclasses import dataclass
from typing import Any, Dict, List, Literal, Optional, Tuple, Union, get_args, get_origin

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, PrivateAttr, ValidationError, field_validator

from .adversary import AttackConfig
from .exceptions import ConfigError
from .model import PRESET_CUTS, PRESETS, BackboneSpec, ModuleRef, Partition, parse_layers

logger = logging.getLogger(__name__)

PHASE_WARMUP = "warmup"
PHASE_ADVERSARIAL = "adversarial"

# Training attack at the raw input: PGD-10, eps0 = 0.15, alpha0 = 0.02, pixel clamp
INPUT_ATTACK = {"norm": "linf", "epsilon": 0.15, "alpha": 0.02, "steps": 10, "init": "zero", "clamp": (0.0, 1.0)}
# Training attack at intermediate features: eps1 = 0.045, alpha1 = 0.006, unclamped
FEATURE_ATTACK = {"norm": "linf", "epsilon": 0.045, "alpha": 0.006, "steps": 10, "init": "zero", "clamp": None}
# End-to-end evaluation attack: PGD-20 at the input
EVAL_ATTACK = dict(INPUT_ATTACK, steps=20)


@dataclass
class RuntimeSettings:
    """Process settings for the simulator."""

    # Overrides [experiment] output_dir when set
    output_dir: Optional[str] = None

    # Logging Configuration (set from --log-level)
    log_level: str = "INFO"
    log_file: str = "fade.log"

    def __post_init__(self):
        """Load overrides from the environment."""
        load_dotenv()
        self.output_dir = os.getenv("FADE_OUTPUT_DIR", self.output_dir) or None
        self.log_level = self.log_level.upper()


def _split(value, cast):
    if isinstance(value, str):
        return tuple(cast(v) for v in value.split(",") if v.strip())
    return value


# ============================================================================
# SECTIONS
# ============================================================================

class ExperimentSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int = 0
    rounds: int = Field(ge=0)
    clients: int = Field(ge=1)
    clients_per_round: int = Field(ge=1)
    workers: int = Field(1, ge=1)
    eval_interval: int = Field(10, ge=0)
    checkpoint_interval: int = Field(0, ge=0)
    eval_samples: int = Field(1000, ge=1)
    diag_samples: int = Field(64, ge=1)
    diagnostics: bool = True
    output_dir: str = "runs/default"


class DataConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    source: Literal["synthetic", "idx"] = "synthetic"
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    limit_train: Optional[int] = Field(None, ge=1)
    limit_test: Optional[int] = Field(None, ge=1)
    num_classes: int = Field(10, ge=2)
    train_count: int = Field(2000, ge=0)
    test_count: int = Field(500, ge=0)
    channels: int = Field(1, ge=1)
    height: int = Field(12, ge=1)
    width: int = Field(12, ge=1)
    spread: float = Field(0.15, ge=0.0)
    labels_per_client: int = Field(2, ge=1)
    val_ratio: float = Field(0.2, ge=0.0, lt=1.0)

    @property
    def input_shape(self) -> Tuple[int, int, int]:
        return self.channels, self.height, self.width


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    backbone: str = "cnn-small"
    layers: Optional[str] = None
    aux_head: Literal["pool-linear", "linear"] = "pool-linear"


class TrainConfig(BaseModel):
    """Local training hyperparameters and the per-module attack settings."""

    model_config = ConfigDict(extra="forbid")

    warmup_rounds: int = Field(0, ge=0)
    local_iters: int = Field(50, ge=0)
    batch_size: int = Field(10, ge=1)
    lr: float = Field(0.01, ge=0.0)
    milestones: Tuple[int, ...] = ()
    lr_decay: float = Field(0.5, gt=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(1e-4, ge=0.0)
    aux_weight_decay: float = Field(1e-3, ge=0.0)
    adversarial_fraction: float = Field(1.0, ge=0.0, le=1.0)
    aux_weight_decay_overrides: Dict[str, float] = Field(default_factory=dict)
    input_attack: AttackConfig = Field(default_factory=lambda: AttackConfig(**INPUT_ATTACK))
    feature_attack: AttackConfig = Field(default_factory=lambda: AttackConfig(**FEATURE_ATTACK))
    attack_overrides: Dict[str, AttackConfig] = Field(default_factory=dict)

    @field_validator("milestones", mode="before")
    @classmethod
    def _parse_milestones(cls, value):
        return _split(value, int)

    @field_validator("aux_weight_decay_overrides")
    @classmethod
    def _non_negative(cls, value):
        for label, decay in value.items():
            if decay < 0:
                raise ValueError(f"{label}: weight decay must be >= 0")
        return value

    def phase(self, round_index: int) -> str:
        return PHASE_WARMUP if round_index < self.warmup_rounds else PHASE_ADVERSARIAL

    def lr_at(self, round_index: int) -> float:
        """eta_0 times lr_decay for every milestone already reached."""
        passed = sum(1 for m in self.milestones if round_index >= m)
        return self.lr * self.lr_decay ** passed

    def aux_decay(self, ref: ModuleRef) -> float:
        """lambda_m; the last module has no auxiliary head."""
        if ref.is_last:
            return 0.0
        return self.aux_weight_decay_overrides.get(ref.label, self.aux_weight_decay)

    def attack_for(self, ref: ModuleRef) -> AttackConfig:
        if ref.label in self.attack_overrides:
            return self.attack_overrides[ref.label]
        return self.input_attack if ref.index == 1 else self.feature_attack


# Section name -> location inside the ExperimentConfig document
SECTION_PATHS: Dict[str, Tuple[str, ...]] = {
    "experiment": ("experiment",),
    "data": ("data",),
    "model": ("model",),
    "train": ("train",),
    "partitions": ("partitions",),
    "resources": ("resources",),
    "selection": ("selection",),
    "aux_weight_decay": ("train", "aux_weight_decay_overrides"),
    "attack.input": ("train", "input_attack"),
    "attack.features": ("train", "feature_attack"),
    "eval_attack": ("eval_attack",),
}
OVERRIDE_PREFIX = "attack."
REQUIRED_SECTIONS = ("experiment",)


class ExperimentConfig(BaseModel):
    """Validated experiment file."""

    model_config = ConfigDict(extra="forbid")

    experiment: ExperimentSection
    data: DataConfig = Field(default_factory=DataConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    partitions: Dict[str, Tuple[int, ...]] = Field(default_factory=dict)
    resources: Dict[str, float] = Field(default_factory=dict)
    selection: Dict[str, Tuple[float, ...]] = Field(default_factory=dict)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval_attack: AttackConfig = Field(default_factory=lambda: AttackConfig(**EVAL_ATTACK))

    _sections: Dict[str, Dict[str, str]] = PrivateAttr(default_factory=dict)
    _lines: Dict[Tuple[str, Optional[str]], int] = PrivateAttr(default_factory=dict)
    _path: str = PrivateAttr("<config>")

    @field_validator("partitions", mode="before")
    @classmethod
    def _parse_cuts(cls, value):
        if isinstance(value, dict):
            return {k: _split(v, int) for k, v in value.items()}
        return value

    @field_validator("selection", mode="before")
    @classmethod
    def _parse_weights(cls, value):
        if isinstance(value, dict):
            return {k: _split(v, float) for k, v in value.items()}
        return value

    # -- derived structure ----------------------------------------------------

    def scheme_cuts(self) -> Dict[str, Tuple[int, ...]]:
        """Declared partitions, or the preset cut table for the schemes the resources name."""
        if self.partitions:
            return dict(self.partitions)
        preset = PRESET_CUTS.get(self.model.backbone, {})
        wanted = [s for key in self.resources for s in key.split("+")] or ["2-module"]
        return {s: preset[s] for s in dict.fromkeys(wanted) if s in preset}

    def partition_specs(self) -> Dict[str, Partition]:
        return {name: Partition(name, tuple(cuts), self.model.aux_head) for name, cuts in self.scheme_cuts().items()}

    def resource_classes(self) -> List[Tuple[Tuple[str, ...], float]]:
        """(allowed schemes, client fraction) in file order; default: one class with every scheme."""
        if not self.resources:
            return [(tuple(self.scheme_cuts()), 1.0)]
        return [(tuple(key.split("+")), fraction) for key, fraction in self.resources.items()]

    def backbone_spec(self, input_shape: Tuple[int, ...]) -> BackboneSpec:
        if self.model.backbone == "custom":
            if not self.model.layers:
                raise self.error("model", "layers", "custom backbone needs a layer list")
            return parse_layers(self.model.layers, input_shape, self.data.num_classes)
        if self.model.backbone not in PRESETS:
            raise self.error("model", "backbone", f"unknown backbone {self.model.backbone!r}, "
                                                  f"expected one of {sorted(PRESETS)} or custom")
        return PRESETS[self.model.backbone](input_shape, self.data.num_classes)

    @property
    def output_dir(self) -> str:
        return self.experiment.output_dir

    # -- checks ---------------------------------------------------------------

    def error(self, section: str, key: Optional[str], message: str) -> ConfigError:
        line = self._lines.get((section, key)) or self._lines.get((section, None)) or 0
        where = f"[{section}] {key}" if key else f"[{section}]"
        return ConfigError(f"{self._path}:{line}: {where}: {message}")

    def check(self) -> "ExperimentConfig":
        """Cross-section validation; raises an anchored ConfigError."""
        exp = self.experiment
        if exp.clients_per_round > exp.clients:
            raise self.error("experiment", "clients_per_round",
                             f"C={exp.clients_per_round} exceeds N={exp.clients}")
        if self.data.source == "idx":
            for key in ("train_images", "train_labels", "test_images", "test_labels"):
                if not getattr(self.data, key):
                    raise self.error("data", key, "missing required key for source = idx")
        if self.model.backbone != "custom" and self.model.backbone not in PRESETS:
            raise self.error("model", "backbone", f"unknown backbone {self.model.backbone!r}")
        cuts = self.scheme_cuts()
        if not cuts:
            raise self.error("partitions", None, "no partition schemes declared")
        counts = {name: len(c) + 1 for name, c in cuts.items()}
        total = 0.0
        for key, fraction in self.resources.items():
            for scheme in key.split("+"):
                if scheme not in counts:
                    raise self.error("resources", key, f"unknown partition scheme {scheme!r}")
            if fraction < 0:
                raise self.error("resources", key, "fraction must be >= 0")
            total += fraction
        if self.resources and abs(total - 1.0) > 1e-9:
            raise self.error("resources", None, f"fractions sum to {total:g}, expected 1")
        for scheme, weights in self.selection.items():
            if scheme not in counts:
                raise self.error("selection", scheme, f"unknown partition scheme {scheme!r}")
            if len(weights) != counts[scheme] or min(weights) < 0 or sum(weights) <= 0:
                raise self.error("selection", scheme, f"expected {counts[scheme]} non-negative weights")
        for section, labels in (("aux_weight_decay", self.train.aux_weight_decay_overrides),
                                ("attack", self.train.attack_overrides)):
            for label in labels:
                scheme, _, index = label.rpartition("/")
                if scheme not in counts or not index.isdigit() or not 1 <= int(index) <= counts[scheme]:
                    name = f"attack.{label}" if section == "attack" else section
                    raise self.error(name, None if section == "attack" else label, f"unknown module {label!r}")
        return self

    # -- overrides ------------------------------------------------------------

    def with_override(self, key: str, value: Any) -> "ExperimentConfig":
        """
        Copy with one scalar field replaced.

        Args:
            key: `section.key`, e.g. `train.aux_weight_decay` or `attack.input.epsilon`
            value: New value (validated like a file value)

        Raises:
            ConfigError: unknown or non-scalar key, or invalid value
        """
        section, _, name = key.rpartition(".")
        if not section or not name:
            raise ConfigError(f"override key {key!r} must look like section.key")
        if not _is_scalar(section, name):
            raise ConfigError(f"override key {key!r} does not address a scalar field")
        sections = copy.deepcopy(self._sections)
        sections.setdefault(section, {})[name] = str(value)
        return _build(sections, self._lines, f"{self._path} (override {key}={value})")


SECTION_MODELS = {"experiment": ExperimentSection, "data": DataConfig, "model": ModelConfig, "train": TrainConfig}


def _is_scalar(section: str, name: str) -> bool:
    if section in ("aux_weight_decay", "resources"):
        return True
    model = AttackConfig if section.startswith(OVERRIDE_PREFIX) or section == "eval_attack" \
        else SECTION_MODELS.get(section)
    if model is None or name not in model.model_fields:
        return False
    annotation = model.model_fields[name].annotation
    scalar = (int, float, str, bool)
    if annotation in scalar or get_origin(annotation) is Literal:
        return True
    return get_origin(annotation) is Union and all(a in scalar or a is type(None) for a in get_args(annotation))


# ============================================================================
# LOADING
# ============================================================================

_SECTION_RE = re.compile(r"^\s*\[([^\]]+)\]")
_KEY_RE = re.compile(r"^\s*([^=:#;\s\[][^=:]*?)\s*[=:]")


def _line_index(text: str) -> Dict[Tuple[str, Optional[str]], int]:
    lines: Dict[Tuple[str, Optional[str]], int] = {}
    section = None
    for number, line in enumerate(text.splitlines(), start=1):
        match = _SECTION_RE.match(line)
        if match:
            section = match.group(1).strip()
            lines.setdefault((section, None), number)
            continue
        match = _KEY_RE.match(line)
        if match and section is not None and not line[0].isspace():
            lines.setdefault((section, match.group(1).strip()), number)
    return lines


def _section_path(section: str) -> Optional[Tuple[str, ...]]:
    if section in SECTION_PATHS:
        return SECTION_PATHS[section]
    if section.startswith(OVERRIDE_PREFIX):
        return ("train", "attack_overrides", section[len(OVERRIDE_PREFIX):])
    return None


def _locate(loc: Tuple, sections: Dict[str, Dict[str, str]]) -> Tuple[str, Optional[str]]:
    """Map a pydantic error location back to (section, key)."""
    best, best_len = "experiment", 0
    for section in list(SECTION_PATHS) + [s for s in sections if s.startswith(OVERRIDE_PREFIX)]:
        path = _section_path(section)
        if path and tuple(loc[:len(path)]) == path and len(path) > best_len:
            best, best_len = section, len(path)
    if best_len == 0 and loc:
        return str(loc[0]), None
    key = loc[best_len] if len(loc) > best_len else None
    return best, str(key) if key is not None else None


def _assemble(sections: Dict[str, Dict[str, str]]) -> Dict[str, Any]:
    document: Dict[str, Any] = {}
    for section, values in sections.items():
        path = _section_path(section)
        if section == "attack.input" or (section.startswith(OVERRIDE_PREFIX) and path[1] == "attack_overrides"):
            base = INPUT_ATTACK if section == "attack.input" or section.endswith("/1") else FEATURE_ATTACK
            values = dict(base, **values)
        elif section == "attack.features":
            values = dict(FEATURE_ATTACK, **values)
        elif section == "eval_attack":
            values = dict(EVAL_ATTACK, **values)
        node = document
        for part in path[:-1]:
            node = node.setdefault(part, {})
        node.setdefault(path[-1], {}).update(values)
    return document


def _build(sections: Dict[str, Dict[str, str]], lines: Dict, path: str) -> ExperimentConfig:
    for required in REQUIRED_SECTIONS:
        if required not in sections:
            raise ConfigError(f"{path}:0: missing required section [{required}]")
    for section in sections:
        if _section_path(section) is None:
            raise ConfigError(f"{path}:{lines.get((section, None), 0)}: unknown section [{section}]")
    try:
        config = ExperimentConfig.model_validate(_assemble(sections))
    except ValidationError as e:
        first = e.errors()[0]
        section, key = _locate(tuple(first["loc"]), sections)
        line = lines.get((section, key)) or lines.get((section, None)) or 0
        if first["type"] == "missing":
            message = f"missing required key {key!r}"
            where = f"[{section}]"
        else:
            message = first["msg"]
            where = f"[{section}] {key}" if key else f"[{section}]"
        raise ConfigError(f"{path}:{line}: {where}: {message}") from None
    config._sections = sections
    config._lines = lines
    config._path = path
    return config.check()


def parse_config(text: str, path: str = "<config>") -> ExperimentConfig:
    """Parse and validate experiment-file text."""
    parser = configparser.ConfigParser(interpolation=None, strict=True, empty_lines_in_values=False,
                                       inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=path)
    except configparser.Error as e:
        line = getattr(e, "lineno", 0)
        message = getattr(e, "message", str(e)).splitlines()[0]
        raise ConfigError(f"{path}:{line}: {message}") from None
    sections: Dict[str, Dict[str, str]] = {}
    for section in parser.sections():
        values = {}
        for key, value in parser.items(section):
            value = value.strip()
            # Empty values fall back to defaults, except cut lists where empty means the joint model
            if value or section == "partitions":
                values[key] = value
        sections[section] = values
    return _build(sections, _line_index(text), path)


def load_config(path: str) -> ExperimentConfig:
    """Read an experiment file."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"{path}:0: cannot read config: {e}") from None
    config = parse_config(text, path)
    logger.debug(f"Loaded config {path}")
    return config
