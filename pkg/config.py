from pathlib import Path
import itertools
import math
import os
from dataclasses import dataclass, field, fields, replace
from typing import Dict, List, Optional, Sequence, Set

from dotenv import load_dotenv

BASE_DIR = Path(__file__).parent
load_dotenv(BASE_DIR / ".env")

DEFAULT_OUTPUT_DIR = os.getenv("DERRD_OUTPUT_DIR", str(BASE_DIR / "runs"))
LOG_LEVEL = os.getenv("DERRD_LOG_LEVEL", "INFO")
DEFAULT_SEED = int(os.getenv("DERRD_SEED", "0"))

BASE_MODELS = ("bpr", "neumf")
METHODS = ("none", "rd", "cd", "de", "rrd", "de-rrd")
DE_MODES = ("selection", "attention", "one_expert_large", "one_expert_small")
RRD_MODES = ("relaxed", "full_ranking", "interesting_only")
NEUMF_TAPS = ("joint", "separate")
SIZE_RATIOS = (0.1, 0.5, 1.0)

# 0 is admitted so a term can be switched off for reduction checks
LAMBDA_GRID = (0.0, 1.0, 1e-1, 1e-2, 1e-3, 1e-4, 1e-5)

# Desk-scale teacher widths (last hidden layer)
TEACHER_DIMS = {"bpr": 200, "neumf": 128}

# Best cells of the lambda study, per base model
KD_LAMBDA_DEFAULTS = {
    "bpr": {"lambda_de": 1e-2, "lambda_rrd": 1e-3},
    "neumf": {"lambda_de": 1e-4, "lambda_rrd": 1e-1},
}

# Keys that only make sense for some methods
METHOD_KEYS = {
    "de": {"lambda_de", "num_experts", "de_mode", "de_squared_norm", "tau_0", "tau_p", "tau_grad_floor"},
    "rrd": {"lambda_rrd", "rrd_k", "rrd_l", "rrd_t", "rrd_mode"},
    "rd": {"rd_k", "rd_t", "rd_warmup_epochs", "rd_dyn_negatives"},
    "cd": {"cd_k", "cd_t"},
}

PATH_KEYS = {"data_path", "output_dir", "teacher_dir"}


class ConfigError(Exception):
    """Raised when an experiment configuration is invalid."""
    pass


def scaled_width(phi: float, width: int) -> int:
    """Width limited by a size ratio, rounded half-up and never below 1."""
    return max(1, int(math.floor(phi * width + 0.5)))


@dataclass
class ExperimentConfig:
    """One experiment: data, base model, distillation method and training knobs."""

    # data
    data_path: str = ""
    min_user_interactions: int = 5
    min_item_interactions: int = 1

    # model
    base_model: str = "bpr"
    phi: float = 0.1
    teacher_dim: int = 0
    neumf_layers: int = 2
    neumf_tap: str = "joint"

    # distillation
    method: str = "none"
    lambda_kd: float = 1e-2
    lambda_de: Optional[float] = None
    lambda_rrd: Optional[float] = None
    num_experts: int = 5
    de_mode: str = "selection"
    de_squared_norm: bool = False
    tau_0: float = 1.0
    tau_p: float = 1e-10
    # selection-network gradients use max(tau, tau_grad_floor)
    tau_grad_floor: float = 1e-3
    rrd_k: int = 10
    rrd_l: int = -1
    rrd_t: float = 10.0
    rrd_mode: str = "relaxed"
    cache_size: int = 500
    rd_k: int = 10
    rd_t: float = 10.0
    rd_warmup_epochs: int = 30
    rd_dyn_negatives: int = 50
    cd_k: int = 10
    cd_t: float = 10.0

    # training
    seed: int = DEFAULT_SEED
    epochs: int = 1000
    patience: int = 30
    batch_size: int = 512
    learning_rate: float = 0.005
    l2: float = 1e-4

    # evaluation
    eval_repeats: int = 5
    eval_negatives: int = 499
    latency_repeats: int = 3

    # io
    output_dir: str = DEFAULT_OUTPUT_DIR
    teacher_dir: str = ""

    explicit_keys: Set[str] = field(default_factory=set, repr=False, compare=False)

    @property
    def uses_de(self) -> bool:
        return self.method in ("de", "de-rrd")

    @property
    def uses_rrd(self) -> bool:
        return self.method in ("rrd", "de-rrd")

    @property
    def resolved_teacher_dim(self) -> int:
        return self.teacher_dim if self.teacher_dim > 0 else TEACHER_DIMS[self.base_model]

    @property
    def student_dim(self) -> int:
        return scaled_width(self.phi, self.resolved_teacher_dim)

    @property
    def weight_de(self) -> float:
        if self.lambda_de is not None:
            return self.lambda_de
        return KD_LAMBDA_DEFAULTS[self.base_model]["lambda_de"]

    @property
    def weight_rrd(self) -> float:
        if self.lambda_rrd is not None:
            return self.lambda_rrd
        return KD_LAMBDA_DEFAULTS[self.base_model]["lambda_rrd"]

    @property
    def uninteresting_count(self) -> int:
        return self.rrd_k if self.rrd_l < 0 else self.rrd_l

    @property
    def expert_count(self) -> int:
        return 1 if self.de_mode == "one_expert_small" else self.num_experts

    @property
    def method_label(self) -> str:
        """Method name with any non-default ablation switches appended."""
        label = self.method
        if self.uses_de and self.de_mode != "selection":
            label += f"-{self.de_mode}"
        if self.uses_rrd and self.rrd_mode != "relaxed":
            label += f"-{self.rrd_mode}"
        return label

    @property
    def unused_method_keys(self) -> Set[str]:
        """Method-specific keys that the selected method ignores."""
        selected = set()
        if self.uses_de:
            selected |= METHOD_KEYS["de"]
        if self.uses_rrd:
            selected |= METHOD_KEYS["rrd"]
        if self.method in ("rd", "cd"):
            selected |= METHOD_KEYS[self.method]
        return set().union(*METHOD_KEYS.values()) - selected

    @property
    def run_name(self) -> str:
        return f"{self.base_model}_{self.method_label}_phi{self.phi:g}_seed{self.seed}"

    @property
    def teacher_run_name(self) -> str:
        return f"{self.base_model}_teacher_seed{self.seed}"

    def validate(self) -> "ExperimentConfig":
        """Check value ranges and cross-key invariants; return self."""
        if self.base_model not in BASE_MODELS:
            raise ConfigError(f"base_model must be one of {BASE_MODELS}, got {self.base_model!r}")
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.de_mode not in DE_MODES:
            raise ConfigError(f"de_mode must be one of {DE_MODES}, got {self.de_mode!r}")
        if self.rrd_mode not in RRD_MODES:
            raise ConfigError(f"rrd_mode must be one of {RRD_MODES}, got {self.rrd_mode!r}")
        if self.neumf_tap not in NEUMF_TAPS:
            raise ConfigError(f"neumf_tap must be one of {NEUMF_TAPS}, got {self.neumf_tap!r}")
        if not 0 < self.phi <= 1.0:
            raise ConfigError(f"phi must lie in (0, 1], got {self.phi}")
        if self.base_model == "neumf":
            if self.neumf_layers not in (1, 2, 3, 4):
                raise ConfigError(f"neumf_layers must be one of 1..4, got {self.neumf_layers}")
            if self.student_dim < 2:
                raise ConfigError("NeuMF needs a hidden width of at least 2")
        for key in ("lambda_kd", "lambda_de", "lambda_rrd"):
            value = getattr(self, key)
            if value is not None and not any(math.isclose(value, g, rel_tol=1e-9, abs_tol=0.0) for g in LAMBDA_GRID):
                raise ConfigError(f"{key}={value} is outside the grid {LAMBDA_GRID}")
        for key in ("rrd_k", "rd_k", "cd_k", "num_experts", "batch_size", "epochs",
                    "eval_repeats", "eval_negatives", "latency_repeats", "cache_size"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1")
        for key in ("rrd_t", "rd_t", "cd_t", "tau_0", "tau_p", "learning_rate"):
            if getattr(self, key) <= 0:
                raise ConfigError(f"{key} must be > 0")
        if self.tau_grad_floor < 0:
            raise ConfigError("tau_grad_floor must be >= 0")
        if self.rrd_k > self.cache_size:
            raise ConfigError(f"rrd_k={self.rrd_k} exceeds cache_size={self.cache_size}")
        if self.method == "rd" and self.rd_warmup_epochs >= self.epochs:
            raise ConfigError("rd_warmup_epochs must be smaller than epochs")

        stray = self.unused_method_keys & self.explicit_keys
        if stray:
            raise ConfigError(f"keys {sorted(stray)} do not apply to method {self.method!r}")
        return self

    def with_overrides(self, overrides: Dict[str, str]) -> "ExperimentConfig":
        """Return a copy with raw string overrides coerced onto it."""
        values = {}
        for key, raw in overrides.items():
            values[key] = coerce_value(key, raw)
        explicit = set(self.explicit_keys) | set(values)
        return replace(self, **values, explicit_keys=explicit)

    def to_text(self) -> str:
        """Render as the flat key=value format read by parse_config_text."""
        lines = []
        unused = self.unused_method_keys
        for f in config_fields():
            value = getattr(self, f.name)
            if value is None or f.name in unused:
                continue
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"


def config_fields():
    return [f for f in fields(ExperimentConfig) if f.name != "explicit_keys"]


def _field_types() -> Dict[str, str]:
    types = {}
    for f in config_fields():
        text = str(f.type)
        if "bool" in text:
            types[f.name] = "bool"
        elif "float" in text:
            types[f.name] = "float"
        elif "int" in text:
            types[f.name] = "int"
        else:
            types[f.name] = "str"
    return types


FIELD_TYPES = _field_types()


def coerce_value(key: str, raw: str):
    """Coerce a raw string to the type of config key ``key``."""
    if key not in FIELD_TYPES:
        raise ConfigError(f"unknown config key: {key!r}")
    kind = FIELD_TYPES[key]
    text = str(raw).strip()
    try:
        if kind == "bool":
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind == "float":
            return float(text)
        if kind == "int":
            return int(text)
    except ValueError:
        raise ConfigError(f"invalid value for {key}: {raw!r}") from None
    return text


def parse_config_text(text: str) -> Dict[str, List[str]]:
    """
    Parse flat key=value text.

    Returns:
        Mapping key -> list of raw values; more than one value marks a sweep.
    """
    values: Dict[str, List[str]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in PATH_KEYS:
            values[key] = [raw]
        else:
            values[key] = [v.strip() for v in raw.split(",") if v.strip()]
        for v in values[key]:
            coerce_value(key, v)
    return values


def expand_sweep(values: Dict[str, List[str]], base: Optional[ExperimentConfig] = None) -> List[ExperimentConfig]:
    """Expand sweep lists into the serial cartesian product of configs."""
    base = base or ExperimentConfig()
    keys = list(values)
    configs = []
    for combo in itertools.product(*(values[k] for k in keys)):
        configs.append(base.with_overrides(dict(zip(keys, combo))).validate())
    return configs or [base.validate()]


def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, str]] = None) -> List[ExperimentConfig]:
    """Read a config file (optional), apply CLI overrides and expand sweeps."""
    values: Dict[str, List[str]] = {}
    if path:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {e}") from e
        values = parse_config_text(text)
    for key, raw in (overrides or {}).items():
        if key not in FIELD_TYPES:
            raise ConfigError(f"unknown config key: {key!r}")
        values[key] = [raw] if key in PATH_KEYS else [v.strip() for v in str(raw).split(",") if v.strip()]
    return expand_sweep(values)


def sweep_keys(configs: Sequence[ExperimentConfig]) -> List[str]:
    """Keys whose values differ across a sweep."""
    if len(configs) < 2:
        return []
    return [f.name for f in config_fields()
            if len({repr(getattr(c, f.name)) for c in configs}) > 1]
