"""
Pipeline configuration.

A run is described by one YAML file (see config/pipeline.yaml) parsed into
the dataclasses below. Any value can be overridden from the command line
with ``--set section.key=value``; the value part is parsed as YAML so
``--set smoothing.alpha=0.9`` and ``--set splits.use=[1,2]`` both work.
"""

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml

from errors import ConfigError

# Configuration
VERSION = "1.0.0"
HORIZON = 28
DEFAULT_CONFIG_PATH = Path(__file__).resolve().parent.parent / "config" / "pipeline.yaml"
GROUP_KINDS = ("gbdt", "gbdt_per_store", "mlp", "constant", "oracle")
SMOOTHING_MODES = ("horizon", "history")
FACTOR_SOURCES = ("fit", "file")
LEVEL11_STRATEGIES = ("summed-members", "direct")


@dataclass
class DataConfig:
    sales: str = "data/sales_train.csv"
    calendar: str = "data/calendar.csv"
    prices: str = "data/sell_prices.csv"


@dataclass
class SplitConfig:
    use: List[int] = field(default_factory=lambda: [1, 2, 3])
    strict_ranges: bool = False


@dataclass
class MetricsConfig:
    trim_leading_zeros: bool = True


@dataclass
class GroupConfig:
    """One model group of the ensemble (its name is also its blend role)."""

    name: str
    kind: str
    params: Dict[str, Any] = field(default_factory=dict)
    per_store_estimators: Dict[str, int] = field(default_factory=dict)
    presets: List[Dict[str, Any]] = field(default_factory=list)
    window_days: Optional[int] = None
    enabled: bool = True

    def __post_init__(self):
        if self.kind not in GROUP_KINDS:
            raise ConfigError(f"group {self.name}: unknown kind '{self.kind}' (expected one of {GROUP_KINDS})")
        if self.window_days is not None and self.window_days < 1:
            raise ConfigError(f"group {self.name}: window_days must be positive")


@dataclass
class BlendConfig:
    main: Dict[str, float] = field(default_factory=lambda: {
        "lgb_nas": 3.5, "lgb_cos": 1.0, "keras_nas": 1.0, "fastai_cos": 0.5})
    last_day: Dict[str, float] = field(default_factory=lambda: {
        "lgb_nas": 3.0, "lgb_cos": 0.5, "keras_nas": 0.0, "fastai_cos": 1.5})
    epsilon: float = 1e-6


@dataclass
class SmoothingConfig:
    alpha: float = 0.96
    mode: str = "horizon"
    history_days: int = 28
    apply_to_accuracy: bool = True

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigError(f"smoothing.alpha must lie in (0, 1], got {self.alpha}")
        if self.mode not in SMOOTHING_MODES:
            raise ConfigError(f"smoothing.mode must be one of {SMOOTHING_MODES}")


@dataclass
class UncertaintyConfig:
    factor_source: str = "file"
    factor_path: str = "config/quantile_factors.csv"
    symmetric_levels: List[int] = field(default_factory=lambda: list(range(1, 10)))
    extra_multipliers: List[float] = field(default_factory=lambda: [1.0, 1.02, 1.03])
    fit_splits: List[int] = field(default_factory=lambda: [1])
    level11_strategy: str = "summed-members"
    correct_level11: bool = True
    correct_level12: bool = True

    def __post_init__(self):
        if self.factor_source not in FACTOR_SOURCES:
            raise ConfigError(f"uncertainty.factor_source must be one of {FACTOR_SOURCES}")
        if self.level11_strategy not in LEVEL11_STRATEGIES:
            raise ConfigError(f"uncertainty.level11_strategy must be one of {LEVEL11_STRATEGIES}")


@dataclass
class SyntheticConfig:
    seed: int = 7
    n_days: int = 700
    stores_per_state: Dict[str, int] = field(default_factory=lambda: {"CA": 2, "TX": 1, "WI": 1})
    departments: Dict[str, int] = field(default_factory=lambda: {
        "FOODS": 2, "HOBBIES": 1, "HOUSEHOLD": 1})
    items_per_department: int = 5
    zero_share: float = 0.68
    late_release_share: float = 0.1
    start_date: str = "2011-01-29"


@dataclass
class PipelineConfig:
    data: DataConfig = field(default_factory=DataConfig)
    features_path: str = "config/features.yaml"
    groups: List[GroupConfig] = field(default_factory=list)
    blend: BlendConfig = field(default_factory=BlendConfig)
    smoothing: SmoothingConfig = field(default_factory=SmoothingConfig)
    uncertainty: UncertaintyConfig = field(default_factory=UncertaintyConfig)
    splits: SplitConfig = field(default_factory=SplitConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    seed: int = 42
    jobs: int = 1
    deterministic: bool = False
    output_dir: str = "runs"

    def enabled_groups(self) -> List[GroupConfig]:
        return [g for g in self.groups if g.enabled]

    @property
    def workers(self) -> int:
        """Worker cap actually used: a deterministic run is serial whatever ``jobs`` says."""
        return 1 if self.deterministic else self.jobs

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


_SECTIONS = {
    "data": DataConfig,
    "blend": BlendConfig,
    "smoothing": SmoothingConfig,
    "uncertainty": UncertaintyConfig,
    "splits": SplitConfig,
    "metrics": MetricsConfig,
    "synthetic": SyntheticConfig,
}


def _build(cls, values: Dict[str, Any], where: str):
    """Instantiate a config dataclass, rejecting unknown keys."""
    if values is None:
        values = {}
    if not isinstance(values, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(values).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(raw: Dict[str, Any]) -> PipelineConfig:
    """Parse a raw mapping (as loaded from YAML) into a PipelineConfig."""
    raw = copy.deepcopy(raw or {})
    kwargs: Dict[str, Any] = {}

    for name, cls in _SECTIONS.items():
        if name in raw:
            kwargs[name] = _build(cls, raw.pop(name), name)

    groups = raw.pop("groups", {}) or {}
    if isinstance(groups, dict):
        groups = [dict(values or {}, name=name) for name, values in groups.items()]
    kwargs["groups"] = [_build(GroupConfig, g, f"groups.{g.get('name', '?')}") for g in groups]

    for key in ("features_path", "seed", "jobs", "deterministic", "output_dir"):
        if key in raw:
            kwargs[key] = raw.pop(key)

    if raw:
        raise ConfigError(f"unknown top-level config keys {sorted(raw)}")

    config = PipelineConfig(**kwargs)
    if config.jobs < 1:
        raise ConfigError("jobs must be >= 1")
    return config


def apply_overrides(raw: Dict[str, Any], overrides: List[str]) -> Dict[str, Any]:
    """Apply ``section.key=value`` overrides onto a raw config mapping."""
    raw = copy.deepcopy(raw or {})
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not of the form key=value")
        dotted, value = item.split("=", 1)
        keys = dotted.strip().split(".")
        node = raw
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override '{item}' descends into a non-mapping")
        try:
            node[keys[-1]] = yaml.safe_load(value)
        except yaml.YAMLError as exc:
            raise ConfigError(f"override '{item}': {exc}") from exc
    return raw


def load_raw_config(path: Optional[Path] = None) -> Dict[str, Any]:
    path = Path(path) if path is not None else DEFAULT_CONFIG_PATH
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            return yaml.safe_load(f) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def load_config(path: Optional[Path] = None, overrides: Optional[List[str]] = None) -> PipelineConfig:
    """Load a YAML config file and apply command-line overrides."""
    return config_from_dict(apply_overrides(load_raw_config(path), overrides or []))


def config_hash(config: PipelineConfig) -> str:
    """Stable sha256 of a config (canonical JSON)."""
    payload = json.dumps(config.to_dict(), sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(payload).hexdigest()
