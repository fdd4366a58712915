"""Experiment configuration files (YAML) with strict key checking.

A config names one pipeline, the dataset, the hardware profile(s), a
budget and pipeline-specific settings. Unknown keys anywhere are errors, so
a misspelled hyper-parameter cannot be silently ignored.
"""

import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from ..amc import AMCConfig
from ..archsearch import DEFAULT_CHOICES
from ..errors import ConfigError
from ..haq import HAQConfig
from ..hwmodel import PROFILES
from ..nncore import SGDConfig
from .data import DatasetSpec

PIPELINES = ("search", "prune", "quantize", "oracle")
STATISTICAL_SEEDS = 10


def _check_keys(section, data, allowed):
    if not isinstance(data, dict):
        raise ConfigError(f"{section}: expected a mapping, got {type(data).__name__}")
    unknown = set(data) - set(allowed)
    if unknown:
        raise ConfigError(f"{section}: unknown keys {sorted(unknown)}; allowed: {sorted(allowed)}")


def _build(cls, section, data, **fixed):
    data = data or {}
    allowed = {f.name for f in fields(cls)} - set(fixed)
    _check_keys(section, data, allowed)
    try:
        return cls(**data, **fixed)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{section}: {e}") from None


@dataclass(frozen=True)
class BudgetSpec:
    """`fraction` of the unconstrained cost, or an absolute `limit`."""

    kind: str = "latency"
    fraction: float = 0.0
    limit: float = 0.0

    def __post_init__(self):
        if (self.fraction > 0) == (self.limit > 0):
            raise ConfigError("budget: give exactly one positive 'fraction' or 'limit'")
        if self.fraction < 0 or self.limit < 0:
            raise ConfigError("budget: values must be positive")

    def resolve(self, unconstrained):
        return self.limit if self.limit > 0 else self.fraction * unconstrained


@dataclass(frozen=True)
class SearchSection:
    num_blocks: int = 3
    choices: tuple = DEFAULT_CHOICES
    channels: int = 4
    a: float = 1.0
    b: float = 12.0
    lat_ref: float = math.inf  # seconds; overrides lat_ref_factor
    lat_ref_factor: float = 1.2  # times the cheapest single-conv architecture
    epochs: int = 90
    warmup_epochs: int = 60
    batch: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    arch_lr: float = 0.1
    clip_norm: float = 1.0
    latency_table: str = ""  # CSV; empty -> synthesized from the hardware profile
    final_epochs: int = 15  # standalone training of the returned architecture


@dataclass(frozen=True)
class OracleSection:
    num_blocks: int = 3
    choices: tuple = DEFAULT_CHOICES
    channels: int = 4
    cap: int = 512
    epochs: int = 15
    lr: float = 0.05
    batch: int = 32
    momentum: float = 0.9
    clip_norm: float = 1.0
    latency_table: str = ""


@dataclass(frozen=True)
class ExperimentConfig:
    pipeline: str
    seeds: tuple
    hardware: tuple
    dataset: DatasetSpec
    budget: BudgetSpec = None
    net: dict = field(default_factory=dict)
    search: SearchSection = SearchSection()
    oracle: OracleSection = OracleSection()
    prune: AMCConfig = AMCConfig()
    quantize: HAQConfig = HAQConfig()
    record_wall_time: bool = False
    base_dir: Path = Path(".")

    def hardware_path(self, name):
        if name in PROFILES:
            return name
        p = Path(name)
        return str(p if p.is_absolute() else self.base_dir / p)


_TOP_KEYS = {"pipeline", "seed", "seeds", "statistical", "hardware", "dataset", "budget", "net",
             "search", "oracle", "prune", "quantize", "record_wall_time"}


def parse_config(data, base_dir=".", seed=None, hardware=None):
    """ExperimentConfig from a parsed YAML mapping. `seed` / `hardware`
    override the file (command-line flags)."""
    base_dir = Path(base_dir)
    if data is None:
        raise ConfigError("config is empty")
    _check_keys("config", data, _TOP_KEYS)
    pipeline = data.get("pipeline")
    if pipeline not in PIPELINES:
        raise ConfigError(f"pipeline must be one of {PIPELINES}, got {pipeline!r}")

    # A statistical run expands one base seed into STATISTICAL_SEEDS seeds.
    n = STATISTICAL_SEEDS if data.get("statistical") else 1
    if seed is not None:
        seeds = (int(seed),)
    elif "seeds" in data:
        seeds = tuple(int(s) for s in data["seeds"])
    elif "seed" in data:
        seeds = tuple(range(int(data["seed"]), int(data["seed"]) + n))
    else:
        raise ConfigError("a seed is mandatory ('seed' or 'seeds')")
    if not seeds:
        raise ConfigError("seeds must be nonempty")

    hw = hardware if hardware is not None else data.get("hardware", "edge")
    hw = tuple(hw) if isinstance(hw, (list, tuple)) else (hw,)
    for h in hw:
        if h not in PROFILES:
            path = Path(h) if Path(h).is_absolute() else base_dir / h
            if not path.is_file():
                raise ConfigError(f"hardware {h!r} is neither a known profile {sorted(PROFILES)} nor a file")

    dataset = _build(DatasetSpec, "dataset", data.get("dataset"))
    budget = None
    if "budget" in data:
        budget = _build(BudgetSpec, "budget", data["budget"])
    if pipeline in ("prune", "quantize") and budget is None:
        raise ConfigError(f"pipeline {pipeline!r} needs a budget")

    def tuples(d):
        d = dict(d or {})
        if "choices" in d:
            d["choices"] = tuple(d["choices"])
        return d

    search = _build(SearchSection, "search", tuples(data.get("search")))
    oracle = _build(OracleSection, "oracle", tuples(data.get("oracle")))
    for section in (search, oracle):
        if section.latency_table:
            p = Path(section.latency_table)
            if not (p if p.is_absolute() else base_dir / p).is_file():
                raise ConfigError(f"latency table {section.latency_table!r} not found")
    prune = _build(AMCConfig, "prune", data.get("prune"))
    quantize = _build(HAQConfig, "quantize", data.get("quantize"))
    net = data.get("net") or {}
    if not isinstance(net, dict):
        raise ConfigError("net: expected a mapping")
    if budget is not None:
        kinds = {"prune": ("macs", "latency"), "quantize": ("latency", "energy", "model_size")}.get(pipeline)
        if kinds and budget.kind not in kinds:
            raise ConfigError(f"budget kind {budget.kind!r} is not valid for {pipeline}; use one of {kinds}")
    return ExperimentConfig(pipeline, seeds, hw, dataset, budget, net, search, oracle, prune, quantize,
                            bool(data.get("record_wall_time", False)), base_dir)


def load_config(path, seed=None, hardware=None):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML: {e}") from None
    return parse_config(data, path.parent, seed, hardware), text


def sgd_from(section, seed):
    return SGDConfig(lr=section.lr, epochs=section.epochs, batch=section.batch, seed=seed,
                     momentum=section.momentum, clip_norm=section.clip_norm)
