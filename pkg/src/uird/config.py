"""Run configuration: YAML documents mapped onto strict dataclasses.

Unknown keys and out-of-range values are rejected before any computation.
``--set section.key=value`` overrides are parsed as YAML scalars.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .ingest import DEFAULT_ALPHABET
from .madegan import PRESETS
from .pipeline import STRATEGIES, PipelineConfig

OUTPUT_ROOT_ENV = "UIRD_OUTPUT_ROOT"
DATA_FORMATS = ("synthetic", "beatset", "wfdb")
ORDERINGS = ("sample_size", "given")


class ConfigError(ValueError):
    """Invalid configuration; the CLI maps it to exit status 1."""


@dataclass
class DataConfig:
    format: str = "synthetic"
    path: str | None = None
    records: list = field(default_factory=list)
    synthetic_counts: dict = field(default_factory=lambda: {"N": 500, "L": 300, "R": 200})
    alphabet: list = field(default_factory=lambda: list(DEFAULT_ALPHABET))
    classes: list | None = None
    task_order: str = "sample_size"
    split_ratio: float = 0.8


@dataclass
class IngestConfig:
    channel: int = 0
    cutoff_hz: float = 0.5
    filter_order: int = 101
    peak_source: str = "detector"
    tolerance_s: float = 0.05
    n_channels: int = 2
    gain: float = 200.0
    baseline: int = 1024
    sampling_rate_hz: float = 360.0


@dataclass
class MadeGanConfig:
    preset: str = "desk"
    epochs: int = 10
    finetune_epochs: int | None = None
    batch_size: int = 32
    learning_rate: float = 1e-4
    lambda_rec: float = 1.0
    lambda_fm: float = 1.0
    lambda_sp: float = 1.0
    threshold_percentile: float = 95.0
    calibration_fraction: float = 0.2
    memory_slots: int | None = None


@dataclass
class ClassifierConfig:
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 1e-3
    balanced: bool = True


@dataclass
class ReplayConfig:
    k_neighbors: int = 5
    min_novel_count: int = 20


@dataclass
class EwcConfig:
    lambda_ewc: float = 100.0
    fisher_samples: int = 1000


@dataclass
class RunConfig:
    seed: int | None = None
    name: str = "run"
    output_dir: str | None = None
    strategy: str = "uird"
    data: DataConfig = field(default_factory=DataConfig)
    ingest: IngestConfig = field(default_factory=IngestConfig)
    madegan: MadeGanConfig = field(default_factory=MadeGanConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    replay: ReplayConfig = field(default_factory=ReplayConfig)
    ewc: EwcConfig = field(default_factory=EwcConfig)

    # ------------------------------------------------------------------ io

    @classmethod
    def from_dict(cls, d: dict | None) -> "RunConfig":
        return _build(cls, d or {}, "")

    @classmethod
    def from_file(cls, path, overrides=()) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = yaml.safe_load(path.read_text(encoding="utf-8"))
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
        if raw is not None and not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        raw = apply_overrides(raw or {}, overrides)
        cfg = cls.from_dict(raw)
        if cfg.data.path is not None and not Path(cfg.data.path).is_absolute():
            cfg.data.path = str((path.parent / cfg.data.path).resolve())
        return cfg

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    # ------------------------------------------------------------------ checks

    def validate(self, check_paths: bool = True) -> "RunConfig":
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.seed is not None, "seed is required")
        for value, key, kind in ((self.output_dir, "output_dir", str), (self.data.path, "data.path", str),
                                 (self.data.classes, "data.classes", list),
                                 (self.madegan.finetune_epochs, "madegan.finetune_epochs", int),
                                 (self.madegan.memory_slots, "madegan.memory_slots", int)):
            need(value is None or (isinstance(value, kind) and not isinstance(value, bool)),
                 f"{key}: expected {kind.__name__}, got {value!r}")
        need(isinstance(self.seed, int) and not isinstance(self.seed, bool) and self.seed >= 0,
             "seed must be a non-negative integer")
        need(self.strategy in STRATEGIES, f"strategy must be one of {list(STRATEGIES)}")
        d = self.data
        need(d.format in DATA_FORMATS, f"data.format must be one of {list(DATA_FORMATS)}")
        need(d.task_order in ORDERINGS, f"data.task_order must be one of {list(ORDERINGS)}")
        need(0.0 < d.split_ratio < 1.0, "data.split_ratio must lie in (0, 1)")
        need(len(set(d.alphabet)) == len(d.alphabet) and d.alphabet, "data.alphabet must be non-empty and unique")
        if d.classes is not None:
            need(len(d.classes) >= 2, "need ≥ 2 classes")
            need(len(set(d.classes)) == len(d.classes), "data.classes must be unique")
        if d.format == "synthetic":
            need(len(d.synthetic_counts) >= 2, "need ≥ 2 classes")
            need(all(isinstance(v, int) and v > 0 for v in d.synthetic_counts.values()),
                 "data.synthetic_counts values must be positive integers")
        else:
            need(d.path is not None, f"data.path is required for format {d.format!r}")
            if check_paths:
                need(Path(d.path).exists(), f"data.path does not exist: {d.path}")
            if d.format == "wfdb":
                need(len(d.records) > 0, "data.records must list at least one record for format 'wfdb'")
                if check_paths:
                    for r in d.records:
                        need((Path(d.path) / f"{r}.dat").is_file(), f"missing record file {r}.dat")
        i = self.ingest
        need(i.peak_source in ("detector", "annotations"), "ingest.peak_source must be detector or annotations")
        need(0 <= i.channel < i.n_channels, "ingest.channel out of range")
        need(i.cutoff_hz > 0 and i.filter_order >= 3 and i.filter_order % 2 == 1,
             "ingest.cutoff_hz must be > 0 and ingest.filter_order odd and >= 3")
        need(i.tolerance_s > 0 and i.gain > 0 and i.sampling_rate_hz > 0, "ingest values must be positive")
        m = self.madegan
        need(m.preset in PRESETS, f"madegan.preset must be one of {sorted(PRESETS)}")
        need(m.epochs >= 1 and (m.finetune_epochs is None or m.finetune_epochs >= 0),
             "madegan epochs must be positive")
        need(m.batch_size >= 1 and m.learning_rate > 0, "madegan batch_size/learning_rate out of range")
        need(0.0 < m.threshold_percentile < 100.0, "madegan.threshold_percentile must lie in (0, 100)")
        need(0.0 <= m.calibration_fraction < 1.0, "madegan.calibration_fraction must lie in [0, 1)")
        need(min(m.lambda_rec, m.lambda_fm, m.lambda_sp) >= 0, "loss weights must be >= 0")
        need(m.memory_slots is None or m.memory_slots >= 1, "madegan.memory_slots must be >= 1")
        c = self.classifier
        need(c.epochs >= 1 and c.batch_size >= 1 and c.learning_rate > 0, "classifier hyperparameters out of range")
        need(self.replay.k_neighbors >= 1, "replay.k_neighbors must be >= 1")
        need(self.replay.min_novel_count >= 1, "replay.min_novel_count must be >= 1")
        need(self.ewc.lambda_ewc >= 0 and self.ewc.fisher_samples >= 1, "ewc values out of range")
        return self

    # ------------------------------------------------------------------ derived

    def output_root(self) -> Path:
        return Path(self.output_dir or os.environ.get(OUTPUT_ROOT_ENV) or "run")

    def run_dir(self) -> Path:
        return self.output_root() / self.name

    def pipeline_config(self) -> PipelineConfig:
        m = self.madegan
        madegan = dict(preset=m.preset, epochs=m.epochs, batch_size=m.batch_size,
                       learning_rate=m.learning_rate, lambda_rec=m.lambda_rec, lambda_fm=m.lambda_fm,
                       lambda_sp=m.lambda_sp, threshold_percentile=m.threshold_percentile,
                       calibration_fraction=m.calibration_fraction)
        if m.memory_slots is not None:
            madegan["memory_slots"] = m.memory_slots
        return PipelineConfig(seed=self.seed, strategy=self.strategy,
                              min_novel_count=self.replay.min_novel_count,
                              split_ratio=self.data.split_ratio, madegan=madegan,
                              finetune_epochs=m.finetune_epochs,
                              classifier=dataclasses.asdict(self.classifier),
                              smote_k=self.replay.k_neighbors, lambda_ewc=self.ewc.lambda_ewc,
                              fisher_samples=self.ewc.fisher_samples)


def _build(cls, d: Any, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(d).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - set(fields))
    if unknown:
        prefix = f"{where}." if where else ""
        raise ConfigError("unknown config key(s): " + ", ".join(prefix + k for k in unknown))
    kwargs = {}
    for name, value in d.items():
        default = fields[name].default_factory() if fields[name].default_factory is not dataclasses.MISSING \
            else fields[name].default
        path = f"{where}.{name}" if where else name
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value if value is not None else {}, path)
        else:
            kwargs[name] = _coerce(value, default, path)
    return cls(**kwargs)


def _coerce(value, default, path: str):
    if default is None:
        return value
    if value is None:
        raise ConfigError(f"{path}: a value is required")
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{path}: expected a string, got {value!r}")
    if isinstance(default, list) and not isinstance(value, list):
        raise ConfigError(f"{path}: expected a list, got {value!r}")
    if isinstance(default, dict) and not isinstance(value, dict):
        raise ConfigError(f"{path}: expected a mapping, got {value!r}")
    return value


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply ``dotted.key=value`` strings; values are parsed as YAML scalars."""
    raw = dict(raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, text = item.split("=", 1)
        try:
            value = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"override {item!r}: {exc}") from exc
        node = raw
        parts = key.strip().split(".")
        for p in parts[:-1]:
            child = node.get(p)
            child = dict(child) if isinstance(child, dict) else {}
            node[p] = child
            node = child
        node[parts[-1]] = value
    return raw
