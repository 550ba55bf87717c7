"""Experiment configuration: YAML file -> validated, hashable settings.

Every section is optional; omitted keys take the defaults below.  Unknown
keys are rejected so typos fail loudly instead of silently using defaults.
"""

from __future__ import annotations

import copy
import hashlib
import inspect
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .data import DatasetHandle, load_cifar_binary, load_idx, synth_blobs
from .errors import ConfigError, DataError
from .layers import PRESETS, AuxClassifierSpec, NetworkSpec, preset
from .optim import LRSchedule
from .router import ALPHA_GRID, BackLinkConfig, PartitionPlan, partition

log = logging.getLogger("backlink")

OUT_ENV = "BACKLINK_OUT"
DEFAULT_OUT = "runs"

DEFAULTS = {
    "name": "experiment",
    "network": {"preset": "tiny-resnet", "options": {}, "units": None, "input_shape": None, "num_classes": None},
    "data": {
        "source": "synth",          # synth | idx | cifar
        "fallback": True,           # use synthetic blobs when files are missing
        "classes": 10,
        "per_class": 100,
        "test_per_class": 20,
        "noise": 32.0,
        "clusters_per_class": 1,
        "separation": 64.0,
        "seed": 0,
        "train_images": None, "train_labels": None, "test_images": None, "test_labels": None,
        "train_files": [], "test_files": [], "label_bytes": 1,
        "subset": None,
        "augment": False,
    },
    "partition": {"K": 2, "sizes": None},
    "backlink": {"l": 0, "alpha": 1.0, "classifier": "linear", "hidden": 128, "literal_reweighting": False},
    "optim": {"lr": 0.05, "milestones": [], "factor": 0.1, "momentum": 0.9, "weight_decay": 5e-4,
              "decay_all": False, "batch_size": 128},
    "epochs": 1,
    "max_batches": None,
    "seed": 0,
    "seeds": 1,
    "precision": "wide",
    "execution": {"mode": "sequential", "staleness": 1, "capacity": 2, "timeout": 60.0},
    "costmodel": {"K": [1, 2, 4], "l": [0, 1, 2], "comm": 0.0, "batches": [16, 32], "uniform_units": None,
                  "classifier_footprint": 0.25},
    "out": None,
}

MODES = ("sequential", "pipeline")
SOURCES = ("synth", "idx", "cifar")


def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if key not in base:
            raise ConfigError(f"unknown config key {where + key!r}; expected one of {sorted(base)}")
        if isinstance(base[key], dict) and base[key] and key != "options":
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where + key!r} must be a mapping")
            out[key] = _merge(base[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


@dataclass
class ExperimentConfig:
    raw: dict
    source_path: str | None = None
    warnings: list[str] = field(default_factory=list)

    # -- construction ---------------------------------------------------
    @classmethod
    def from_dict(cls, d: dict | None, source_path: str | None = None) -> "ExperimentConfig":
        if d is not None and not isinstance(d, dict):
            raise ConfigError("config file must contain a mapping at the top level")
        cfg = cls(_merge(DEFAULTS, d or {}), source_path)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise DataError(f"cannot read config {path}: {exc.strerror or exc}") from None
        try:
            d = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from None
        return cls.from_dict(d, str(path))

    def override(self, **changes) -> "ExperimentConfig":
        """Copy with dotted-key overrides, e.g. ``override(**{"execution.mode": "pipeline"})``."""
        raw = copy.deepcopy(self.raw)
        for dotted, value in changes.items():
            if value is None:
                continue
            node = raw
            *path, last = dotted.split(".")
            for key in path:
                node = node[key]
            node[last] = value
        return ExperimentConfig.from_dict(raw, self.source_path)

    # -- validation -----------------------------------------------------
    def validate(self) -> None:
        r = self.raw
        if r["precision"] not in ("wide", "standard"):
            raise ConfigError(f"precision must be 'wide' or 'standard', got {r['precision']!r}")
        for key in ("epochs", "seeds"):
            if not isinstance(r[key], int) or r[key] < 1:
                raise ConfigError(f"{key} must be a positive integer, got {r[key]!r}")
        ex = r["execution"]
        if ex["mode"] not in MODES:
            raise ConfigError(f"execution.mode must be one of {MODES}, got {ex['mode']!r}")
        if ex["staleness"] not in (0, 1):
            raise ConfigError(f"execution.staleness must be 0 or 1, got {ex['staleness']!r}")
        if r["data"]["source"] not in SOURCES:
            raise ConfigError(f"data.source must be one of {SOURCES}, got {r['data']['source']!r}")
        if r["optim"]["batch_size"] < 1:
            raise ConfigError("optim.batch_size must be >= 1")
        self.schedule()  # lr and factor ranges
        spec = self.network()
        plan = self.plan(spec)
        if ex["mode"] == "pipeline" and plan.K < 2:
            raise ConfigError("pipeline mode needs partition.K >= 2; use mode: sequential for K=1")
        bl = self.backlink(spec)
        self.warnings = []
        if bl.off_grid():
            self._warn(f"backlink.alpha={bl.alpha} is off the usual grid {list(ALPHA_GRID)}")
        longest = max(plan.sizes[:-1], default=0)
        if bl.l > longest and plan.K > 1:
            self._warn(f"backlink.l={bl.l} exceeds every module size; clamped to at most {longest} per module")

    def _warn(self, msg: str) -> None:
        self.warnings.append(msg)
        log.warning(msg)

    # -- derived objects ------------------------------------------------
    def network(self, input_shape=None, num_classes=None) -> NetworkSpec:
        n = self.raw["network"]
        if n["units"] is not None:
            d = {"units": n["units"], "input_shape": n["input_shape"] or input_shape,
                 "num_classes": n["num_classes"] or num_classes or self.raw["data"]["classes"], "name": "custom"}
            if d["input_shape"] is None:
                raise ConfigError("network.units needs network.input_shape")
            try:
                return NetworkSpec.from_dict(d)
            except (TypeError, KeyError) as exc:
                raise ConfigError(f"bad network.units entry: {exc}") from None
        if n["preset"] not in PRESETS:
            raise ConfigError(f"unknown network preset {n['preset']!r}; known: {sorted(PRESETS)}")
        kwargs = dict(n["options"] or {})
        accepted = inspect.signature(PRESETS[n["preset"]]).parameters
        takes_any = any(p.kind == p.VAR_KEYWORD for p in accepted.values())
        shape = input_shape or n["input_shape"]
        classes = num_classes or n["num_classes"] or self.raw["data"]["classes"]
        if shape is not None and ("input_shape" in accepted or takes_any):
            kwargs.setdefault("input_shape", tuple(shape))
        if "num_classes" in accepted or takes_any:
            kwargs.setdefault("num_classes", classes)
        try:
            return preset(n["preset"], **kwargs)
        except TypeError as exc:
            raise ConfigError(f"network.options for {n['preset']!r}: {exc}") from None

    def plan(self, spec: NetworkSpec) -> PartitionPlan:
        p = self.raw["partition"]
        if p["sizes"] is not None:
            plan = PartitionPlan(tuple(p["sizes"]))
            if plan.total != len(spec.units):
                raise ConfigError(f"partition.sizes cover {plan.total} units but the network has {len(spec.units)}")
            return plan
        return partition(len(spec.units), int(p["K"]))

    def backlink(self, spec: NetworkSpec) -> BackLinkConfig:
        b = self.raw["backlink"]
        return BackLinkConfig(int(b["l"]), float(b["alpha"]),
                              AuxClassifierSpec(b["classifier"], spec.num_classes, int(b["hidden"])),
                              bool(b["literal_reweighting"]))

    def schedule(self) -> LRSchedule:
        o = self.raw["optim"]
        return LRSchedule(float(o["lr"]), tuple(o["milestones"] or ()), float(o["factor"]))

    def out_dir(self, cli_value=None) -> Path:
        return Path(cli_value or self.raw["out"] or os.environ.get(OUT_ENV) or DEFAULT_OUT)

    def datasets(self, input_shape=None) -> tuple[DatasetHandle, DatasetHandle | None]:
        """(train, test) handles for the configured source."""
        d = self.raw["data"]
        train = test = None
        if d["source"] == "idx":
            paths = [d["train_images"], d["train_labels"]]
            if None in paths:
                raise ConfigError("data.source=idx needs data.train_images and data.train_labels")
            if self._files_present(paths + [p for p in (d["test_images"], d["test_labels"]) if p]):
                train = load_idx(d["train_images"], d["train_labels"], d["classes"])
                if d["test_images"] and d["test_labels"]:
                    test = load_idx(d["test_images"], d["test_labels"], d["classes"], split="test")
        elif d["source"] == "cifar":
            if not d["train_files"]:
                raise ConfigError("data.source=cifar needs data.train_files")
            if self._files_present(list(d["train_files"]) + list(d["test_files"])):
                train = load_cifar_binary(d["train_files"], d["classes"], d["label_bytes"])
                if d["test_files"]:
                    test = load_cifar_binary(d["test_files"], d["classes"], d["label_bytes"], split="test")
        if train is None:
            dims = tuple(input_shape or self.network().input_shape)
            kw = dict(dims=dims, seed=d["seed"], noise=d["noise"], clusters_per_class=d["clusters_per_class"],
                      separation=d["separation"])
            train = synth_blobs(d["classes"], d["per_class"], **kw)
            test = synth_blobs(d["classes"], d["test_per_class"], split="test", **kw) if d["test_per_class"] else None
        if d["subset"] is not None:
            train = train.take(int(d["subset"]), seed=d["seed"])
        return train, test

    def _files_present(self, paths) -> bool:
        missing = [str(p) for p in paths if not Path(p).exists()]
        if not missing:
            return True
        if not self.raw["data"]["fallback"]:
            raise DataError(f"missing data files: {missing}")
        self._warn(f"data files {missing} not found; falling back to synthetic blobs")
        return False

    # -- identity -------------------------------------------------------
    def canonical(self) -> dict:
        """Everything that determines results; seed and output location excluded."""
        d = copy.deepcopy(self.raw)
        for key in ("seed", "seeds", "out"):
            d.pop(key)
        return d

    def hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)


def load_config(path=None) -> ExperimentConfig:
    return ExperimentConfig.load(path) if path else ExperimentConfig.from_dict({})


def dump_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))


__all__ = ["DEFAULTS", "ExperimentConfig", "OUT_ENV", "dump_config", "load_config"]
