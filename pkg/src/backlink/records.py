"""Structured output: schema-checked JSONL records plus flat CSV tables."""

from __future__ import annotations

import csv
import json
from functools import lru_cache
from importlib import resources
from pathlib import Path

import jsonschema

from .errors import DataError

SCHEMA_VERSION = "1.0"


@lru_cache(maxsize=1)
def schema() -> dict:
    return json.loads(resources.files("backlink").joinpath("schemas/records.schema.json").read_text())


@lru_cache(maxsize=1)
def _validator():
    s = schema()
    jsonschema.Draft202012Validator.check_schema(s)
    return jsonschema.Draft202012Validator(s)


def make(kind: str, config_hash: str, **fields) -> dict:
    return {"type": kind, "schema_version": SCHEMA_VERSION, "config_hash": config_hash, **fields}


def validate(record: dict) -> None:
    """Raise ``jsonschema.ValidationError`` if the record does not match its type."""
    _validator()  # the schema itself must be well formed
    kind = record.get("type")
    if kind not in schema()["$defs"]:
        raise jsonschema.ValidationError(f"unknown record type {kind!r}")
    sub = {"$ref": f"#/$defs/{kind}", "$defs": schema()["$defs"]}
    jsonschema.Draft202012Validator(sub).validate(record)


def write_jsonl(path, records) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w") as fh:
            for r in records:
                validate(r)
                fh.write(json.dumps(r, sort_keys=True) + "\n")
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc.strerror or exc}") from None
    return path


def read_jsonl(path) -> list[dict]:
    with Path(path).open() as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_csv(path, rows: list[dict], columns: list[str]) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.DictWriter(fh, columns, extrasaction="ignore")
            w.writeheader()
            w.writerows(rows)
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc.strerror or exc}") from None
    return path


def epoch_rows(records: list[dict]) -> list[dict]:
    """One CSV row per (seed, epoch, module)."""
    rows = []
    for r in records:
        if r["type"] != "epoch":
            continue
        heads = r.get("head_test_accuracy") or [None] * len(r["loss"])
        for k, (loss, acc, head) in enumerate(zip(r["loss"], r["train_accuracy"], heads)):
            rows.append({"config_hash": r["config_hash"], "seed": r["seed"], "mode": r["mode"], "epoch": r["epoch"],
                         "lr": r["lr"], "module": k, "loss": loss, "train_accuracy": acc, "head_test_accuracy": head,
                         "test_accuracy": r["test_accuracy"]})
    return rows


EPOCH_COLUMNS = ["config_hash", "seed", "mode", "epoch", "lr", "module", "loss", "train_accuracy",
                 "head_test_accuracy", "test_accuracy"]
COST_COLUMNS = ["config_hash", "K", "l", "mode", "peak_memory", "relative_memory", "critical_path",
                "relative_runtime", "speedup"]
TRACE_COLUMNS = ["worker", "tag", "phase", "start", "end"]
