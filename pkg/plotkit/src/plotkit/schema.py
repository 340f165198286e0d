"""Validation of the simulator's export files.

Exports are JSON documents {kind, meta, values}; metric logs are CSV with a
fixed header. Everything is checked up front so render errors name the
offending field instead of failing somewhere inside matplotlib.
"""

from __future__ import annotations

import json
import os

import numpy as np

__all__ = ["SchemaError", "EXPORT_KINDS", "CSV_COLUMNS", "load_export", "load_metrics_csv"]

EXPORT_KINDS = ("plane", "surface", "spectrum", "heatmap")

CSV_COLUMNS = (
    "round",
    "lr",
    "mean_client_train_loss",
    "test_acc_sgd_line",
    "test_acc_swa_line",
    "lambda_max",
)

# per-kind required meta fields
_REQUIRED_META = {
    "plane": ("N", "extent", "xs", "ys", "metric", "anchors"),
    "surface": ("resolution", "extent", "seed", "metric", "center_value"),
    "spectrum": ("k",),
    "heatmap": ("rounds", "client_ids", "label"),
}


class SchemaError(ValueError):
    """Export or CSV does not match the documented schema."""


def load_export(path: str | os.PathLike, expect_kind: str | None = None) -> dict:
    """Parse and validate one export file; returns the raw dict."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: not valid JSON ({exc})") from exc
    for field in ("kind", "meta", "values"):
        if field not in doc:
            raise SchemaError(f"{path}: missing field {field!r}")
    kind = doc["kind"]
    if kind not in EXPORT_KINDS:
        raise SchemaError(f"{path}: unknown kind {kind!r} (expected one of {EXPORT_KINDS})")
    if expect_kind is not None and kind != expect_kind:
        raise SchemaError(f"{path}: kind is {kind!r}, job expects {expect_kind!r}")
    meta = doc["meta"]
    for field in _REQUIRED_META[kind]:
        if field not in meta:
            raise SchemaError(f"{path}: meta missing field {field!r} for kind {kind!r}")
    values = doc["values"]
    if not isinstance(values, list) or not values:
        raise SchemaError(f"{path}: 'values' must be a non-empty list")

    n_expected = _expected_value_count(kind, meta)
    if n_expected is not None and len(values) != n_expected:
        raise SchemaError(
            f"{path}: expected {n_expected} values for kind {kind!r}, got {len(values)}"
        )
    return doc


def _expected_value_count(kind: str, meta: dict) -> int | None:
    if kind == "plane":
        return int(meta["N"]) * int(meta["N"])
    if kind == "surface":
        return int(meta["resolution"]) ** 2
    if kind == "spectrum":
        return int(meta["k"])
    if kind == "heatmap":
        return len(meta["rounds"]) * len(meta["client_ids"])
    return None


def load_metrics_csv(path: str | os.PathLike) -> dict[str, np.ndarray]:
    """Read the round-metrics CSV into named float columns (NaN for blanks)."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        if tuple(header) != CSV_COLUMNS:
            raise SchemaError(
                f"{path}: header {header} does not match the metrics schema {list(CSV_COLUMNS)}"
            )
        rows = [line.rstrip("\n").split(",") for line in fh if line.strip()]
    if not rows:
        raise SchemaError(f"{path}: no metric rows")
    columns: dict[str, np.ndarray] = {}
    for i, name in enumerate(CSV_COLUMNS):
        columns[name] = np.array(
            [float(r[i]) if r[i] != "" else np.nan for r in rows], dtype=np.float64
        )
    return columns
