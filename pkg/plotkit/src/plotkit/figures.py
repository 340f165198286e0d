"""Figure rendering for the simulator's exports.

Each job reads one export (or metrics CSV), writes a raster/vector figure,
and drops a JSON sidecar next to it carrying the source metadata and the
rendered data table, so provenance survives the pixels.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .schema import SchemaError, load_export, load_metrics_csv

__all__ = ["FigureJob", "render", "sidecar_path"]

_ANCHOR_LABELS = ("model 1", "model 2", "model 3")


@dataclass(frozen=True)
class FigureJob:
    """One render request: export in, image out."""

    input_path: str
    kind: str  # plane | surface | spectrum | curves | heatmap
    output_path: str
    style: dict = field(default_factory=dict)


def sidecar_path(output_path: str) -> str:
    base, _ = os.path.splitext(output_path)
    return base + ".meta.json"


def _write_sidecar(job: FigureJob, source_meta: dict, table: dict) -> None:
    doc = {
        "figure": os.path.basename(job.output_path),
        "kind": job.kind,
        "source": os.path.basename(job.input_path),
        "source_meta": source_meta,
        "table": table,
    }
    with open(sidecar_path(job.output_path), "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _caption(meta: dict, keys: tuple[str, ...]) -> str:
    parts = [f"{k}={meta[k]}" for k in keys if k in meta]
    return ", ".join(str(p) for p in parts)


def render(job: FigureJob) -> str:
    """Render the job; returns the written image path."""
    if job.kind == "curves":
        return _render_curves(job)
    if job.kind not in ("plane", "surface", "spectrum", "heatmap"):
        raise SchemaError(f"unknown figure kind {job.kind!r}")
    doc = load_export(job.input_path, expect_kind=job.kind)
    meta, values = doc["meta"], np.asarray(doc["values"], dtype=np.float64)
    if job.kind == "plane":
        return _render_plane(job, meta, values)
    if job.kind == "surface":
        return _render_surface(job, meta, values)
    if job.kind == "spectrum":
        return _render_spectrum(job, meta, values)
    return _render_heatmap(job, meta, values)


def _finish(fig, job: FigureJob, source_meta: dict, table: dict) -> str:
    os.makedirs(os.path.dirname(job.output_path) or ".", exist_ok=True)
    fig.savefig(job.output_path, dpi=job.style.get("dpi", 120), bbox_inches="tight")
    plt.close(fig)
    _write_sidecar(job, source_meta, table)
    return job.output_path


def _render_plane(job: FigureJob, meta: dict, values: np.ndarray) -> str:
    n = int(meta["N"])
    xs = np.asarray(meta["xs"], dtype=np.float64)
    ys = np.asarray(meta["ys"], dtype=np.float64)
    grid = values.reshape(n, n)
    fig, ax = plt.subplots(figsize=(5.2, 4.4))
    levels = job.style.get("levels", 25)
    cf = ax.contourf(xs, ys, grid, levels=levels, cmap=job.style.get("cmap", "viridis"))
    ax.contour(xs, ys, grid, levels=levels, colors="white", linewidths=0.3, alpha=0.5)
    fig.colorbar(cf, ax=ax, label=meta.get("metric", "loss"))
    for (ax_, ay_), label in zip(meta["anchors"], _ANCHOR_LABELS):
        ax.plot(ax_, ay_, marker="o", markersize=7, color="crimson")
        ax.annotate(label, (ax_, ay_), textcoords="offset points", xytext=(6, 5), fontsize=8)
    ax.set_xlabel("basis direction u")
    ax.set_ylabel("basis direction v")
    ax.set_title(f"{meta.get('metric', 'loss')} plane ({_caption(meta, ('N', 'split'))})", fontsize=10)
    table = {
        "anchors": meta["anchors"],
        "min": float(grid.min()),
        "max": float(grid.max()),
        "origin_value": float(grid[meta["origin_node"][1], meta["origin_node"][0]])
        if "origin_node" in meta
        else None,
    }
    return _finish(fig, job, meta, table)


def _render_surface(job: FigureJob, meta: dict, values: np.ndarray) -> str:
    res = int(meta["resolution"])
    lo, hi = meta["extent"]
    offsets = np.linspace(float(lo), float(hi), res)
    grid = values.reshape(res, res)
    fig = plt.figure(figsize=(5.6, 4.6))
    ax = fig.add_subplot(projection="3d")
    a, b = np.meshgrid(offsets, offsets)
    ax.plot_surface(a, b, grid, cmap=job.style.get("cmap", "viridis"), linewidth=0)
    ax.set_xlabel("direction 1")
    ax.set_ylabel("direction 2")
    ax.set_zlabel(meta.get("metric", "loss"))
    ax.set_title(f"random-direction surface ({_caption(meta, ('seed', 'resolution'))})", fontsize=10)
    table = {
        "center_value": meta.get("center_value"),
        "min": float(grid.min()),
        "max": float(grid.max()),
    }
    return _finish(fig, job, meta, table)


def _render_spectrum(job: FigureJob, meta: dict, values: np.ndarray) -> str:
    order = np.argsort(values)[::-1]  # descending bars regardless of input order
    bars = values[order]
    fig, ax = plt.subplots(figsize=(5.2, 3.6))
    ax.bar(np.arange(1, len(bars) + 1), bars, color="steelblue")
    ax.set_xlabel("eigenvalue index")
    ax.set_ylabel("eigenvalue")
    ax.set_title(f"Hessian eigenspectrum (top {len(bars)})", fontsize=10)
    table = {"eigenvalues_descending": [float(v) for v in bars]}
    return _finish(fig, job, meta, table)


def _render_heatmap(job: FigureJob, meta: dict, values: np.ndarray) -> str:
    rounds = meta["rounds"]
    clients = meta["client_ids"]
    grid = values.reshape(len(rounds), len(clients))
    fig, ax = plt.subplots(figsize=(5.6, 4.0))
    im = ax.imshow(
        grid.T,
        aspect="auto",
        origin="lower",
        cmap=job.style.get("cmap", "magma"),
        extent=(min(rounds), max(rounds), -0.5, len(clients) - 0.5),
        interpolation="nearest",
    )
    fig.colorbar(im, ax=ax, label=meta.get("label", "value"))
    ax.set_xlabel("round")
    ax.set_ylabel("client")
    ax.set_title(f"per-client {meta.get('label', 'value')}", fontsize=10)
    finite = grid[np.isfinite(grid)]
    table = {
        "rounds": list(rounds),
        "clients": list(clients),
        "min": float(finite.min()) if finite.size else None,
        "max": float(finite.max()) if finite.size else None,
    }
    return _finish(fig, job, meta, table)


def _render_curves(job: FigureJob) -> str:
    cols = load_metrics_csv(job.input_path)
    rounds = cols["round"]
    fig, (ax_acc, ax_lam) = plt.subplots(
        2, 1, figsize=(6.0, 5.2), sharex=True, height_ratios=(2, 1)
    )
    marker = "o" if len(rounds) == 1 else None
    ax_acc.plot(rounds, cols["test_acc_sgd_line"], label="sgd line", marker=marker)
    if np.isfinite(cols["test_acc_swa_line"]).any():
        ax_acc.plot(rounds, cols["test_acc_swa_line"], label="swa line", marker=marker)
    ax_acc.set_ylabel("test accuracy")
    ax_acc.legend(fontsize=8)
    lam = cols["lambda_max"]
    mask = np.isfinite(lam)
    if mask.any():
        ax_lam.plot(rounds[mask], lam[mask], color="darkorange", marker="o", markersize=3)
    ax_lam.set_ylabel("lambda_max")
    ax_lam.set_xlabel("round")
    fig.suptitle("training curves", fontsize=11)
    table = {
        "rows": int(len(rounds)),
        "final_acc_sgd": float(cols["test_acc_sgd_line"][-1]),
        "final_acc_swa": float(cols["test_acc_swa_line"][-1])
        if np.isfinite(cols["test_acc_swa_line"][-1])
        else None,
    }
    return _finish(fig, job, {"columns": list(cols.keys()), "rows": int(len(rounds))}, table)
