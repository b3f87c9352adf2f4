"""Figures rendered from CSV files only: prior-probe heatmaps and pseudo-label curves."""

from __future__ import annotations

import csv
import os
import tempfile
from pathlib import Path

import numpy as np

PROBE_COLUMNS = ("kind", "lat", "lon", "day_of_year")
PSEUDO_COLUMNS = ("step", "pseudo_quality", "pseudo_quantity")


class PlotInputError(ValueError):
    """A CSV cannot be plotted."""


def _read_csv(path: str | Path) -> tuple[list[str], list[dict]]:
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            reader = csv.DictReader(fh)
            rows = list(reader)
            header = reader.fieldnames or []
    except OSError as exc:
        raise PlotInputError(f"cannot read {path}: {exc}") from exc
    if not header:
        raise PlotInputError(f"{path} is empty")
    if not rows:
        raise PlotInputError(f"{path} has a header but no data rows")
    return list(header), rows


def csv_kind(path: str | Path) -> str:
    header, _ = _read_csv(path)
    if all(c in header for c in PROBE_COLUMNS):
        return "probe"
    if all(c in header for c in PSEUDO_COLUMNS):
        return "pseudo"
    raise PlotInputError(f"{path}: unrecognised columns {header}")


def _float(v: str) -> float:
    return float("nan") if v in ("", None) else float(v)


def _save_atomic(fig, out: Path) -> Path:
    """Write the figure to a temporary file first so failures leave nothing behind."""
    out.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(suffix=out.suffix, dir=out.parent)
    os.close(fd)
    try:
        fig.savefig(tmp, dpi=120, bbox_inches="tight")
        os.replace(tmp, out)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return out


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_probe(csv_path: str | Path, out_path: str | Path, class_index: int = 0) -> Path:
    """Confidence heatmap over lat/lon plus the day-of-year curve for one class."""
    header, rows = _read_csv(csv_path)
    col = f"p_{class_index}"
    if col not in header or not all(c in header for c in PROBE_COLUMNS):
        raise PlotInputError(f"{csv_path}: not a probe CSV with column {col}")
    space = [r for r in rows if r["kind"] == "space"]
    time = [r for r in rows if r["kind"] == "time"]
    if not space:
        raise PlotInputError(f"{csv_path}: no spatial grid rows")
    lats = np.array(sorted({_float(r["lat"]) for r in space}))
    lons = np.array(sorted({_float(r["lon"]) for r in space}))
    grid = np.full((len(lats), len(lons)), np.nan)
    li = {v: i for i, v in enumerate(lats)}
    lo = {v: i for i, v in enumerate(lons)}
    for r in space:
        grid[li[_float(r["lat"])], lo[_float(r["lon"])]] = _float(r[col])

    plt = _pyplot()
    ncols = 2 if time else 1
    fig, axes = plt.subplots(1, ncols, figsize=(5 * ncols, 4), squeeze=False)
    ax = axes[0, 0]
    im = ax.imshow(grid, origin="lower", aspect="auto", extent=(lons[0], lons[-1], lats[0], lats[-1]),
                   vmin=0.0, vmax=1.0, cmap="viridis")
    ax.set_xlabel("longitude")
    ax.set_ylabel("latitude")
    ax.set_title(f"class {class_index}: confidence by location")
    fig.colorbar(im, ax=ax)
    if time:
        days = np.array([_float(r["day_of_year"]) for r in time])
        conf = np.array([_float(r[col]) for r in time])
        order = np.argsort(days)
        ax = axes[0, 1]
        ax.plot(days[order], conf[order], marker="o")
        ax.set_xlabel("day of year")
        ax.set_ylabel("confidence")
        ax.set_ylim(0, 1)
        ax.set_title(f"class {class_index}: confidence by time")
    try:
        return _save_atomic(fig, Path(out_path))
    finally:
        plt.close(fig)


def plot_pseudo_curves(csv_paths: list[str | Path], out_path: str | Path,
                       labels: list[str] | None = None) -> Path:
    """Two panels: pseudo-label quality (top) and quantity (bottom) per run."""
    series = []
    for i, p in enumerate(csv_paths):
        header, rows = _read_csv(p)
        if not all(c in header for c in PSEUDO_COLUMNS):
            raise PlotInputError(f"{p}: expected columns {PSEUDO_COLUMNS}")
        steps = np.array([_float(r["step"]) for r in rows])
        quality = np.array([_float(r["pseudo_quality"]) for r in rows])
        quantity = np.array([_float(r["pseudo_quantity"]) for r in rows])
        name = labels[i] if labels else Path(p).stem
        series.append((name, steps, quality, quantity))

    plt = _pyplot()
    fig, (top, bottom) = plt.subplots(2, 1, figsize=(6, 6), sharex=True)
    for name, steps, quality, quantity in series:
        top.plot(steps, quality, label=name)
        bottom.plot(steps, quantity, label=name)
    top.set_ylabel("pseudo-label quality")
    bottom.set_ylabel("pseudo-label quantity")
    bottom.set_xlabel("step")
    for ax in (top, bottom):
        ax.set_ylim(0, 1)
        ax.legend()
    try:
        return _save_atomic(fig, Path(out_path))
    finally:
        plt.close(fig)


def write_pseudo_csv(metrics: list[dict], path: str | Path, config_hash: str | None = None) -> Path:
    """Extract step / quality / quantity from metric records."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(PSEUDO_COLUMNS) + ["config_hash"])
        for m in metrics:
            q = m.get("pseudo_quality")
            w.writerow([m["step"], "" if q is None else repr(float(q)),
                        repr(float(m.get("pseudo_quantity") or 0.0)), config_hash or ""])
    return path
