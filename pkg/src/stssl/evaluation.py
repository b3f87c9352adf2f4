"""Metrics, pseudo-label statistics, out-of-distribution metadata evaluation and the prior probe."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .dataset import GeoTemporal, ImageDataset, SINGLE_LABEL
from .model import VisionTransformer


@dataclass
class MetricsReport:
    mAP: float | None
    per_class_ap: list[float | None]
    accuracy: float | None = None
    pseudo_quality: float | None = None
    pseudo_quantity: float | None = None

    @property
    def score(self) -> float:
        """Headline number: accuracy for single-label data, mAP otherwise."""
        return self.accuracy if self.accuracy is not None else self.mAP

    def to_dict(self) -> dict:
        return {**asdict(self), "score": self.score}


def average_precision(scores: np.ndarray, targets: np.ndarray) -> float | None:
    """Mean of the precision at the rank of every positive; ``None`` without positives.

    Ranking is by descending score, ties broken by ascending sample index.
    """
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets).astype(bool)
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    npos = int(targets.sum())
    if npos == 0:
        return None
    order = np.argsort(-scores, kind="stable")
    hits = targets[order]
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, npos + 1) / ranks))


def mean_average_precision(scores: np.ndarray, targets: np.ndarray) -> tuple[float, list[float | None]]:
    """Macro mean of per-class AP over the classes that have positives."""
    scores = np.asarray(scores)
    targets = np.asarray(targets)
    if scores.shape != targets.shape or scores.ndim != 2:
        raise ValueError("scores and targets must both be (N, K)")
    per_class = [average_precision(scores[:, k], targets[:, k]) for k in range(scores.shape[1])]
    valid = [ap for ap in per_class if ap is not None]
    if not valid:
        raise ValueError("no class has a positive sample")
    return float(np.mean(valid)), per_class


def pseudo_stats(pseudo, ground_truth) -> tuple[float | None, float]:
    """(quality, quantity) of a pseudo-label batch.

    quantity is the fraction of slots with weight > 0; quality the fraction of
    those slots whose target matches the ground truth (``None`` if no slot passes).
    """
    weights = torch.as_tensor(pseudo.weights)
    targets = torch.as_tensor(pseudo.targets)
    truth = torch.as_tensor(ground_truth)
    passed = weights > 0
    quantity = float(passed.float().mean())
    if not bool(passed.any()):
        return None, quantity
    correct = targets.to(torch.float64) == truth.to(torch.float64)
    return float(correct[passed].float().mean()), quantity


# ---------------------------------------------------------------------------
# Prediction


def _to_images(x: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(x.transpose(0, 3, 1, 2)))


@torch.no_grad()
def predict_logits(model: VisionTransformer, dataset: ImageDataset, batch_size: int = 256,
                   meta: np.ndarray | None = None) -> torch.Tensor:
    """Logits for every sample; ``meta`` overrides the dataset's (N, 3) metadata."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if model.config.image_size != dataset.image_size:
        raise ValueError(f"model expects {model.config.image_size}px images, dataset has {dataset.image_size}px")
    was_training = model.training
    model.eval()
    meta_all = dataset.meta_array() if meta is None else meta
    outs = []
    for s in range(0, len(dataset), batch_size):
        idx = np.arange(s, min(s + batch_size, len(dataset)))
        x = _to_images(dataset.float_images(idx))
        m = torch.from_numpy(meta_all[idx]).float() if model.config.uses_metadata else None
        outs.append(model(x, m).logits)
    model.train(was_training)
    return torch.cat(outs)


def scores_from_logits(logits: torch.Tensor, task_mode: str) -> np.ndarray:
    probs = logits.softmax(dim=1) if task_mode == SINGLE_LABEL else torch.sigmoid(logits)
    return probs.numpy().astype(np.float64)


def report_from_logits(logits: torch.Tensor, dataset: ImageDataset) -> MetricsReport:
    scores = scores_from_logits(logits, dataset.task_mode)
    if dataset.task_mode == SINGLE_LABEL:
        onehot = np.eye(dataset.num_classes, dtype=np.uint8)[dataset.labels]
        mAP, per_class = mean_average_precision(scores, onehot)
        acc = float(np.mean(scores.argmax(axis=1) == dataset.labels))
        return MetricsReport(mAP, per_class, acc)
    mAP, per_class = mean_average_precision(scores, dataset.labels)
    return MetricsReport(mAP, per_class)


def evaluate(model: VisionTransformer, dataset: ImageDataset, batch_size: int = 256,
             meta: np.ndarray | None = None) -> MetricsReport:
    if model.config.num_classes != dataset.num_classes or model.config.task_mode != dataset.task_mode:
        raise ValueError("model and dataset disagree on the label space")
    return report_from_logits(predict_logits(model, dataset, batch_size, meta), dataset)


# ---------------------------------------------------------------------------
# Out-of-distribution metadata


@dataclass
class OODReport:
    component: str
    substitutions: list[tuple[float, float, float | None]]
    teacher_baseline: float
    student_baseline: float
    teacher_scores: list[float]
    student_scores: list[float]
    student_invariant: bool

    @property
    def teacher_mean(self) -> float:
        return float(np.mean(self.teacher_scores))

    @property
    def teacher_std(self) -> float:
        return float(np.std(self.teacher_scores, ddof=1)) if len(self.teacher_scores) > 1 else 0.0

    @property
    def teacher_drop(self) -> float:
        return self.teacher_baseline - self.teacher_mean

    def rows(self) -> list[dict]:
        """Table rows: model, metadata use, OOD component, score (mean +- std for overridden rows)."""
        return [
            {"model": "student", "metadata": False, "ood_component": "--", "score": self.student_baseline, "std": None},
            {"model": "teacher", "metadata": True, "ood_component": "--", "score": self.teacher_baseline, "std": None},
            {"model": "teacher", "metadata": True, "ood_component": self.component,
             "score": self.teacher_mean, "std": self.teacher_std},
            {"model": "student", "metadata": False, "ood_component": self.component,
             "score": float(np.mean(self.student_scores)), "std": float(np.std(self.student_scores))},
        ]

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(teacher_mean=self.teacher_mean, teacher_std=self.teacher_std, rows=self.rows())
        return d


def _override(meta: np.ndarray, sub: GeoTemporal, component: str) -> np.ndarray:
    out = meta.copy()
    if component in ("location", "both"):
        out[:, 0] = sub.latitude
        out[:, 1] = sub.longitude
    if component in ("time", "both"):
        out[:, 2] = np.nan if sub.day_of_year is None else sub.day_of_year
    return out


def ood_metadata_eval(teacher: VisionTransformer, student: VisionTransformer, dataset: ImageDataset,
                      substitutions: Sequence[GeoTemporal], component: str = "location",
                      batch_size: int = 256) -> OODReport:
    """Evaluate the teacher with every override substituted into all test samples.

    The student is re-run under each override too; its predictions must not move.
    Standard deviation across overrides uses ddof=1.
    """
    if not substitutions:
        raise ValueError("need at least one metadata substitution")
    if component not in ("location", "time", "both"):
        raise ValueError(f"unknown OOD component {component!r}")
    base_meta = dataset.meta_array()
    t_base = evaluate(teacher, dataset, batch_size).score
    s_logits = predict_logits(student, dataset, batch_size)
    s_base = report_from_logits(s_logits, dataset).score
    t_scores, s_scores, invariant = [], [], True
    for sub in substitutions:
        meta = _override(base_meta, sub, component)
        t_scores.append(evaluate(teacher, dataset, batch_size, meta).score)
        s_over = predict_logits(student, dataset, batch_size, meta)
        invariant &= bool(torch.equal(s_over, s_logits))
        s_scores.append(report_from_logits(s_over, dataset).score)
    if not invariant:
        raise AssertionError("student predictions changed under a metadata override")
    subs = [(s.latitude, s.longitude, s.day_of_year) for s in substitutions]
    return OODReport(component, subs, t_base, s_base, t_scores, s_scores, invariant)


def sample_ood_locations(lat_range: tuple[float, float], lon_range: tuple[float, float], n: int = 5,
                         margin: float = 10.0, seed: int = 0) -> list[GeoTemporal]:
    """``n`` locations at least ``margin`` degrees outside the training bounding box."""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        lat = float(rng.uniform(-85, 85))
        lon = float(rng.uniform(-175, 175))
        inside_lat = lat_range[0] - margin <= lat <= lat_range[1] + margin
        inside_lon = lon_range[0] - margin <= lon <= lon_range[1] + margin
        if not (inside_lat and inside_lon):
            out.append(GeoTemporal(round(lat, 4), round(lon, 4), None))
    return out


# ---------------------------------------------------------------------------
# Prior probe


@dataclass
class ProbeGrid:
    points: np.ndarray  # (P, 3) lat, lon, day (NaN = absent)
    kind: list[str]  # "space" or "time" per point
    shape: dict = field(default_factory=dict)


def make_probe_grid(lat_range: tuple[float, float], lon_range: tuple[float, float], margin: float = 0.5,
                    n_lat: int = 64, n_lon: int = 64, n_days: int = 24, day: float | None = 182.0,
                    location: tuple[float, float] | None = None) -> ProbeGrid:
    """Lat/lon grid over the box widened by ``margin`` of its size per side, plus a day-of-year sweep."""
    la0, la1 = lat_range
    lo0, lo1 = lon_range
    dla, dlo = (la1 - la0) * margin, (lo1 - lo0) * margin
    lats = np.linspace(max(-90.0, la0 - dla), min(90.0, la1 + dla), n_lat)
    lons = np.linspace(max(-180.0, lo0 - dlo), min(180.0, lo1 + dlo), n_lon)
    glat, glon = np.meshgrid(lats, lons, indexing="ij")
    d = np.nan if day is None else day
    space = np.stack([glat.ravel(), glon.ravel(), np.full(glat.size, d)], axis=1)
    centre = location or ((la0 + la1) / 2, (lo0 + lo1) / 2)
    if n_lat < 1 or n_lon < 1 or n_days < 0:
        raise ValueError("probe grid needs n_lat, n_lon >= 1 and n_days >= 0")
    days = np.arange(n_days) * (365.0 / max(n_days, 1))
    time = np.stack([np.full(n_days, centre[0]), np.full(n_days, centre[1]), days], axis=1)
    points = np.concatenate([space, time])
    return ProbeGrid(points, ["space"] * len(space) + ["time"] * n_days,
                     {"n_lat": n_lat, "n_lon": n_lon, "n_days": n_days})


@dataclass
class ProbeResult:
    points: np.ndarray
    kind: list[str]
    confidences: np.ndarray  # (P, K)
    model_id: str = ""
    shape: dict = field(default_factory=dict)

    def to_csv(self, path: str | Path, config_hash: str | None = None) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        k = self.confidences.shape[1]
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["kind", "lat", "lon", "day_of_year"] + [f"p_{c}" for c in range(k)])
            for kind, pt, conf in zip(self.kind, self.points, self.confidences):
                day = "" if np.isnan(pt[2]) else repr(float(pt[2]))
                w.writerow([kind, repr(float(pt[0])), repr(float(pt[1])), day] + [repr(float(c)) for c in conf])
        side = {"model_id": self.model_id, **self.shape}
        if config_hash:
            side["config_hash"] = config_hash
        path.with_suffix(".json").write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")
        return path


@torch.no_grad()
def prior_probe(teacher: VisionTransformer, grid: ProbeGrid, constant_image_value: float = 0.5,
                batch_size: int = 512, model_id: str = "") -> ProbeResult:
    """Teacher confidences for a constant-valued image paired with every grid point."""
    cfg = teacher.config
    if not cfg.uses_metadata:
        raise ValueError("the prior probe needs a metadata-consuming model")
    teacher.eval()
    confs = []
    for s in range(0, len(grid.points), batch_size):
        pts = torch.from_numpy(grid.points[s:s + batch_size]).float()
        imgs = torch.full((len(pts), cfg.in_channels, cfg.image_size, cfg.image_size), constant_image_value)
        logits = teacher(imgs, pts).logits
        probs = logits.softmax(dim=1) if cfg.task_mode == SINGLE_LABEL else torch.sigmoid(logits)
        confs.append(probs.numpy().astype(np.float64))
    return ProbeResult(grid.points, grid.kind, np.concatenate(confs), model_id, dict(grid.shape))
