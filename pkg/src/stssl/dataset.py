"""Datasets: manifests, labeled/unlabeled splits, the synthetic world, augmentation and batching."""

from __future__ import annotations

import csv
import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

SINGLE_LABEL = "single-label"
MULTI_LABEL = "multi-label"
TASK_MODES = (SINGLE_LABEL, MULTI_LABEL)

MANIFEST_COLUMNS = ("id", "image_path", "labels", "lat", "lon", "day_of_year")


class ManifestError(ValueError):
    pass


class SplitError(ValueError):
    pass


class BatchingError(ValueError):
    pass


@dataclass(frozen=True)
class GeoTemporal:
    latitude: float
    longitude: float
    day_of_year: float | None = None

    def __post_init__(self):
        if not (-90.0 <= self.latitude <= 90.0) or math.isnan(self.latitude):
            raise ValueError(f"latitude out of range: {self.latitude}")
        if not (-180.0 <= self.longitude <= 180.0) or math.isnan(self.longitude):
            raise ValueError(f"longitude out of range: {self.longitude}")
        if self.day_of_year is not None and not (0.0 <= self.day_of_year < 366.0):
            raise ValueError(f"day_of_year out of range: {self.day_of_year}")

    @property
    def has_time(self) -> bool:
        return self.day_of_year is not None


@dataclass(frozen=True)
class Sample:
    """One image (H x W x C floats in [0, 1]) with optional label and its metadata."""

    image: np.ndarray
    label: int | np.ndarray | None
    meta: GeoTemporal
    id: str


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    image_path: str
    labels: tuple[int, ...]
    lat: float
    lon: float
    day_of_year: float | None

    @property
    def meta(self) -> GeoTemporal:
        return GeoTemporal(self.lat, self.lon, self.day_of_year)


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]
    task_mode: str
    num_classes: int
    image_size: int
    root: Path = field(default=Path("."), compare=False)
    info: dict = field(default_factory=dict, compare=False)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    def resolve(self, record: ManifestRecord) -> Path:
        p = Path(record.image_path)
        return p if p.is_absolute() else self.root / p


def _sidecar_path(path: Path) -> Path:
    return path.with_suffix(".json")


def _parse_float(value: str, name: str, row: int) -> float:
    try:
        return float(value)
    except ValueError:
        raise ManifestError(f"row {row}: column {name!r} is not a number: {value!r}") from None


def load_manifest(path: str | Path, check_images: bool = True) -> DatasetManifest:
    """Read a manifest CSV and its JSON sidecar.

    Row indices in error messages are 0-based data rows (header excluded).
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    sidecar = _sidecar_path(path)
    if not sidecar.is_file():
        raise FileNotFoundError(f"manifest sidecar not found: {sidecar}")
    info = json.loads(sidecar.read_text())
    for key in ("task_mode", "num_classes", "image_size"):
        if key not in info:
            raise ManifestError(f"sidecar missing key {key!r}")
    task_mode = info["task_mode"]
    if task_mode not in TASK_MODES:
        raise ManifestError(f"unknown task_mode {task_mode!r}")
    num_classes = int(info["num_classes"])
    if num_classes < 1:
        raise ManifestError("num_classes must be positive")

    records = []
    seen = set()
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != MANIFEST_COLUMNS:
            raise ManifestError(f"expected columns {MANIFEST_COLUMNS}, got {reader.fieldnames}")
        for row_idx, row in enumerate(reader):
            if None in row or any(v is None for v in row.values()):
                raise ManifestError(f"row {row_idx}: wrong number of fields")
            rid = row["id"]
            if not rid:
                raise ManifestError(f"row {row_idx}: empty id")
            if rid in seen:
                raise ManifestError(f"row {row_idx}: duplicate id {rid!r}")
            seen.add(rid)
            try:
                labels = tuple(int(x) for x in row["labels"].split(";") if x != "")
            except ValueError:
                raise ManifestError(f"row {row_idx}: malformed labels {row['labels']!r}") from None
            if any(lab < 0 or lab >= num_classes for lab in labels):
                raise ManifestError(f"row {row_idx}: label index outside [0, {num_classes})")
            if task_mode == SINGLE_LABEL and len(labels) > 1:
                raise ManifestError(f"row {row_idx}: several labels in single-label mode")
            if len(set(labels)) != len(labels):
                raise ManifestError(f"row {row_idx}: repeated label index")
            lat = _parse_float(row["lat"], "lat", row_idx)
            lon = _parse_float(row["lon"], "lon", row_idx)
            day = None if row["day_of_year"] == "" else _parse_float(row["day_of_year"], "day_of_year", row_idx)
            try:
                GeoTemporal(lat, lon, day)
            except ValueError as exc:
                raise ManifestError(f"row {row_idx}: {exc}") from None
            records.append(ManifestRecord(rid, row["image_path"], labels, lat, lon, day))

    manifest = DatasetManifest(records, task_mode, num_classes, int(info["image_size"]), path.parent, info)
    if check_images:
        for row_idx, rec in enumerate(records):
            if not manifest.resolve(rec).is_file():
                raise ManifestError(f"row {row_idx}: image not found: {rec.image_path}")
    return manifest


def _fmt(x: float) -> str:
    return repr(float(x))


def save_manifest(manifest: DatasetManifest, path: str | Path, extra_info: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for r in manifest.records:
            day = "" if r.day_of_year is None else _fmt(r.day_of_year)
            writer.writerow([r.id, r.image_path, ";".join(map(str, r.labels)), _fmt(r.lat), _fmt(r.lon), day])
    info = {"task_mode": manifest.task_mode, "num_classes": manifest.num_classes, "image_size": manifest.image_size}
    info.update(extra_info or {})
    _sidecar_path(path).write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# In-memory dataset


@dataclass
class ImageDataset:
    """Arrays for a whole dataset; images stay uint8 until augmentation."""

    ids: list[str]
    images: np.ndarray  # (N, H, W, 3) uint8
    labels: np.ndarray  # (N,) int64, or (N, K) uint8 in multi-label mode
    lat: np.ndarray
    lon: np.ndarray
    day: np.ndarray  # NaN where the acquisition time is absent
    task_mode: str
    num_classes: int

    def __post_init__(self):
        self._index = {rid: i for i, rid in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def image_size(self) -> int:
        return int(self.images.shape[1])

    def index_of(self, ids: Sequence[str]) -> np.ndarray:
        return np.array([self._index[i] for i in ids], dtype=np.int64)

    def meta_array(self, idx: np.ndarray | None = None) -> np.ndarray:
        """(N, 3) array of (lat, lon, day) with NaN for missing day."""
        m = np.stack([self.lat, self.lon, self.day], axis=1)
        return m if idx is None else m[idx]

    def float_images(self, idx: np.ndarray | None = None) -> np.ndarray:
        imgs = self.images if idx is None else self.images[idx]
        return imgs.astype(np.float32) / 255.0

    def meta(self, i: int) -> GeoTemporal:
        day = None if np.isnan(self.day[i]) else float(self.day[i])
        return GeoTemporal(float(self.lat[i]), float(self.lon[i]), day)

    def sample(self, i: int) -> Sample:
        label = int(self.labels[i]) if self.task_mode == SINGLE_LABEL else self.labels[i].copy()
        return Sample(self.images[i].astype(np.float32) / 255.0, label, self.meta(i), self.ids[i])

    def subset(self, idx: np.ndarray) -> "ImageDataset":
        idx = np.asarray(idx)
        return ImageDataset(
            [self.ids[i] for i in idx], self.images[idx], self.labels[idx],
            self.lat[idx], self.lon[idx], self.day[idx], self.task_mode, self.num_classes,
        )

    def with_meta(self, lat=None, lon=None, day=None) -> "ImageDataset":
        """Copy with metadata columns replaced (scalars broadcast)."""
        n = len(self)
        def col(new, old):
            return old.copy() if new is None else np.broadcast_to(np.asarray(new, dtype=np.float64), (n,)).copy()
        return ImageDataset(list(self.ids), self.images, self.labels, col(lat, self.lat),
                            col(lon, self.lon), col(day, self.day), self.task_mode, self.num_classes)

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest) -> "ImageDataset":
        n, s = len(manifest), manifest.image_size
        images = np.empty((n, s, s, 3), dtype=np.uint8)
        for i, rec in enumerate(manifest.records):
            with Image.open(manifest.resolve(rec)) as im:
                arr = np.asarray(im.convert("RGB"))
            if arr.shape != (s, s, 3):
                raise ManifestError(f"row {i}: image shape {arr.shape} does not match image_size {s}")
            images[i] = arr
        labels = _labels_array([r.labels for r in manifest.records], manifest.task_mode, manifest.num_classes)
        day = np.array([np.nan if r.day_of_year is None else r.day_of_year for r in manifest.records])
        return cls(
            manifest.ids, images, labels,
            np.array([r.lat for r in manifest.records], dtype=np.float64),
            np.array([r.lon for r in manifest.records], dtype=np.float64),
            day.astype(np.float64), manifest.task_mode, manifest.num_classes,
        )


    def to_manifest(self, root: str | Path = ".") -> DatasetManifest:
        """Records for splitting; image paths are left empty for in-memory data."""
        records = []
        for i, rid in enumerate(self.ids):
            lab = self.labels[i]
            labels = (int(lab),) if self.task_mode == SINGLE_LABEL else tuple(int(c) for c in np.flatnonzero(lab))
            day = None if np.isnan(self.day[i]) else float(self.day[i])
            records.append(ManifestRecord(rid, "", labels, float(self.lat[i]), float(self.lon[i]), day))
        return DatasetManifest(records, self.task_mode, self.num_classes, self.image_size, Path(root))


def _labels_array(label_lists, task_mode: str, num_classes: int) -> np.ndarray:
    if task_mode == SINGLE_LABEL:
        if any(len(l) != 1 for l in label_lists):
            raise ManifestError("single-label datasets need exactly one label per record")
        return np.array([l[0] for l in label_lists], dtype=np.int64)
    out = np.zeros((len(label_lists), num_classes), dtype=np.uint8)
    for i, l in enumerate(label_lists):
        out[i, list(l)] = 1
    return out


# ---------------------------------------------------------------------------
# Labeled / unlabeled split


@dataclass(frozen=True)
class SplitSpec:
    labeled_fraction: float = 0.01
    strategy: str = "stratified"  # or "exact-per-class"
    seed: int = 0
    labels_per_class: int | None = None

    def __post_init__(self):
        if self.strategy not in ("stratified", "exact-per-class"):
            raise ValueError(f"unknown split strategy {self.strategy!r}")
        if self.strategy == "stratified" and not (0.0 < self.labeled_fraction <= 1.0):
            raise ValueError("labeled_fraction must lie in (0, 1]")
        if self.strategy == "exact-per-class" and (self.labels_per_class is None or self.labels_per_class < 1):
            raise ValueError("exact-per-class needs labels_per_class >= 1")


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split(manifest: DatasetManifest, spec: SplitSpec) -> tuple[list[str], list[str]]:
    """Partition manifest ids into (labeled, unlabeled), both in manifest order.

    Multi-label records are stratified by their rarest positive class.
    """
    k = manifest.num_classes
    groups = np.full(len(manifest), -1, dtype=np.int64)
    if manifest.task_mode == SINGLE_LABEL:
        groups[:] = [r.labels[0] for r in manifest.records]
    else:
        if spec.strategy == "exact-per-class":
            raise SplitError("exact-per-class split is only defined for single-label data")
        freq = np.zeros(k, dtype=np.int64)
        for r in manifest.records:
            freq[list(r.labels)] += 1
        for i, r in enumerate(manifest.records):
            if r.labels:
                groups[i] = min(r.labels, key=lambda c: (freq[c], c))

    rng = np.random.default_rng(spec.seed)
    chosen = np.zeros(len(manifest), dtype=bool)
    for c in range(k):
        members = np.flatnonzero(groups == c)
        if manifest.task_mode == SINGLE_LABEL and members.size == 0:
            raise SplitError(f"class {c} has no candidates")
        if members.size == 0:
            continue
        if spec.strategy == "exact-per-class":
            n = spec.labels_per_class
            if n > members.size:
                raise SplitError(f"class {c} has {members.size} samples, {n} labels requested")
        else:
            n = min(members.size, max(1, _round_half_up(spec.labeled_fraction * members.size)))
        chosen[rng.permutation(members)[:n]] = True
    ids = manifest.ids
    return [ids[i] for i in np.flatnonzero(chosen)], [ids[i] for i in np.flatnonzero(~chosen)]


# ---------------------------------------------------------------------------
# Synthetic spatiotemporal world


@dataclass(frozen=True)
class SyntheticWorldConfig:
    num_classes: int = 10
    num_regions: int = 4
    image_size: int = 16
    samples_total: int = 1000
    spatial_dependence_strength: float = 0.8
    seasonal_dependence_strength: float = 0.8
    sampling_bias: float = 0.0
    label_noise: float = 0.0
    seed: int = 0
    task_mode: str = SINGLE_LABEL
    lat_range: tuple[float, float] = (-50.0, 50.0)
    lon_range: tuple[float, float] = (-100.0, 100.0)
    with_time: bool = True
    # appearance
    pixel_noise: float = 0.08
    texture_jitter: float = 0.1
    pair_frequency_gap: float = 0.15
    color_variation: float = 0.15
    context_tint: float = 0.05
    # optional class that only occurs inside one region (prior-probe sanity checks)
    locked_class: int | None = None
    locked_region: int = 0
    # > 0: samples are drawn from this many acquisition scenes, each with one
    # footprint and one date (0 = every sample gets its own location and day)
    num_scenes: int = 0
    scene_extent: float = 0.1  # footprint half-width as a fraction of a region cell

    def __post_init__(self):
        for name in ("spatial_dependence_strength", "seasonal_dependence_strength", "sampling_bias"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if not 0.0 <= self.label_noise < 1.0:
            raise ValueError("label_noise must lie in [0, 1)")
        if self.num_classes < 2 or self.num_regions < 1 or self.samples_total < 1 or self.image_size < 4:
            raise ValueError("invalid synthetic world size")
        if self.task_mode not in TASK_MODES:
            raise ValueError(f"unknown task_mode {self.task_mode!r}")
        lo, hi = self.lat_range
        if not -90 <= lo < hi <= 90:
            raise ValueError("bad lat_range")
        lo, hi = self.lon_range
        if not -180 <= lo < hi <= 180:
            raise ValueError("bad lon_range")
        if self.locked_class is not None and not 0 <= self.locked_class < self.num_classes:
            raise ValueError("locked_class out of range")
        if not 0 <= self.locked_region < self.num_regions:
            raise ValueError("locked_region out of range")
        if self.num_scenes < 0:
            raise ValueError("num_scenes must be non-negative")
        if not 0.0 < self.scene_extent <= 0.5:
            raise ValueError("scene_extent must lie in (0, 0.5]")


@dataclass
class SyntheticWorld:
    """Fixed world parameters derived from the config seed.

    Classes c and c + G (G = ceil(K/2)) share a texture orientation and differ
    only by a small ratio in stripe frequency, so a pair is hard to separate
    from the image alone. Each region favours one member of every pair and
    seasons favour them in antiphase. Colour is per-sample nuisance apart from a
    faint per-region tint.
    """

    config: SyntheticWorldConfig
    grid: tuple[int, int]
    orientation: np.ndarray  # (G,) in [0, pi/2] so horizontal flips keep groups apart
    frequency: np.ndarray  # (K,) stripe cycles per image
    region_prior: np.ndarray  # (R, K)
    region_tint: np.ndarray  # (R, 3)
    season_phase: np.ndarray  # (K,)
    region_weight: np.ndarray  # (R,) sampling weights
    day_modes: np.ndarray  # day-of-year centres for biased sampling
    scenes: np.ndarray | None = None  # (S, 3) region-cell row, cell column, day; None without scenes

    @property
    def num_groups(self) -> int:
        return len(self.orientation)

    def group_of(self, c):
        return np.asarray(c) % self.num_groups

    def region_of(self, lat: np.ndarray, lon: np.ndarray) -> np.ndarray:
        rows, cols = self.grid
        (la0, la1), (lo0, lo1) = self.config.lat_range, self.config.lon_range
        r = np.clip(np.floor((np.asarray(lat) - la0) / (la1 - la0) * rows).astype(np.int64), 0, rows - 1)
        c = np.clip(np.floor((np.asarray(lon) - lo0) / (lo1 - lo0) * cols).astype(np.int64), 0, cols - 1)
        return r * cols + c

    def class_prior(self, lat, lon, day) -> np.ndarray:
        """p(class | location, day) as an (N, K) array."""
        prior = self.region_prior[self.region_of(lat, lon)]
        d = np.asarray(day, dtype=np.float64)[:, None]
        t = self.config.seasonal_dependence_strength
        season = 1.0 + t * np.cos(2 * np.pi * (d / 365.25 - self.season_phase[None]))
        p = prior * season
        return p / p.sum(axis=1, keepdims=True)


def _grid_shape(n: int) -> tuple[int, int]:
    rows = int(math.floor(math.sqrt(n)))
    while n % rows:
        rows -= 1
    return rows, n // rows


def build_world(config: SyntheticWorldConfig) -> SyntheticWorld:
    rng = np.random.default_rng([config.seed, 0x5EED])
    k, r = config.num_classes, config.num_regions
    g = (k + 1) // 2
    s = config.spatial_dependence_strength

    orientation = (np.arange(g) + rng.uniform(-0.1, 0.1, g)) * (np.pi / 2) / max(g - 1, 1)
    orientation = np.clip(orientation, 0.0, np.pi / 2)
    base_freq = rng.uniform(2.0, 3.5, g)
    sign = np.where(np.arange(k) < g, 1.0, -1.0)
    frequency = base_freq[np.arange(k) % g] * (1.0 + 0.5 * config.pair_frequency_gap * sign)

    # every region favours one member of each pair, members alternate across regions
    favored = (np.arange(r)[:, None] + rng.integers(0, 2, size=(1, g))) % 2
    mass = rng.dirichlet(np.full(g, 4.0), size=r)
    concentrated = np.zeros((r, k))
    for gi in range(g):
        members = [c for c in (gi, gi + g) if c < k]
        pick = members[0] if len(members) == 1 else np.where(favored[:, gi] == 0, members[0], members[1])
        concentrated[np.arange(r), pick] += mass[:, gi]
    region_prior = (1 - s) / k + s * concentrated
    if config.locked_class is not None:
        lc = config.locked_class
        region_prior[:, lc] = 0.0
        # a region whose whole mass sat on the locked class falls back to uniform over the rest
        empty = region_prior.sum(axis=1) == 0
        region_prior[empty] = 1.0
        region_prior[empty, lc] = 0.0
        region_prior[config.locked_region, lc] = region_prior[config.locked_region].max()
    region_prior /= region_prior.sum(axis=1, keepdims=True)

    tint_dirs = rng.normal(size=(r, 3))
    tint_dirs /= np.linalg.norm(tint_dirs, axis=1, keepdims=True)
    region_tint = s * config.context_tint * tint_dirs

    phase = rng.uniform(0, 1, g)
    season_phase = np.concatenate([phase, phase + 0.5])[:k] % 1.0

    region_weight = rng.dirichlet(np.full(r, 1.0)) if config.sampling_bias > 0 else np.full(r, 1.0 / r)
    region_weight = (1 - config.sampling_bias) / r + config.sampling_bias * region_weight
    day_modes = rng.uniform(0, 365.25, 3)
    world = SyntheticWorld(config, _grid_shape(r), orientation, frequency, region_prior, region_tint,
                           season_phase, region_weight / region_weight.sum(), day_modes)
    if config.num_scenes:
        # separate stream so scene-free worlds stay unchanged
        world.scenes = _draw_scenes(world, np.random.default_rng([config.seed, 0x5CE7E]))
    return world


def _draw_days(world: SyntheticWorld, n: int, rng) -> np.ndarray:
    day = rng.uniform(0, 365.25, n)
    bias = world.config.sampling_bias
    if bias > 0:
        biased = rng.uniform(0, 1, n) < bias
        centre = world.day_modes[rng.integers(0, len(world.day_modes), n)]
        day = np.where(biased, (centre + rng.normal(0, 20, n)) % 365.25, day)
    return day


def _draw_scenes(world: SyntheticWorld, rng) -> np.ndarray:
    cfg = world.config
    cols = world.grid[1]
    e = cfg.scene_extent
    region = rng.choice(cfg.num_regions, size=cfg.num_scenes, p=world.region_weight)
    row = region // cols + rng.uniform(e, 1 - e, cfg.num_scenes)
    col = region % cols + rng.uniform(e, 1 - e, cfg.num_scenes)
    return np.stack([row, col, _draw_days(world, cfg.num_scenes, rng)], axis=1)


_SUBSET_CODES = {"train": 1, "test": 2, "val": 3}


def _subset_code(subset: str) -> int:
    return _SUBSET_CODES.get(subset, zlib.crc32(subset.encode()))


@dataclass
class RenderedData:
    ids: list[str]
    images: np.ndarray
    labels: list[tuple[int, ...]]
    lat: np.ndarray
    lon: np.ndarray
    day: np.ndarray  # always populated; storage may drop it

    def to_dataset(self, world: SyntheticWorld) -> ImageDataset:
        cfg = world.config
        day = self.day if cfg.with_time else np.full(len(self.ids), np.nan)
        labels = _labels_array(self.labels, cfg.task_mode, cfg.num_classes)
        return ImageDataset(list(self.ids), self.images, labels, self.lat.copy(), self.lon.copy(),
                            day.astype(np.float64), cfg.task_mode, cfg.num_classes)


def _sample_locations(world: SyntheticWorld, n: int, rng) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    cfg = world.config
    rows, cols = world.grid
    if world.scenes is not None:
        scene = world.scenes[rng.integers(0, len(world.scenes), n)]
        e = cfg.scene_extent
        row = scene[:, 0] + rng.uniform(-e, e, n)
        col = scene[:, 1] + rng.uniform(-e, e, n)
        day = scene[:, 2].copy()
    else:
        region = rng.choice(cfg.num_regions, size=n, p=world.region_weight)
        row = region // cols + rng.uniform(0, 1, n)
        col = region % cols + rng.uniform(0, 1, n)
        day = _draw_days(world, n, rng)
    (la0, la1), (lo0, lo1) = cfg.lat_range, cfg.lon_range
    lat = np.clip(la0 + row * (la1 - la0) / rows, la0, la1)
    lon = np.clip(lo0 + col * (lo1 - lo0) / cols, lo0, lo1)
    day = np.minimum(day, 365.0)
    return np.round(lat, 5), np.round(lon, 5), np.round(day, 3)


def _render(world: SyntheticWorld, cls: np.ndarray, region: np.ndarray, day: np.ndarray,
            rng: np.random.Generator) -> np.ndarray:
    """Float images (N, S, S, 3) before noise and quantisation."""
    cfg = world.config
    n, size = len(cls), cfg.image_size
    g = world.group_of(cls)
    jit = cfg.texture_jitter
    theta = (world.orientation[g] + rng.normal(0, jit, n))[:, None, None]
    freq = (world.frequency[cls] * (1 + rng.uniform(-jit, jit, n)))[:, None, None]
    phase = rng.uniform(0, 2 * np.pi, n)[:, None, None]
    amp = rng.uniform(0.12, 0.25, n)[:, None, None, None]
    yy, xx = np.meshgrid(np.arange(size) / size, np.arange(size) / size, indexing="ij")
    wave = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    color = 0.5 + rng.uniform(-cfg.color_variation, cfg.color_variation, (n, 3)) + world.region_tint[region]
    t = cfg.seasonal_dependence_strength
    color = color + (t * 0.5 * cfg.context_tint * np.cos(2 * np.pi * day / 365.25))[:, None]
    return color[:, None, None, :] + amp * wave[..., None]


def render_synthetic(config: SyntheticWorldConfig, subset: str = "train",
                     world: SyntheticWorld | None = None) -> RenderedData:
    """Draw ``config.samples_total`` samples without touching the disk."""
    world = world or build_world(config)
    rng = np.random.default_rng([config.seed, _subset_code(subset)])
    n, k, size = config.samples_total, config.num_classes, config.image_size
    lat, lon, day = _sample_locations(world, n, rng)
    region = world.region_of(lat, lon)
    prior = world.class_prior(lat, lon, day)

    cum = prior.cumsum(axis=1)
    primary = np.minimum((rng.uniform(0, 1, (n, 1)) > cum).sum(axis=1), k - 1)
    labels: list[tuple[int, ...]] = []
    if config.task_mode == SINGLE_LABEL:
        noisy = rng.uniform(0, 1, n) < config.label_noise
        stored = np.where(noisy, rng.integers(0, k, n), primary)
        labels = [(int(c),) for c in stored]
        images = _render(world, primary, region, day, rng)
    else:
        extra = rng.binomial(2, 0.35, n)
        images = np.empty((n, size, size, 3))
        for i in range(n):
            p = prior[i].copy()
            chosen = [int(primary[i])]
            for _ in range(extra[i]):
                p[chosen] = 0
                if p.sum() <= 0:
                    break
                chosen.append(int(rng.choice(k, p=p / p.sum())))
            cuts = np.sort(rng.choice(np.arange(1, size), size=len(chosen) - 1, replace=False))
            edges = np.concatenate([[0], cuts, [size]])
            bands = _render(world, np.array(chosen), np.full(len(chosen), region[i]),
                            np.full(len(chosen), day[i]), rng)
            for b, (a, z) in enumerate(zip(edges[:-1], edges[1:])):
                images[i, :, a:z] = bands[b, :, a:z]
            lab = set(chosen)
            if rng.uniform() < config.label_noise:
                lab.symmetric_difference_update({int(rng.integers(0, k))})
            labels.append(tuple(sorted(lab)))
    images = images + config.pixel_noise * rng.normal(size=images.shape)
    images = np.clip(np.round(np.clip(images, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)
    ids = [f"{subset}-{i:06d}" for i in range(n)]
    return RenderedData(ids, images, labels, lat, lon, day)


def generate_synthetic(config: SyntheticWorldConfig, out_dir: str | Path, subset: str = "train",
                       extra_info: dict | None = None) -> DatasetManifest:
    """Render a synthetic split to ``out_dir`` as PNGs plus ``<subset>.csv`` / ``<subset>.json``."""
    out_dir = Path(out_dir)
    img_dir = out_dir / "images" / subset
    try:
        img_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {img_dir}: {exc}") from exc
    world = build_world(config)
    data = render_synthetic(config, subset, world)
    records = []
    for i, rid in enumerate(data.ids):
        rel = f"images/{subset}/{rid}.png"
        Image.fromarray(data.images[i], mode="RGB").save(out_dir / rel, optimize=False)
        day = float(data.day[i]) if config.with_time else None
        records.append(ManifestRecord(rid, rel, data.labels[i], float(data.lat[i]), float(data.lon[i]), day))
    manifest = DatasetManifest(records, config.task_mode, config.num_classes, config.image_size, out_dir)
    extra = {"generator": "synthetic-world", "subset": subset, "world": _config_dict(config), **(extra_info or {})}
    if config.spatial_dependence_strength == 0 and config.seasonal_dependence_strength == 0:
        extra["note"] = "metadata-independent: labels and images do not depend on location or time"
    save_manifest(manifest, out_dir / f"{subset}.csv", extra)
    manifest.info = {**extra, "task_mode": config.task_mode, "num_classes": config.num_classes,
                     "image_size": config.image_size}
    return manifest


def _config_dict(config: SyntheticWorldConfig) -> dict:
    from dataclasses import asdict
    d = asdict(config)
    d["lat_range"] = list(d["lat_range"])
    d["lon_range"] = list(d["lon_range"])
    return d


# ---------------------------------------------------------------------------
# Augmentation


def _hflip(img, rng, p=0.5):
    return img[:, ::-1] if rng.uniform() < p else img


def _translate(img, rng, max_fraction):
    h, w = img.shape[:2]
    mh, mw = int(max_fraction * h), int(max_fraction * w)
    dy = int(rng.integers(-mh, mh + 1)) if mh else 0
    dx = int(rng.integers(-mw, mw + 1)) if mw else 0
    if dx == 0 and dy == 0:
        return img
    padded = np.pad(img, ((mh, mh), (mw, mw), (0, 0)), mode="reflect")
    return padded[mh + dy:mh + dy + h, mw + dx:mw + dx + w]


def _color_jitter(img, rng, strength):
    b = 1.0 + rng.uniform(-strength, strength)
    c = 1.0 + rng.uniform(-strength, strength)
    s = 1.0 + rng.uniform(-strength, strength)
    out = img * b
    mean = out.mean()
    out = (out - mean) * c + mean
    gray = out.mean(axis=2, keepdims=True)
    out = (out - gray) * s + gray
    return np.clip(out, 0.0, 1.0)


def _cutout(img, rng, max_fraction, fill=0.5):
    h, w = img.shape[:2]
    ch = max(1, int(round(rng.uniform(0.2, max_fraction) * h)))
    cw = max(1, int(round(rng.uniform(0.2, max_fraction) * w)))
    y = int(rng.integers(0, h - ch + 1))
    x = int(rng.integers(0, w - cw + 1))
    out = img.copy()
    out[y:y + ch, x:x + cw] = fill
    return out


_TRANSFORMS = {
    "hflip": lambda img, rng, p=0.5: _hflip(img, rng, p),
    "translate": lambda img, rng, max_fraction=0.125: _translate(img, rng, max_fraction),
    "color_jitter": lambda img, rng, strength=0.4: _color_jitter(img, rng, strength),
    "cutout": lambda img, rng, max_fraction=0.5, fill=0.5: _cutout(img, rng, max_fraction, fill),
}


@dataclass(frozen=True)
class AugmentationPolicy:
    """Ordered ``(name, params)`` transform lists for the weak and strong branches."""

    weak: tuple[tuple[str, dict], ...] = (("hflip", {"p": 0.5}), ("translate", {"max_fraction": 0.125}))
    strong: tuple[tuple[str, dict], ...] = (
        ("hflip", {"p": 0.5}),
        ("translate", {"max_fraction": 0.125}),
        ("color_jitter", {"strength": 0.4}),
        ("cutout", {"max_fraction": 0.5}),
    )

    def __post_init__(self):
        for name, _ in self.weak + self.strong:
            if name not in _TRANSFORMS:
                raise ValueError(f"unknown transform {name!r}")

    @classmethod
    def identity(cls) -> "AugmentationPolicy":
        return cls(weak=(), strong=())

    def branch(self, name: str):
        if name == "weak":
            return self.weak
        if name == "strong":
            return self.strong
        raise ValueError(f"unknown augmentation branch {name!r}")


DEFAULT_POLICY = AugmentationPolicy()
_BRANCH_CODES = {"weak": 1, "strong": 2}


def augment_rng(sample_id: str, branch: str, step_seed: int) -> np.random.Generator:
    return np.random.default_rng([zlib.crc32(sample_id.encode()), _BRANCH_CODES[branch], int(step_seed)])


def augment_image(image: np.ndarray, sample_id: str, branch: str, step_seed: int,
                  policy: AugmentationPolicy = DEFAULT_POLICY) -> np.ndarray:
    transforms = policy.branch(branch)
    if not transforms:
        return image.copy()
    rng = augment_rng(sample_id, branch, step_seed)
    out = image
    for name, params in transforms:
        out = _TRANSFORMS[name](out, rng, **params)
    return np.ascontiguousarray(np.clip(out, 0.0, 1.0), dtype=np.float32)


def augment(sample: Sample, policy_branch: str, step_seed: int,
            policy: AugmentationPolicy = DEFAULT_POLICY) -> Sample:
    image = augment_image(sample.image, sample.id, policy_branch, step_seed, policy)
    return Sample(image, sample.label, sample.meta, sample.id)


# ---------------------------------------------------------------------------
# Batching


@dataclass
class Batch:
    """One training batch; images are (N, H, W, C) float32, metadata (N, 3) with NaN days."""

    step: int
    labeled_idx: np.ndarray
    unlabeled_idx: np.ndarray
    labeled_weak: np.ndarray
    labels: np.ndarray
    labeled_meta: np.ndarray
    unlabeled_weak: np.ndarray
    unlabeled_strong: np.ndarray
    unlabeled_meta: np.ndarray
    unlabeled_truth: np.ndarray  # used for pseudo-label statistics only
    labeled_strong: np.ndarray | None = None

    @property
    def n_labeled(self) -> int:
        return len(self.labeled_idx)

    @property
    def n_unlabeled(self) -> int:
        return len(self.unlabeled_idx)


class _IndexStream:
    """Epoch-wise reshuffled cycling over a pool."""

    def __init__(self, pool: np.ndarray, seed: int, code: int):
        self.pool = pool
        self.rng = np.random.default_rng([seed, code])
        self.buffer = np.empty(0, dtype=np.int64)

    def take(self, n: int) -> np.ndarray:
        while self.buffer.size < n:
            self.buffer = np.concatenate([self.buffer, self.rng.permutation(self.pool)])
        out, self.buffer = self.buffer[:n], self.buffer[n:]
        return out


def step_seed_for(seed: int, step: int) -> int:
    return (int(seed) << 32) | int(step)


def make_batches(dataset: ImageDataset, labeled_ids: Sequence[str], unlabeled_ids: Sequence[str],
                 n_l: int, n_u: int, seed: int, policy: AugmentationPolicy = DEFAULT_POLICY,
                 replacement: bool = False, labeled_strong: bool = False,
                 start_step: int = 0) -> Iterator[Batch]:
    """Endless stream of batches with exactly ``n_l`` labeled and ``n_u`` unlabeled samples.

    The two pools cycle independently. Without ``replacement`` a batch never repeats a
    sample, so each pool must hold at least as many samples as requested per batch.
    """
    if not labeled_ids or not unlabeled_ids:
        raise BatchingError("labeled and unlabeled pools must be non-empty")
    if n_l < 1 or n_u < 1:
        raise BatchingError("n_l and n_u must be positive")
    if not replacement and (n_l > len(labeled_ids) or n_u > len(unlabeled_ids)):
        raise BatchingError(
            f"batch needs {n_l} labeled / {n_u} unlabeled samples but pools hold "
            f"{len(labeled_ids)} / {len(unlabeled_ids)}; enable replacement")
    lab_stream = _IndexStream(dataset.index_of(labeled_ids), seed, 11)
    unl_stream = _IndexStream(dataset.index_of(unlabeled_ids), seed, 13)
    for _ in range(start_step):
        lab_stream.take(n_l)
        unl_stream.take(n_u)

    step = start_step
    while True:
        li = lab_stream.take(n_l)
        ui = unl_stream.take(n_u)
        yield build_batch(dataset, li, ui, step, seed, policy, labeled_strong)
        step += 1


def _augment_many(dataset: ImageDataset, idx: np.ndarray, branch: str, step_seed: int,
                  policy: AugmentationPolicy) -> np.ndarray:
    imgs = dataset.float_images(idx)
    return np.stack([augment_image(imgs[j], dataset.ids[i], branch, step_seed, policy)
                     for j, i in enumerate(idx)])


def build_batch(dataset: ImageDataset, li: np.ndarray, ui: np.ndarray, step: int, seed: int,
                policy: AugmentationPolicy = DEFAULT_POLICY, labeled_strong: bool = False) -> Batch:
    ss = step_seed_for(seed, step)
    return Batch(
        step=step,
        labeled_idx=li,
        unlabeled_idx=ui,
        labeled_weak=_augment_many(dataset, li, "weak", ss, policy),
        labels=dataset.labels[li],
        labeled_meta=dataset.meta_array(li),
        unlabeled_weak=_augment_many(dataset, ui, "weak", ss, policy),
        unlabeled_strong=_augment_many(dataset, ui, "strong", ss, policy),
        unlabeled_meta=dataset.meta_array(ui),
        unlabeled_truth=dataset.labels[ui],
        labeled_strong=_augment_many(dataset, li, "strong", ss, policy) if labeled_strong else None,
    )
