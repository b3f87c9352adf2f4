"""Experiment configuration: one document drives data, model, SSL, training and evaluation.

Configs are plain nested mappings (YAML or JSON) validated against the
dataclasses below before any work starts; unknown keys and mistyped values
are rejected. Named presets cover the reference experiments, a desk-scale
synthetic setup, its baselines and every ablation row.
"""

from __future__ import annotations

import hashlib
import json
import re
import typing
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path

import numpy as np
import yaml

from .dataset import (MULTI_LABEL, SINGLE_LABEL, TASK_MODES, ImageDataset, SplitSpec, SyntheticWorldConfig,
                      build_world, load_manifest, render_synthetic, split)
from .model import BackboneConfig
from .train import Ablations, TrainConfig, TrainResult, run_training

CONFIG_VERSION = 1


class ConfigError(ValueError):
    """The experiment document is malformed."""


# ---------------------------------------------------------------------------
# Schema


@dataclass(frozen=True)
class SplitSection:
    labeled_fraction: float = 0.01
    strategy: str = "stratified"
    labels_per_class: int | None = None

    def spec(self, seed: int) -> SplitSpec:
        return SplitSpec(self.labeled_fraction, self.strategy, seed, self.labels_per_class)


@dataclass(frozen=True)
class DatasetSection:
    """``source`` is "synthetic" (rendered in memory) or "manifest" (CSV + sidecar on disk).

    For manifest sources ``synthetic`` only describes the stand-in data used
    by dry runs; ``num_classes`` and ``task_mode`` then come from this section.
    """

    source: str = "synthetic"
    synthetic: SyntheticWorldConfig = field(default_factory=lambda: SyntheticWorldConfig(samples_total=8000))
    test_samples: int = 2000
    train_manifest: str | None = None
    test_manifest: str | None = None
    num_classes: int | None = None
    task_mode: str | None = None
    split: SplitSection = field(default_factory=SplitSection)

    def __post_init__(self):
        if self.source not in ("synthetic", "manifest"):
            raise ConfigError(f"dataset.source must be 'synthetic' or 'manifest', got {self.source!r}")
        if self.source == "manifest" and not self.train_manifest:
            raise ConfigError("dataset.train_manifest is required for manifest sources")
        if self.test_samples < 1:
            raise ConfigError("dataset.test_samples must be positive")
        if self.task_mode is not None and self.task_mode not in TASK_MODES:
            raise ConfigError(f"unknown dataset.task_mode {self.task_mode!r}")

    @property
    def label_space(self) -> tuple[int, str]:
        k = self.num_classes if self.num_classes is not None else self.synthetic.num_classes
        mode = self.task_mode if self.task_mode is not None else self.synthetic.task_mode
        return k, mode


@dataclass(frozen=True)
class ModelSection:
    image_size: int = 16
    patch_size: int = 4
    embed_dim: int = 32
    depth: int = 2
    num_heads: int = 2
    mlp_ratio: float = 2.0
    fusion: str = "early-metatoken"
    time_encoding: str = "scalar"
    missing_time: str = "fill"
    missing_time_fill: float = 0.5
    pixel_mean: float = 0.5
    pixel_std: float = 0.25


@dataclass(frozen=True)
class SSLSection:
    mode: str = "stssl"
    algorithm: str = "fixmatch"
    threshold: float = 0.95
    lambda_u: float = 1.0
    lambda_d: float = 1.0


@dataclass(frozen=True)
class TrainSection:
    n_l: int = 8
    n_u: int = 32
    total_steps: int = 2000
    base_lr: float = 1e-3
    weight_decay: float = 5e-4
    ema_decay: float = 0.999
    seed: int = 0
    log_interval: int = 10
    eval_interval: int = 0
    checkpoint_interval: int = 0
    replacement: bool = True


@dataclass(frozen=True)
class EvalSection:
    batch_size: int = 256
    ood_component: str = "location"
    ood_count: int = 5
    ood_margin: float = 10.0
    ood_seed: int = 0
    probe_margin: float = 0.5
    probe_n_lat: int = 64
    probe_n_lon: int = 64
    probe_n_days: int = 24
    probe_day: float | None = 182.0
    probe_image_value: float = 0.5

    def __post_init__(self):
        if self.ood_component not in ("location", "time", "both"):
            raise ConfigError(f"unknown eval.ood_component {self.ood_component!r}")
        if self.ood_count < 1 or self.batch_size < 1:
            raise ConfigError("eval.ood_count and eval.batch_size must be positive")


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "custom"
    description: str = ""
    version: int = CONFIG_VERSION
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    ssl: SSLSection = field(default_factory=SSLSection)
    train: TrainSection = field(default_factory=TrainSection)
    ablations: Ablations = field(default_factory=Ablations)
    eval: EvalSection = field(default_factory=EvalSection)

    def __post_init__(self):
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {self.version}; expected {CONFIG_VERSION}")
        if self.dataset.source == "synthetic" and self.dataset.synthetic.image_size != self.model.image_size:
            raise ConfigError(f"model.image_size {self.model.image_size} differs from the synthetic "
                              f"image_size {self.dataset.synthetic.image_size}")
        self.train_config()  # cross-field checks live in TrainConfig / BackboneConfig

    # -- conversions -------------------------------------------------------

    def backbone(self, variant: str) -> BackboneConfig:
        k, mode = self.dataset.label_space
        m = self.model
        return BackboneConfig(
            image_size=m.image_size, patch_size=m.patch_size, embed_dim=m.embed_dim, depth=m.depth,
            num_heads=m.num_heads, mlp_ratio=m.mlp_ratio, num_classes=k, task_mode=mode, variant=variant,
            fusion=m.fusion if variant == "teacher" else "none", time_encoding=m.time_encoding,
            missing_time=m.missing_time, missing_time_fill=m.missing_time_fill,
            pixel_mean=m.pixel_mean, pixel_std=m.pixel_std,
        )

    def train_config(self) -> TrainConfig:
        t, s = self.train, self.ssl
        try:
            return TrainConfig(
                teacher=self.backbone("teacher"), student=self.backbone("student"), mode=s.mode,
                algorithm=s.algorithm, threshold=s.threshold, lambda_u=s.lambda_u, lambda_d=s.lambda_d,
                n_l=t.n_l, n_u=t.n_u, total_steps=t.total_steps, base_lr=t.base_lr,
                weight_decay=t.weight_decay, ema_decay=t.ema_decay, seed=t.seed, log_interval=t.log_interval,
                eval_interval=t.eval_interval, checkpoint_interval=t.checkpoint_interval,
                replacement=t.replacement, ablations=self.ablations,
            )
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _build(cls, d, "")

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @property
    def hash(self) -> str:
        return config_hash(self)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, train=replace(self.train, seed=int(seed)))

    def override(self, section: str, **kw) -> "ExperimentConfig":
        return replace(self, **{section: replace(getattr(self, section), **kw)})


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def config_hash(config: ExperimentConfig) -> str:
    """First 16 hex digits of the SHA-256 of the canonical JSON form."""
    blob = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _check_scalar(value, hint, where: str):
    args = typing.get_args(hint)
    if type(None) in args:
        if value is None:
            return None
        hint = next(a for a in args if a is not type(None))
    origin = typing.get_origin(hint)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
    elif hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
    elif hint is float:
        if isinstance(value, str):
            # YAML 1.1 reads exponents without a decimal point ("1e-4") as strings
            try:
                value = float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        value = float(value)
    elif hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
    elif origin is tuple:
        if not isinstance(value, (list, tuple)) or len(value) != len(typing.get_args(hint)):
            raise ConfigError(f"{where}: expected a list of {len(typing.get_args(hint))} values, got {value!r}")
        value = tuple(_check_scalar(v, h, f"{where}[{i}]") for i, (v, h) in enumerate(zip(value, typing.get_args(hint))))
    return value


def _build(cls, d, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(d).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    kw = {}
    for name, value in d.items():
        path = f"{where}.{name}" if where else name
        hint = hints[name]
        if isinstance(hint, type) and is_dataclass(hint):
            kw[name] = _build(hint, value, path)
        else:
            kw[name] = _check_scalar(value, hint, path)
    try:
        return cls(**kw)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def load_config(path: str | Path) -> ExperimentConfig:
    """Read a YAML or JSON experiment document."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"{path} is not valid YAML/JSON: {exc}") from exc
    if doc is None:
        raise ConfigError(f"{path} is empty")
    return ExperimentConfig.from_dict(doc)


def save_config(config: ExperimentConfig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = f"# config_hash: {config.hash}\n"
    if path.suffix == ".json":
        path.write_text(json.dumps(config.to_dict(), indent=2) + "\n")
    else:
        path.write_text(header + config.to_yaml())
    return path


# ---------------------------------------------------------------------------
# Presets

# Desk-scale synthetic setup (the directional experiments)
DESK_WORLD = SyntheticWorldConfig(samples_total=8000, spatial_dependence_strength=0.8,
                                  seasonal_dependence_strength=0.8, num_classes=10, image_size=16,
                                  pixel_noise=0.04, color_variation=0.1, pair_frequency_gap=0.2,
                                  num_scenes=40)
DESK_MODEL = ModelSection(image_size=16, patch_size=4, embed_dim=32, depth=2, num_heads=2, mlp_ratio=2.0)
DESK_SSL = SSLSection(mode="stssl", algorithm="fixmatch", threshold=0.9, lambda_u=1.0, lambda_d=0.01)
DESK_TRAIN = TrainSection(n_l=8, n_u=32, total_steps=2000, base_lr=2e-3, ema_decay=0.99, log_interval=50)

# Reference-scale numbers (ViT-S; cosine schedule; batch composition)
VIT_S = dict(embed_dim=384, depth=12, num_heads=6, mlp_ratio=4.0)

ABLATION_ROWS: dict[str, tuple[str, dict, dict]] = {
    # row: (slug, ablation switches, ssl overrides)
    "b": ("no-time", {"no_time": True}, {}),
    "c": ("no-geo", {"no_geo": True}, {}),
    "d": ("late-fusion", {"late_fusion": True}, {}),
    "e": ("single-model", {"single_model": True}, {}),
    "f": ("no-distill", {"no_distill": True}, {}),
    "g": ("mae", {"distill_criterion": "mae"}, {}),
    "h": ("cosine", {"distill_criterion": "cosine"}, {}),
    "i": ("cls-token", {"distill_on_cls_token": True}, {}),
    "j": ("no-stop-grad", {"no_stop_grad": True}, {}),
    "k": ("lambda-d-0.1", {}, {"lambda_d": 0.1}),
    "l": ("lambda-d-0.5", {}, {"lambda_d": 0.5}),
    "m": ("lambda-d-2.0", {}, {"lambda_d": 2.0}),
}

EUROSAT_LABELS = (10, 20, 40, 80)


def _synthetic_default() -> ExperimentConfig:
    return ExperimentConfig(
        name="synthetic-default",
        description="FixMatch + spatiotemporal teacher/student on the desk-scale synthetic world",
        dataset=DatasetSection(synthetic=DESK_WORLD, test_samples=2000, split=SplitSection(0.01)),
        model=DESK_MODEL, ssl=DESK_SSL, train=DESK_TRAIN,
    )


def _bigearthnet() -> ExperimentConfig:
    stand_in = SyntheticWorldConfig(num_classes=19, task_mode=MULTI_LABEL, image_size=128, samples_total=2000)
    return ExperimentConfig(
        name="bigearthnet-1pct",
        description="BigEarthNet RGB, 1% labels, ViT-S/16 at 128px, 64k steps, lr 1e-4, batch 64+448",
        dataset=DatasetSection(source="manifest", synthetic=stand_in, train_manifest="data/bigearthnet/train.csv",
                               test_manifest="data/bigearthnet/test.csv", num_classes=19, task_mode=MULTI_LABEL,
                               split=SplitSection(0.01, "stratified")),
        model=ModelSection(image_size=128, patch_size=16, **VIT_S),
        ssl=SSLSection(mode="stssl", algorithm="fixmatch", threshold=0.95, lambda_u=1.0, lambda_d=1.0),
        train=TrainSection(n_l=64, n_u=448, total_steps=64_000, base_lr=1e-4, ema_decay=0.999, log_interval=100),
    )


def _eurosat(n: int) -> ExperimentConfig:
    stand_in = SyntheticWorldConfig(num_classes=10, image_size=32, samples_total=max(1000, 12 * n * 10),
                                    with_time=False, lat_range=(35.0, 70.0), lon_range=(-10.0, 30.0))
    return ExperimentConfig(
        name=f"eurosat-n{n}",
        description=f"EuroSAT RGB, {n} labels per class, ViT-S/2 at 32px, 204.8k steps, lr 5e-5, batch 8+8; "
                    "no acquisition time",
        dataset=DatasetSection(source="manifest", synthetic=stand_in, train_manifest="data/eurosat/train.csv",
                               test_manifest="data/eurosat/test.csv", num_classes=10, task_mode=SINGLE_LABEL,
                               split=SplitSection(1.0, "exact-per-class", n)),
        model=ModelSection(image_size=32, patch_size=2, **VIT_S),
        ssl=SSLSection(mode="stssl", algorithm="fixmatch", threshold=0.95, lambda_u=1.0, lambda_d=0.01),
        train=TrainSection(n_l=8, n_u=8, total_steps=204_800, base_lr=5e-5, ema_decay=0.999, log_interval=100),
    )


def _build_presets() -> dict[str, ExperimentConfig]:
    base = _synthetic_default()
    out = {
        "synthetic-default": base,
        "fixmatch-stssl-synthetic": replace(base, name="fixmatch-stssl-synthetic"),
        "defixmatch-stssl-synthetic": replace(base.override("ssl", algorithm="defixmatch"),
                                              name="defixmatch-stssl-synthetic",
                                              description="DeFixMatch + spatiotemporal teacher/student, synthetic"),
        "fixmatch-synthetic": replace(base.override("ssl", mode="fixmatch"), name="fixmatch-synthetic",
                                      description="plain FixMatch baseline, synthetic"),
        "defixmatch-synthetic": replace(base.override("ssl", mode="fixmatch", algorithm="defixmatch"),
                                        name="defixmatch-synthetic", description="plain DeFixMatch baseline, synthetic"),
        "supervised-synthetic": replace(base.override("ssl", mode="supervised"), name="supervised-synthetic",
                                        description="supervised-only baseline on the labeled pool, synthetic"),
        "bigearthnet-1pct": _bigearthnet(),
    }
    for n in EUROSAT_LABELS:
        out[f"eurosat-n{n}"] = _eurosat(n)
    for row, (slug, switches, ssl_kw) in ABLATION_ROWS.items():
        cfg = base
        if switches:
            cfg = replace(cfg, ablations=replace(cfg.ablations, **switches))
        if ssl_kw:
            cfg = cfg.override("ssl", **ssl_kw)
        name = f"ablation-{row}-{slug}"
        out[name] = replace(cfg, name=name, description=f"ablation row ({row}): {slug.replace('-', ' ')}")
    return out


PRESETS = _build_presets()


def preset_names() -> list[str]:
    return list(PRESETS)


def get_preset(name: str) -> ExperimentConfig:
    """Look up a preset; "ablation-(f)-no-distill" and "ablation-(i)" style names are accepted."""
    if name in PRESETS:
        return PRESETS[name]
    m = re.fullmatch(r"ablation-\(?([b-m])\)?(?:-.*)?", name)
    if m:
        row = m.group(1)
        return PRESETS[f"ablation-{row}-{ABLATION_ROWS[row][0]}"]
    raise ConfigError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}")


# ---------------------------------------------------------------------------
# Data and runs


@dataclass
class ExperimentData:
    train: ImageDataset
    test: ImageDataset
    labeled_ids: list[str]
    unlabeled_ids: list[str]
    lat_range: tuple[float, float]
    lon_range: tuple[float, float]


def _stand_in_world(config: ExperimentConfig, samples: int | None = None) -> SyntheticWorldConfig:
    k, mode = config.dataset.label_space
    world = config.dataset.synthetic
    return replace(world, num_classes=k, task_mode=mode, image_size=config.model.image_size,
                   samples_total=samples or world.samples_total)


def _synthetic_data(world_cfg: SyntheticWorldConfig, test_samples: int):
    world = build_world(world_cfg)
    train = render_synthetic(world_cfg, "train", world).to_dataset(world)
    test = render_synthetic(replace(world_cfg, samples_total=test_samples), "test", world).to_dataset(world)
    return train, test


def _check_label_space(config: ExperimentConfig, ds: ImageDataset, what: str) -> None:
    k, mode = config.dataset.label_space
    if ds.num_classes != k or ds.task_mode != mode:
        raise ConfigError(f"{what}: dataset has {ds.num_classes} classes ({ds.task_mode}), "
                          f"config expects {k} ({mode})")
    if ds.image_size != config.model.image_size:
        raise ConfigError(f"{what}: images are {ds.image_size}px, model expects {config.model.image_size}px")


def load_data(config: ExperimentConfig, stand_in: bool = False) -> ExperimentData:
    """Training/test datasets plus the labeled/unlabeled split for ``config``.

    ``stand_in`` replaces manifest sources by synthetic data of the same label
    space and image size (dry runs without the real archives).
    """
    ds = config.dataset
    if ds.source == "synthetic" or stand_in:
        world = _stand_in_world(config)
        train, test = _synthetic_data(world, ds.test_samples if ds.source == "synthetic" else 64)
        lat_range, lon_range = world.lat_range, world.lon_range
    else:
        train = ImageDataset.from_manifest(load_manifest(ds.train_manifest))
        test = ImageDataset.from_manifest(load_manifest(ds.test_manifest)) if ds.test_manifest else train
        lat_range = (float(np.min(train.lat)), float(np.max(train.lat)))
        lon_range = (float(np.min(train.lon)), float(np.max(train.lon)))
    _check_label_space(config, train, "train split")
    _check_label_space(config, test, "test split")
    labeled, unlabeled = split(train.to_manifest(), ds.split.spec(config.train.seed))
    return ExperimentData(train, test, labeled, unlabeled, lat_range, lon_range)


def shrink(config: ExperimentConfig, steps: int = 1) -> ExperimentConfig:
    """A structurally identical but tiny version of ``config`` for smoke runs.

    Mode, algorithm, loss weights, ablation switches and split strategy are
    kept; backbone width/depth, image size, batch and dataset sizes shrink.
    """
    k, _ = config.dataset.label_space
    split_cfg = config.dataset.split
    if split_cfg.labels_per_class is not None:
        split_cfg = replace(split_cfg, labels_per_class=min(split_cfg.labels_per_class, 2))
    per_class = split_cfg.labels_per_class or 1
    samples = max(200, k * (per_class + 10))
    world = replace(config.dataset.synthetic, image_size=16, samples_total=samples)
    return replace(
        config,
        dataset=replace(config.dataset, synthetic=world, test_samples=min(config.dataset.test_samples, 64),
                        split=replace(split_cfg, labeled_fraction=max(split_cfg.labeled_fraction, 0.05))
                        if split_cfg.strategy == "stratified" else split_cfg),
        model=replace(config.model, image_size=16, patch_size=4, embed_dim=16, depth=1, num_heads=2, mlp_ratio=2.0),
        train=replace(config.train, n_l=min(config.train.n_l, 4), n_u=min(config.train.n_u, 8),
                      total_steps=steps, log_interval=1, eval_interval=0, checkpoint_interval=0),
    )


def dry_run(config: ExperimentConfig, shrink_model: bool = True, out_dir: str | Path | None = None) -> TrainResult:
    """One training step of ``config`` on stand-in data (validation + smoke test)."""
    cfg = shrink(config) if shrink_model else replace(config, train=replace(config.train, total_steps=1,
                                                                           log_interval=1))
    data = load_data(cfg, stand_in=cfg.dataset.source == "manifest")
    return run_training(cfg.train_config(), data.train, data.labeled_ids, data.unlabeled_ids, out_dir,
                        config_hash=config.hash)
