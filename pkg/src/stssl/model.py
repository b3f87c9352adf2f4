"""Compact vision transformer with metatoken (teacher) and distillation-token (student) variants."""

from __future__ import annotations

import hashlib
import json
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .dataset import GeoTemporal, SINGLE_LABEL, TASK_MODES

ParamSnapshot = "OrderedDict[str, torch.Tensor]"

VARIANTS = ("teacher", "student", "plain")
FUSIONS = ("early-metatoken", "late-fusion", "none")

DAYS_PER_YEAR = 365.25


@dataclass(frozen=True)
class BackboneConfig:
    image_size: int = 32
    patch_size: int = 4
    embed_dim: int = 192
    depth: int = 6
    num_heads: int = 3
    mlp_ratio: float = 4.0
    num_classes: int = 10
    task_mode: str = SINGLE_LABEL
    variant: str = "plain"
    fusion: str = "none"
    in_channels: int = 3
    # images arrive in [0, 1]; standardised before patch embedding
    pixel_mean: float = 0.5
    pixel_std: float = 0.25
    # metadata encoding (teacher only)
    use_geo: bool = True
    use_time: bool = True
    time_encoding: str = "scalar"  # or "cyclic"
    missing_time: str = "fill"  # or "learned"
    missing_time_fill: float = 0.5

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be divisible by num_heads")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.fusion not in FUSIONS:
            raise ValueError(f"unknown fusion {self.fusion!r}")
        if self.task_mode not in TASK_MODES:
            raise ValueError(f"unknown task_mode {self.task_mode!r}")
        if self.variant == "teacher" and self.fusion == "none":
            raise ValueError("a teacher needs early-metatoken or late-fusion")
        if self.variant != "teacher" and self.fusion != "none":
            raise ValueError("only the teacher variant consumes metadata")
        if self.time_encoding not in ("scalar", "cyclic"):
            raise ValueError(f"unknown time_encoding {self.time_encoding!r}")
        if self.missing_time not in ("fill", "learned"):
            raise ValueError(f"unknown missing_time mode {self.missing_time!r}")
        if self.pixel_std <= 0:
            raise ValueError("pixel_std must be positive")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def uses_metadata(self) -> bool:
        return self.variant == "teacher"

    @property
    def has_extra_token(self) -> bool:
        return self.variant == "student" or self.fusion == "early-metatoken"

    @property
    def seq_len(self) -> int:
        return self.num_patches + 1 + int(self.has_extra_token)

    @property
    def hidden_dim(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)

    @property
    def meta_in_dim(self) -> int:
        return 4 if self.time_encoding == "cyclic" else 3

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown backbone keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw) -> "BackboneConfig":
        return BackboneConfig(**{**self.to_dict(), **kw})


# ---------------------------------------------------------------------------
# Metadata


def normalize_metadata(meta: GeoTemporal, fill: float = 0.5) -> np.ndarray:
    """(lat / 90, lon / 180, day / 365.25); an absent day becomes ``fill``."""
    day = fill if meta.day_of_year is None else meta.day_of_year / DAYS_PER_YEAR
    return np.array([meta.latitude / 90.0, meta.longitude / 180.0, day], dtype=np.float64)


def metadata_features(meta: torch.Tensor, config: BackboneConfig,
                      missing_value: torch.Tensor | float | None = None) -> torch.Tensor:
    """Batch version of :func:`normalize_metadata` with the ablation masks applied.

    ``meta`` is (N, 3) raw (lat, lon, day) with NaN marking an absent day.
    """
    lat = meta[:, 0] / 90.0
    lon = meta[:, 1] / 180.0
    day = meta[:, 2] / DAYS_PER_YEAR
    missing = torch.isnan(day)
    fill = config.missing_time_fill if missing_value is None else missing_value
    if not config.use_geo:
        lat = torch.zeros_like(lat)
        lon = torch.zeros_like(lon)
    if not config.use_time:
        missing = torch.ones_like(missing)
    if config.time_encoding == "cyclic":
        ang = 2 * math.pi * torch.nan_to_num(day)
        sin = torch.where(missing, torch.zeros_like(ang), torch.sin(ang))
        cos = torch.where(missing, torch.zeros_like(ang), torch.cos(ang))
        return torch.stack([lat, lon, sin, cos], dim=1)
    day = torch.where(missing, torch.as_tensor(fill, dtype=day.dtype).expand_as(day), day)
    return torch.stack([lat, lon, day], dim=1)


def encode_metadata(vec: torch.Tensor, params: dict[str, torch.Tensor]) -> torch.Tensor:
    """Two affine maps with a GELU between: the metatoken for each row of ``vec``."""
    h = F.gelu(vec @ params["fc1.weight"].T + params["fc1.bias"])
    return h @ params["fc2.weight"].T + params["fc2.bias"]


class MetaEncoder(nn.Module):
    def __init__(self, in_dim: int, embed_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, embed_dim)
        self.fc2 = nn.Linear(embed_dim, embed_dim)

    def forward(self, vec: torch.Tensor) -> torch.Tensor:
        return encode_metadata(vec, {"fc1.weight": self.fc1.weight, "fc1.bias": self.fc1.bias,
                                     "fc2.weight": self.fc2.weight, "fc2.bias": self.fc2.bias})


# ---------------------------------------------------------------------------
# Transformer


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor):
        b, t, d = x.shape
        qkv = self.qkv(x).reshape(b, t, 3, self.num_heads, d // self.num_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = ((q @ k.transpose(-2, -1)) * self.scale).softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, t, d)
        return self.proj(out), attn


class Block(nn.Module):
    def __init__(self, dim: int, num_heads: int, hidden: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor):
        a, attn = self.attn(self.norm1(x))
        x = x + a
        x = x + self.fc2(F.gelu(self.fc1(self.norm2(x))))
        return x, attn


@dataclass
class ModelOutputs:
    logits: torch.Tensor
    cls_embedding: torch.Tensor
    special_embedding: torch.Tensor | None = None
    attention: list[torch.Tensor] | None = None


class VisionTransformer(nn.Module):
    """ViT with token layout ``[cls, extra?, patches...]``.

    ``extra`` is the metatoken for an early-fusion teacher and a learned
    distillation token for the student. Both the classification and the extra
    token embeddings are read after the final LayerNorm.
    """

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        d = config.embed_dim
        self.patch_embed = nn.Conv2d(config.in_channels, d, config.patch_size, stride=config.patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        if config.variant == "student":
            self.dist_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(torch.zeros(1, config.seq_len, d))
        if config.uses_metadata:
            self.meta_encoder = MetaEncoder(config.meta_in_dim, d)
            if config.missing_time == "learned":
                self.missing_time = nn.Parameter(torch.full((), config.missing_time_fill))
        self.blocks = nn.ModuleList(Block(d, config.num_heads, config.hidden_dim) for _ in range(config.depth))
        self.norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, config.num_classes)

    def encode_meta(self, meta: torch.Tensor) -> torch.Tensor:
        missing = getattr(self, "missing_time", None)
        feats = metadata_features(meta.to(self.pos_embed.dtype), self.config, missing)
        return self.meta_encoder(feats)

    def forward(self, images: torch.Tensor, meta: torch.Tensor | None = None,
                return_attention: bool = False) -> ModelOutputs:
        cfg = self.config
        if images.ndim != 4 or images.shape[1:] != (cfg.in_channels, cfg.image_size, cfg.image_size):
            raise ValueError(f"expected images of shape (N, {cfg.in_channels}, {cfg.image_size}, "
                             f"{cfg.image_size}), got {tuple(images.shape)}")
        if cfg.uses_metadata:
            if meta is None:
                raise ValueError("the teacher needs metadata")
            if meta.shape != (images.shape[0], 3):
                raise ValueError(f"expected metadata of shape ({images.shape[0]}, 3), got {tuple(meta.shape)}")
            meta_token = self.encode_meta(meta)
        b = images.shape[0]
        x = self.patch_embed((images - cfg.pixel_mean) / cfg.pixel_std).flatten(2).transpose(1, 2)
        tokens = [self.cls_token.expand(b, -1, -1)]
        if cfg.variant == "student":
            tokens.append(self.dist_token.expand(b, -1, -1))
        elif cfg.fusion == "early-metatoken":
            tokens.append(meta_token[:, None, :])
        x = torch.cat(tokens + [x], dim=1) + self.pos_embed
        attns = []
        for blk in self.blocks:
            x, attn = blk(x)
            if return_attention:
                attns.append(attn)
        x = self.norm(x)
        cls = x[:, 0]
        special = x[:, 1] if cfg.has_extra_token else None
        if cfg.fusion == "late-fusion":
            special = cls + meta_token
            logits = self.head(special)
        else:
            logits = self.head(cls)
        return ModelOutputs(logits, cls, special, attns if return_attention else None)


def late_fusion_forward(model: VisionTransformer, images: torch.Tensor, meta: torch.Tensor,
                        return_attention: bool = False) -> ModelOutputs:
    if model.config.fusion != "late-fusion":
        raise ValueError("model is not configured for late fusion")
    return model(images, meta, return_attention=return_attention)


# ---------------------------------------------------------------------------
# Parameters


def _init_module_params(model: VisionTransformer, generator: torch.Generator) -> None:
    with torch.no_grad():
        for name, p in model.named_parameters():
            leaf = name.rsplit(".", 1)[-1]
            if name == "missing_time":
                p.fill_(model.config.missing_time_fill)
            elif ".norm" in name or name.startswith("norm"):
                p.fill_(1.0 if leaf == "weight" else 0.0)
            elif leaf == "bias":
                p.zero_()
            else:
                nn.init.trunc_normal_(p, std=0.02, a=-0.04, b=0.04, generator=generator)


def build_model(config: BackboneConfig, seed: int = 0) -> VisionTransformer:
    model = VisionTransformer(config)
    gen = torch.Generator().manual_seed(int(seed))
    _init_module_params(model, gen)
    return model


def init_params(config: BackboneConfig, seed: int = 0) -> "OrderedDict[str, torch.Tensor]":
    return snapshot(build_model(config, seed))


def snapshot(model: nn.Module) -> "OrderedDict[str, torch.Tensor]":
    return OrderedDict((n, p.detach().clone()) for n, p in model.named_parameters())


def load_snapshot(model: nn.Module, params: dict[str, torch.Tensor]) -> None:
    own = dict(model.named_parameters())
    if set(own) != set(params):
        missing, extra = sorted(set(own) - set(params)), sorted(set(params) - set(own))
        raise ValueError(f"parameter names differ; missing={missing} unexpected={extra}")
    with torch.no_grad():
        for n, p in own.items():
            if p.shape != params[n].shape:
                raise ValueError(f"shape mismatch for {n}: {tuple(p.shape)} vs {tuple(params[n].shape)}")
            p.copy_(params[n])


def parameter_count(config: BackboneConfig) -> int:
    """Closed-form number of scalar parameters."""
    d, h, k, c, p = config.embed_dim, config.hidden_dim, config.num_classes, config.in_channels, config.patch_size
    n = d * c * p * p + d  # patch projection
    n += d  # class token
    n += d if config.variant == "student" else 0
    n += config.seq_len * d
    block = 4 * d + (3 * d * d + 3 * d) + (d * d + d) + (d * h + h) + (h * d + d)
    n += config.depth * block
    n += 2 * d + d * k + k
    if config.uses_metadata:
        n += config.meta_in_dim * d + d + d * d + d
        n += 1 if config.missing_time == "learned" else 0
    return n


# ---------------------------------------------------------------------------
# Checkpoint container
#
# layout: MAGIC | u32 version | u64 header length | header JSON (utf-8, sorted keys)
#         | tensor bytes (little-endian, C order, back to back) | sha256 of all preceding bytes


CONTAINER_MAGIC = b"STSSLCKP"
CONTAINER_VERSION = 1

_DTYPES = {
    "float32": (torch.float32, np.dtype("<f4")),
    "float64": (torch.float64, np.dtype("<f8")),
    "int64": (torch.int64, np.dtype("<i8")),
    "int32": (torch.int32, np.dtype("<i4")),
    "uint8": (torch.uint8, np.dtype("u1")),
    "bool": (torch.bool, np.dtype("?")),
}
_TORCH_TO_NAME = {v[0]: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


def write_container(path: str | Path, tensors: dict[str, torch.Tensor], meta: dict) -> Path:
    path = Path(path)
    entries, blobs, offset = [], [], 0
    for name, t in tensors.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _TORCH_TO_NAME:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
        dname = _TORCH_TO_NAME[t.dtype]
        raw = t.numpy().astype(_DTYPES[dname][1], copy=False).tobytes(order="C")
        entries.append({"name": name, "dtype": dname, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"tensors": entries, "meta": meta}, sort_keys=True, separators=(",", ":")).encode()
    body = CONTAINER_MAGIC + struct.pack("<IQ", CONTAINER_VERSION, len(header)) + header + b"".join(blobs)
    digest = hashlib.sha256(body).digest()
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(body + digest)
    tmp.replace(path)
    return path


def read_container(path: str | Path) -> tuple["OrderedDict[str, torch.Tensor]", dict]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if len(data) < len(CONTAINER_MAGIC) + 12 + 32 or not data.startswith(CONTAINER_MAGIC):
        raise CheckpointError(f"{path} is not a checkpoint container")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt file)")
    version, hlen = struct.unpack_from("<IQ", body, len(CONTAINER_MAGIC))
    if version != CONTAINER_VERSION:
        raise CheckpointError(f"{path}: container version {version}, expected {CONTAINER_VERSION}")
    start = len(CONTAINER_MAGIC) + 12
    header = json.loads(body[start:start + hlen])
    blob = body[start + hlen:]
    tensors = OrderedDict()
    for e in header["tensors"]:
        tdtype, npdtype = _DTYPES[e["dtype"]]
        raw = blob[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=npdtype).reshape(e["shape"]).copy()
        tensors[e["name"]] = torch.from_numpy(arr).to(tdtype)
    return tensors, header["meta"]
