"""Single-stage joint teacher/student optimisation, EMA tracking, cosine schedule and checkpoints."""

from __future__ import annotations

import json
import logging
import math
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .dataset import (DEFAULT_POLICY, AugmentationPolicy, Batch, ImageDataset, SINGLE_LABEL,
                      make_batches)
from .evaluation import pseudo_stats
from .model import (BackboneConfig, CheckpointError, VisionTransformer, build_model, read_container,
                    write_container)
from .ssl_losses import (DISTILL_CRITERIA, LossWeights, SSLAlgorithm, consistency_loss, distillation_loss,
                         make_algorithm, supervised_loss, total_student_loss, total_teacher_loss)

logger = logging.getLogger(__name__)

MODES = ("stssl", "fixmatch", "supervised")
STATE_FORMAT = "stssl-train-state"


class NumericalError(RuntimeError):
    """A loss component became NaN or infinite."""

    def __init__(self, component: str, step: int, diagnostics: dict):
        self.component = component
        self.step = step
        self.diagnostics = diagnostics
        super().__init__(f"non-finite {component} at step {step}: {diagnostics}")


class CheckpointMismatch(CheckpointError):
    pass


@dataclass(frozen=True)
class Ablations:
    no_geo: bool = False
    no_time: bool = False
    late_fusion: bool = False
    single_model: bool = False
    no_distill: bool = False
    distill_criterion: str = "mse"
    distill_on_cls_token: bool = False
    no_stop_grad: bool = False

    def __post_init__(self):
        if self.distill_criterion not in DISTILL_CRITERIA:
            raise ValueError(f"unknown distillation criterion {self.distill_criterion!r}")
        if self.no_geo and self.no_time:
            raise ValueError("no_geo and no_time together leave the teacher without metadata")


def _strict_from_dict(cls, d: dict, what: str):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown {what} keys: {sorted(unknown)}")
    return cls(**d)


@dataclass(frozen=True)
class TrainConfig:
    teacher: BackboneConfig = field(default_factory=lambda: BackboneConfig(variant="teacher", fusion="early-metatoken"))
    student: BackboneConfig = field(default_factory=lambda: BackboneConfig(variant="student"))
    mode: str = "stssl"
    algorithm: str = "fixmatch"
    threshold: float = 0.95
    lambda_u: float = 1.0
    lambda_d: float = 1.0
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
    ablations: Ablations = field(default_factory=Ablations)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")
        if self.n_l < 1 or self.n_u < 1:
            raise ValueError("n_l and n_u must be positive")
        if self.log_interval < 1:
            raise ValueError("log_interval must be positive")
        LossWeights(self.lambda_u, self.lambda_d)
        self.algorithm_obj()  # unknown algorithm names and bad thresholds fail here
        if self.teacher.variant != "teacher":
            raise ValueError("teacher backbone must use the teacher variant")
        if self.student.variant != "student":
            raise ValueError("student backbone must use the student variant")
        if self.teacher.num_classes != self.student.num_classes or self.teacher.task_mode != self.student.task_mode:
            raise ValueError("teacher and student disagree on the label space")

    @property
    def task_mode(self) -> str:
        return self.student.task_mode

    @property
    def loss_weights(self) -> LossWeights:
        lambda_u = 0.0 if self.mode == "supervised" else self.lambda_u
        lambda_d = 0.0 if (self.ablations.no_distill or self.mode != "stssl" or self.ablations.single_model) else self.lambda_d
        return LossWeights(lambda_u, lambda_d)

    def effective_teacher(self) -> BackboneConfig:
        ab = self.ablations
        return self.teacher.replace(
            fusion="late-fusion" if ab.late_fusion else self.teacher.fusion,
            use_geo=self.teacher.use_geo and not ab.no_geo,
            use_time=self.teacher.use_time and not ab.no_time,
        )

    def roles(self) -> dict[str, BackboneConfig]:
        """Networks trained under this config, keyed by role."""
        if self.mode == "stssl":
            if self.ablations.single_model:
                return {"teacher": self.effective_teacher()}
            return {"teacher": self.effective_teacher(), "student": self.student}
        return {"student": self.student.replace(variant="plain")}

    @property
    def deployed_role(self) -> str:
        return "student" if "student" in self.roles() else "teacher"

    def algorithm_obj(self) -> SSLAlgorithm:
        return make_algorithm(self.algorithm, self.task_mode, threshold=self.threshold,
                              lambda_u=self.loss_weights.lambda_u)

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "teacher" in d:
            d["teacher"] = BackboneConfig.from_dict(d["teacher"])
        if "student" in d:
            d["student"] = BackboneConfig.from_dict(d["student"])
        if "ablations" in d:
            d["ablations"] = _strict_from_dict(Ablations, d["ablations"], "ablation")
        return _strict_from_dict(cls, d, "train")

    def with_ablations(self, **kw) -> "TrainConfig":
        return replace(self, ablations=replace(self.ablations, **kw))


def role_seed(seed: int, role: str) -> int:
    return int(seed) * 7919 + {"teacher": 1, "student": 2}[role]


# ---------------------------------------------------------------------------
# EMA and schedule


@dataclass
class EMAState:
    shadow: "OrderedDict[str, torch.Tensor]"
    decay: float
    step: int = 0

    @classmethod
    def from_model(cls, model: torch.nn.Module, decay: float) -> "EMAState":
        return cls(OrderedDict((n, p.detach().clone()) for n, p in model.named_parameters()), decay)


def ema_update(ema: EMAState, live_params: dict[str, torch.Tensor]) -> EMAState:
    """In place: ``shadow <- decay * shadow + (1 - decay) * live`` for every tensor."""
    if set(live_params) != set(ema.shadow):
        raise ValueError("EMA shadow and live parameters have different names")
    with torch.no_grad():
        for name, s in ema.shadow.items():
            live = live_params[name]
            if live.shape != s.shape:
                raise ValueError(f"EMA shape mismatch for {name}: {tuple(s.shape)} vs {tuple(live.shape)}")
            s.mul_(ema.decay).add_(live.detach(), alpha=1.0 - ema.decay)
    ema.step += 1
    return ema


def lr_at(step: int, total_steps: int, base_lr: float) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


# ---------------------------------------------------------------------------
# State


@dataclass
class TrainState:
    config: TrainConfig
    models: dict[str, VisionTransformer]
    optimizers: dict[str, torch.optim.Optimizer]
    emas: dict[str, EMAState]
    step: int = 0

    def ema_model(self, role: str) -> VisionTransformer:
        model = build_model(self.models[role].config)
        with torch.no_grad():
            for n, p in model.named_parameters():
                p.copy_(self.emas[role].shadow[n])
        model.eval()
        return model


def _make_optimizer(model: torch.nn.Module, config: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(model.parameters(), lr=config.base_lr, weight_decay=config.weight_decay)


def init_state(config: TrainConfig) -> TrainState:
    models, opts, emas = {}, {}, {}
    for role, bcfg in config.roles().items():
        m = build_model(bcfg, role_seed(config.seed, role))
        m.train()
        models[role] = m
        opts[role] = _make_optimizer(m, config)
        emas[role] = EMAState.from_model(m, config.ema_decay)
    return TrainState(config, models, opts, emas, 0)


def _images(x: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(x.transpose(0, 3, 1, 2)))


def _targets(labels: np.ndarray, task_mode: str) -> torch.Tensor:
    t = torch.from_numpy(np.asarray(labels))
    return t.long() if task_mode == SINGLE_LABEL else t.float()


def _check_finite(name: str, value: torch.Tensor, step: int, parts: dict) -> None:
    if not torch.isfinite(value).all():
        diag = {k: float(v.detach()) for k, v in parts.items() if isinstance(v, torch.Tensor) and v.numel() == 1}
        raise NumericalError(name, step, diag)


def train_step(state: TrainState, batch: Batch) -> dict:
    """One optimiser step for every network in ``state``; returns the step metrics."""
    cfg = state.config
    algo = cfg.algorithm_obj()
    weights = cfg.loss_weights
    task = cfg.task_mode
    ab = cfg.ablations
    debias = algo.needs_labeled_strong and weights.lambda_u > 0
    if debias and batch.labeled_strong is None:
        raise ValueError("this algorithm needs a strong view of the labeled batch")

    x_lw = _images(batch.labeled_weak)
    x_uw = _images(batch.unlabeled_weak)
    x_us = _images(batch.unlabeled_strong)
    x_ls = _images(batch.labeled_strong) if debias else None
    y_l = _targets(batch.labels, task)
    y_u = _targets(batch.unlabeled_truth, task)
    m_l = torch.from_numpy(batch.labeled_meta).float()
    m_u = torch.from_numpy(batch.unlabeled_meta).float()

    lr = lr_at(state.step, cfg.total_steps, cfg.base_lr)
    for opt in state.optimizers.values():
        for group in opt.param_groups:
            group["lr"] = lr
        opt.zero_grad(set_to_none=True)

    metrics: dict = {"step": state.step, "lr": lr}
    parts: dict[str, torch.Tensor] = {}
    total = None

    def self_training(role: str, use_meta: bool):
        model = state.models[role]
        ml, mu = (m_l, m_u) if use_meta else (None, None)
        out_lw = model(x_lw, ml)
        loss_l = supervised_loss(y_l, out_lw.logits, algo)
        parts[f"{role}/supervised"] = loss_l
        out_uw = loss_u = pseudo = None
        extra = 0.0
        if weights.lambda_u > 0 or role == "teacher" and "student" in state.models:
            out_uw = model(x_uw, mu)
            pseudo = algo.pseudo_fn(out_uw.logits)
        if weights.lambda_u > 0:
            loss_u = consistency_loss(pseudo, model(x_us, mu).logits, algo)
            parts[f"{role}/unsupervised"] = loss_u
            if debias:
                lab_pseudo = algo.pseudo_fn(out_lw.logits)
                extra = -consistency_loss(lab_pseudo, model(x_ls, ml).logits, algo)
                parts[f"{role}/debias"] = extra
        loss = total_teacher_loss(loss_l, 0.0 if loss_u is None else loss_u, weights, extra)
        parts[f"{role}/total"] = loss
        return loss, out_lw, out_uw, pseudo

    if "student" in state.models and "teacher" in state.models:
        t_loss, t_lw, t_uw, t_pseudo = self_training("teacher", True)
        student = state.models["student"]
        s_lw = student(x_lw)
        s_loss_l = supervised_loss(y_l, s_lw.logits, algo)
        parts["student/supervised"] = s_loss_l
        s_loss_u = torch.zeros(())
        extra = 0.0
        cross = t_pseudo.with_source("teacher")
        if weights.lambda_u > 0:
            s_loss_u = consistency_loss(cross, student(x_us).logits, algo)
            parts["student/unsupervised"] = s_loss_u
            if debias:
                lab_pseudo = algo.pseudo_fn(t_lw.logits).with_source("teacher")
                extra = -consistency_loss(lab_pseudo, student(x_ls).logits, algo)
                parts["student/debias"] = extra
        s_loss_d = torch.zeros(())
        if weights.lambda_d > 0:
            s_uw = student(x_uw)
            if ab.distill_on_cls_token:
                t_emb = torch.cat([t_lw.cls_embedding, t_uw.cls_embedding])
            else:
                t_emb = torch.cat([t_lw.special_embedding, t_uw.special_embedding])
            s_emb = torch.cat([s_lw.special_embedding, s_uw.special_embedding])
            s_loss_d = distillation_loss(t_emb, s_emb, ab.distill_criterion, stop_gradient=not ab.no_stop_grad)
            parts["student/distillation"] = s_loss_d
        s_loss = total_student_loss(s_loss_l, s_loss_u, s_loss_d, weights, extra)
        parts["student/total"] = s_loss
        total = t_loss + s_loss
        stats_pseudo = cross
    else:
        role = next(iter(state.models))
        total, _, _, stats_pseudo = self_training(role, role == "teacher")

    for name, value in parts.items():
        _check_finite(name, value, state.step, parts)
    total.backward()
    for opt in state.optimizers.values():
        opt.step()
    for role, model in state.models.items():
        ema_update(state.emas[role], dict(model.named_parameters()))
    state.step += 1

    for name, value in parts.items():
        metrics[name] = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
    if stats_pseudo is not None:
        quality, quantity = pseudo_stats(stats_pseudo, y_u)
        metrics["pseudo_quantity"] = quantity
        metrics["pseudo_quality"] = quality
    return metrics


# ---------------------------------------------------------------------------
# Checkpoints


def _state_tensors(state: TrainState) -> "OrderedDict[str, torch.Tensor]":
    out = OrderedDict()
    for role in sorted(state.models):
        model = state.models[role]
        for n, p in model.named_parameters():
            out[f"model.{role}.{n}"] = p.detach()
        for n, s in state.emas[role].shadow.items():
            out[f"ema.{role}.{n}"] = s
        opt = state.optimizers[role]
        for n, p in model.named_parameters():
            st = opt.state.get(p, {})
            for key in sorted(st):
                if isinstance(st[key], torch.Tensor):
                    out[f"optim.{role}.{n}.{key}"] = st[key]
    return out


def save_checkpoint(state: TrainState, path: str | Path, extra: dict | None = None) -> Path:
    meta = {
        "format": STATE_FORMAT,
        "step": state.step,
        "config": state.config.to_dict(),
        "roles": {r: m.config.to_dict() for r, m in sorted(state.models.items())},
        "ema_steps": {r: e.step for r, e in sorted(state.emas.items())},
        # all training randomness (batch order, augmentation) is keyed by these two values
        "rng": {"seed": state.config.seed, "step": state.step},
    }
    if extra:
        meta["extra"] = extra
    return write_container(path, _state_tensors(state), meta)


def load_checkpoint(path: str | Path, config: TrainConfig | None = None) -> TrainState:
    """Rebuild a :class:`TrainState`; with ``config`` the stored networks must match it."""
    tensors, meta = read_container(path)
    if meta.get("format") != STATE_FORMAT:
        raise CheckpointMismatch(f"{path} is not a training-state checkpoint")
    stored = TrainConfig.from_dict(meta["config"])
    if config is None:
        config = stored
    stored_roles = {r: BackboneConfig.from_dict(c) for r, c in meta["roles"].items()}
    wanted = config.roles()
    if set(stored_roles) != set(wanted):
        raise CheckpointMismatch(
            f"checkpoint holds networks {sorted(stored_roles)} but the config expects {sorted(wanted)}")
    for role, bcfg in wanted.items():
        have = stored_roles[role]
        if have.num_classes != bcfg.num_classes:
            raise CheckpointMismatch(f"{role}: checkpoint has {have.num_classes} classes, config {bcfg.num_classes}")
        if have != bcfg:
            raise CheckpointMismatch(f"{role}: backbone config differs from the checkpoint")

    state = init_state(config)
    state.step = int(meta["step"])
    with torch.no_grad():
        for role, model in state.models.items():
            for n, p in model.named_parameters():
                key = f"model.{role}.{n}"
                if key not in tensors:
                    raise CheckpointMismatch(f"missing tensor {key}")
                p.copy_(tensors[key])
            ema = state.emas[role]
            for n in ema.shadow:
                ema.shadow[n].copy_(tensors[f"ema.{role}.{n}"])
            ema.step = int(meta["ema_steps"][role])
            opt = state.optimizers[role]
            for n, p in model.named_parameters():
                prefix = f"optim.{role}.{n}."
                st = {k[len(prefix):]: v.clone() for k, v in tensors.items() if k.startswith(prefix)}
                if st:
                    opt.state[p] = st
    return state


# ---------------------------------------------------------------------------
# Loop


@dataclass
class TrainResult:
    state: TrainState
    metrics: list[dict]
    checkpoints: dict[str, Path] = field(default_factory=dict)
    best_score: float | None = None
    seconds: float = 0.0


def _mean_records(records: list[dict]) -> dict:
    out = {}
    keys = {k for r in records for k in r}
    for k in sorted(keys):
        vals = [r[k] for r in records if r.get(k) is not None]
        if k == "step":
            out[k] = records[-1]["step"] + 1
        elif vals:
            out[k] = float(np.mean(vals))
        else:
            out[k] = None
    return out


def run_training(config: TrainConfig, dataset: ImageDataset, labeled_ids, unlabeled_ids,
                 out_dir: str | Path | None = None, eval_fn: Callable[[TrainState], dict] | None = None,
                 resume_from: str | Path | None = None, stop_after: int | None = None,
                 policy: AugmentationPolicy = DEFAULT_POLICY, config_hash: str | None = None,
                 checkpoint_extra: dict | None = None) -> TrainResult:
    """Run ``config.total_steps`` training steps (or until ``stop_after``).

    Every ``log_interval`` steps one averaged record goes to ``metrics.jsonl``;
    ``eval_fn`` runs every ``eval_interval`` steps and at the end, and its
    ``score`` entry selects the best checkpoint. ``checkpoint_extra`` is stored
    verbatim in every checkpoint header.
    """
    start = time.perf_counter()
    state = load_checkpoint(resume_from, config) if resume_from else init_state(config)
    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = (out / "metrics.jsonl").open("a" if resume_from else "w")
    algo = config.algorithm_obj()
    batches = make_batches(dataset, labeled_ids, unlabeled_ids, config.n_l, config.n_u, config.seed, policy,
                           replacement=config.replacement,
                           labeled_strong=algo.needs_labeled_strong, start_step=state.step)
    end = config.total_steps if stop_after is None else min(stop_after, config.total_steps)
    log, window = [], []
    checkpoints: dict[str, Path] = {}
    best = None
    extra = dict(checkpoint_extra or {})
    if config_hash:
        extra["config_hash"] = config_hash
    try:
        while state.step < end:
            rec = train_step(state, next(batches))
            window.append(rec)
            if state.step % config.log_interval == 0:
                row = _mean_records(window)
                window = []
                is_eval = config.eval_interval and state.step % config.eval_interval == 0
                if eval_fn is not None and (is_eval or state.step == config.total_steps):
                    ev = eval_fn(state)
                    row.update({f"eval/{k}": v for k, v in ev.items()})
                    score = ev.get("score")
                    if out is not None and score is not None and (best is None or score > best):
                        best = score
                        checkpoints["best"] = save_checkpoint(state, out / "best.ckpt", extra)
                if config_hash:
                    row["config_hash"] = config_hash
                log.append(row)
                if log_fh:
                    log_fh.write(json.dumps(row, sort_keys=True) + "\n")
                    log_fh.flush()
            if out is not None and config.checkpoint_interval and state.step % config.checkpoint_interval == 0:
                checkpoints[f"step-{state.step}"] = save_checkpoint(state, out / f"step-{state.step}.ckpt", extra)
    finally:
        if log_fh:
            log_fh.close()
    if out is not None and state.step == config.total_steps:
        checkpoints["final"] = save_checkpoint(state, out / "final.ckpt", extra)
    return TrainResult(state, log, checkpoints, best, time.perf_counter() - start)
