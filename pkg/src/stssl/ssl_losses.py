"""Semi-supervised objectives: supervised/consistency losses, the algorithm interface, and distillation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import torch
import torch.nn.functional as F

from .dataset import MULTI_LABEL, SINGLE_LABEL, TASK_MODES

DISTILL_CRITERIA = ("mse", "mae", "cosine")

# lambda_D presets used in the reference experiments
LAMBDA_D_BIGEARTHNET = 1.0
LAMBDA_D_EUROSAT = 0.01


@dataclass(frozen=True)
class PseudoBatch:
    """Pseudo-targets and their per-slot weights.

    Single-label: ``targets`` (N,) class indices, ``weights`` (N,).
    Multi-label: both (N, K); targets are per-class 0/1 decisions.
    ``soft`` optionally carries the full probability vectors for soft-target methods.
    """

    targets: torch.Tensor
    weights: torch.Tensor
    source: str = "self"
    soft: torch.Tensor | None = None

    def with_source(self, source: str) -> "PseudoBatch":
        return PseudoBatch(self.targets, self.weights, source, self.soft)

    @property
    def quantity(self) -> float:
        return float((self.weights > 0).float().mean())


@dataclass(frozen=True)
class LossWeights:
    lambda_u: float = 1.0
    lambda_d: float = 1.0

    def __post_init__(self):
        if self.lambda_u < 0 or self.lambda_d < 0:
            raise ValueError("loss weights must be non-negative")


def threshold_mask(confidence: torch.Tensor, tau: float) -> torch.Tensor:
    """1 where ``confidence >= tau``. A threshold above 1 masks every slot."""
    return (confidence >= tau).to(confidence.dtype)


def fixmatch_pseudo(weak_logits: torch.Tensor, tau: float = 0.95, task_mode: str = SINGLE_LABEL) -> PseudoBatch:
    """Hard pseudo-labels with confidence thresholding.

    Multi-label predictions are thresholded per class: the target is
    ``p >= 0.5`` and the slot passes when ``max(p, 1 - p) >= tau``.
    """
    if tau <= 0.5:
        raise ValueError(f"threshold must exceed 0.5, got {tau}")
    logits = weak_logits.detach()
    if task_mode == SINGLE_LABEL:
        probs = logits.softmax(dim=-1)
        conf, targets = probs.max(dim=-1)
    elif task_mode == MULTI_LABEL:
        probs = torch.sigmoid(logits)
        targets = (probs >= 0.5).to(logits.dtype)
        conf = torch.maximum(probs, 1.0 - probs)
    else:
        raise ValueError(f"unknown task_mode {task_mode!r}")
    return PseudoBatch(targets, threshold_mask(conf, tau), "self", probs)


def cross_entropy_per_sample(targets: torch.Tensor, logits: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits, targets.long(), reduction="none")


def bce_per_class(targets: torch.Tensor, logits: torch.Tensor) -> torch.Tensor:
    return F.binary_cross_entropy_with_logits(logits, targets.to(logits.dtype), reduction="none")


def _labeled_loss_fn(task_mode: str):
    if task_mode == SINGLE_LABEL:
        return cross_entropy_per_sample
    return lambda targets, logits: bce_per_class(targets, logits).mean(dim=1)


def _unlabeled_loss_fn(task_mode: str):
    return cross_entropy_per_sample if task_mode == SINGLE_LABEL else bce_per_class


@dataclass(frozen=True)
class SSLAlgorithm:
    """A FixMatch-family method.

    ``pseudo_fn`` maps detached weak-view logits to a :class:`PseudoBatch`
    (targets plus the weights alpha); ``labeled_loss`` returns one value per
    sample; ``unlabeled_loss`` one value per pseudo-label slot. Names in
    ``extra_losses`` are resolved by the training step ("debias" is the
    DeFixMatch term).
    """

    name: str
    task_mode: str
    pseudo_fn: Callable[[torch.Tensor], PseudoBatch]
    labeled_loss: Callable[[torch.Tensor, torch.Tensor], torch.Tensor]
    unlabeled_loss: Callable[[torch.Tensor, torch.Tensor], torch.Tensor]
    lambda_u: float = 1.0
    extra_losses: tuple[str, ...] = ()
    hyperparams: dict = field(default_factory=dict)

    @property
    def needs_labeled_strong(self) -> bool:
        return "debias" in self.extra_losses


def make_fixmatch(task_mode: str = SINGLE_LABEL, threshold: float = 0.95, lambda_u: float = 1.0) -> SSLAlgorithm:
    if task_mode not in TASK_MODES:
        raise ValueError(f"unknown task_mode {task_mode!r}")
    if threshold <= 0.5:
        raise ValueError(f"threshold must exceed 0.5, got {threshold}")
    return SSLAlgorithm(
        "fixmatch", task_mode,
        lambda logits: fixmatch_pseudo(logits, threshold, task_mode),
        _labeled_loss_fn(task_mode), _unlabeled_loss_fn(task_mode),
        lambda_u, (), {"threshold": threshold},
    )


def make_defixmatch(task_mode: str = SINGLE_LABEL, threshold: float = 0.95, lambda_u: float = 1.0) -> SSLAlgorithm:
    base = make_fixmatch(task_mode, threshold, lambda_u)
    return SSLAlgorithm("defixmatch", task_mode, base.pseudo_fn, base.labeled_loss, base.unlabeled_loss,
                        lambda_u, ("debias",), {"threshold": threshold})


ALGORITHMS: dict[str, Callable[..., SSLAlgorithm]] = {
    "fixmatch": make_fixmatch,
    "defixmatch": make_defixmatch,
}


def make_algorithm(name: str, task_mode: str = SINGLE_LABEL, **hyperparams) -> SSLAlgorithm:
    try:
        factory = ALGORITHMS[name]
    except KeyError:
        raise ValueError(f"unknown SSL algorithm {name!r}; available: {sorted(ALGORITHMS)}") from None
    return factory(task_mode, **hyperparams)


# ---------------------------------------------------------------------------
# Loss terms


def supervised_loss(targets: torch.Tensor, logits: torch.Tensor, algo: SSLAlgorithm) -> torch.Tensor:
    if logits.shape[0] == 0:
        raise ValueError("supervised loss needs at least one labeled sample")
    if targets.shape[0] != logits.shape[0]:
        raise ValueError("targets and predictions are misaligned")
    return algo.labeled_loss(targets, logits).mean()


def consistency_loss(pseudo: PseudoBatch, strong_logits: torch.Tensor, algo: SSLAlgorithm) -> torch.Tensor:
    """Mean over samples of alpha-weighted criteria; multi-label slots are averaged per sample first."""
    if strong_logits.shape[0] == 0:
        raise ValueError("consistency loss needs at least one sample")
    if pseudo.targets.shape[0] != strong_logits.shape[0]:
        raise ValueError("weak and strong batches are misaligned")
    per_slot = algo.unlabeled_loss(pseudo.targets, strong_logits)
    weighted = pseudo.weights.to(per_slot.dtype) * per_slot
    if weighted.ndim == 2:
        weighted = weighted.mean(dim=1)
    return weighted.mean()


def unsupervised_loss_self(weak_logits: torch.Tensor, strong_logits: torch.Tensor,
                           algo: SSLAlgorithm) -> torch.Tensor:
    """Self-training term: a model's own weak-view pseudo-labels supervise its strong view."""
    if weak_logits.shape != strong_logits.shape:
        raise ValueError("weak and strong batches are misaligned")
    return consistency_loss(algo.pseudo_fn(weak_logits.detach()), strong_logits, algo)


def unsupervised_loss_cross(teacher_weak_logits: torch.Tensor, student_strong_logits: torch.Tensor,
                            algo: SSLAlgorithm) -> torch.Tensor:
    """Cross term: teacher weak-view pseudo-labels supervise the student's strong view."""
    if teacher_weak_logits.shape != student_strong_logits.shape:
        raise ValueError("teacher and student batches are misaligned")
    pseudo = algo.pseudo_fn(teacher_weak_logits.detach()).with_source("teacher")
    return consistency_loss(pseudo, student_strong_logits, algo)


def defixmatch_debias(labeled_weak_logits: torch.Tensor | None, labeled_strong_logits: torch.Tensor,
                      algo: SSLAlgorithm) -> torch.Tensor:
    """Negative consistency loss evaluated on labeled samples."""
    if labeled_weak_logits is None:
        raise ValueError("debiasing needs the weak view of the labeled batch")
    return -unsupervised_loss_self(labeled_weak_logits, labeled_strong_logits, algo)


def distillation_loss(teacher_emb: torch.Tensor, student_emb: torch.Tensor, criterion: str = "mse",
                      stop_gradient: bool = True) -> torch.Tensor:
    if teacher_emb.shape != student_emb.shape:
        raise ValueError(f"embedding shapes differ: {tuple(teacher_emb.shape)} vs {tuple(student_emb.shape)}")
    if stop_gradient:
        teacher_emb = teacher_emb.detach()
    if criterion == "mse":
        return (student_emb - teacher_emb).pow(2).mean()
    if criterion == "mae":
        return (student_emb - teacher_emb).abs().mean()
    if criterion == "cosine":
        return (1.0 - F.cosine_similarity(student_emb, teacher_emb, dim=1, eps=1e-8)).mean()
    raise ValueError(f"unknown distillation criterion {criterion!r}")


def total_teacher_loss(supervised, unsupervised, weights: LossWeights, extra=0.0):
    """Supervised term plus lambda_U times (consistency + extra consistency-type terms)."""
    return supervised + weights.lambda_u * (unsupervised + extra)


def total_student_loss(supervised, unsupervised, distillation, weights: LossWeights, extra=0.0):
    """Student objective; with lambda_D == 0 the distillation term is not even added."""
    total = supervised + weights.lambda_u * (unsupervised + extra)
    if weights.lambda_d != 0:
        total = total + weights.lambda_d * distillation
    return total
