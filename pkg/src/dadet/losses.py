"""Loss kernels for the stacked complementary alignment objective.

Three domain-classification kernels (cross-entropy, weighted least-squares,
focal), the per-level dispatch, the instance-context alignment loss, the
stacked total, the detection-loss aggregate and the overall scalar objective.

Conventions used throughout:
  * domain flag d = 1 means source, d = 0 means target;
  * a domain classifier output p is the predicted probability of "source",
    so the per-element target probability is ``p_t = p`` for source inputs
    and ``p_t = 1 - p`` for target inputs;
  * the least-squares kernel keeps its own literal form (source map driven
    to 0, target map to 1);
  * probabilities are clamped to ``[PROB_EPS, 1 - PROB_EPS]`` before logs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import torch

PROB_EPS = 1e-7


class LossConfigError(ValueError):
    """Inconsistent loss configuration."""


class LossInputError(ValueError):
    """A loss kernel received inputs outside its contract."""


class LossKind(str, Enum):
    LS = "LS"
    CE = "CE"
    FL = "FL"


def default_level_kinds(k: int) -> tuple[LossKind, ...]:
    """Canonical per-level kinds: spatial LS low, CE in the middle, FL high."""
    if k < 1:
        raise LossConfigError(f"need at least one classifier level, got K={k}")
    if k == 1:
        return (LossKind.LS,)
    return (LossKind.LS,) + (LossKind.CE,) * (k - 2) + (LossKind.FL,)


@dataclass(frozen=True)
class LossConfig:
    """The ablation configuration space: per-level kinds, toggles, weights."""

    level_kinds: tuple[LossKind, ...] = (LossKind.LS, LossKind.CE, LossKind.FL)
    iloss_kind: LossKind = LossKind.FL
    gamma: float = 5.0
    lam: float = 1.0
    alpha: float = 1.0
    beta: float = 1.0
    use_context: bool = True
    use_iloss: bool = True
    use_detach: bool = True
    K: int = 3

    def __post_init__(self):
        object.__setattr__(
            self, "level_kinds", tuple(LossKind(k) for k in self.level_kinds)
        )
        object.__setattr__(self, "iloss_kind", LossKind(self.iloss_kind))
        if self.K < 1:
            raise LossConfigError(f"K must be >= 1, got {self.K}")
        if len(self.level_kinds) != self.K:
            raise LossConfigError(
                f"level_kinds has {len(self.level_kinds)} entries but K={self.K}"
            )
        if self.iloss_kind == LossKind.LS:
            raise LossConfigError("instance-context loss must be CE or FL")
        if self.gamma <= 0:
            raise LossConfigError(f"gamma must be > 0, got {self.gamma}")
        if self.lam < 0:
            raise LossConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.alpha < 0 or self.beta < 0:
            raise LossConfigError("alpha and beta must be >= 0")
        if self.use_iloss and not self.use_context:
            raise LossConfigError(
                "use_iloss requires use_context (the instance-context "
                "classifier consumes the context vector)"
            )

    def label(self) -> str:
        """Human-readable ablation-row label, e.g. ``LS|CE|FL + ILoss=FL + Context + Detach``."""
        parts = ["|".join(k.value for k in self.level_kinds)]
        if self.use_iloss:
            parts.append(f"ILoss={self.iloss_kind.value}")
        if self.use_context:
            parts.append("Context")
        if self.use_detach:
            parts.append("Detach")
        return " + ".join(parts)


@dataclass
class InstanceContextProbs:
    """Per-image region probabilities for the instance-context classifier.

    ``source[i]`` / ``target[i]`` hold the predicted source-probability of
    every region proposal in the i-th source / target image.
    """

    source: list[torch.Tensor]
    target: list[torch.Tensor]

    def __post_init__(self):
        self.source = [_as_tensor(p).reshape(-1) for p in self.source]
        self.target = [_as_tensor(p).reshape(-1) for p in self.target]
        for p in self.source + self.target:
            with torch.no_grad():
                if p.numel() and (p.min() < 0 or p.max() > 1):
                    raise LossInputError("region probabilities must lie in [0, 1]")

    @property
    def n_source(self) -> int:
        return len(self.source)

    @property
    def n_target(self) -> int:
        return len(self.target)


def _as_tensor(x) -> torch.Tensor:
    """Graph tensors pass through; everything else converts at full precision."""
    if torch.is_tensor(x):
        return x
    return torch.as_tensor(x, dtype=torch.float64)


def _clamp_prob(p: torch.Tensor) -> torch.Tensor:
    return p.clamp(PROB_EPS, 1.0 - PROB_EPS)


def cross_entropy(probs, label: int) -> torch.Tensor:
    """Multiclass cross-entropy ``-log(probs[label])`` on a probability vector."""
    probs = _as_tensor(probs).reshape(-1)
    if torch.isnan(probs).any():
        raise LossInputError("probability vector contains NaN")
    if not 0 <= label < probs.numel():
        raise IndexError(f"label {label} out of range for {probs.numel()} classes")
    total = float(probs.sum())
    if abs(total - 1.0) > 1e-6:
        raise LossInputError(f"probabilities must sum to 1, got {total}")
    return -torch.log(_clamp_prob(probs[label]))


def least_squares_loss(source_map, target_map, alpha: float = 1.0, beta: float = 1.0) -> torch.Tensor:
    """Per-location least-squares alignment: source map driven to 0, target to 1."""
    s = _as_tensor(source_map)
    t = _as_tensor(target_map)
    if s.dim() < 2 or t.dim() < 2:
        raise LossInputError("least-squares loss needs spatial H x W maps")
    if s.numel() == 0 or t.numel() == 0:
        raise LossInputError("least-squares loss got an empty map")
    if s.shape[-2:] != t.shape[-2:]:
        raise LossInputError(
            f"source/target map sizes differ: {tuple(s.shape[-2:])} vs {tuple(t.shape[-2:])}"
        )
    return alpha * s.pow(2).mean() + beta * (1.0 - t).pow(2).mean()


def focal_loss(p, d: int, gamma: float) -> torch.Tensor:
    """Binary focal term ``-(1 - p_t)^gamma * log(p_t)``, mean over elements.

    ``p`` is the predicted source-probability; ``d`` selects ``p_t = p``
    (source, d=1) or ``p_t = 1 - p`` (target, d=0).  ``gamma=0`` recovers
    plain binary cross-entropy.
    """
    if gamma < 0:
        raise LossConfigError(f"focal exponent must be >= 0, got {gamma}")
    if d not in (0, 1):
        raise LossInputError(f"domain flag must be 0 or 1, got {d}")
    p = _as_tensor(p)
    p_t = _clamp_prob(p if d == 1 else 1.0 - p)
    return -((1.0 - p_t) ** gamma * torch.log(p_t)).mean()


def domain_cross_entropy(p, d: int) -> torch.Tensor:
    """Binary domain cross-entropy; mean over elements of ``-log(p_t)``."""
    return focal_loss(p, d, gamma=0.0)


def level_domain_loss(kind: LossKind, source_out, target_out, cfg: LossConfig) -> torch.Tensor:
    """Per-level domain loss: source term plus target term under ``kind``.

    LS expects spatial maps from the low-level classifier; CE/FL accept
    scalar (image-level) outputs and also reduce spatial maps by averaging.
    """
    kind = LossKind(kind)
    if kind == LossKind.LS:
        s = _as_tensor(source_out)
        t = _as_tensor(target_out)
        if s.dim() < 2 or t.dim() < 2:
            raise LossConfigError(
                "LS configured on a classifier with non-spatial output; "
                "place LS on the per-location level"
            )
        return least_squares_loss(s, t, cfg.alpha, cfg.beta)
    if kind == LossKind.CE:
        return domain_cross_entropy(source_out, 1) + domain_cross_entropy(target_out, 0)
    return focal_loss(source_out, 1, cfg.gamma) + focal_loss(target_out, 0, cfg.gamma)


def instance_context_loss(probs: InstanceContextProbs, kind: LossKind, gamma: float = 5.0) -> torch.Tensor:
    """Instance-context alignment loss over per-region source probabilities.

    Sums the per-region binary loss over the regions of each image, then
    averages per domain over images: ``(1/N_s) sum_i sum_j loss(P_ij, 1)
    + (1/N_t) sum_i sum_j loss(P_ij, 0)``.
    """
    kind = LossKind(kind)
    if kind == LossKind.LS:
        raise LossConfigError("instance-context loss must be CE or FL")
    if probs.n_source < 1 or probs.n_target < 1:
        raise LossInputError(
            f"need at least one image per domain, got N_s={probs.n_source}, "
            f"N_t={probs.n_target}"
        )
    if all(p.numel() == 0 for p in probs.source + probs.target):
        raise LossInputError("every image in the batch has zero region proposals")
    gamma_eff = gamma if kind == LossKind.FL else 0.0

    def per_domain(images: list[torch.Tensor], d: int) -> torch.Tensor:
        total = torch.zeros(())
        for p in images:
            if p.numel() == 0:
                continue
            p_t = _clamp_prob(p if d == 1 else 1.0 - p)
            total = total + (-((1.0 - p_t) ** gamma_eff) * torch.log(p_t)).sum()
        return total

    return per_domain(probs.source, 1) / probs.n_source + per_domain(
        probs.target, 0
    ) / probs.n_target


def scl_total(level_losses: Sequence, iloss, cfg: LossConfig) -> torch.Tensor:
    """Stacked complementary total: sum of level losses plus the gated ILoss."""
    if len(level_losses) != cfg.K:
        raise LossConfigError(
            f"expected {cfg.K} level losses, got {len(level_losses)}"
        )
    total = torch.zeros(())
    for term in level_losses:
        total = total + _as_tensor(term)
    if cfg.use_iloss:
        total = total + _as_tensor(iloss)
    return total


def detection_loss(rpn, cls, reg, include_rpn: bool = True) -> torch.Tensor:
    """Detection aggregate ``rpn + cls + reg`` (or without the RPN term)."""
    terms = {"rpn": _as_tensor(rpn), "cls": _as_tensor(cls), "reg": _as_tensor(reg)}
    for name, t in terms.items():
        value = float(t.detach()) if torch.is_tensor(t) else float(t)
        if not (value >= 0.0) or value != value:
            raise LossInputError(f"detection loss component '{name}' is {value}")
    total = terms["cls"] + terms["reg"]
    if include_rpn:
        total = total + terms["rpn"]
    return total


def overall_objective(det, scl, lam: float) -> torch.Tensor:
    """Scalar training objective ``det + lam * scl``.

    The adversarial max over the domain classifiers is produced by the
    reversal nodes inside ``scl``; no sign appears here.
    """
    if lam < 0:
        raise LossConfigError(f"lambda must be >= 0, got {lam}")
    return _as_tensor(det) + lam * _as_tensor(scl)
