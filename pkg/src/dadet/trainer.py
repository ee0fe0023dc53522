"""Training loop with structurally enforced gradient routing.

One training step computes every active loss in a single forward pass and
backpropagates the scalar ``detection + lambda * stacked`` objective once.
The routing constraints are enforced by graph nodes, not by optimizer
choreography:

  * each backbone tap reaches its domain classifier through gradient
    reversal, so the level losses train the classifiers while adversarially
    updating the backbone;
  * the context forward nets read the taps through stop-gradient (when the
    detach toggle is on), so no context-path gradient ever reaches the
    backbone;
  * the instance-context classifier input passes through gradient reversal,
    so the alignment loss reaches the context nets and the ROI path
    adversarially.

Consequently the context group receives gradients only from the
classification, regression and instance-context terms, and the detection
group receives the detection terms plus the reversed complementary terms.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import torch

from . import losses as L
from .gradroute import GradRoutingPolicy, gradient_reverse
from .losses import InstanceContextProbs, LossConfig
from .netarch import BackboneSpec, DetectorModel, save_checkpoint
from .synthdata import DomainSample, next_batch


class TrainConfigError(ValueError):
    """Inconsistent training configuration."""


class TrainingError(RuntimeError):
    """A loss term became non-finite; the message names the term."""


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 5000
    base_lr: float = 1e-3
    decay_every: int = 2000       # 0 disables the schedule
    decay_factor: float = 0.1
    momentum: float = 0.9
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    grl_scale: float = 1.0
    adversarial_context: bool = True
    anchor_size: float = 18.0
    rpn_topk: int = 32
    checkpoint_every: int = 0     # 0 disables intermediate checkpoints

    def __post_init__(self):
        if self.total_steps < 1:
            raise TrainConfigError("total_steps must be >= 1")
        if self.base_lr <= 0:
            raise TrainConfigError("base_lr must be > 0")
        if self.decay_every < 0:
            raise TrainConfigError("decay_every must be >= 0 (0 disables decay)")
        if self.decay_every > self.total_steps:
            raise TrainConfigError(
                "decay_every must be <= total_steps (or 0 to disable decay)"
            )
        if self.loss.K != self.backbone.K:
            raise TrainConfigError(
                f"loss config K={self.loss.K} != backbone K={self.backbone.K}"
            )

    def policy(self) -> GradRoutingPolicy:
        return GradRoutingPolicy(
            grl_scale=self.grl_scale,
            detach_enabled=self.loss.use_detach,
            adversarial_context=self.adversarial_context,
        )


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Step decay: base_lr * factor^(step // decay_every)."""
    if step < 0:
        raise TrainConfigError(f"step must be >= 0, got {step}")
    if cfg.decay_every == 0:
        return cfg.base_lr
    return cfg.base_lr * cfg.decay_factor ** (step // cfg.decay_every)


@dataclass
class StepReport:
    step: int
    l_rpn: float
    l_cls: float
    l_reg: float
    l_levels: tuple[float, ...]
    l_iloss: float
    l_det: float
    l_scl: float
    total: float
    lr: float
    grad_norm_context: float
    grad_norm_detection: float

    def as_dict(self) -> dict:
        d = asdict(self)
        d["l_levels"] = list(self.l_levels)
        return d

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True)


def build_model(cfg: TrainConfig) -> DetectorModel:
    """Seeded model construction; two calls with one seed are identical."""
    torch.manual_seed(cfg.seed)
    return DetectorModel(
        spec=cfg.backbone,
        loss_cfg=cfg.loss,
        policy=cfg.policy(),
        anchor_size=cfg.anchor_size,
        rpn_topk=cfg.rpn_topk,
    )


def build_optimizer(model: DetectorModel, cfg: TrainConfig) -> torch.optim.SGD:
    groups = model.parameter_groups()
    return torch.optim.SGD(
        [
            {"params": groups["context"], "name": "context"},
            {"params": groups["detection"], "name": "detection"},
        ],
        lr=cfg.base_lr,
        momentum=cfg.momentum,
    )


def _gt_tensors(sample: DomainSample):
    boxes = torch.tensor([list(b.xyxy) for b in sample.boxes], dtype=torch.float32)
    classes = torch.tensor([b.cls for b in sample.boxes], dtype=torch.long)
    return boxes, classes


def compute_losses(
    model: DetectorModel,
    source: DomainSample,
    target: DomainSample,
    cfg: LossConfig,
) -> dict:
    """All loss terms of one step as graph tensors.

    The source image supplies the detection losses and the source half of
    every domain term; the unlabeled target image supplies the target
    halves only.  The complementary terms are skipped entirely when the
    trade-off weight is zero (they would not contribute gradients).
    """
    if source.d != 1 or target.d != 0:
        raise TrainingError("batch must pair one source (d=1) and one target (d=0) sample")
    eta = model.policy.grl_scale
    adversarial = cfg.lam > 0
    zero = torch.zeros(())

    image_s = torch.from_numpy(source.image)
    feats_s = model.backbone_forward(image_s)
    ctx_s = model.context_forward(feats_s) if cfg.use_context else None

    # detection losses on the labeled source image
    gt_boxes, gt_classes = _gt_tensors(source)
    obj_s, deltas_s = model.rpn_forward(feats_s)
    l_rpn = model.rpn_losses(obj_s, deltas_s, gt_boxes)
    props_s = model.rpn_propose(feats_s, precomputed=(obj_s, deltas_s))
    rois_s = torch.cat([props_s.boxes, gt_boxes])
    inst_s = model.roi_extract(feats_s, rois_s)
    cls_probs, box_deltas, dom_probs_s = model.detect_head_forward(
        inst_s, ctx_s, cfg.use_context
    )
    labels, reg_targets = model.roi_targets(rois_s, gt_boxes, gt_classes)
    l_cls, l_reg = model.head_losses(cls_probs, box_deltas, labels, reg_targets)

    level_terms: list[torch.Tensor] = [zero] * cfg.K
    l_iloss = zero
    if adversarial:
        image_t = torch.from_numpy(target.image)
        feats_t = model.backbone_forward(image_t)
        for k, kind in enumerate(cfg.level_kinds):
            out_s = model.domain_classifier_forward(k, gradient_reverse(feats_s[k], eta))
            out_t = model.domain_classifier_forward(k, gradient_reverse(feats_t[k], eta))
            level_terms[k] = L.level_domain_loss(kind, out_s, out_t, cfg)
        if cfg.use_iloss:
            ctx_t = model.context_forward(feats_t)
            props_t = model.rpn_propose(feats_t)
            inst_t = model.roi_extract(feats_t, props_t.boxes)
            _, _, dom_probs_t = model.detect_head_forward(inst_t, ctx_t, cfg.use_context)
            l_iloss = L.instance_context_loss(
                InstanceContextProbs(source=[dom_probs_s], target=[dom_probs_t]),
                cfg.iloss_kind,
                cfg.gamma,
            )

    l_scl = L.scl_total(level_terms, l_iloss, cfg)
    l_det = L.detection_loss(l_rpn, l_cls, l_reg)
    total = L.overall_objective(l_det, l_scl, cfg.lam)
    return {
        "l_rpn": l_rpn,
        "l_cls": l_cls,
        "l_reg": l_reg,
        "l_levels": level_terms,
        "l_iloss": l_iloss,
        "l_det": l_det,
        "l_scl": l_scl,
        "total": total,
    }


def _check_finite(terms: dict) -> None:
    named = [("l_rpn", terms["l_rpn"]), ("l_cls", terms["l_cls"]),
             ("l_reg", terms["l_reg"]), ("l_iloss", terms["l_iloss"])]
    named += [(f"l_level_{k + 1}", t) for k, t in enumerate(terms["l_levels"])]
    for name, tensor in named:
        value = float(tensor.detach()) if torch.is_tensor(tensor) else float(tensor)
        if not math.isfinite(value):
            raise TrainingError(f"loss term '{name}' is non-finite: {value}")


def _group_grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(p.grad.pow(2).sum())
    return math.sqrt(total)


def train_step(
    model: DetectorModel,
    batch: tuple[DomainSample, DomainSample],
    cfg: TrainConfig,
    optimizer: torch.optim.SGD,
    step: int,
) -> StepReport:
    lr = lr_at(step, cfg)
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.zero_grad()
    source, target = batch
    terms = compute_losses(model, source, target, cfg.loss)
    _check_finite(terms)
    terms["total"].backward()
    groups = model.parameter_groups()
    g_ctx = _group_grad_norm(groups["context"])
    g_det = _group_grad_norm(groups["detection"])
    optimizer.step()

    def _f(t):
        return float(t.detach()) if torch.is_tensor(t) else float(t)

    report = StepReport(
        step=step,
        l_rpn=_f(terms["l_rpn"]),
        l_cls=_f(terms["l_cls"]),
        l_reg=_f(terms["l_reg"]),
        l_levels=tuple(_f(t) for t in terms["l_levels"]),
        l_iloss=_f(terms["l_iloss"]),
        l_det=_f(terms["l_det"]),
        l_scl=_f(terms["l_scl"]),
        total=_f(terms["total"]),
        lr=lr,
        grad_norm_context=g_ctx,
        grad_norm_detection=g_det,
    )
    recomputed = report.l_det + cfg.loss.lam * report.l_scl
    if abs(report.total - recomputed) > 1e-6:
        raise TrainingError(
            f"objective mismatch: total={report.total} vs parts={recomputed}"
        )
    return report


def run_training(
    cfg: TrainConfig,
    source_set: list[DomainSample],
    target_set: list[DomainSample],
    out_dir=None,
    log_name: str = "report_log.jsonl",
) -> tuple[DetectorModel, list[StepReport]]:
    """Seeded full training run; writes a line-delimited report log."""
    model = build_model(cfg)
    optimizer = build_optimizer(model, cfg)
    reports: list[StepReport] = []
    log_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / log_name, "w", encoding="utf-8")
        header = {"config": config_as_dict(cfg)}
        log_fh.write(json.dumps(header, sort_keys=True) + "\n")
    try:
        for step in range(cfg.total_steps):
            batch = next_batch(source_set, target_set, step)
            report = train_step(model, batch, cfg, optimizer, step)
            reports.append(report)
            if log_fh is not None:
                log_fh.write(report.to_json() + "\n")
            if (
                out_dir is not None
                and cfg.checkpoint_every
                and (step + 1) % cfg.checkpoint_every == 0
                and (step + 1) < cfg.total_steps
            ):
                save_checkpoint(out_dir / f"checkpoint_{step + 1:06d}.npz", model)
        if out_dir is not None:
            save_checkpoint(out_dir / "checkpoint.npz", model,
                            extra={"config": config_as_dict(cfg)})
    finally:
        if log_fh is not None:
            log_fh.close()
    return model, reports


def config_as_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["loss"]["level_kinds"] = [k.value for k in cfg.loss.level_kinds]
    d["loss"]["iloss_kind"] = cfg.loss.iloss_kind.value
    return d
