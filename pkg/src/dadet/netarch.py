"""Toy two-stage detector with hierarchical domain classifiers.

A K-block conv backbone exposes one feature tap per block.  Each tap feeds
(a) an adversarial domain classifier (behind gradient reversal) and (b) a
context forward net (behind stop-gradient when detach is enabled).  The last
tap drives a single-anchor RPN, 7x7 bilinear ROI crops, the detection head
and the per-ROI instance-context domain classifier.

Parameters partition into exactly two groups: the context forward nets, and
everything else (backbone, RPN, ROI/detection head, all domain classifiers).
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .gradroute import GradRoutingPolicy, gradient_reverse, stop_gradient
from .losses import LossConfig, LossKind

CONTEXT_DIM_PER_LEVEL = 128


class ShapeError(ValueError):
    """Input tensor shape violates the module contract."""


class NetConfigError(ValueError):
    """Inconsistent architecture configuration."""


class DegenerateImageError(RuntimeError):
    """No usable region proposals survived decoding and clipping."""


def default_widths(k: int) -> tuple[int, ...]:
    return tuple(min(32 << i, 128) for i in range(k))


@dataclass(frozen=True)
class BackboneSpec:
    """K conv blocks, each two 3x3 convs + ReLU followed by 2x max-pooling."""

    K: int = 3
    widths: tuple[int, ...] = (32, 64, 128)
    input_hw: tuple[int, int] = (64, 64)

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "input_hw", tuple(int(v) for v in self.input_hw))
        if self.K < 1:
            raise NetConfigError(f"K must be >= 1, got {self.K}")
        if len(self.widths) != self.K:
            raise NetConfigError(
                f"widths has {len(self.widths)} entries but K={self.K}"
            )
        if any(w < 1 for w in self.widths):
            raise NetConfigError(f"widths must be positive, got {self.widths}")
        h, w = self.input_hw
        if h < 64 or w < 64:
            raise NetConfigError(f"input size must be at least 64x64, got {h}x{w}")
        if h % (1 << self.K) or w % (1 << self.K):
            raise NetConfigError(
                f"input size {h}x{w} must be divisible by 2^K = {1 << self.K}"
            )

    def stage_hw(self, k: int) -> tuple[int, int]:
        h, w = self.input_hw
        return h >> (k + 1), w >> (k + 1)

    @property
    def stride(self) -> int:
        """Stride of the last tap relative to the input image."""
        return 1 << self.K


class ConvBlock(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.pool = nn.MaxPool2d(2)

    def forward(self, x):
        x = F.relu(self.conv1(x))
        x = F.relu(self.conv2(x))
        return self.pool(x)


class Backbone(nn.Module):
    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        chans = (3,) + spec.widths
        self.blocks = nn.ModuleList(
            ConvBlock(chans[i], chans[i + 1]) for i in range(spec.K)
        )

    def forward(self, image: torch.Tensor) -> list[torch.Tensor]:
        if image.dim() != 3 or image.shape[0] != 3:
            raise ShapeError(f"expected a 3xHxW image, got {tuple(image.shape)}")
        if tuple(image.shape[1:]) != self.spec.input_hw:
            raise ShapeError(
                f"expected {self.spec.input_hw} input, got {tuple(image.shape[1:])}"
            )
        x = image.unsqueeze(0)
        feats = []
        for block in self.blocks:
            x = block(x)
            feats.append(x.squeeze(0))
        return feats


class SpatialDomainClassifier(nn.Module):
    """Per-location source-probability map (low-level, least-squares style)."""

    def __init__(self, cin: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cin, 1)
        self.conv2 = nn.Conv2d(cin, 1, 1)

    def forward(self, feat):
        x = F.relu(self.conv1(feat.unsqueeze(0)))
        return torch.sigmoid(self.conv2(x)).squeeze(0).squeeze(0)


class GlobalDomainClassifier(nn.Module):
    """Single image-level source probability (mid/high-level CE/FL)."""

    def __init__(self, cin: int, hidden: int = 32):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, hidden, 3, padding=1)
        self.conv2 = nn.Conv2d(hidden, hidden, 3, padding=1)
        self.fc = nn.Linear(hidden, 1)

    def forward(self, feat):
        x = F.relu(self.conv1(feat.unsqueeze(0)))
        x = F.relu(self.conv2(x))
        x = x.mean(dim=(2, 3))
        return torch.sigmoid(self.fc(x)).reshape(())


class ContextForwardNet(nn.Module):
    """Three 3x3 conv+ReLU stages ending at 128 channels, then global pooling."""

    def __init__(self, cin: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, 16, 3, padding=1)
        self.conv2 = nn.Conv2d(16, 32, 3, padding=1)
        self.conv3 = nn.Conv2d(32, CONTEXT_DIM_PER_LEVEL, 3, padding=1)

    def forward(self, feat):
        x = F.relu(self.conv1(feat.unsqueeze(0)))
        x = F.relu(self.conv2(x))
        x = F.relu(self.conv3(x))
        return x.mean(dim=(2, 3)).squeeze(0)


class RPNHead(nn.Module):
    def __init__(self, cin: int, hidden: int = 32):
        super().__init__()
        self.conv = nn.Conv2d(cin, hidden, 3, padding=1)
        self.obj = nn.Conv2d(hidden, 1, 1)
        self.box = nn.Conv2d(hidden, 4, 1)

    def forward(self, feat):
        x = F.relu(self.conv(feat.unsqueeze(0)))
        obj = self.obj(x).reshape(-1)
        deltas = self.box(x).squeeze(0).permute(1, 2, 0).reshape(-1, 4)
        return obj, deltas


class RoIFeatureExtractor(nn.Module):
    """Bilinear 7x7 crop of the last tap, flattened through one FC stage."""

    CROP = 7

    def __init__(self, cin: int, feat_dim: int = 128):
        super().__init__()
        self.fc = nn.Linear(cin * self.CROP * self.CROP, feat_dim)

    def forward(self, feat, boxes, stride: int):
        if boxes.numel() == 0:
            raise ShapeError("roi_extract needs at least one box")
        widths = boxes[:, 2] - boxes[:, 0]
        heights = boxes[:, 3] - boxes[:, 1]
        if (widths <= 0).any() or (heights <= 0).any():
            raise ShapeError("zero-area box passed to roi_extract")
        n = boxes.shape[0]
        c, fh, fw = feat.shape
        bins = (torch.arange(self.CROP, dtype=boxes.dtype) + 0.5) / self.CROP
        px = boxes[:, 0:1] + widths.unsqueeze(1) * bins.unsqueeze(0)   # (N, 7)
        py = boxes[:, 1:2] + heights.unsqueeze(1) * bins.unsqueeze(0)
        gx = 2.0 * px / (stride * fw) - 1.0
        gy = 2.0 * py / (stride * fh) - 1.0
        grid = torch.stack(
            [gx.unsqueeze(1).expand(n, self.CROP, self.CROP),
             gy.unsqueeze(2).expand(n, self.CROP, self.CROP)], dim=-1)
        crops = F.grid_sample(
            feat.unsqueeze(0).expand(n, c, fh, fw), grid,
            mode="bilinear", padding_mode="border", align_corners=False)
        return F.relu(self.fc(crops.reshape(n, -1)))


class DetectionHead(nn.Module):
    def __init__(self, in_dim: int, n_classes: int, hidden: int = 128):
        super().__init__()
        self.fc = nn.Linear(in_dim, hidden)
        self.cls = nn.Linear(hidden, n_classes + 1)
        self.reg = nn.Linear(hidden, 4)

    def forward(self, x):
        h = F.relu(self.fc(x))
        return F.softmax(self.cls(h), dim=1), self.reg(h)


class InstanceDomainClassifier(nn.Module):
    def __init__(self, in_dim: int, hidden: int = 64):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, 1)

    def forward(self, x):
        return torch.sigmoid(self.fc2(F.relu(self.fc1(x)))).reshape(-1)


@dataclass
class Proposals:
    boxes: torch.Tensor       # (N, 4) pixel coordinates, detached
    objectness: torch.Tensor  # (N,)

    def __len__(self) -> int:
        return self.boxes.shape[0]


# box utilities (torch, operating on (N, 4) [x1, y1, x2, y2] tensors)

def box_iou_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = torch.maximum(a[:, None, :2], b[None, :, :2])
    rb = torch.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    return inter / (area_a[:, None] + area_b[None, :] - inter).clamp(min=1e-12)


def encode_deltas(boxes: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    bw = boxes[:, 2] - boxes[:, 0]
    bh = boxes[:, 3] - boxes[:, 1]
    bx = boxes[:, 0] + 0.5 * bw
    by = boxes[:, 1] + 0.5 * bh
    tw = targets[:, 2] - targets[:, 0]
    th = targets[:, 3] - targets[:, 1]
    tx = targets[:, 0] + 0.5 * tw
    ty = targets[:, 1] + 0.5 * th
    return torch.stack(
        [(tx - bx) / bw, (ty - by) / bh, torch.log(tw / bw), torch.log(th / bh)],
        dim=1)


def decode_deltas(boxes: torch.Tensor, deltas: torch.Tensor) -> torch.Tensor:
    bw = boxes[:, 2] - boxes[:, 0]
    bh = boxes[:, 3] - boxes[:, 1]
    bx = boxes[:, 0] + 0.5 * bw
    by = boxes[:, 1] + 0.5 * bh
    cx = bx + deltas[:, 0] * bw
    cy = by + deltas[:, 1] * bh
    w = bw * torch.exp(deltas[:, 2].clamp(max=4.0))
    h = bh * torch.exp(deltas[:, 3].clamp(max=4.0))
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=1)


def clip_boxes(boxes: torch.Tensor, hw: tuple[int, int]) -> torch.Tensor:
    h, w = hw
    return torch.stack(
        [boxes[:, 0].clamp(0, w), boxes[:, 1].clamp(0, h),
         boxes[:, 2].clamp(0, w), boxes[:, 3].clamp(0, h)], dim=1)


def nms(boxes: torch.Tensor, scores: torch.Tensor, iou_thr: float) -> torch.Tensor:
    """Greedy NMS; score ties keep input order.  Returns kept indices."""
    order = torch.argsort(scores, descending=True, stable=True)
    keep = []
    suppressed = torch.zeros(len(order), dtype=torch.bool)
    ious = box_iou_matrix(boxes, boxes)
    for oi, i in enumerate(order.tolist()):
        if suppressed[oi]:
            continue
        keep.append(i)
        rest = order[oi + 1:]
        suppressed[oi + 1:] |= ious[i, rest] > iou_thr
    return torch.as_tensor(keep, dtype=torch.long)


def smooth_l1(x: torch.Tensor) -> torch.Tensor:
    absx = x.abs()
    return torch.where(absx < 1.0, 0.5 * x * x, absx - 0.5)


class DetectorModel(nn.Module):
    """Backbone + K domain classifiers + context nets + RPN + ROI head."""

    def __init__(
        self,
        spec: BackboneSpec | None = None,
        loss_cfg: LossConfig | None = None,
        policy: GradRoutingPolicy | None = None,
        n_classes: int = 3,
        inst_dim: int = 128,
        anchor_size: float = 18.0,
        rpn_topk: int = 32,
        rpn_nms_iou: float = 0.7,
    ):
        super().__init__()
        self.spec = spec or BackboneSpec()
        self.loss_cfg = loss_cfg or LossConfig()
        self.policy = policy or GradRoutingPolicy(
            detach_enabled=self.loss_cfg.use_detach
        )
        if self.loss_cfg.K != self.spec.K:
            raise NetConfigError(
                f"loss config has K={self.loss_cfg.K} but backbone has K={self.spec.K}"
            )
        self.policy.validate(adversarial_active=self.loss_cfg.lam > 0)
        self.n_classes = n_classes
        self.inst_dim = inst_dim
        self.anchor_size = float(anchor_size)
        self.rpn_topk = rpn_topk
        self.rpn_nms_iou = rpn_nms_iou

        self.backbone = Backbone(self.spec)
        heads: list[nn.Module] = [SpatialDomainClassifier(self.spec.widths[0])]
        heads += [GlobalDomainClassifier(w) for w in self.spec.widths[1:]]
        self.domain_heads = nn.ModuleList(heads)
        if self.loss_cfg.use_context:
            self.context_nets = nn.ModuleList(
                ContextForwardNet(w) for w in self.spec.widths
            )
        else:
            self.context_nets = None
        self.rpn = RPNHead(self.spec.widths[-1])
        self.roi = RoIFeatureExtractor(self.spec.widths[-1], inst_dim)
        head_in = inst_dim + (self.context_dim if self.loss_cfg.use_context else 0)
        self.head = DetectionHead(head_in, n_classes)
        self.inst_domain = InstanceDomainClassifier(head_in)
        self.register_buffer("anchors", self._build_anchors(), persistent=False)

    @property
    def context_dim(self) -> int:
        return self.spec.K * CONTEXT_DIM_PER_LEVEL

    def _build_anchors(self) -> torch.Tensor:
        fh, fw = self.spec.stage_hw(self.spec.K - 1)
        stride = self.spec.stride
        ys = (torch.arange(fh, dtype=torch.float32) + 0.5) * stride
        xs = (torch.arange(fw, dtype=torch.float32) + 0.5) * stride
        cy, cx = torch.meshgrid(ys, xs, indexing="ij")
        half = self.anchor_size / 2.0
        return torch.stack(
            [cx - half, cy - half, cx + half, cy + half], dim=-1
        ).reshape(-1, 4)

    # ------------------------------------------------------------------
    # forward pieces

    def backbone_forward(self, image: torch.Tensor) -> list[torch.Tensor]:
        return self.backbone(image)

    def domain_classifier_forward(self, k: int, feat: torch.Tensor) -> torch.Tensor:
        """Level-k domain output; the caller reverses the tap gradient first."""
        if not 0 <= k < self.spec.K:
            raise NetConfigError(f"domain classifier level {k} out of range")
        return self.domain_heads[k](feat)

    def context_forward(
        self, feats: list[torch.Tensor], detach_enabled: bool | None = None
    ) -> torch.Tensor:
        if self.context_nets is None:
            raise NetConfigError("model was built without a context sub-network")
        if detach_enabled is None:
            detach_enabled = self.policy.detach_enabled
        parts = []
        for net, feat in zip(self.context_nets, feats):
            tap = stop_gradient(feat) if detach_enabled else feat
            parts.append(net(tap))
        return torch.cat(parts)

    def rpn_forward(self, feats: list[torch.Tensor]) -> tuple[torch.Tensor, torch.Tensor]:
        return self.rpn(feats[-1])

    def rpn_propose(
        self,
        feats: list[torch.Tensor],
        precomputed: tuple[torch.Tensor, torch.Tensor] | None = None,
    ) -> Proposals:
        obj, deltas = precomputed if precomputed is not None else self.rpn_forward(feats)
        with torch.no_grad():
            boxes = decode_deltas(self.anchors, deltas)
            boxes = clip_boxes(boxes, self.spec.input_hw)
            valid = (boxes[:, 2] - boxes[:, 0] > 1.0) & (boxes[:, 3] - boxes[:, 1] > 1.0)
            if not valid.any():
                raise DegenerateImageError("no proposals survived decoding/clipping")
            boxes = boxes[valid]
            scores = torch.sigmoid(obj[valid])
            keep = nms(boxes, scores, self.rpn_nms_iou)[: self.rpn_topk]
            return Proposals(boxes=boxes[keep], objectness=scores[keep])

    def roi_extract(self, feats: list[torch.Tensor], boxes: torch.Tensor) -> torch.Tensor:
        return self.roi(feats[-1], boxes, self.spec.stride)

    def detect_head_forward(
        self,
        inst_feats: torch.Tensor,
        context: torch.Tensor | None,
        use_context: bool,
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Class probabilities, box deltas and per-ROI domain probability."""
        n = inst_feats.shape[0]
        if use_context:
            if context is None or context.numel() != self.context_dim:
                raise NetConfigError(
                    f"expected a {self.context_dim}-d context vector, got "
                    f"{None if context is None else context.numel()}"
                )
            ctx = context.unsqueeze(0).expand(n, -1)
            head_in = torch.cat([inst_feats, ctx], dim=1)
            eta = self.policy.grl_scale
            ctx_branch = gradient_reverse(ctx, eta) if self.policy.adversarial_context else ctx
            dom_in = torch.cat([gradient_reverse(inst_feats, eta), ctx_branch], dim=1)
        else:
            head_in = inst_feats
            dom_in = gradient_reverse(inst_feats, self.policy.grl_scale)
        cls_probs, box_deltas = self.head(head_in)
        domain_probs = self.inst_domain(dom_in)
        return cls_probs, box_deltas, domain_probs

    # ------------------------------------------------------------------
    # training targets and losses for the detection part

    def rpn_losses(
        self, obj: torch.Tensor, deltas: torch.Tensor, gt_boxes: torch.Tensor
    ) -> torch.Tensor:
        if gt_boxes.numel() == 0:
            raise ShapeError("rpn_losses needs at least one ground-truth box")
        ious = box_iou_matrix(self.anchors, gt_boxes)
        max_iou, match = ious.max(dim=1)
        pos = max_iou >= 0.5
        pos[ious.argmax(dim=0)] = True   # best anchor per ground truth
        neg = (max_iou < 0.3) & ~pos
        labels = pos.float()
        used = pos | neg
        l_obj = F.binary_cross_entropy_with_logits(obj[used], labels[used])
        target = encode_deltas(self.anchors[pos], gt_boxes[match[pos]])
        l_box = smooth_l1(deltas[pos] - target).mean()
        return l_obj + l_box

    def roi_targets(
        self, rois: torch.Tensor, gt_boxes: torch.Tensor, gt_classes: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """(labels, reg_targets); label == n_classes means background."""
        ious = box_iou_matrix(rois, gt_boxes)
        max_iou, match = ious.max(dim=1)
        labels = torch.where(
            max_iou >= 0.5, gt_classes[match], torch.full_like(match, self.n_classes)
        )
        reg_targets = encode_deltas(rois, gt_boxes[match])
        return labels, reg_targets

    def head_losses(
        self,
        cls_probs: torch.Tensor,
        box_deltas: torch.Tensor,
        labels: torch.Tensor,
        reg_targets: torch.Tensor,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        picked = cls_probs.gather(1, labels.unsqueeze(1)).squeeze(1)
        l_cls = -torch.log(picked.clamp(1e-7, 1.0)).mean()
        fg = labels < self.n_classes
        if fg.any():
            l_reg = smooth_l1(box_deltas[fg] - reg_targets[fg]).mean()
        else:
            l_reg = box_deltas.sum() * 0.0
        return l_cls, l_reg

    # ------------------------------------------------------------------
    # inference

    @torch.no_grad()
    def detect(
        self,
        image: torch.Tensor,
        score_thr: float = 0.02,
        nms_thr: float = 0.45,
        max_dets: int = 20,
    ) -> list[tuple[tuple[float, float, float, float], int, float]]:
        """Score-ranked (box, class, score) tuples for one image."""
        feats = self.backbone_forward(image)
        props = self.rpn_propose(feats)
        inst = self.roi_extract(feats, props.boxes)
        ctx = self.context_forward(feats) if self.loss_cfg.use_context else None
        cls_probs, box_deltas, _ = self.detect_head_forward(
            inst, ctx, self.loss_cfg.use_context
        )
        refined = clip_boxes(decode_deltas(props.boxes, box_deltas), self.spec.input_hw)
        out = []
        for c in range(self.n_classes):
            scores = cls_probs[:, c]
            keep = scores >= score_thr
            if not keep.any():
                continue
            boxes_c = refined[keep]
            scores_c = scores[keep]
            valid = (boxes_c[:, 2] - boxes_c[:, 0] > 0) & (boxes_c[:, 3] - boxes_c[:, 1] > 0)
            boxes_c, scores_c = boxes_c[valid], scores_c[valid]
            if boxes_c.numel() == 0:
                continue
            for i in nms(boxes_c, scores_c, nms_thr).tolist():
                out.append((tuple(boxes_c[i].tolist()), c, float(scores_c[i])))
        out.sort(key=lambda t: -t[2])
        return out[:max_dets]

    # ------------------------------------------------------------------
    # parameter partition and checkpointing

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        context = (
            list(self.context_nets.parameters()) if self.context_nets is not None else []
        )
        context_ids = {id(p) for p in context}
        detection = [p for p in self.parameters() if id(p) not in context_ids]
        return {"context": context, "detection": detection}

    def build_config(self) -> dict:
        return {
            "backbone": asdict(self.spec),
            "loss": {
                **{k: v for k, v in asdict(self.loss_cfg).items()},
                "level_kinds": [k.value for k in self.loss_cfg.level_kinds],
                "iloss_kind": self.loss_cfg.iloss_kind.value,
            },
            "policy": asdict(self.policy),
            "n_classes": self.n_classes,
            "inst_dim": self.inst_dim,
            "anchor_size": self.anchor_size,
            "rpn_topk": self.rpn_topk,
            "rpn_nms_iou": self.rpn_nms_iou,
        }


def model_from_config(cfg: dict) -> DetectorModel:
    backbone = dict(cfg["backbone"])
    backbone["widths"] = tuple(backbone["widths"])
    backbone["input_hw"] = tuple(backbone["input_hw"])
    loss = dict(cfg["loss"])
    loss["level_kinds"] = tuple(LossKind(k) for k in loss["level_kinds"])
    loss["iloss_kind"] = LossKind(loss["iloss_kind"])
    return DetectorModel(
        spec=BackboneSpec(**backbone),
        loss_cfg=LossConfig(**loss),
        policy=GradRoutingPolicy(**cfg["policy"]),
        n_classes=cfg["n_classes"],
        inst_dim=cfg["inst_dim"],
        anchor_size=cfg["anchor_size"],
        rpn_topk=cfg["rpn_topk"],
        rpn_nms_iou=cfg["rpn_nms_iou"],
    )


def save_checkpoint(path, model: DetectorModel, extra: dict | None = None) -> None:
    """Single-archive checkpoint: parameter arrays + the build configuration."""
    meta = {"model": model.build_config(), "extra": extra or {}}
    arrays = {
        "param/" + name: tensor.detach().cpu().numpy()
        for name, tensor in model.state_dict().items()
    }
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_checkpoint(path) -> tuple[DetectorModel, dict]:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        state = {
            name[len("param/"):]: torch.from_numpy(np.array(data[name]))
            for name in data.files
            if name.startswith("param/")
        }
    model = model_from_config(meta["model"])
    model.load_state_dict(state, strict=True)
    return model, meta.get("extra", {})
