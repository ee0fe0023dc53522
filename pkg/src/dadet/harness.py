"""Experiment orchestration: configs, train+eval runs, ablations, sweeps.

Every experiment is fully determined by a plain-text config file plus a
seed; the resolved config is embedded in each produced artifact (dataset
meta, checkpoint, report log, CSV header comment, PNG text chunk).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import numpy as np
import torch
import yaml
from PIL import Image, PngImagePlugin

from .evaluation import Detection, EvalResult, GroundTruth, evaluate, write_eval_csv
from .losses import LossConfig, LossConfigError, LossKind, default_level_kinds
from .netarch import BackboneSpec, DetectorModel, default_widths
from .synthdata import CLASS_NAMES, DomainSample, SceneSpec
from .trainer import TrainConfig, config_as_dict, run_training


class ConfigError(ValueError):
    """Bad experiment configuration file."""


@dataclass(frozen=True)
class ExperimentConfig:
    scene: SceneSpec = field(default_factory=SceneSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    thresholds: tuple[float, ...] = (0.5,)
    n_source: int = 500
    n_target: int = 500
    n_target_test: int = 200

    def __post_init__(self):
        if not self.thresholds:
            raise ConfigError("need at least one evaluation IoU threshold")
        for thr in self.thresholds:
            if not 0.0 < thr < 1.0:
                raise ConfigError(f"IoU threshold {thr} outside (0, 1)")
        if min(self.n_source, self.n_target, self.n_target_test) < 1:
            raise ConfigError("dataset split sizes must be >= 1")

    def as_dict(self) -> dict:
        return {
            "scene": asdict(self.scene),
            "train": config_as_dict(self.train),
            "eval": {"thresholds": list(self.thresholds)},
            "data": {
                "n_source": self.n_source,
                "n_target": self.n_target,
                "n_target_test": self.n_target_test,
            },
        }


_SCENE_KEYS = {
    "seed", "image_hw", "min_objects", "max_objects", "min_size", "max_size",
    "fog_strength", "blur_radius", "palette_shift",
}
_LOSS_KEYS = {
    "level_kinds", "iloss_kind", "gamma", "lambda", "lam", "alpha", "beta",
    "use_context", "use_iloss", "use_detach", "K",
}
_BACKBONE_KEYS = {"K", "widths", "input_hw"}
_TRAIN_KEYS = {
    "total_steps", "base_lr", "decay_every", "decay_factor", "momentum", "seed",
    "grl_scale", "adversarial_context", "anchor_size", "rpn_topk", "checkpoint_every",
}


def _check_keys(section: str, given: dict, allowed: set) -> None:
    unknown = set(given) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in '{section}': {sorted(unknown)}")


def config_from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw or {})
    _check_keys("<root>", raw, {"scene", "loss", "backbone", "train", "eval", "data"})
    scene_raw = dict(raw.get("scene") or {})
    _check_keys("scene", scene_raw, _SCENE_KEYS)
    if "image_hw" in scene_raw:
        scene_raw["image_hw"] = tuple(scene_raw["image_hw"])
    scene = SceneSpec(**scene_raw)

    loss_raw = dict(raw.get("loss") or {})
    _check_keys("loss", loss_raw, _LOSS_KEYS)
    if "lambda" in loss_raw:
        loss_raw["lam"] = loss_raw.pop("lambda")
    if "level_kinds" in loss_raw:
        loss_raw["level_kinds"] = tuple(LossKind(k) for k in loss_raw["level_kinds"])
        loss_raw.setdefault("K", len(loss_raw["level_kinds"]))
    try:
        loss = LossConfig(**loss_raw)
    except LossConfigError as exc:
        raise ConfigError(str(exc)) from exc

    backbone_raw = dict(raw.get("backbone") or {})
    _check_keys("backbone", backbone_raw, _BACKBONE_KEYS)
    if "widths" in backbone_raw:
        backbone_raw["widths"] = tuple(backbone_raw["widths"])
        backbone_raw.setdefault("K", len(backbone_raw["widths"]))
    if "input_hw" in backbone_raw:
        backbone_raw["input_hw"] = tuple(backbone_raw["input_hw"])
    backbone_raw.setdefault("K", loss.K)
    backbone_raw.setdefault("widths", default_widths(backbone_raw["K"]))
    backbone_raw.setdefault("input_hw", scene.image_hw)
    backbone = BackboneSpec(**backbone_raw)

    train_raw = dict(raw.get("train") or {})
    _check_keys("train", train_raw, _TRAIN_KEYS)
    train = TrainConfig(loss=loss, backbone=backbone, **train_raw)

    eval_raw = dict(raw.get("eval") or {})
    _check_keys("eval", eval_raw, {"thresholds"})
    thresholds = tuple(eval_raw.get("thresholds", (0.5,)))

    data_raw = dict(raw.get("data") or {})
    _check_keys("data", data_raw, {"n_source", "n_target", "n_target_test"})
    return ExperimentConfig(
        scene=scene,
        train=train,
        thresholds=thresholds,
        n_source=int(data_raw.get("n_source", 500)),
        n_target=int(data_raw.get("n_target", 500)),
        n_target_test=int(data_raw.get("n_target_test", 200)),
    )


def config_from_yaml(path) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config file {path}: {exc}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must contain a mapping")
    return config_from_dict(raw)


def override_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    return replace(
        cfg,
        scene=replace(cfg.scene, seed=seed),
        train=replace(cfg.train, seed=seed),
    )


# ---------------------------------------------------------------------------
# evaluation bridge

def evaluate_model(
    model: DetectorModel,
    samples: list[DomainSample],
    thresholds: tuple[float, ...],
) -> EvalResult:
    model.eval()
    detections: list[Detection] = []
    ground_truths: list[GroundTruth] = []
    for sample in samples:
        image = torch.from_numpy(sample.image)
        for box, cls, score in model.detect(image):
            detections.append(Detection(sample.image_id, box, cls, score))
        for b in sample.boxes:
            ground_truths.append(GroundTruth(sample.image_id, b.xyxy, b.cls))
    model.train()
    return evaluate(detections, ground_truths, thresholds)


def train_and_evaluate(
    cfg: ExperimentConfig,
    source_set: list[DomainSample],
    target_set: list[DomainSample],
    test_set: list[DomainSample],
    out_dir=None,
    log_name: str = "report_log.jsonl",
):
    model, reports = run_training(
        cfg.train, source_set, target_set, out_dir=out_dir, log_name=log_name
    )
    result = evaluate_model(model, test_set, cfg.thresholds)
    return model, reports, result


# ---------------------------------------------------------------------------
# ablation grid

@dataclass
class AblationRow:
    label: str
    loss: LossConfig
    ap: dict[int, float] | None = None
    map_value: float | None = None
    error: str | None = None


def default_ablation_grid(base: LossConfig) -> list[LossConfig]:
    """Toggle combinations plus level-kind variants at the full setting."""
    rows: list[LossConfig] = []
    toggles = [
        (False, False, False),
        (False, False, True),
        (True, False, False),
        (True, False, True),
        (True, True, False),
        (True, True, True),
    ]
    for use_context, use_iloss, use_detach in toggles:
        rows.append(replace(
            base, use_context=use_context, use_iloss=use_iloss, use_detach=use_detach
        ))
    if base.K >= 3:
        kinds_variants = [
            (LossKind.LS,) + (LossKind.FL,) * (base.K - 1),
            (LossKind.LS,) + (LossKind.CE,) * (base.K - 1),
        ]
        for kinds in kinds_variants:
            rows.append(replace(base, level_kinds=kinds,
                                use_context=True, use_iloss=True, use_detach=True))
        rows.append(replace(base, iloss_kind=LossKind.CE,
                            use_context=True, use_iloss=True, use_detach=True))
    return rows


def run_ablation(
    cfg: ExperimentConfig,
    grid: list[LossConfig],
    source_set, target_set, test_set,
) -> list[AblationRow]:
    """Trains one row per config with a shared seed; failures don't stop the grid."""
    rows = []
    thr = cfg.thresholds[0]
    for loss_cfg in grid:
        row = AblationRow(label=loss_cfg.label(), loss=loss_cfg)
        try:
            train_cfg = replace(cfg.train, loss=loss_cfg)
            model, _ = run_training(train_cfg, source_set, target_set)
            result = evaluate_model(model, test_set, (thr,))
            row.ap = dict(result.ap[thr])
            row.map_value = result.map_at(thr)
        except Exception as exc:  # noqa: BLE001 - per-row failure is recorded
            row.error = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    return rows


def write_ablation_csv(path, rows: list[AblationRow], config: dict | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if config is not None:
            fh.write("# config: " + json.dumps(config, sort_keys=True) + "\n")
        writer = csv.writer(fh)
        writer.writerow(
            ["label", "levels", "iloss", "context", "detach"]
            + [f"ap_{name}" for name in CLASS_NAMES]
            + ["map", "error"]
        )
        for row in rows:
            aps = [
                f"{row.ap.get(c, float('nan')):.6f}" if row.ap is not None else ""
                for c in range(len(CLASS_NAMES))
            ]
            writer.writerow([
                row.label,
                "|".join(k.value for k in row.loss.level_kinds),
                row.loss.iloss_kind.value if row.loss.use_iloss else "",
                int(row.loss.use_context),
                int(row.loss.use_detach),
                *aps,
                f"{row.map_value:.6f}" if row.map_value is not None else "",
                row.error or "",
            ])


# ---------------------------------------------------------------------------
# parameter sweeps

SWEEP_PARAMS = ("K", "lambda", "gamma")


def sweep_variant(cfg: ExperimentConfig, param: str, value) -> ExperimentConfig:
    if param == "K":
        k = int(value)
        loss = replace(cfg.train.loss, level_kinds=default_level_kinds(k), K=k)
        backbone = BackboneSpec(
            K=k, widths=default_widths(k), input_hw=cfg.train.backbone.input_hw
        )
        return replace(cfg, train=replace(cfg.train, loss=loss, backbone=backbone))
    if param == "lambda":
        return replace(cfg, train=replace(
            cfg.train, loss=replace(cfg.train.loss, lam=float(value))))
    if param == "gamma":
        return replace(cfg, train=replace(
            cfg.train, loss=replace(cfg.train.loss, gamma=float(value))))
    raise ConfigError(f"sweep parameter must be one of {SWEEP_PARAMS}, got '{param}'")


def run_sweep(
    cfg: ExperimentConfig,
    param: str,
    values,
    source_set, target_set, test_set,
) -> list[dict]:
    rows = []
    thr = cfg.thresholds[0]
    for value in values:
        row = {"param": param, "value": value, "map": None, "error": None}
        try:
            variant = sweep_variant(cfg, param, value)
            model, _ = run_training(variant.train, source_set, target_set)
            result = evaluate_model(model, test_set, (thr,))
            row["map"] = result.map_at(thr)
        except Exception as exc:  # noqa: BLE001
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    return rows


def write_sweep_csv(path, rows: list[dict], config: dict | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if config is not None:
            fh.write("# config: " + json.dumps(config, sort_keys=True) + "\n")
        writer = csv.writer(fh)
        writer.writerow(["param", "value", "map", "error"])
        for row in rows:
            writer.writerow([
                row["param"], row["value"],
                f"{row['map']:.6f}" if row["map"] is not None else "",
                row["error"] or "",
            ])


# ---------------------------------------------------------------------------
# feature and heatmap exports

def dump_features(
    model: DetectorModel,
    source_samples: list[DomainSample],
    target_samples: list[DomainSample],
    n_per_domain: int,
    path,
    config: dict | None = None,
) -> None:
    """Pooled last-tap feature vectors with domain labels, projection-ready."""
    model.eval()
    rows = []
    with torch.no_grad():
        for samples, domain in ((source_samples, "source"), (target_samples, "target")):
            for sample in samples[:n_per_domain]:
                feats = model.backbone_forward(torch.from_numpy(sample.image))
                pooled = feats[-1].mean(dim=(1, 2))
                rows.append((sample.image_id, domain, pooled.numpy()))
    model.train()
    dim = rows[0][2].shape[0] if rows else 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if config is not None:
            fh.write("# config: " + json.dumps(config, sort_keys=True) + "\n")
        writer = csv.writer(fh)
        writer.writerow(["image_id", "domain"] + [f"f{i:03d}" for i in range(dim)])
        for image_id, domain, vec in rows:
            writer.writerow([image_id, domain] + [f"{v:.8g}" for v in vec])


def heatmap_array(model: DetectorModel, sample: DomainSample) -> np.ndarray:
    """Channel-mean of the last tap, min-max normalized, upsampled to input size.

    A constant feature map normalizes to all zeros.
    """
    with torch.no_grad():
        feats = model.backbone_forward(torch.from_numpy(sample.image))
        hm = feats[-1].mean(dim=0).numpy()
    lo, hi = float(hm.min()), float(hm.max())
    if hi - lo < 1e-12:
        hm = np.zeros_like(hm)
    else:
        hm = (hm - lo) / (hi - lo)
    return np.kron(hm, np.ones((model.spec.stride, model.spec.stride)))


def dump_heatmaps(
    model: DetectorModel,
    samples: list[DomainSample],
    out_dir,
    config: dict | None = None,
) -> list[Path]:
    model.eval()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for sample in samples:
        hm = heatmap_array(model, sample)
        img = Image.fromarray(np.round(hm * 255.0).astype(np.uint8), mode="L")
        info = PngImagePlugin.PngInfo()
        if config is not None:
            info.add_text("config", json.dumps(config, sort_keys=True))
        name = sample.image_id.replace("/", "_") + "_heatmap.png"
        path = out_dir / name
        img.save(path, pnginfo=info)
        written.append(path)
    model.train()
    return written
