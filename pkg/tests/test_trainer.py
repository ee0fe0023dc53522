"""Training-step routing matrix, LR schedule, determinism, failure modes."""

import json
import math

import pytest
import torch

from conftest import micro_backbone_spec
from dadet.losses import LossConfig, LossKind
from dadet.netarch import DetectorModel
from dadet.trainer import (
    StepReport,
    TrainConfig,
    TrainConfigError,
    TrainingError,
    build_model,
    build_optimizer,
    compute_losses,
    config_as_dict,
    lr_at,
    run_training,
    train_step,
)

TERMS = ("l_rpn", "l_cls", "l_reg", "l_level_1", "l_level_2", "l_level_3", "l_iloss")


def micro_train_config(loss=None, **overrides) -> TrainConfig:
    kwargs = dict(
        total_steps=4,
        decay_every=0,
        seed=5,
        loss=loss or LossConfig(),
        backbone=micro_backbone_spec(),
    )
    kwargs.update(overrides)
    return TrainConfig(**kwargs)


def term_tensor(terms: dict, name: str):
    if name.startswith("l_level_"):
        return terms["l_levels"][int(name.split("_")[-1]) - 1]
    return terms[name]


def group_grad_max(model: DetectorModel, group: str) -> float:
    params = model.parameter_groups()[group]
    vals = [float(p.grad.abs().max()) for p in params if p.grad is not None]
    return max(vals, default=0.0)


def isolated_term_grads(cfg: TrainConfig, term: str, batch) -> dict[str, float]:
    """Backward of one loss term alone; max-abs gradient per parameter group."""
    model = build_model(cfg)
    source, target = batch
    terms = compute_losses(model, source, target, cfg.loss)
    tensor = term_tensor(terms, term)
    model.zero_grad()
    if tensor.requires_grad:
        tensor.backward()
    return {g: group_grad_max(model, g) for g in ("context", "detection")}


class TestLrSchedule:
    def test_paper_scaled_examples(self):
        cfg = TrainConfig(total_steps=5000, decay_every=2000)
        assert lr_at(0, cfg) == pytest.approx(1e-3)
        assert lr_at(1999, cfg) == pytest.approx(1e-3)
        assert lr_at(2000, cfg) == pytest.approx(1e-4)
        assert lr_at(4000, cfg) == pytest.approx(1e-5)

    def test_disabled_decay(self):
        cfg = TrainConfig(total_steps=10, decay_every=0)
        assert lr_at(9, cfg) == pytest.approx(1e-3)

    def test_monotone_nonincreasing(self):
        cfg = TrainConfig(total_steps=5000, decay_every=1500)
        values = [lr_at(s, cfg) for s in range(0, 5000, 37)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_negative_step_rejected(self):
        with pytest.raises(TrainConfigError):
            lr_at(-1, TrainConfig())

    def test_decay_beyond_total_rejected(self):
        with pytest.raises(TrainConfigError):
            TrainConfig(total_steps=10, decay_every=50)


class TestRoutingMatrix:
    """Allowed/forbidden gradient flow per (loss term, parameter group)."""

    @pytest.fixture(scope="class")
    def batch(self, tiny_dataset):
        src, tgt, _ = tiny_dataset
        return src[0], tgt[0]

    def test_rpn_reaches_detection_only(self, batch):
        g = isolated_term_grads(micro_train_config(), "l_rpn", batch)
        assert g["detection"] > 1e-9
        assert g["context"] == 0.0

    def test_level_losses_reach_detection_only(self, batch):
        cfg = micro_train_config()
        for term in ("l_level_1", "l_level_2", "l_level_3"):
            g = isolated_term_grads(cfg, term, batch)
            assert g["detection"] > 1e-9, term
            assert g["context"] == 0.0, term

    def test_cls_and_reg_reach_both_groups(self, batch):
        cfg = micro_train_config()
        for term in ("l_cls", "l_reg"):
            g = isolated_term_grads(cfg, term, batch)
            assert g["detection"] > 1e-9, term
            assert g["context"] > 1e-9, term

    def test_iloss_reaches_both_groups(self, batch):
        g = isolated_term_grads(micro_train_config(), "l_iloss", batch)
        assert g["detection"] > 1e-9
        assert g["context"] > 1e-9

    def test_detach_blocks_context_tap_into_backbone(self, batch):
        """Context-path objective leaves every backbone parameter untouched."""
        cfg = micro_train_config()
        model = build_model(cfg)
        source, _ = batch
        feats = model.backbone_forward(torch.from_numpy(source.image))
        model.zero_grad()
        model.context_forward(feats).sum().backward()
        for p in model.backbone.parameters():
            assert p.grad is None or torch.equal(p.grad, torch.zeros_like(p.grad))

    def test_without_detach_context_tap_reaches_backbone(self, batch):
        cfg = micro_train_config(loss=LossConfig(use_detach=False))
        model = build_model(cfg)
        source, _ = batch
        feats = model.backbone_forward(torch.from_numpy(source.image))
        model.zero_grad()
        model.context_forward(feats).sum().backward()
        norms = [float(p.grad.abs().max()) for p in model.backbone.parameters()
                 if p.grad is not None]
        assert norms and max(norms) > 1e-6

    def test_detach_toggle_changes_backbone_gradient_of_cls(self, batch):
        grads = {}
        for detach in (True, False):
            cfg = micro_train_config(loss=LossConfig(use_detach=detach))
            model = build_model(cfg)
            terms = compute_losses(model, batch[0], batch[1], cfg.loss)
            model.zero_grad()
            (terms["l_cls"] + terms["l_reg"] + terms["l_iloss"]).backward()
            grads[detach] = torch.cat([
                p.grad.reshape(-1) if p.grad is not None else torch.zeros(p.numel())
                for p in model.backbone.parameters()
            ])
        assert not torch.allclose(grads[True], grads[False], atol=1e-10)


class TestComputeLosses:
    def test_lambda_zero_reduces_to_plain_detector(self, tiny_dataset):
        src, tgt, _ = tiny_dataset
        cfg = micro_train_config(
            loss=LossConfig(lam=0.0, use_context=False, use_iloss=False))
        model = build_model(cfg)
        terms = compute_losses(model, src[0], tgt[0], cfg.loss)
        assert all(float(t) == 0.0 for t in terms["l_levels"])
        assert float(terms["l_iloss"]) == 0.0
        assert float(terms["total"]) == pytest.approx(float(terms["l_det"]), abs=1e-9)
        model.zero_grad()
        terms["total"].backward()
        for p in model.domain_heads.parameters():
            assert p.grad is None or torch.equal(p.grad, torch.zeros_like(p.grad))

    def test_swapped_batch_rejected(self, tiny_dataset):
        src, tgt, _ = tiny_dataset
        cfg = micro_train_config()
        model = build_model(cfg)
        with pytest.raises(TrainingError):
            compute_losses(model, tgt[0], src[0], cfg.loss)

    def test_all_terms_finite_nonnegative(self, tiny_dataset):
        src, tgt, _ = tiny_dataset
        cfg = micro_train_config()
        model = build_model(cfg)
        terms = compute_losses(model, src[0], tgt[0], cfg.loss)
        for name in ("l_rpn", "l_cls", "l_reg", "l_iloss", "l_det", "l_scl", "total"):
            v = float(terms[name])
            assert math.isfinite(v) and v >= 0.0, name


class TestTrainStep:
    def test_report_total_invariant(self, tiny_dataset):
        src, tgt, _ = tiny_dataset
        cfg = micro_train_config()
        model = build_model(cfg)
        opt = build_optimizer(model, cfg)
        report = train_step(model, (src[0], tgt[0]), cfg, opt, 0)
        assert report.total == pytest.approx(
            report.l_det + cfg.loss.lam * report.l_scl, abs=1e-6)
        assert len(report.l_levels) == cfg.loss.K
        assert report.lr == pytest.approx(1e-3)
        assert report.grad_norm_detection > 0.0
        assert report.grad_norm_context > 0.0

    def test_parameters_change(self, tiny_dataset):
        src, tgt, _ = tiny_dataset
        cfg = micro_train_config()
        model = build_model(cfg)
        opt = build_optimizer(model, cfg)
        before = [p.detach().clone() for p in model.parameters()]
        train_step(model, (src[0], tgt[0]), cfg, opt, 0)
        changed = any(not torch.equal(b, p.detach())
                      for b, p in zip(before, model.parameters()))
        assert changed

    def test_nan_loss_aborts_with_term_name(self, tiny_dataset):
        src, tgt, _ = tiny_dataset
        cfg = micro_train_config()
        model = build_model(cfg)
        opt = build_optimizer(model, cfg)
        with torch.no_grad():
            model.rpn.obj.weight.fill_(float("nan"))
        with pytest.raises(TrainingError, match="l_rpn"):
            train_step(model, (src[0], tgt[0]), cfg, opt, 0)

    def test_report_json_round_trip(self, tiny_dataset):
        src, tgt, _ = tiny_dataset
        cfg = micro_train_config()
        model = build_model(cfg)
        opt = build_optimizer(model, cfg)
        report = train_step(model, (src[0], tgt[0]), cfg, opt, 0)
        parsed = json.loads(report.to_json())
        assert parsed["step"] == 0
        assert parsed["total"] == report.total


class TestRunTraining:
    def test_two_runs_identical(self, tiny_dataset, tmp_path):
        src, tgt, _ = tiny_dataset
        cfg = micro_train_config(total_steps=6)
        model_a, reports_a = run_training(cfg, src, tgt, out_dir=tmp_path / "a")
        model_b, reports_b = run_training(cfg, src, tgt, out_dir=tmp_path / "b")
        for ra, rb in zip(reports_a, reports_b):
            assert ra == rb
        for pa, pb in zip(model_a.parameters(), model_b.parameters()):
            assert torch.equal(pa, pb)
        log_a = (tmp_path / "a" / "report_log.jsonl").read_bytes()
        log_b = (tmp_path / "b" / "report_log.jsonl").read_bytes()
        assert log_a == log_b

    def test_log_structure(self, tiny_dataset, tmp_path):
        src, tgt, _ = tiny_dataset
        cfg = micro_train_config(total_steps=3)
        run_training(cfg, src, tgt, out_dir=tmp_path)
        lines = (tmp_path / "report_log.jsonl").read_text().splitlines()
        assert len(lines) == 1 + 3
        header = json.loads(lines[0])
        assert header["config"] == config_as_dict(cfg)
        step_rec = json.loads(lines[1])
        assert {"step", "l_rpn", "l_cls", "l_reg", "l_levels", "l_iloss",
                "l_det", "l_scl", "total", "lr"} <= set(step_rec)

    def test_checkpoint_written(self, tiny_dataset, tmp_path):
        from dadet.netarch import load_checkpoint

        src, tgt, _ = tiny_dataset
        cfg = micro_train_config(total_steps=2)
        model, _ = run_training(cfg, src, tgt, out_dir=tmp_path)
        loaded, extra = load_checkpoint(tmp_path / "checkpoint.npz")
        assert extra["config"] == config_as_dict(cfg)
        for pa, pb in zip(model.parameters(), loaded.parameters()):
            assert torch.equal(pa.detach(), pb.detach())

    def test_lr_applied_at_decay_boundary(self, tiny_dataset):
        src, tgt, _ = tiny_dataset
        cfg = micro_train_config(total_steps=4, decay_every=2)
        _, reports = run_training(cfg, src, tgt)
        assert reports[0].lr == pytest.approx(1e-3)
        assert reports[2].lr == pytest.approx(1e-4)

    def test_baseline_grad_norm_context_is_zero(self, tiny_dataset):
        src, tgt, _ = tiny_dataset
        cfg = micro_train_config(
            total_steps=2, loss=LossConfig(lam=0.0, use_context=False, use_iloss=False))
        _, reports = run_training(cfg, src, tgt)
        assert all(r.grad_norm_context == 0.0 for r in reports)
