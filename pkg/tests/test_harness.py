import dataclasses

import numpy as np
import pytest

from proxtune import harness
from proxtune.harness import (
    ExperimentConfig,
    MetricsFormatError,
    TaskConfig,
    emit_metrics,
    standard_freeze_masks,
    parse_metrics,
    read_metrics,
    run_finetune,
    run_freeze_ablation,
    run_pretrain,
    run_scheduler_sweep,
)
from proxtune.models import default_model_spec
from proxtune.optim import Mode, ProximityPolicy, Schedule
from proxtune.param_store import ConfigurationError, FreezeMask


def tiny(**kw):
    base = ExperimentConfig(
        task=TaskConfig(n_samples=512, eval_samples=256),
        pretrain_steps=150,
        finetune_steps=120,
        log_every=30,
    )
    return base.replace(**kw)


def test_pretrain_zero_steps_returns_fresh_model():
    from proxtune.models import build_model

    cfg = tiny(pretrain_steps=0)
    model = run_pretrain(cfg)
    fresh = build_model(cfg.model)
    assert all(np.array_equal(a.values, b.values) for a, b in zip(model, fresh))
    assert all(g.snapshot is None for g in model)


def test_pretrain_reduces_loss_and_is_deterministic():
    cfg = ExperimentConfig(pretrain_steps=3000)
    splits = harness.make_splits(cfg)
    from proxtune.models import build_model

    initial = harness.evaluate(build_model(cfg.model), cfg.model, splits.pretrain)
    a = run_pretrain(cfg, splits)
    b = run_pretrain(cfg, splits)
    assert harness.evaluate(a, cfg.model, splits.pretrain) < initial
    assert all(np.array_equal(x.values, y.values) for x, y in zip(a, b))


def test_finetune_records_and_forgetting():
    cfg = ExperimentConfig(finetune_steps=600, pretrain_steps=3000, log_every=100)
    model = run_pretrain(cfg)
    _, records = run_finetune(model, cfg)
    assert [r.step for r in records] == list(range(0, 601, 100))
    assert all(v == 0.0 for v in records[0].deviations.values())
    assert all(v > 0.0 for v in records[-1].deviations.values())
    assert records[-1].retention_loss > records[0].retention_loss
    assert records[-1].train_loss < records[0].train_loss


def test_freeze_all_keeps_every_deviation_zero():
    cfg = tiny(freeze=FreezeMask.of(*range(1, 7)))
    model = run_pretrain(cfg)
    _, records = run_finetune(model, cfg)
    assert all(v == 0.0 for r in records for v in r.deviations.values())
    assert all(r.projection_rate == 0.0 for r in records)
    assert records[-1].train_loss == records[0].train_loss


def test_empty_mask_matches_no_mask_bitwise():
    cfg = tiny()
    a = run_finetune(run_pretrain(cfg), cfg)[1]
    b = run_finetune(run_pretrain(cfg), cfg.replace(freeze=FreezeMask()))[1]
    assert a == b


def test_partial_mask_semantics():
    cfg = tiny(freeze=FreezeMask.of(1, 2))
    _, records = run_finetune(run_pretrain(cfg), cfg)
    for r in records:
        assert r.deviations["vision_early"] == 0.0 and r.deviations["vision_late"] == 0.0
    assert all(records[-1].deviations[m] > 0 for m in ("bridge", "lang_early", "lang_late", "head"))


def test_early_stop_halts_at_threshold():
    cfg = tiny()
    pre = run_pretrain(cfg)
    _, full = run_finetune(pre.copy(), cfg)
    target = full[2].train_loss
    _, stopped = run_finetune(pre.copy(), cfg, stop_at_loss=target)
    assert stopped[-1].train_loss <= target
    assert len(stopped) <= 3


def test_standard_freeze_masks_expressible():
    masks = dict(standard_freeze_masks())
    assert len(masks) == 6
    assert masks["freeze_vision"] == FreezeMask.of(1, 2)
    assert masks["freeze_language"] == FreezeMask.of(4, 5)
    assert masks["freeze_all"] == FreezeMask.of(1, 2, 3, 4, 5)
    assert masks["freeze_vision_early"] == FreezeMask.of(1)
    assert masks["freeze_vision_late"] == FreezeMask.of(2)
    assert masks["freeze_lang_early"] == FreezeMask.of(4)
    for m in masks.values():
        m.validate(6)


def test_freeze_ablation_table():
    cfg = tiny()
    table = run_freeze_ablation(cfg, standard_freeze_masks(cfg))
    assert [r["mask"] for r in table.rows] == [label for label, _ in standard_freeze_masks(cfg)]
    lang = next(r for r in table.rows if r["mask"] == "freeze_language")
    assert lang["dev:lang_early"] == 0.0 and lang["dev:lang_late"] == 0.0
    assert lang["dev:vision_early"] > 0 and lang["dev:vision_late"] > 0
    assert len(table.to_csv().splitlines()) == 7
    with pytest.raises(ConfigurationError):
        run_freeze_ablation(cfg, [])


def test_freeze_all_row_has_worst_train_loss():
    cfg = ExperimentConfig(finetune_steps=1000, log_every=100)
    table = run_freeze_ablation(cfg, standard_freeze_masks(cfg))
    worst = max(table.rows, key=lambda r: r["train_loss"])
    assert worst["mask"] == "freeze_all"


def test_scheduler_sweep_shape_and_labels():
    cfg = tiny()
    table = run_scheduler_sweep(cfg)
    assert len(table.rows) == 9
    assert [r["schedule"] for r in table.rows][:3] == ["constant:0.5", "constant:2", "constant:3"]
    with pytest.raises(ConfigurationError):
        run_scheduler_sweep(cfg, [])


def test_sweep_parallel_matches_serial():
    cfg = tiny(finetune_steps=60)
    pre = run_pretrain(cfg)
    grid = [(Schedule.LINEAR, 0.5), (Schedule.CONSTANT, 2.0)]
    serial = run_scheduler_sweep(cfg, grid, pre, jobs=1).to_csv()
    parallel = run_scheduler_sweep(cfg, grid, pre, jobs=2).to_csv()
    assert serial == parallel


def test_metrics_round_trip_and_determinism(tmp_path):
    cfg = tiny(policy=ProximityPolicy(Mode.MAPS, lambda_max=1.0))
    records = run_finetune(run_pretrain(cfg), cfg)[1]
    p1 = emit_metrics(records, tmp_path / "a.csv")
    p2 = emit_metrics(run_finetune(run_pretrain(cfg), cfg)[1], tmp_path / "b.csv")
    assert p1.read_bytes() == p2.read_bytes()
    lines = p1.read_text().splitlines()
    assert lines[0] == (
        "step,dev:vision_early,dev:vision_late,dev:bridge,dev:lang_early,dev:lang_late,dev:head,"
        "projection_rate,train_loss,retention_loss,shift_loss"
    )
    assert len(lines) == len(records) + 1
    assert read_metrics(p1) == records


def test_three_records_give_three_lines(tmp_path):
    recs = [harness.MetricsRecord(i, {"a": 0.1 * i}, 0.0, 1.0, 2.0, 3.0) for i in range(3)]
    text = (emit_metrics(recs, tmp_path / "m.csv")).read_text()
    assert len(text.splitlines()) == 4


def test_emit_metrics_unwritable(tmp_path):
    recs = [harness.MetricsRecord(0, {"a": 0.0}, 0.0, 1.0, 2.0, 3.0)]
    bad = tmp_path / "missing" / "m.csv"
    with pytest.raises(OSError, match="missing"):
        emit_metrics(recs, bad)
    with pytest.raises(ValueError):
        emit_metrics([], tmp_path / "x.csv")


def test_parse_metrics_errors():
    good = "step,dev:a,projection_rate,train_loss,retention_loss,shift_loss\n0,0.0,0.0,1.0,1.0,1.0\n"
    assert len(parse_metrics(good)) == 1
    with pytest.raises(MetricsFormatError) as exc:
        parse_metrics(good + "20,0.1,0.0\n")
    assert exc.value.line == 3
    with pytest.raises(MetricsFormatError) as exc:
        parse_metrics(good + "20,0.1,0.0,1.0,1.0,1.")
    assert exc.value.line == 3
    with pytest.raises(MetricsFormatError):
        parse_metrics("step,foo\n")


def test_divergence_raises_with_partial_records():
    cfg = tiny(adam=harness.AdamSettings(alpha=1e200), log_every=1, finetune_steps=20)
    model = run_pretrain(cfg.replace(pretrain_steps=0))
    with pytest.raises(harness.DivergenceError) as exc:
        run_finetune(model, cfg)
    assert exc.value.records and exc.value.records[0].step == 0


def test_config_validation():
    with pytest.raises(ConfigurationError):
        ExperimentConfig(log_every=5000)
    with pytest.raises(ConfigurationError):
        ExperimentConfig(freeze=FreezeMask.of(7))
    with pytest.raises(ConfigurationError):
        ExperimentConfig(batch_size=0)


def test_with_seed_moves_all_seeds():
    cfg = ExperimentConfig().with_seed(3)
    assert (cfg.seed, cfg.model.init_seed, cfg.task.base_seed) == (3, 3, 3)


def test_reference_lambda_presets():
    assert sorted(set(harness.REFERENCE_LAMBDA_MAX.values())) == [0.5, 0.8, 1.0, 1.5, 2.5, 3.0, 3.2]
