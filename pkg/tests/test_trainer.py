"""Trainer: batch assembly, pacing, schedule, determinism and artifacts."""

import csv

import numpy as np
import pytest

from fluidseg.errors import ConfigError, DivergenceError
from fluidseg.model import ModelConfig, new_model, snapshot_params
from fluidseg.synthdata import SceneConfig, generate_dataset, load_dataset, make_splits
from fluidseg.trainer import (HISTORY_COLUMNS, TrainConfig, TrainState,
                              assemble_batch, evaluate_ids, fit, head_roles_for,
                              steps_for, train_step)

MCFG = ModelConfig(depth=2, base_channels=4, input_h=32, input_w=32)


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    generate_dataset(SceneConfig(height=32, width=32), root, seed=6,
                     n_volumes=6, scans_per_volume=2)
    dataset = load_dataset(root)
    split = make_splits(dataset, n_splits=1, n_val=2, n_test=2,
                        budgets=(2, 4), seed=0)[0]
    return dataset, split


def test_config_validation_rules():
    TrainConfig().validate()
    with pytest.raises(ConfigError):
        TrainConfig(regime="gan").validate()
    with pytest.raises(ConfigError):
        TrainConfig(regime="mil", weak_tier="unlabeled").validate()
    with pytest.raises(ConfigError):
        TrainConfig(momentum=1.0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(mse_weight=0.5).validate()  # only mean_taught takes it
    TrainConfig(regime="mean_taught", mse_weight=0.5).validate()


def test_head_roles_per_regime():
    assert head_roles_for("baseline") == {"std"}
    assert head_roles_for("mlds") == {"std", "pyramid"}
    assert head_roles_for("mil") == {"std", "mil"}
    assert head_roles_for("ds_mil") == {"std", "mil_deep"}
    assert head_roles_for("mean_taught") == {"std", "pyramid"}
    assert head_roles_for("consistency") == {"std"}


def test_steps_for_pacing(tiny):
    dataset, split = tiny
    pool = len(split.ordered_train)
    # strong-only regimes pace epochs by the annotation budget
    assert steps_for(TrainConfig(regime="mlds", batch_size=2), split, 3) == (100, 2)
    # the baseline multiplier only applies to the baseline regime
    assert steps_for(TrainConfig(regime="baseline", batch_size=2), split, 3) == (1000, 2)
    # weak consumers pace by the whole training pool
    weak = TrainConfig(regime="mean_taught", batch_size=2)
    assert steps_for(weak, split, 3) == (100, int(np.ceil(pool / 2)))
    # tiny pools still take one step per epoch
    assert steps_for(TrainConfig(regime="mlds", batch_size=64), split, 3) == (100, 1)


def test_assemble_batch_all_strong_for_baseline(tiny):
    dataset, split = tiny
    cfg = TrainConfig(regime="baseline", batch_size=8)
    rng = np.random.default_rng(0)
    batch = assemble_batch(dataset, split, 2, cfg, rng, np.random.default_rng(1))
    assert len(batch) == 8
    assert all(b.is_strong and b.onehot is not None for b in batch)
    allowed = set(split.ordered_train[:2])
    assert {b.record_id for b in batch} <= allowed  # replacement from 2 scans


def test_assemble_batch_weak_half(tiny):
    dataset, split = tiny
    cfg = TrainConfig(regime="mean_taught", weak_tier="global", batch_size=8)
    batch = assemble_batch(dataset, split, 2, cfg,
                           np.random.default_rng(0), np.random.default_rng(1))
    strong = [b for b in batch if b.is_strong]
    weak = [b for b in batch if not b.is_strong]
    assert len(strong) == 4 and len(weak) == 4
    weak_pool = set(split.ordered_train[2:])
    for b in weak:
        assert b.record_id in weak_pool
        assert b.onehot is None and b.global_label is not None and b.boxmask is None


def test_assemble_batch_box_tier_carries_boxmask(tiny):
    dataset, split = tiny
    cfg = TrainConfig(regime="self_taught", weak_tier="box", batch_size=6)
    batch = assemble_batch(dataset, split, 2, cfg,
                           np.random.default_rng(2), np.random.default_rng(3))
    for b in batch:
        if not b.is_strong:
            assert b.boxmask is not None and b.global_label is not None


def test_assemble_batch_empty_weak_pool_degrades(tiny):
    dataset, split = tiny
    cfg = TrainConfig(regime="self_taught", weak_tier="global", batch_size=6)
    full = len(split.ordered_train)
    batch = assemble_batch(dataset, split, full, cfg,
                           np.random.default_rng(0), np.random.default_rng(1))
    assert all(b.is_strong for b in batch)


def test_assemble_batch_flip_keeps_mask_aligned(tiny):
    dataset, split = tiny
    cfg = TrainConfig(regime="baseline", batch_size=4, aug_strength=0.0,
                      aug_flip_prob=1.0)
    batch = assemble_batch(dataset, split, 4, cfg,
                           np.random.default_rng(0), np.random.default_rng(1))
    for b in batch:
        rec = dataset.records[b.record_id]
        np.testing.assert_array_equal(b.image, rec.image[:, :, ::-1])
        np.testing.assert_array_equal(b.onehot, rec.onehot[:, :, ::-1])


def quick_cfg(**kw):
    base = dict(regime="mlds", weak_tier="global", epochs=4, batch_size=4,
                val_period=2, seed=3)
    base.update(kw)
    return TrainConfig(**base)


def test_fit_is_deterministic(tiny):
    dataset, split = tiny
    r1 = fit(quick_cfg(), MCFG, dataset, split, 2)
    r2 = fit(quick_cfg(), MCFG, dataset, split, 2)
    np.testing.assert_array_equal(r1.best_params, r2.best_params)
    assert [row.loss_total for row in r1.history] == \
        [row.loss_total for row in r2.history]
    r3 = fit(quick_cfg(seed=4), MCFG, dataset, split, 2)
    assert r1.history[0].loss_total != r3.history[0].loss_total


def test_fit_history_and_artifacts(tiny, tmp_path):
    dataset, split = tiny
    out = tmp_path / "run"
    res = fit(quick_cfg(), MCFG, dataset, split, 2, out_dir=out)
    loss_rows = [r for r in res.history if r.loss_total is not None]
    val_rows = [r for r in res.history if r.val_miou is not None]
    assert len(loss_rows) == res.epochs_total == 4
    assert [r.epoch for r in val_rows] == [1, 3]  # every val_period epochs
    assert res.meta["inference_source"] == "student"
    with open(out / "history.csv", newline="") as f:
        rows = list(csv.reader(f))
    assert tuple(rows[0]) == HISTORY_COLUMNS
    assert len(rows) == 1 + len(res.history)
    from fluidseg.model import load_checkpoint

    model, meta = load_checkpoint(out / "best.fseg")
    assert meta["regime"] == "mlds" and meta["budget"] == 2
    np.testing.assert_array_equal(snapshot_params(model), res.best_params)


def test_fit_lr_schedule_drops_late(tiny):
    dataset, split = tiny
    res = fit(quick_cfg(epochs=5, val_period=10, lr=0.02), MCFG, dataset, split, 2)
    lrs = [r.lr for r in res.history if r.lr is not None]
    assert lrs == [0.02, 0.02, 0.02, 0.02, pytest.approx(0.002)]


def test_fit_progress_callback_stops_early(tiny):
    dataset, split = tiny
    calls = []

    def progress(epoch, total, row, state):
        calls.append((epoch, total, row.epoch))
        assert isinstance(state, TrainState)
        return epoch >= 1

    res = fit(quick_cfg(epochs=6), MCFG, dataset, split, 2, progress=progress)
    assert [c[0] for c in calls] == [0, 1]
    assert all(total == 6 for _, total, _ in calls)
    loss_rows = [r for r in res.history if r.loss_total is not None]
    assert len(loss_rows) == 2


def test_fit_mean_taught_keeps_teacher(tiny):
    dataset, split = tiny
    cfg = quick_cfg(regime="mean_taught", epochs=2, val_period=1)
    res = fit(cfg, MCFG, dataset, split, 2)
    assert res.meta["inference_source"] == "teacher"
    student = snapshot_params(res.state.model)
    assert res.state.teacher is not None
    assert not np.array_equal(res.state.teacher.params, student)
    assert res.best_params.shape == student.shape


def test_fit_validates_budget(tiny):
    dataset, split = tiny
    with pytest.raises(ConfigError):
        fit(quick_cfg(), MCFG, dataset, split, 0)
    with pytest.raises(ConfigError):
        fit(quick_cfg(), MCFG, dataset, split, len(split.ordered_train) + 1)


def test_train_step_raises_on_nonfinite_loss(tiny):
    dataset, split = tiny
    cfg = TrainConfig(regime="baseline", batch_size=2, seed=0)
    model = new_model(MCFG, head_roles_for("baseline"), seed=0)
    model.parameters()[0].data[0, 0, 0, 0] = np.nan
    state = TrainState(model=model,
                       velocities=[np.zeros_like(p.data) for p in model.parameters()],
                       batch_rng=np.random.default_rng(0),
                       aug_rng=np.random.default_rng(1))
    batch = assemble_batch(dataset, split, 2, cfg, state.batch_rng, state.aug_rng)
    with pytest.raises(DivergenceError):
        train_step(state, batch, cfg, MCFG.tap_sizes(), lr=0.01)


def test_evaluate_ids_matches_manual_confusion(tiny):
    dataset, split = tiny
    from fluidseg.evalmetrics import ConfusionAccumulator

    model = new_model(MCFG, {"std"}, seed=0)
    ids = split.ordered_train[:3]
    per_class, miou = evaluate_ids(model, dataset, ids, batch_size=2)
    acc = ConfusionAccumulator(dataset.num_classes)
    classes = np.arange(dataset.num_classes)
    for i in ids:
        rec = dataset.records[i]
        grid = model.predict_std(rec.image[None]).argmax(axis=1)[0]
        pred = (grid[None] == classes[:, None, None]).astype(np.uint8)
        acc.add(pred, rec.onehot)
    np.testing.assert_allclose(
        np.nan_to_num(per_class, nan=-1.0),
        np.nan_to_num(acc.iou_per_class(), nan=-1.0))
    assert miou == acc.miou()
