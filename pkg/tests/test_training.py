import dataclasses
import math

import numpy as np
import pytest

from cdrlab import training
from cdrlab.config import config_from_dict
from cdrlab.datagen import Dataset, generate_dataset, split_train_val
from cdrlab.training import (
    DataLeakError,
    TrainingDiverged,
    build_models,
    cache_for,
    candidate_count,
    evaluate_loss,
    format_metric,
    train,
)


def small_cfg(**train_kw):
    tc = {"batch_size": 8, "epochs": 2, "patience": 5}
    tc.update(train_kw)
    return config_from_dict({
        "model": {"conv_channels": [4, 4], "encoder_hidden": 16, "action_hidden": 16, "trunk_hidden": 16,
                  "gru_hidden": 8, "horizons": 2, "context": 2},
        "data": {"val_fraction": 0.25},
        "training": tc,
    })


@pytest.fixture(scope="module")
def data():
    return generate_dataset(small_cfg(), "controlled", 16, T=5)


def test_initial_loss_is_chance(data):
    cfg = config_from_dict({"training": {"batch_size": 8}})
    m = build_models(cfg)
    for variant in ("cdr", "naive"):
        loss = evaluate_loss(m, data, cfg, n_batches=4, variant=variant)
        assert abs(loss - math.log(8)) < 0.1


def test_training_is_deterministic(data):
    cfg = small_cfg()
    a, b = train(cfg, data, val_batches=2), train(cfg, data, val_batches=2)
    assert a.metrics == b.metrics
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
    assert len(a.metrics) == 2 * (a.epochs_run + 1)
    assert a.metrics[0].startswith("epoch=0 split=train loss=")


def test_uncontrolled_training_runs():
    cfg = small_cfg(paradigm="uncontrolled", epochs=1)
    ds = generate_dataset(cfg, "uncontrolled", 12, T=8)
    res = train(cfg, ds, val_batches=1)
    assert res.epochs_run == 1 and all(np.isfinite(h["loss"]) for h in res.history)
    assert candidate_count(cfg) == 8 + 2 - 1


def test_patience_stops_after_exactly_patience_bad_epochs(data, monkeypatch):
    cfg = small_cfg(epochs=20, patience=3)
    # init train, init val, then one val per epoch; val improves once then worsens
    vals = iter([2.0, 2.0, 1.5, 1.6, 1.7, 1.8, 1.9, 2.0])
    monkeypatch.setattr(training, "evaluate_loss", lambda *a, **k: next(vals))
    res = train(cfg, data)
    assert res.stopped_early and res.best_epoch == 1 and res.epochs_run == 4
    assert res.best_val == 1.5


def test_evaluate_loss_is_pure(data):
    cfg = small_cfg()
    m = build_models(cfg)
    before = m.params.values()
    cache = cache_for(cfg, data)
    a = evaluate_loss(m, data, cfg, cache, n_batches=3)
    b = evaluate_loss(m, data, cfg, cache, n_batches=3)
    assert a == b
    assert all(np.array_equal(before[k], m.params[k].data) for k in before)


def test_training_without_cache_matches_rendering(data):
    cfg = small_cfg(resample_domains=False, epochs=1)
    train_ds, val_ds = split_train_val(data, cfg.data.val_fraction)
    a = train(cfg, data, caches=(None, None), val_batches=1)
    b = train(cfg, data, caches=(cache_for(cfg, train_ds), cache_for(cfg, val_ds)), val_batches=1)
    for x, y in zip(a.history, b.history):
        assert x["loss"] == pytest.approx(y["loss"], abs=1e-5)


def test_divergence_reports_last_good(data, monkeypatch):
    cfg = small_cfg()
    monkeypatch.setattr(training, "forward_backward", lambda fn, params: (float("nan"), {}))
    with pytest.raises(TrainingDiverged) as info:
        train(cfg, data, val_batches=1)
    assert len(info.value.last_good) > 0


def test_seed_overlap_is_detected(data):
    # a repeated seed straddling the split boundary lands on both sides
    eps = sorted(data.episodes, key=lambda e: e.seed)
    dup = Dataset("controlled", eps + [eps[12]], "all", data.family_pool, data.config_hash)
    with pytest.raises(DataLeakError):
        train(small_cfg(), dup, val_batches=1)


def test_metric_format():
    line = format_metric(3, "val", math.log(64), 64)
    assert line == f"epoch=3 split=val loss={math.log(64)!r} mi_bound=0"
