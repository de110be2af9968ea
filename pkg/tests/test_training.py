import json
import math

import numpy as np
import pytest

import oracles
from eegmtl.data import generate_synthetic, split
from eegmtl.model import ModelConfig, MTLTransformer
from eegmtl.tensor import Parameter
from eegmtl.training import (
    SGD,
    Adam,
    NonFiniteGradient,
    RunReport,
    TrainConfig,
    clip_global_norm,
    lr_schedule,
    mean_std,
    naive_baseline,
    rmse_mm,
    run_sweep,
    sweep_csv,
    sweep_summary,
    train,
)


@pytest.fixture(scope="module")
def splits():
    return split(generate_synthetic(120, 8, 64, seed=11), seed=11)


@pytest.mark.parametrize("epoch, lr", [(0, 1e-4), (5, 1e-4), (6, 9e-5), (11, 9e-5), (12, 8.1e-5), (14, 8.1e-5)])
def test_lr_schedule(epoch, lr):
    assert lr_schedule(epoch, TrainConfig()) == pytest.approx(lr, rel=1e-12)


def test_lr_schedule_range():
    with pytest.raises(ValueError):
        lr_schedule(15, TrainConfig())
    with pytest.raises(ValueError):
        TrainConfig(decay_factor=1.5)


def test_sgd_step():
    p = Parameter(np.array([1.0]))
    SGD().step({"p": p}, {"p": np.array([2.0])}, 0.1)
    assert p.data[0] == pytest.approx(0.8, abs=1e-15)


def test_adam_first_step_is_minus_lr():
    p = Parameter(np.zeros(5))
    Adam().step({"p": p}, {"p": np.ones(5)}, 1e-3)
    assert np.all(np.abs(p.data + 1e-3) < 1e-6)


def test_zero_gradient_fixpoint():
    p, q = Parameter(np.arange(3.0)), Parameter(np.arange(3.0))
    SGD().step({"p": p}, {"p": np.zeros(3)}, 0.5)
    Adam().step({"q": q}, {"q": np.zeros(3)}, 0.5)
    np.testing.assert_array_equal(p.data, np.arange(3.0))
    assert np.all(np.abs(q.data - np.arange(3.0)) < 1e-12)


def test_nonfinite_gradient_named():
    p = Parameter(np.ones(2))
    with pytest.raises(NonFiniteGradient, match="encoder.x"):
        Adam().step({"encoder.x": p}, {"encoder.x": np.array([1.0, np.nan])}, 1e-3)
    np.testing.assert_array_equal(p.data, 1.0)


def test_clip_global_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_global_norm(g, 1.0) == 5.0
    np.testing.assert_allclose([g["a"][0], g["b"][0]], [0.6, 0.8])
    g = {"a": np.array([0.3])}
    clip_global_norm(g, 1.0)
    assert g["a"][0] == 0.3


def test_rmse_examples():
    assert rmse_mm([[1.0, 2.0]], [[1.0, 2.0]]) == 0.0
    assert rmse_mm([[3.0, 4.0]], [[0.0, 0.0]]) == 5.0
    r = np.random.default_rng(0)
    p, t = r.normal(size=(7, 2)), r.normal(size=(7, 2))
    assert abs(rmse_mm(p, t) - oracles.rmse(p, t)) < 1e-12
    with pytest.raises(ValueError):
        rmse_mm(np.zeros((2, 2)), np.zeros((3, 2)))


def test_naive_baseline():
    train_t = np.array([[0.0, 0.0], [2.0, 2.0]])
    assert naive_baseline(train_t, [[1.0, 1.0], [1.0, 1.0]]) == 0.0
    assert naive_baseline(train_t, [[4.0, 1.0], [-2.0, 1.0]]) == pytest.approx(3.0)
    ds = generate_synthetic(50, 8, 64, seed=2)
    mu = ds.gaze.astype(np.float64).mean(0)
    closed = math.sqrt(np.mean(np.sum((ds.gaze - mu) ** 2, axis=1)))
    assert abs(naive_baseline(ds.gaze, ds.gaze) - closed) < 1e-9


def test_mean_std():
    assert mean_std([1.0, 2.0, 3.0]) == (2.0, 1.0)
    assert mean_std([4.0]) == (4.0, 0.0)


def quick(seed=0, **kw):
    return TrainConfig(epochs=2, base_lr=1e-3, batch_size=16, seed=seed, **kw)


def test_train_report_and_determinism(splits):
    tr, va, te = splits
    r1 = train(MTLTransformer(ModelConfig.desk(), 0), tr, va, quick(), te)
    r2 = train(MTLTransformer(ModelConfig.desk(), 0), tr, va, quick(), te)
    assert r1 == r2
    assert len(r1.epochs) == 2 and r1.lrs == [1e-3, 1e-3]
    assert r1.test_rmse is not None and r1.naive_test_rmse > 0
    back = RunReport.from_dict(json.loads(r1.to_json()))
    assert back == r1
    table = r1.to_table()
    assert table.splitlines()[0].startswith("epoch\tlr\ttrain_main")
    assert "floor(epoch / decay_every)" in table


def test_base_equals_mtl1_at_zero_weight(splits):
    tr, va, _ = splits
    a = MTLTransformer(ModelConfig.desk().with_variant("base"), 3)
    b = MTLTransformer(ModelConfig.desk(alpha_recon=0.0), 3)
    ra, rb = train(a, tr, va, quick(3)), train(b, tr, va, quick(3))
    assert ra.val_rmse == rb.val_rmse
    pb = b.parameters()
    for k, p in a.parameters().items():
        np.testing.assert_array_equal(p.data, pb[k].data)


def test_mtl2_needs_pupil(splits):
    tr, va, _ = splits
    nopupil = type(tr)(tr.eeg, tr.gaze, None)
    with pytest.raises(ValueError, match="has-pupil"):
        train(MTLTransformer(ModelConfig.desk().with_variant("mtl2")), nopupil, va, quick())


def test_max_steps_stops_early(splits):
    tr, va, _ = splits
    rep = train(MTLTransformer(ModelConfig.desk()), tr, va, quick(max_steps=3))
    assert rep.epochs[-1].steps == 3 and len(rep.epochs) == 1


def test_sweep_rows_sorted_and_paired(splits):
    def make_model(seed, **w):
        return MTLTransformer(ModelConfig.desk(**w), seed)

    cfg = TrainConfig(epochs=1, base_lr=1e-3, batch_size=32, max_steps=2)
    rows = run_sweep([0.0, 70.0], [1, 0], make_model, lambda s: splits, cfg)
    assert [(r.weight, r.seed) for r in rows] == [(0.0, 0), (0.0, 1), (70.0, 0), (70.0, 1)]
    csv = sweep_csv(rows)
    assert csv.count("\n") == 5 and csv.startswith("weight,seed,val_rmse_mm,test_rmse_mm")
    summary = sweep_summary(rows)
    assert summary[0.0][2] == 2
    for bad in ([], [-1.0], [70.0, 0.0], [1.0, 1.0]):
        with pytest.raises(ValueError):
            run_sweep(bad, [0], make_model, lambda s: splits, cfg)


def test_sweep_records_failed_runs(splits):
    def make_model(seed, **w):
        m = MTLTransformer(ModelConfig.desk(**w), seed)
        m.encoder.norm.weight.data[:] = np.nan
        return m

    rows = run_sweep([0.0], [0], make_model, lambda s: splits, TrainConfig(epochs=1, max_steps=1))
    assert rows[0].test_rmse is None and "non-finite" in rows[0].error
