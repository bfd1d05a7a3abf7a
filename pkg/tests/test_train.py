import hashlib
import json
import math

import numpy as np
import pytest

from cyclepose.config import ConfigError, DataConfig, ModelConfig, TrainConfig
from cyclepose.data import make_split
from cyclepose.metrics import evaluate
from cyclepose.model import load_checkpoint
from cyclepose.train import (FULL_SCHEDULE, AdamState, TrainingError, adam_step, lr_schedule, scaled_decay_epochs,
                             train)


# ---------------------------------------------------------------- Adam

def test_adam_zero_gradient_leaves_params():
    p = np.array([1.0, -2.0, 3.0])
    st = AdamState.zeros_like([p])
    adam_step([p], [np.zeros(3)], st, 1e-3)
    np.testing.assert_array_equal(p, [1.0, -2.0, 3.0])


def test_adam_first_step_is_sign():
    p = np.zeros(4)
    g = np.array([3.0, -0.5, 100.0, -1e-2])
    adam_step([p], [g], AdamState.zeros_like([p]), 1e-3)
    np.testing.assert_allclose(p, -1e-3 * np.sign(g), rtol=1e-5)


def _scalar_adam(p, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return p


def test_adam_matches_scalar_oracle(rng):
    p0 = rng.standard_normal(7)
    g1, g2 = rng.standard_normal(7), rng.standard_normal(7)
    p = p0.copy()
    st = AdamState.zeros_like([p])
    adam_step([p], [g1], st, 1e-2)
    adam_step([p], [g2], st, 1e-2)
    for i in range(7):
        assert abs(p[i] - _scalar_adam(p0[i], [g1[i], g2[i]], 1e-2)) < 1e-10
    assert st.t == 2


def test_adam_missing_gradient_counts_as_zero():
    p = np.ones(2)
    adam_step([p], [None], AdamState.zeros_like([p]), 1.0)
    np.testing.assert_array_equal(p, 1.0)


# ---------------------------------------------------------------- schedule

@pytest.mark.parametrize("epoch, lr", [(0, 1e-3), (199, 1e-3), (200, 1e-4), (259, 1e-4), (260, 1e-5), (299, 1e-5)])
def test_full_length_schedule(epoch, lr):
    assert lr_schedule(epoch, FULL_SCHEDULE) == pytest.approx(lr, rel=1e-12)


def test_desk_schedule():
    tc = TrainConfig()
    assert scaled_decay_epochs(tc.epochs) == tc.lr_decay_epochs == (20, 26)
    assert lr_schedule(19, tc) == pytest.approx(1e-3)
    assert lr_schedule(20, tc) == pytest.approx(1e-4)
    assert lr_schedule(26, tc) == pytest.approx(1e-5)


@pytest.mark.parametrize("kw", [dict(lr_decay_epochs=(5, 3)), dict(epochs=10, lr_decay_epochs=(10,)),
                                dict(lr_decay_factor=1.0), dict(lr_decay_factor=0.0)])
def test_train_config_validation(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


# ---------------------------------------------------------------- training loop

TINY_TRAIN = TrainConfig(epochs=2, steps_per_epoch=4, batch_size=8, lr_decay_epochs=(1,), eval_every=1)


@pytest.fixture
def tiny_data(tiny_data_config):
    return make_split(32, 16, 0, tiny_data_config)


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_smoke_loss_decreases():
    mc = ModelConfig()
    d = make_split(512, 32, 0, DataConfig())
    res = train(mc, TrainConfig(epochs=1, steps_per_epoch=200, lr_decay_epochs=(), eval_every=1), d)
    assert len(res.log) == 200
    assert res.log[-1]["total"] < res.log[0]["total"]


def test_single_cycle_log_has_no_distillation(tiny_config, tiny_data):
    res = train(tiny_config.replace(num_cycles=1), TINY_TRAIN, tiny_data)
    assert all(r["l_kt"] == 0.0 and r["l_vt"] == 0.0 for r in res.log)
    assert len(res.final_report.per_cycle) == 1


def test_training_outputs_and_determinism(tmp_path, tiny_config, tiny_data):
    a = train(tiny_config, TINY_TRAIN, tiny_data, out_dir=tmp_path / "a")
    b = train(tiny_config, TINY_TRAIN, tiny_data, out_dir=tmp_path / "b")
    for name in ("checkpoint.ckpt", "final.ckpt", "train_log.jsonl", "eval_log.jsonl", "summary.json"):
        assert _sha(tmp_path / "a" / name) == _sha(tmp_path / "b" / name), name
    lines = (tmp_path / "a" / "train_log.jsonl").read_text().splitlines()
    header = json.loads(lines[0])
    assert header["event"] == "header" and "run_hash" in header
    assert len(lines) == 1 + TINY_TRAIN.epochs * TINY_TRAIN.steps_per_epoch
    assert {"l_pose", "l_kt", "l_vt", "total", "lr", "step"} <= set(json.loads(lines[1]))
    evals = [json.loads(x) for x in (tmp_path / "a" / "eval_log.jsonl").read_text().splitlines()]
    assert len(evals) == 2 and all(len(e["per_cycle"]) == 2 for e in evals)
    assert a.final_report.metrics() == b.final_report.metrics()
    assert [r["lr"] for r in a.log] == [1e-3] * 4 + [pytest.approx(1e-4)] * 4


def test_best_checkpoint_is_keyed_on_first_cycle(tmp_path, tiny_config, tiny_data):
    res = train(tiny_config, TINY_TRAIN, tiny_data, out_dir=tmp_path)
    model, meta = load_checkpoint(res.checkpoint_path)
    assert meta["step"] == res.best_step
    assert res.best_report.pck_at(0.1) == max(e["pck"]["0.1"] for e in res.eval_log)


def test_checkpoint_reproduces_eval_report(tmp_path, tiny_config, tiny_data):
    res = train(tiny_config, TINY_TRAIN, tiny_data, out_dir=tmp_path)
    model, _ = load_checkpoint(tmp_path / "final.ckpt")
    rep = evaluate(model, tiny_data[1], step=res.final_report.step)
    assert rep.metrics() == res.final_report.metrics()


def test_eval_does_not_mutate_model(tmp_path, tiny_config, tiny_data):
    res = train(tiny_config, TINY_TRAIN, tiny_data)
    res.model.save(tmp_path / "before.ckpt")
    evaluate(res.model, tiny_data[1], num_cycles=3)
    res.model.save(tmp_path / "after.ckpt")
    assert _sha(tmp_path / "before.ckpt") == _sha(tmp_path / "after.ckpt")


def test_nan_loss_aborts_with_diagnostic(tiny_config, tiny_data):
    with pytest.raises(TrainingError, match=r"step 1 \(lr=0\.001\).*l_pose"):
        train(tiny_config, TINY_TRAIN.replace(base_lr=1e-3), _poisoned(tiny_data))


def _poisoned(data):
    tr, va = data
    arrays = dict(tr.arrays())
    arrays["heatmaps"] = np.full_like(arrays["heatmaps"], np.nan)
    tr._arrays = arrays
    return tr, va
