import math

import numpy as np
import pytest

from mmccnet import training as TR
from mmccnet.data import synth_polyp_dataset
from mmccnet.model import ModelConfig, build_mmcc_net
from mmccnet.tensor import Tensor

SMALL = ModelConfig.tiny(base_channels=4, input_size=(16, 24))


@pytest.fixture(scope="module")
def samples():
    return synth_polyp_dataset(6, h=16, w=24, seed=1)


def plan(**kw):
    base = dict(epochs=3, batch_size=4, seed=0)
    base.update(kw)
    return TR.TrainPlan(**base)


def test_adam_matches_hand_computation():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    state = TR.OptimizerState(kind="adam", lr=0.1)
    grads = [np.array([0.5, -1.0]), np.array([0.2, 0.3])]
    m = v = np.zeros(2)
    w = p.data.copy()
    for t, g in enumerate(grads, start=1):
        p.grad = g.copy()
        TR.optimizer_step(state, {"p": p})
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 0.1 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        np.testing.assert_allclose(p.data, w, rtol=1e-12)
        assert p.grad is None


def test_sgd_step_and_missing_gradient():
    p = Tensor(np.array([1.0]), requires_grad=True)
    state = TR.OptimizerState(kind="sgd", lr=0.5)
    p.grad = np.array([2.0])
    TR.optimizer_step(state, {"p": p})
    assert p.data[0] == 0.0
    with pytest.raises(TR.MissingGradientError):
        TR.optimizer_step(state, {"p": p})
    with pytest.raises(ValueError):
        TR.OptimizerState(kind="rmsprop")


def test_zero_learning_rate_leaves_parameters_unchanged(samples):
    model = build_mmcc_net(SMALL)
    before = {k: p.data.copy() for k, p in model.params.items()}
    TR.train(model, samples, [], plan(lr=0.0, epochs=2))
    assert all(np.array_equal(before[k], model.params[k].data) for k in before)


def test_training_lowers_the_loss(samples):
    model = build_mmcc_net(SMALL)
    log = TR.train(model, samples, [], plan(epochs=8, lr=3e-3))
    assert log.records[-1].train_loss < log.records[0].train_loss
    assert [r.epoch for r in log.records] == list(range(1, 9))


def test_log_csv_format(samples):
    log = TR.train(build_mmcc_net(SMALL), samples, samples[:2], plan(epochs=2))
    lines = log.to_csv().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss,train_dice,val_dice"
    assert len(lines) == 3 and all(len(l.split(",")) == 5 for l in lines)


def test_no_validation_set_gives_nan_columns(samples):
    log = TR.train(build_mmcc_net(SMALL), samples, [], plan(epochs=1))
    assert math.isnan(log.last.val_loss) and math.isnan(log.last.val_dice)


def test_early_stopping_restores_best(samples, monkeypatch):
    # scripted validation scores: improvement at epoch 2, then a plateau
    scores = iter([0.1, 0.5, 0.4, 0.3, 0.2, 0.2, 0.2])
    snapshots = {}
    original = TR.Trainer.validate

    def fake_validate(self, val):
        original(self, val)
        snapshots[self.epoch] = self.model.copy_state()
        return 0.0, next(scores)

    monkeypatch.setattr(TR.Trainer, "validate", fake_validate)
    trainer = TR.Trainer(build_mmcc_net(SMALL), plan(epochs=7, patience=3, lr=1e-2))
    log = trainer.fit(samples, samples[:2])
    assert log.stopped_early and len(log.records) == 5 and log.best_epoch == 2
    best = snapshots[2]
    assert all(np.array_equal(best[k], v) for k, v in trainer.model.state_arrays().items())


def test_nan_loss_aborts_with_batch_id(samples):
    model = build_mmcc_net(SMALL)
    model.params["c.head.bias"].data[:] = np.nan
    with pytest.raises(TR.NumericError, match="batch 0"):
        TR.train(model, samples, [], plan(epochs=1))


def test_identical_seeds_give_identical_logs(samples):
    a = TR.train(build_mmcc_net(SMALL), samples, samples[:2], plan())
    b = TR.train(build_mmcc_net(SMALL), samples, samples[:2], plan())
    assert a.to_csv() == b.to_csv()
    c = TR.train(build_mmcc_net(SMALL), samples, samples[:2], plan(seed=1))
    assert c.to_csv() != a.to_csv()


def test_resume_matches_uninterrupted(samples, tmp_path):
    full = TR.Trainer(build_mmcc_net(SMALL), plan(epochs=4))
    full.fit(samples, samples[:2])
    part = TR.Trainer(build_mmcc_net(SMALL), plan(epochs=4))
    part.fit(samples, samples[:2], epochs=2)
    part.save(tmp_path / "ck")
    resumed = TR.Trainer.resume(tmp_path / "ck", SMALL)
    resumed.fit(samples, samples[:2])
    assert resumed.log.to_csv() == full.log.to_csv()
    for k, p in full.model.params.items():
        assert np.array_equal(p.data, resumed.model.params[k].data)
    for k, b in full.model.buffers.items():
        assert np.array_equal(b, resumed.model.buffers[k])


def test_checkpoint_round_trip_and_rejections(tmp_path):
    model = build_mmcc_net(SMALL)
    opt = TR.OptimizerState(lr=3e-4)
    path = tmp_path / "m.ckpt"
    TR.checkpoint_save(path, model, opt, meta={"note": "x"})
    ck = TR.checkpoint_load(path)
    assert ck.meta == {"note": "x"} and ck.optimizer.lr == 3e-4
    for k in model.params:
        assert np.array_equal(model.params[k].data, ck.model.params[k].data)

    blob = bytearray(path.read_bytes())
    flipped = bytearray(blob)
    flipped[len(blob) // 2] ^= 0xFF
    (tmp_path / "flip").write_bytes(flipped)
    with pytest.raises(TR.CorruptCheckpointError):
        TR.checkpoint_load(tmp_path / "flip")
    (tmp_path / "short").write_bytes(blob[:100])
    with pytest.raises(TR.CorruptCheckpointError):
        TR.checkpoint_load(tmp_path / "short")
    (tmp_path / "magic").write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(TR.CorruptCheckpointError):
        TR.checkpoint_load(tmp_path / "magic")
    with pytest.raises(TR.ManifestMismatchError):
        TR.checkpoint_load(path, ModelConfig.tiny(base_channels=6))


def test_checkpoint_version_mismatch(tmp_path, monkeypatch):
    path = tmp_path / "v.ckpt"
    monkeypatch.setattr(TR, "CHECKPOINT_VERSION", 99)
    TR.checkpoint_save(path, build_mmcc_net(SMALL), TR.OptimizerState())
    monkeypatch.setattr(TR, "CHECKPOINT_VERSION", 1)
    with pytest.raises(TR.VersionMismatchError):
        TR.checkpoint_load(path)


def test_checkpoint_layout(tmp_path):
    path = tmp_path / "m.ckpt"
    TR.checkpoint_save(path, build_mmcc_net(SMALL), TR.OptimizerState())
    blob = path.read_bytes()
    assert blob[:4] == b"MMCC"
    assert int.from_bytes(blob[4:8], "little") == 1


def test_evaluate_report(samples):
    model = build_mmcc_net(SMALL)
    report = TR.evaluate(model, samples)
    assert [r["id"] for r in report.per_image] == [s.id for s in samples]
    assert set(report.means) == {"accuracy", "precision", "recall", "dice", "iou", "hdd", "auc"}
    with pytest.raises(ValueError):
        TR.evaluate(model, [])


def test_plan_validation():
    with pytest.raises(ValueError):
        TR.TrainPlan(epochs=0)
    with pytest.raises(ValueError):
        TR.TrainPlan(loss="l1")
    with pytest.raises(ValueError):
        TR.TrainPlan.from_dict({"epochz": 3})
