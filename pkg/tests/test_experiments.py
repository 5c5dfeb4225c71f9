import json

import numpy as np
import pytest

from mmccnet import experiments as E
from mmccnet.data import DataError, synth_polyp_dataset
from mmccnet.model import ModelConfig
from mmccnet.training import LEARNING_RATE_GRID, TrainPlan


def stub_fitter(train, val, test, model_config, plan):
    """Deterministic metrics that depend on the seed and the condition only."""
    rng = np.random.default_rng(plan.seed * 1000 + int(plan.lr * 1e5) + len(plan.loss))
    dice = 0.9 + 0.01 * rng.random()
    return E.RunResult({"dice": dice, "iou": dice / (2 - dice), "hdd": 3.0 + rng.random()})


@pytest.fixture(scope="module")
def samples():
    return synth_polyp_dataset(20, h=16, w=24, seed=0)


def run(protocol, samples, tmp_path=None, **kw):
    spec = E.ExperimentSpec(protocol=protocol, **kw)
    return E.run_experiment(spec, samples, ModelConfig.tiny(), TrainPlan(epochs=1), tmp_path, fitter=stub_fitter)


def test_unknown_protocol():
    with pytest.raises(ValueError):
        E.ExperimentSpec(protocol="bootstrap")
    with pytest.raises(ValueError):
        E.ExperimentSpec.from_dict({"protocol": "holdout", "extra": 1})


def test_multirun10_uses_ten_seeds(samples, tmp_path):
    result = run("multirun10", samples, tmp_path)
    runs = result.runs["multirun10"]
    assert len(runs) == 10 and len({r["dice"] for r in runs}) == 10
    assert len(list((tmp_path / "runs" / "multirun10").iterdir())) == 10
    md = (tmp_path / "report.md").read_text()
    assert "| multirun10 | 10 |" in md


def test_report_cells_match_reference_format(samples, tmp_path):
    result = run("multirun10", samples, tmp_path)
    stats = result.statistics()["multirun10"]["dice"]
    expected = "{:.2f} ± {:.2f}, ({:.2f}, {:.2f})".format(
        stats.mean * 100, stats.sd * 100, stats.ci_low * 100, stats.ci_high * 100
    )
    csv_text = (tmp_path / "report.csv").read_text()
    assert f'"{expected}"' in csv_text


def test_kfold_runs_every_fold(samples):
    seen = []

    def recording(train, val, test, mc, plan):
        seen.append((len(train), tuple(s.id for s in test)))
        return stub_fitter(train, val, test, mc, plan)

    spec = E.ExperimentSpec(protocol="kfold5")
    E.run_experiment(spec, samples, ModelConfig.tiny(), TrainPlan(), fitter=recording)
    assert len(seen) == 5
    test_ids = [i for _, ids in seen for i in ids]
    assert sorted(test_ids) == sorted(s.id for s in samples)
    assert all(n + len(ids) == len(samples) for n, ids in seen)


def test_kfold_needs_enough_samples(samples):
    with pytest.raises(DataError):
        run("kfold5", samples[:3])


@pytest.mark.parametrize(
    "protocol,labels",
    [
        ("ablate", ["network1", "network2", "network3", "network4"]),
        ("loss_sweep", ["bce", "dice", "joint", "joint_l2"]),
        ("optimizer_sweep", ["sgd", "adam"]),
        ("lr_sweep", [f"lr={lr:g}" for lr in LEARNING_RATE_GRID]),
    ],
)
def test_sweep_conditions(samples, protocol, labels):
    assert list(run(protocol, samples).runs) == labels


def test_sweep_conditions_change_the_right_field():
    conds = E.conditions(E.ExperimentSpec(protocol="ablate"), ModelConfig.tiny(), TrainPlan())
    assert [c.model_config.variant_name() for c in conds] == ["network1", "network2", "network3", "network4"]
    conds = E.conditions(E.ExperimentSpec(protocol="lr_sweep"), ModelConfig.tiny(), TrainPlan())
    assert sorted(c.plan.lr for c in conds) == sorted([3e-4, 4e-4, 5e-4, 2e-3, 1e-3, 1e-4])


def test_explicit_test_set_is_used(samples):
    seen = []

    def recording(train, val, test, mc, plan):
        seen.append((len(train), len(val), len(test)))
        return stub_fitter(train, val, test, mc, plan)

    spec = E.ExperimentSpec(protocol="holdout")
    E.run_experiment(spec, samples[:12], ModelConfig.tiny(), TrainPlan(), test_samples=samples[12:], fitter=recording)
    assert seen == [(12, 0, 8)]


def test_report_is_byte_stable(samples, tmp_path):
    run("loss_sweep", samples, tmp_path / "a", runs=3)
    runs = E.collect_runs(tmp_path / "a")
    assert list(runs) == ["bce", "dice", "joint", "joint_l2"]
    E.write_reports(runs, tmp_path / "b")
    E.write_reports(E.collect_runs(tmp_path / "a"), tmp_path / "c")
    for name in ("report.csv", "report.md"):
        first = (tmp_path / "a" / name).read_bytes()
        assert first == (tmp_path / "b" / name).read_bytes() == (tmp_path / "c" / name).read_bytes()


def test_summary_json(samples, tmp_path):
    run("holdout", samples, tmp_path)
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["spec"]["protocol"] == "holdout"
    assert len(summary["runs"]["holdout"]) == 1


def test_collect_runs_errors(tmp_path):
    with pytest.raises(DataError):
        E.collect_runs(tmp_path)
    (tmp_path / "x").mkdir()
    (tmp_path / "x" / "metrics.json").write_text("[]")
    with pytest.raises(DataError):
        E.collect_runs(tmp_path)


def test_default_fitter_end_to_end(samples, tmp_path):
    spec = E.ExperimentSpec(protocol="holdout")
    small = ModelConfig.tiny(base_channels=4, input_size=(16, 24))
    result = E.run_experiment(spec, samples, small, TrainPlan(epochs=1, batch_size=8), tmp_path)
    assert 0 <= result.runs["holdout"][0]["dice"] <= 1
    log = (tmp_path / "runs" / "holdout" / "run-00" / "train_log.csv").read_text()
    assert log.startswith("epoch,train_loss")
