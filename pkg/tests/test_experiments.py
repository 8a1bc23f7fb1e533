import csv
import json

import numpy as np
import pytest

from posegan.data import AvailabilityMatrix, load_manifest, unbalanced_matrix
from posegan.errors import InvalidArgument, ValidationError
from posegan.experiments import (ClassifierConfig, ExperimentPlan, accuracy_from_predictions, build_datasets,
                                 confusion_select, evaluate_classifier, run_plan, train_classifier)

FAST = ClassifierConfig(width=8, n_blocks=2, epochs=8, batch_size=16)


@pytest.fixture(scope="module")
def split(tiny_dataset):
    return load_manifest(tiny_dataset / "train.jsonl"), load_manifest(tiny_dataset / "test.jsonl")


def test_constant_predictor_scores_its_class_prior():
    truth = np.array([0, 0, 0, 0, 1])
    pred = np.array([0, 0, 0, 0, 0])
    per_class, overall, conf = accuracy_from_predictions(pred, truth, ["a", "b", "c"])
    assert per_class == {"a": 1.0, "b": 0.0}
    assert overall == pytest.approx(0.8)
    assert conf.tolist() == [[4, 0, 0], [1, 0, 0], [0, 0, 0]]


def test_overfits_eight_images(split):
    train, _ = split
    eight = train.replace(records=train.records[:4] + train.records[-4:])
    clf = train_classifier(eight, ClassifierConfig(width=8, n_blocks=2, epochs=40, batch_size=4))
    assert evaluate_classifier(clf, eight).overall == 1.0


def test_confusion_select():
    conf = np.array([[9, 0, 0, 0],
                     [0, 5, 0, 4],
                     [0, 0, 9, 0],
                     [3, 2, 1, 3]])
    assert confusion_select(conf, 2) == [1, 3]
    assert confusion_select(conf, 3) == [1, 3, 0]
    assert confusion_select(np.eye(4), 2) == [0, 1]
    assert confusion_select(conf, 0) == []
    with pytest.raises(InvalidArgument):
        confusion_select(conf, 5)


def test_classifier_fits_and_is_seeded(split):
    train, _ = split
    cfg = ClassifierConfig(width=8, n_blocks=2, epochs=30, batch_size=4)
    a = train_classifier(train, cfg, seed=3)
    b = train_classifier(train, cfg, seed=3)
    row = evaluate_classifier(a, train)
    assert row.overall >= 0.9 and row.seed == 3
    assert np.array_equal(a.predict(np.zeros((2, 32, 32, 3), np.float32)),
                          b.predict(np.zeros((2, 32, 32, 3), np.float32)))
    for p, q in zip(a.net.parameters(), b.net.parameters()):
        assert np.array_equal(p.detach().numpy(), q.detach().numpy())


def test_classifier_rejects_mismatched_classes(split):
    train, test = split
    clf = train_classifier(train, FAST)
    with pytest.raises(ValidationError):
        evaluate_classifier(clf, test.replace(class_names=("x", "y")))


def test_role_sizes(tmp_path, split, tiny_ckpt):
    train, _ = split
    matrix = unbalanced_matrix(2, 6, [1])
    ds = build_datasets(train, matrix, tiny_ckpt, tmp_path)
    n_inst = len(train.instances())
    assert len(ds["P-B"]) == len(train) == len(ds["S-P-B"])
    assert len(ds["P-UB"]) == len(train) - 4 * n_inst // 2
    assert len(ds["SA-P-B"]) == len(ds["S-P-B"]) + 5 * n_inst
    assert len(ds["A-P-UB"]) == len(ds["S-P-B"])
    assert tuple(r for r in ds["S-P-B"].records if r.synthetic_origin == "real") == ds["P-UB"].records
    assert all(r.synthetic_origin == "augmented" for r in ds["A-P-UB"].records[len(ds["P-UB"]):])
    with pytest.raises(InvalidArgument):
        build_datasets(train, matrix, None, tmp_path, roles=("S-P-B",))
    assert set(build_datasets(train, matrix, None, tmp_path, roles=("P-UB", "P-B"))) == {"P-UB", "P-B"}


def test_full_availability_keeps_everything(tmp_path, split):
    train, _ = split
    ds = build_datasets(train, AvailabilityMatrix.full(2, 6), None, tmp_path, roles=("P-UB", "P-B"))
    assert ds["P-UB"] == ds["P-B"]


def test_plan_from_dict(tmp_path):
    plan = ExperimentPlan.from_dict({"train_manifest": "a.jsonl", "test_manifest": "/b.jsonl", "checkpoint": None,
                                     "out_dir": "out", "classifier": {"epochs": 2}, "seeds": [4]}, base_dir=tmp_path)
    assert plan.train_manifest == str(tmp_path / "a.jsonl") and plan.test_manifest == "/b.jsonl"
    assert plan.classifier.epochs == 2 and plan.seeds == (4,)
    with pytest.raises(ValidationError):
        ExperimentPlan.from_dict({"train_manifest": "a", "test_manifest": "b", "checkpoint": None,
                                  "out_dir": "o", "colour": 1})
    with pytest.raises(InvalidArgument):
        ExperimentPlan("a", "b", None, "o", roles=("X",))
    with pytest.raises(InvalidArgument):
        ExperimentPlan("a", "b", None, "o", seeds=())


def test_run_plan_end_to_end(tmp_path, tiny_dataset, tiny_ckpt_dir):
    plan = ExperimentPlan(str(tiny_dataset / "train.jsonl"), str(tiny_dataset / "test.jsonl"), str(tiny_ckpt_dir),
                          str(tmp_path), availability=unbalanced_matrix(2, 6, [1]).to_dict(), classifier=FAST,
                          seeds=(0, 1), sweep_levels=(1, 3), sweep_select=2)
    res = run_plan(plan)
    assert {r.role for r in res.rows} >= {"P-UB", "P-B", "S-P-B", "SA-P-B", "A-P-UB", "1/P-UB", "3/S-P-B"}
    assert res.summary["S-P-B"]["n"] == 2
    assert res.deltas["S-P-B - P-UB"] == pytest.approx(res.summary["S-P-B"]["mean"] - res.summary["P-UB"]["mean"])
    assert set(res.sweep) == {"1", "3"}
    saved = json.loads((tmp_path / "results.json").read_text())
    assert saved["deltas"] == res.deltas
    with open(tmp_path / "accuracy_table.csv") as fh:
        table = list(csv.reader(fh))
    assert table[0][:6] == ["class", "P-UB", "P-B", "S-P-B", "SA-P-B", "A-P-UB"]
    assert [r[0] for r in table[1:]] == ["cuboid", "cylinder", "overall"]


def test_run_plan_rejects_overlapping_instances(tmp_path, tiny_dataset):
    plan = ExperimentPlan(str(tiny_dataset / "all.jsonl"), str(tiny_dataset / "test.jsonl"), None, str(tmp_path),
                          roles=("P-B",), seeds=(0,), classifier=FAST)
    with pytest.raises(ValidationError, match="also appear"):
        run_plan(plan)
