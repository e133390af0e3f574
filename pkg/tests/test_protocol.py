import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from anast.classifier import joint_fit
from anast.data import parse_manifest, split_train_test
from anast.expansion import make_projector
from anast.matcore import relative_error
from anast.protocol import (
    AccuracyMatrix,
    RunReport,
    acc_metric,
    bwt_metric,
    run_anast,
    run_joint,
    run_naive,
)

from conftest import synthetic_doc


class TestMetrics:
    def test_acc_single(self):
        assert acc_metric(AccuracyMatrix.from_rows([[0.9]])) == 0.9

    def test_acc_final_row(self):
        assert acc_metric(AccuracyMatrix.from_rows([[1.0], [0.9, 0.8]])) == pytest.approx(0.85, abs=1e-15)

    @given(st.floats(0, 1), st.integers(1, 8))
    def test_acc_constant(self, a, t):
        m = AccuracyMatrix.from_rows([[a] * (i + 1) for i in range(t)])
        assert acc_metric(m) == pytest.approx(a, abs=1e-15)

    def test_bwt_no_forgetting(self):
        assert bwt_metric(AccuracyMatrix.from_rows([[0.7], [0.7, 0.5], [0.7, 0.5, 0.9]])) == 0.0

    def test_bwt_two_tasks(self):
        assert bwt_metric(AccuracyMatrix.from_rows([[0.9], [0.7, 0.8]])) == pytest.approx(-0.2, abs=1e-15)

    def test_bwt_positive_when_improving(self):
        assert bwt_metric(AccuracyMatrix.from_rows([[0.5], [0.6, 0.5], [0.9, 0.8, 0.7]])) > 0

    def test_bwt_single_task_flagged(self):
        m = AccuracyMatrix.from_rows([[0.4]])
        assert bwt_metric(m) == 0.0

    def test_matrix_validation(self):
        with pytest.raises(ValueError):
            AccuracyMatrix(np.array([[0.5, 0.5], [0.5, 0.5]]))
        with pytest.raises(ValueError):
            AccuracyMatrix.from_rows([[1.5]])


def small_doc(**kw):
    kw.setdefault("per_class", 60)
    kw.setdefault("output_dim", 200)
    return synthetic_doc(**kw)


class TestRunAnast:
    def test_single_task(self):
        r = run_anast(parse_manifest(small_doc(n_tasks=1)))
        assert r.accuracy.values.shape == (1, 1)
        assert r.acc == r.accuracy.values[0, 0]
        assert r.bwt == 0.0 and not r.bwt_defined

    def test_separable_three_tasks(self):
        r = run_anast(parse_manifest(small_doc(n_tasks=3)))
        assert min(r.accuracy.values[-1]) >= 0.99

    def test_final_weights_equal_joint(self):
        m = parse_manifest(small_doc(n_tasks=3, sep=2.0, std=1.0))
        r = run_anast(m)
        trains = [split_train_test(m.task_data(t), m.split_ratio, m.split_seed)[0] for t in m.tasks]
        joint = joint_fit(trains, m.gamma, make_projector(m.expansion))
        assert r.model.registry == joint.registry
        assert relative_error(r.model.weights, joint.weights) <= 1e-8

    def test_registry_grows_with_union(self):
        m = parse_manifest(small_doc(n_tasks=3))
        r = run_anast(m)
        assert list(r.model.registry) == [c for t in m.tasks for c in t.classes]

    def test_errors_name_task(self):
        doc = small_doc(n_tasks=2)
        doc["sources"]["tiny"] = {"synthetic": {"classes": 2, "per_class": 1, "dim": 20, "seed": 1}}
        doc["tasks"][1] = {"name": "fragile", "classes": ["c0"], "source": "tiny"}
        with pytest.raises(Exception, match="fragile"):
            run_anast(parse_manifest(doc))


class TestBaselines:
    def test_naive_single_task_identical(self):
        m = parse_manifest(small_doc(n_tasks=1))
        assert run_naive(m).to_dict(timing=False) | {"method": "x"} == run_anast(m).to_dict(timing=False) | {"method": "x"}

    def test_naive_forgets_task0(self):
        m = parse_manifest(small_doc(n_tasks=2))
        r = run_naive(m)
        # no better than guessing among task 0's own two classes
        assert r.accuracy.values[1, 0] <= 0.5

    def test_naive_bwt_below_anast(self, standard_manifest):
        assert run_naive(standard_manifest).bwt < run_anast(standard_manifest).bwt

    def test_joint_matches_anast(self):
        m = parse_manifest(small_doc(n_tasks=3, sep=2.0, std=1.0))
        a, j = run_anast(m), run_joint(m)
        assert np.all(j.accuracy.values[-1] >= a.accuracy.values[-1] - 1e-9)
        np.testing.assert_allclose(j.accuracy.values[-1], a.accuracy.values[-1], atol=1e-9)
        assert np.isnan(j.accuracy.values[0, 0]) and not j.bwt_defined and j.bwt == 0.0

    def test_joint_single_task_identical(self):
        m = parse_manifest(small_doc(n_tasks=1))
        assert run_joint(m).accuracy.values.tolist() == run_anast(m).accuracy.values.tolist()

    def test_joint_chance_level(self):
        m = parse_manifest(small_doc(n_tasks=2, per_class=1000, sep=0.0, std=1.0))
        assert abs(run_joint(m).acc - 0.25) <= 0.05


class TestReport:
    def test_metrics_recomputable(self, standard_manifest):
        r = run_anast(standard_manifest)
        doc = json.loads(r.to_json())
        back = RunReport.from_dict(doc)
        assert acc_metric(back.accuracy) == doc["acc"]
        assert bwt_metric(back.accuracy) == doc["bwt"]

    def test_weighted_acc_reported(self, standard_manifest):
        doc = run_anast(standard_manifest).to_dict()
        assert 0 <= doc["acc_weighted"] <= 1 and doc["test_sizes"] == [80, 80, 80, 80]

    def test_deterministic_bytes(self):
        m = parse_manifest(small_doc(n_tasks=3, sep=2.0, std=1.0))
        assert run_anast(m).to_json(timing=False) == run_anast(m).to_json(timing=False)

    def test_flat_table(self):
        r = run_anast(parse_manifest(small_doc(n_tasks=2)))
        lines = r.flat_table().splitlines()
        assert lines[0] == "t\ti\ttask\taccuracy" and len(lines) == 1 + 3
        assert run_joint(parse_manifest(small_doc(n_tasks=2))).flat_table().count("\n") == 1 + 2
