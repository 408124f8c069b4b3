import csv
import io
import logging
import math

import numpy as np
import pytest

from cosmosfl.clustering import ClusterAssignment
from cosmosfl.data import Dataset
from cosmosfl.errors import EmptyDatasetError, ParameterError
from cosmosfl.metrics import (
    CSV_COLUMNS,
    ClientRecord,
    RoundMetrics,
    check_lemma_instance,
    err,
    lemma1_check,
    min_margin,
    personalization_risk,
    random_lemma_instance,
    support_mask,
    topk_accuracy,
    write_metrics_csv,
)
from cosmosfl.models import SoftmaxRegression, margin


def _loop_argmax(row):
    best = 0
    for j in range(1, len(row)):
        if row[j] > row[best]:
            best = j
    return best


def _loop_err(probs, labels):
    wrong = 0
    for row, y in zip(probs, labels):
        if _loop_argmax(row) != y:
            wrong += 1
    return wrong / len(labels)


def test_err_examples():
    eye = np.eye(3)
    labels = np.array([0, 1, 2])
    assert err(eye, labels) == 0.0
    assert err(eye[[1, 2, 0]], labels) == 1.0
    probs = np.eye(2)[[0, 0, 1, 1]]
    assert err(probs, [0, 0, 1, 0]) == 0.25


def test_err_ties_to_lowest_index():
    assert err(np.array([[0.5, 0.5]]), [0]) == 0.0
    assert err(np.array([[0.2, 0.4, 0.4]]), [2]) == 1.0


def test_err_empty_raises():
    with pytest.raises(EmptyDatasetError):
        err(np.zeros((0, 2)), [])


def test_topk_accuracy():
    p = np.array([[0.5, 0.3, 0.2], [0.1, 0.2, 0.7]])
    assert topk_accuracy(p, [1, 0], k=1) == 0.0
    assert topk_accuracy(p, [1, 0], k=2) == 0.5
    assert topk_accuracy(p, [1, 0], k=3) == 1.0


class _Fixed:
    """Model stub returning fixed one-hot predictions for every input."""

    def __init__(self, cls, m):
        self.cls, self.m = cls, m

    def predict_proba(self, x):
        out = np.zeros((len(x), self.m))
        out[:, self.cls] = 1.0
        return out


def _ds(labels, m=3):
    labels = np.asarray(labels)
    return Dataset(np.zeros((len(labels), 2)), labels, m)


def test_personalization_risk_examples():
    assignment = ClusterAssignment.from_labels([0, 0], [0])
    perfect = personalization_risk([_Fixed(1, 3)], assignment, [_ds([1, 1]), _ds([1])])
    assert perfect == 0.0
    # client errors 0.1 and 0.3 -> mean 0.2
    a = _ds([0] * 9 + [1])
    b = _ds([0] * 7 + [2] * 3)
    risk = personalization_risk([_Fixed(0, 3)], assignment, [a, b])
    assert risk == pytest.approx(0.2, abs=1e-15)


def test_personalization_risk_errors():
    assignment = ClusterAssignment.single(2)
    with pytest.raises(ParameterError):
        personalization_risk([_Fixed(0, 3)], assignment, [_ds([0])])
    with pytest.raises(EmptyDatasetError):
        personalization_risk([_Fixed(0, 3)], assignment, [_ds([0]), None])


def test_oracle_equivalence_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(100):
        m = int(rng.integers(2, 6))
        n_clients = int(rng.integers(1, 6))
        k = int(rng.integers(1, n_clients + 1))
        labels_pi = np.concatenate([np.arange(k), rng.integers(0, k, n_clients - k)]).tolist()
        assignment = ClusterAssignment.from_labels(labels_pi, list(range(k)))
        f = int(rng.integers(1, 4))
        models = [SoftmaxRegression(f, m, rng) for _ in range(k)]
        sets = []
        for _ in range(n_clients):
            size = int(rng.integers(1, 15))
            sets.append(Dataset(rng.normal(size=(size, f)), rng.integers(0, m, size), m))
        # brute force: one point at a time, explicit loops
        per_client = []
        for i, ds in enumerate(sets):
            model = models[assignment.pi[i]]
            wrong = 0
            for x, y in zip(ds.features, ds.labels):
                row = model.predict_proba(x[None, :])[0]
                wrong += _loop_argmax(row) != y
            per_client.append(wrong / len(ds))
        assert abs(personalization_risk(models, assignment, sets) - sum(per_client) / n_clients) <= 1e-12
        probs = rng.dirichlet(np.ones(m), size=20)
        probs[:3] = np.round(probs[:3], 1)  # invite ties
        y = rng.integers(0, m, 20)
        assert abs(err(probs, y) - _loop_err(probs, y)) <= 1e-12


def test_support_mask_examples(caplog):
    assert support_mask([0, 1], [0, 2, 1]).tolist() == [True, False, True]
    assert support_mask([0, 1, 2], [0, 2, 1]).all()
    with caplog.at_level(logging.WARNING):
        mask = support_mask([3], [0, 2, 1])
    assert not mask.any()
    assert "does not intersect" in caplog.text


def test_min_margin_matches_row_loop():
    rng = np.random.default_rng(1)
    probs = rng.dirichlet(np.ones(4), size=30)
    probs[5] = [0.4, 0.4, 0.1, 0.1]
    gamma, zeros = min_margin(probs)
    margins = [margin(r) for r in probs]
    assert zeros == 1
    assert gamma == min(v for v in margins if v > 0)


def test_lemma_singleton_cluster_holds_trivially():
    rng = np.random.default_rng(2)
    p = rng.dirichlet(np.ones(3), size=10)
    labels = rng.integers(0, 3, 10)
    report = lemma1_check([p], ClusterAssignment.single(1), labels, [np.ones(10, bool)])
    e = report.entries[0]
    assert e.bound == 0.0
    assert e.lhs == err(p, labels) == e.rhs
    assert e.holds is True


def test_lemma_hand_built_two_client_instance():
    f1 = np.array([[0.7, 0.3], [0.3, 0.7], [0.7, 0.3]])
    f2 = np.array([[0.65, 0.35], [0.35, 0.65], [0.7, 0.3]])
    labels = np.array([0, 1, 1])
    mask = np.ones(3, bool)
    report = lemma1_check([f1, f2], ClusterAssignment.single(2), labels, [mask, mask])
    e = report.for_client(0)
    assert e.bound == pytest.approx(0.2, abs=1e-12)
    assert e.gamma == pytest.approx(0.4, abs=1e-12)
    assert e.lhs == err(f1, labels) == pytest.approx(1 / 3)
    assert e.rhs == pytest.approx(1 / 3 + 2 * 0.2 / (0.4 * 3), abs=1e-12)
    assert e.holds is True


def test_lemma_zero_margin_is_inconclusive():
    f1 = np.array([[0.5, 0.5], [0.9, 0.1]])
    report = lemma1_check([f1], ClusterAssignment.single(1), [0, 0], [np.ones(2, bool)])
    e = report.entries[0]
    assert e.holds is None and e.zero_margin_rows == 1
    assert report.inconclusive == [e] and report.all_hold


def test_lemma_empty_support_is_inconclusive():
    p = np.eye(2)
    report = lemma1_check([p], ClusterAssignment.single(1), [0, 1], [np.zeros(2, bool)])
    assert report.entries[0].holds is None and report.entries[0].support == 0


def test_lemma_random_instances_hold():
    rng = np.random.default_rng(3)
    for _ in range(300):
        inst = random_lemma_instance(rng)
        entry = check_lemma_instance(inst)
        assert entry.holds is True, inst.to_json()


def test_violating_generator_is_inconclusive_not_failed():
    rng = np.random.default_rng(4)
    for _ in range(100):
        entry = check_lemma_instance(random_lemma_instance(rng, violate_margin=True))
        assert entry.holds is None


def test_generator_coverage():
    rng = np.random.default_rng(5)
    ms, gammas, sizes = set(), [], []
    for _ in range(400):
        inst = random_lemma_instance(rng)
        ms.add(inst.pseudolabels[0].shape[1])
        gammas.append(inst.gamma)
        sizes.append(int(inst.mask.sum()))
        assert min_margin(inst.pseudolabels[0][inst.mask])[0] >= inst.gamma
    assert ms == {2, 5, 10}
    assert 0.05 <= min(gammas) < 0.15 and 0.8 < max(gammas) <= 0.9
    assert 10 <= min(sizes) < 60 and 450 < max(sizes) <= 500


def _record(t, i, **kw):
    base = dict(round=t, client_id=i, cluster_id=0, acc_server_model=0.5, acc_client_model=0.25,
                err_on_ui=0.1, uplink_bytes=10, downlink_bytes=10)
    base.update(kw)
    return ClientRecord(**base)


def test_metrics_csv_schema_and_values():
    rounds = [
        RoundMetrics(1, [_record(1, 0, lemma_lhs=0.1, lemma_rhs=0.2, lemma_holds=True),
                         _record(1, 1, lemma_lhs=0.1, lemma_holds=None)]),
        RoundMetrics(2, [_record(2, 0, err_on_ui=math.nan), _record(2, 1)]),
    ]
    buf = io.StringIO()
    write_metrics_csv(rounds, buf)
    rows = list(csv.reader(io.StringIO(buf.getvalue())))
    assert rows[0] == CSV_COLUMNS
    assert len(rows) == 1 + 4
    assert rows[1][-3:] == ["0.1", "0.2", "true"]
    assert rows[2][-1] == "inconclusive"
    assert rows[3][5] == ""  # NaN written as empty
    assert float(rows[1][3]) == 0.5
