import itertools

import numpy as np
import pytest

from fedisa.metrics import MetricsReport, compute_metrics, per_group_metrics


def vectors(tp, fp, tn, fn):
    pred = [1] * tp + [1] * fp + [0] * tn + [0] * fn
    truth = [1] * tp + [0] * fp + [0] * tn + [1] * fn
    return np.array(pred), np.array(truth)


def test_examples():
    m = compute_metrics([1, 0, 1, 1], [1, 0, 1, 1])
    assert m.accuracy == 1.0 and m.f1 == 1.0
    m = compute_metrics(*vectors(1, 1, 1, 1))
    assert (m.accuracy, m.precision, m.recall, m.f1) == (0.5, 0.5, 0.5, 0.5)
    m = compute_metrics([0, 0, 0], [1, 0, 1])
    assert m.precision == 0.0 and m.recall == 0.0 and m.f1 == 0.0


def test_errors():
    with pytest.raises(ValueError):
        compute_metrics([1, 0], [1])
    with pytest.raises(ValueError):
        compute_metrics([2, 0], [1, 0])


def test_identities_on_grid():
    for tp, fp, tn, fn in itertools.product(range(6), repeat=4):
        if tp + fp + tn + fn == 0:
            continue
        m = compute_metrics(*vectors(tp, fp, tn, fn))
        assert (m.tp, m.fp, m.tn, m.fn) == (tp, fp, tn, fn)
        assert m.accuracy == (tp + tn) / (tp + fp + tn + fn)
        assert m.precision == (tp / (tp + fp) if tp + fp else 0.0)
        assert m.recall == (tp / (tp + fn) if tp + fn else 0.0)
        p, r = m.precision, m.recall
        assert m.f1 == pytest.approx(2 * p * r / (p + r) if p + r else 0.0, abs=1e-15)


def test_per_group():
    out = per_group_metrics([1, 0, 1, 1], [1, 0, 0, 1], [0, 0, 1, 1])
    assert out[0].accuracy == 1.0 and out[1].accuracy == 0.5


def test_from_counts_round_trip():
    m = MetricsReport.from_counts(3, 1, 4, 2)
    assert MetricsReport(**m.to_dict()) == m
