import math
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conceptcells import metrics


def replay_average_accuracy(rows):
    last = rows[-1]
    return math.fsum(last) / len(last)


def replay_forgetting(rows):
    S = len(rows)
    if S < 2:
        return math.nan
    total = 0.0
    for j in range(S - 1):
        best = max(rows[k][j] for k in range(j, S - 1))
        total += best - rows[S - 1][j]
    return total / (S - 1)


def test_hand_cases():
    assert metrics.average_accuracy(metrics.MetricsMatrix.from_rows([[1.0], [1.0, 1.0]])) == 1.0
    m = metrics.MetricsMatrix.from_rows([[0.9], [0.9, 0.8]])
    assert metrics.average_forgetting(m) == 0.0
    m = metrics.MetricsMatrix.from_rows([[0.9], [0.5, 0.8]])
    assert metrics.average_forgetting(m) == pytest.approx(0.4, abs=1e-15)
    m = metrics.MetricsMatrix.from_rows([[0.8], [0.5, 0.6], [0.8, 0.6, 0.7]])
    assert metrics.average_accuracy(m) == pytest.approx(0.7, abs=1e-15)


def test_double_record_is_usage_error():
    m = metrics.MetricsMatrix(2)
    m.record_row(0, [0.5])
    with pytest.raises(metrics.UsageError):
        m.record_row(0, [0.5])


def test_out_of_range_entries_rejected():
    with pytest.raises(metrics.UsageError):
        metrics.MetricsMatrix(1).record_row(0, [1.2])


def test_entries_match_recount():
    rng = np.random.default_rng(0)
    preds = [rng.integers(0, 3, 50) for _ in range(3)]
    labels = [rng.integers(0, 3, 50) for _ in range(3)]
    m = metrics.MetricsMatrix(3)
    for i in range(3):
        m.record_row(i, [np.mean(preds[j] == labels[j]) for j in range(i + 1)])
    for i in range(3):
        for j in range(i + 1):
            assert m.a[i, j] == sum(int(p == l) for p, l in zip(preds[j], labels[j])) / 50


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 7).flatmap(
    lambda S: st.tuples(*[st.lists(st.floats(0, 1), min_size=i + 1, max_size=i + 1) for i in range(S)])))
def test_metrics_agree_with_log_replay(rows):
    m = metrics.MetricsMatrix.from_rows(list(rows))
    assert abs(metrics.average_accuracy(m) - replay_average_accuracy(rows)) <= 1e-12
    f, g = metrics.average_forgetting(m), replay_forgetting(rows)
    assert (math.isnan(f) and math.isnan(g)) or abs(f - g) <= 1e-12


def test_curve():
    m = metrics.MetricsMatrix.from_rows([[1.0], [0.5, 1.0]])
    assert m.curve() == [1.0, 0.75]


def test_cell_history_forgetting_is_zero_for_unchanged_cells():
    h = metrics.CellHistory()
    h.observe(np.array([[0.9, 0.1], [0.2, 0.3]]), 1)
    h.observe(np.array([[0.9, 0.1], [0.5, 0.8]]), 2)
    assert h.forgetting(np.array([[0.9, 0.1], [0.5, 0.8]])) == 0.0
    assert h.forgetting(np.array([[0.7, 0.1], [0.5, 0.8]])) == pytest.approx(0.2)


def export(tmp_path, name):
    m = metrics.MetricsMatrix.from_rows([[0.9], [0.4, 0.95], [0.3, 0.5, 0.97]])
    summary = {"avg_accuracy": metrics.average_accuracy(m), "avg_forgetting": metrics.average_forgetting(m),
               "drift_batches": [10, 20], "seconds": None}
    trace = [(0, 1.2, 0.1, None, "continue", 1), (1, 0.9, 0.5, 0.1, "drift", 1)]
    return metrics.export_run(str(tmp_path / name), m, np.eye(3), summary, trace)


def test_export_layout_and_consistency(tmp_path):
    paths = export(tmp_path, "a")
    header, rows = metrics.read_csv(paths["matrix.csv"])
    assert len(header) - 1 == 3 and len(rows) == 3
    back = metrics.load_matrix(paths["matrix.csv"])
    import json
    s = json.load(open(paths["summary.json"]))
    assert abs(s["avg_accuracy"] - metrics.average_accuracy(back)) <= 1e-12
    raw = open(paths["trace.csv"], "rb").read()
    assert b"\r" not in raw and raw.startswith(b"batch_index,")


def test_reexport_is_byte_identical(tmp_path):
    a, b = export(tmp_path, "a"), export(tmp_path, "b")
    for name in a:
        assert open(a[name], "rb").read() == open(b[name], "rb").read()


def test_unwritable_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        metrics.export_run(os.path.join(str(blocker), "run"), metrics.MetricsMatrix.from_rows([[1.0]]),
                           np.ones((1, 1)), {}, [])
