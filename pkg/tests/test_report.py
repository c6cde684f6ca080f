import numpy as np
import pytest

from faultlab.ml import RandomForest, cross_validate
from faultlab.report import (
    pooled_confusion,
    scores_from_confusion,
    write_importance,
    write_report,
)


@pytest.fixture(scope="module")
def cv_results():
    rng = np.random.default_rng(7)
    centers = {"healthy": 0.0, "leak": 4.0, "ddot": -4.0}
    rows, labels = [], []
    for i in range(120):
        label = ("healthy", "leak", "ddot")[i % 3]
        rows.append(rng.normal(centers[label], 1.0, size=5))
        labels.append(label)
    X = np.array(rows)
    y = np.array(labels)
    ends = np.arange(120) * 10
    factory = lambda: RandomForest(n_trees=10, seed=0)
    return {
        order: cross_validate(X, y, window_ends=ends, n_folds=4, order=order,
                              seed=0, model_factory=factory)
        for order in ("time", "shuffled")
    }


def test_pooled_confusion_counts_match_folds(cv_results):
    res = cv_results["time"]
    classes, conf = pooled_confusion(res)
    assert set(classes) == {"healthy", "leak", "ddot"}
    total = sum(f.scores.confusion.sum() for f in res.folds)
    assert conf.sum() == total == 120


def test_scores_from_confusion_hand_case():
    classes = ("a", "b")
    conf = np.array([[8, 2], [1, 9]])
    per = scores_from_confusion(classes, conf)
    assert per["a"].recall == pytest.approx(0.8)
    assert per["a"].precision == pytest.approx(8 / 9)
    assert per["b"].support == 10
    f_a = 2 * (8 / 9) * 0.8 / ((8 / 9) + 0.8)
    assert per["a"].f1 == pytest.approx(f_a)


def test_scores_from_confusion_skips_absent_class():
    conf = np.array([[5, 0], [0, 0]])
    per = scores_from_confusion(("seen", "ghost"), conf)
    assert "ghost" not in per
    assert per["seen"].f1 == pytest.approx(1.0)


def test_write_report_files(tmp_path, cv_results):
    paths = write_report(tmp_path, cv_results)
    for p in paths.values():
        assert (tmp_path / p.split("/")[-1]).exists()
    classes_csv = (tmp_path / "report_classes.csv").read_text()
    header = classes_csv.splitlines()[0]
    assert header == "order,fold,class,precision,recall,f1,support"
    # pooled rows present for both orders and every class
    for order in ("time", "shuffled"):
        for cls in ("healthy", "leak", "ddot"):
            assert f"{order},all,{cls}," in classes_csv
    summary = (tmp_path / "report_summary.csv").read_text().splitlines()
    assert summary[0] == "order,fold,test_size,macro_f,weighted_f,accuracy"
    # 4 folds + one aggregate row per order
    assert len(summary) == 1 + 2 * 5
    # figures are real PNGs, not empty stubs
    for name in ("report_fscores.png", "report_confusion.png"):
        data = (tmp_path / name).read_bytes()
        assert data[:8] == b"\x89PNG\r\n\x1a\n"
        assert len(data) > 2000


def test_write_report_confusion_csv_totals(tmp_path, cv_results):
    write_report(tmp_path, cv_results)
    rows = (tmp_path / "report_confusion.csv").read_text().splitlines()[1:]
    totals = {}
    for row in rows:
        order, _, _, count = row.split(",")
        totals[order] = totals.get(order, 0) + int(count)
    assert totals == {"time": 120, "shuffled": 120}


def test_write_report_rejects_empty(tmp_path):
    with pytest.raises(ValueError):
        write_report(tmp_path, {})


def test_write_importance(tmp_path):
    names = [f"m{i}" for i in range(30)]
    imp = np.zeros(30)
    imp[17] = 0.6
    imp[3] = 0.4
    paths = write_importance(tmp_path, names, imp, top_k=5)
    lines = (tmp_path / "report_importance.csv").read_text().splitlines()
    assert lines[0] == "rank,feature,importance"
    assert lines[1].startswith("1,m17,0.6")
    assert lines[2].startswith("2,m3,0.4")
    assert len(lines) == 31
    data = (tmp_path / "report_importance.png").read_bytes()
    assert data[:8] == b"\x89PNG\r\n\x1a\n"
    with pytest.raises(ValueError):
        write_importance(tmp_path, names[:3], imp)
