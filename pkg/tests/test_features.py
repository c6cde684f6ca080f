"""Feature pipeline tests.

The window statistics are checked against a deliberately naive
pure-Python implementation and against scipy, so the vectorized numpy
path never gets to grade its own homework.
"""

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from faultlab.core import ExecutionLogEntry, Task, task_detail
from faultlab.features import (
    COUNTER_PREFIXES,
    HEALTHY,
    MIN_WINDOW_SAMPLES,
    STAT_NAMES,
    Interval,
    TelemetryFrame,
    build_feature_sets,
    fault_intervals,
    first_differences,
    is_counter,
    label_at,
    postprocess,
    read_feature_set,
    read_telemetry_dir,
    task_intervals,
    window_stats,
    write_feature_set,
)

# --- oracle: naive stats ----------------------------------------------------


def brute_stats(xs):
    """The 11 window statistics, computed the slow way."""
    n = len(xs)
    mean = sum(xs) / n
    m2 = sum((x - mean) ** 2 for x in xs) / n
    m3 = sum((x - mean) ** 3 for x in xs) / n
    m4 = sum((x - mean) ** 4 for x in xs) / n
    std = math.sqrt(m2)
    # constant windows and squared-variance underflow both count as degenerate
    spread = m2 * m2 > 0 and max(xs) > min(xs)
    skew = m3 / m2**1.5 if spread else 0.0
    kurt = m4 / m2**2 - 3.0 if spread else 0.0

    def perc(p):
        ys = sorted(xs)
        rank = (n - 1) * p / 100.0
        lo = math.floor(rank)
        hi = math.ceil(rank)
        frac = rank - lo
        return ys[lo] * (1 - frac) + ys[hi] * frac

    med = perc(50)
    return {
        "avg": mean,
        "std": std,
        "median": med,
        "min": min(xs),
        "max": max(xs),
        "skew": skew,
        "kurt": kurt,
        "perc5": perc(5),
        "perc25": perc(25),
        "perc75": perc(75),
        "perc95": perc(95),
    }


finite_floats = st.floats(min_value=-1e6, max_value=1e6, allow_nan=False, width=64)


@settings(max_examples=60, deadline=None)
@given(st.lists(finite_floats, min_size=1, max_size=120))
def test_window_stats_match_brute_force(xs):
    col = np.asarray(xs, dtype=np.float64).reshape(-1, 1)
    got = window_stats(col)[:, 0]
    want = brute_stats(xs)
    for i, stat in enumerate(STAT_NAMES):
        w = want[stat]
        assert got[i] == pytest.approx(w, rel=1e-9, abs=1e-7), stat


def test_window_stats_match_scipy():
    scipy_stats = pytest.importorskip("scipy.stats")
    rng = np.random.default_rng(7)
    data = rng.normal(5.0, 2.0, size=(200, 3)) ** 2
    got = window_stats(data)
    assert got[STAT_NAMES.index("avg")] == pytest.approx(data.mean(axis=0))
    assert got[STAT_NAMES.index("std")] == pytest.approx(data.std(axis=0))
    assert got[STAT_NAMES.index("skew")] == pytest.approx(
        scipy_stats.skew(data, axis=0, bias=True)
    )
    assert got[STAT_NAMES.index("kurt")] == pytest.approx(
        scipy_stats.kurtosis(data, axis=0, fisher=True, bias=True)
    )
    for p, name in [(5, "perc5"), (25, "perc25"), (75, "perc75"), (95, "perc95")]:
        assert got[STAT_NAMES.index(name)] == pytest.approx(
            np.percentile(data, p, axis=0)
        )


def test_window_stats_constant_series():
    col = np.full((50, 1), 3.25)
    got = window_stats(col)[:, 0]
    by_name = dict(zip(STAT_NAMES, got))
    assert by_name["std"] == 0.0
    assert by_name["skew"] == 0.0  # degenerate moments are defined as zero
    assert by_name["kurt"] == 0.0
    for stat in ("avg", "median", "min", "max", "perc5", "perc95"):
        assert by_name[stat] == 3.25


def test_window_stats_many_columns_consistent():
    rng = np.random.default_rng(3)
    data = rng.uniform(-10, 10, size=(64, 5))
    whole = window_stats(data)
    for j in range(5):
        single = window_stats(data[:, j : j + 1])[:, 0]
        assert whole[:, j] == pytest.approx(single, rel=1e-12)


# --- counters and postprocess ------------------------------------------------


def test_first_differences():
    arr = np.array([100.0, 105.0, 109.0])
    assert first_differences(arr).tolist() == [0.0, 5.0, 4.0]


def test_is_counter_requires_prefix_and_monotonicity():
    inc = np.array([1.0, 2.0, 2.0, 5.0])
    bouncy = np.array([1.0, 5.0, 2.0])
    assert is_counter("perfevent.instructions", inc, COUNTER_PREFIXES)
    assert is_counter("procinterrupts.irq42", inc, COUNTER_PREFIXES)
    assert not is_counter("perfevent.instructions", bouncy, COUNTER_PREFIXES)
    assert not is_counter("procstat.usr", inc, COUNTER_PREFIXES)


def frame_of(times, **metrics):
    return TelemetryFrame(
        times=np.asarray(times, dtype=np.int64),
        metrics={k: np.asarray(v, dtype=np.float64) for k, v in metrics.items()},
    )


def test_postprocess_counters_constants_and_derivatives():
    fr = frame_of(
        [10, 11, 12, 13],
        **{
            "perfevent.instructions": [100.0, 105.0, 109.0, 120.0],
            "procstat.usr": [5.0, 7.0, 6.0, 5.0],
            "procstat.flat": [2.0, 2.0, 2.0, 2.0],  # constant: dropped
        },
    )
    out = postprocess(fr)
    assert "procstat.flat" not in out.metrics
    assert "procstat.flat_der" not in out.metrics
    assert out.metrics["perfevent.instructions"].tolist() == [0.0, 5.0, 4.0, 11.0]
    assert out.metrics["procstat.usr"].tolist() == [5.0, 7.0, 6.0, 5.0]
    # derivative channel of the post-transform series
    assert out.metrics["perfevent.instructions_der"].tolist() == [0.0, 5.0, -1.0, 7.0]
    assert out.metrics["procstat.usr_der"].tolist() == [0.0, 2.0, -1.0, -1.0]
    assert set(out.metrics) == {
        "perfevent.instructions",
        "perfevent.instructions_der",
        "procstat.usr",
        "procstat.usr_der",
    }


def test_postprocess_allocated_channels():
    times = list(range(100, 110))
    fr = frame_of(
        times,
        **{"procstat.usr": list(range(10)), "procstat.usr.core0": list(range(10))},
    )
    alloc = [Interval(start=103, end=107, label="bench", cores=(0,), fault=False)]
    out = postprocess(fr, allocation=alloc)
    assert out.metrics["allocated"].tolist() == [0, 0, 0, 1, 1, 1, 1, 0, 0, 0]
    assert out.metrics["allocated.core0"].tolist() == [0, 0, 0, 1, 1, 1, 1, 0, 0, 0]
    assert "allocated_der" in out.metrics
    # allocated channels survive even when constant
    quiet = postprocess(fr, allocation=[])
    assert quiet.metrics["allocated"].tolist() == [0.0] * 10


# --- telemetry directory reading ---------------------------------------------


def write_csv(path, header, rows):
    lines = [header] + [",".join(str(v) for v in r) for r in rows]
    path.write_text("\n".join(lines) + "\n")


def test_read_telemetry_dir(tmp_path):
    write_csv(
        tmp_path / "procstat.csv",
        "#Time,usr,usr.core0,usr.core1",
        [[100, 5.0, 2.0, 3.0], [101, 6.0, 2.5, 3.5], [102, 7.0, 3.0, 4.0]],
    )
    write_csv(
        tmp_path / "meminfo.csv",
        "#Time,free",
        [[100, 900.0], [101, 890.0], [102, 880.0], [103, 870.0]],
    )
    write_csv(tmp_path / "procinterrupts.csv", "#Time,irq0", [[100, 1], [101, 2]])
    fr = read_telemetry_dir(tmp_path)
    # times: intersection of the retained plugins
    assert fr.times.tolist() == [100, 101, 102]
    assert set(fr.metrics) == {
        "procstat.usr",
        "procstat.usr.core0",
        "procstat.usr.core1",
        "meminfo.free",
    }
    assert fr.metrics["meminfo.free"].tolist() == [900.0, 890.0, 880.0]
    # excluded by default, available on request
    fr2 = read_telemetry_dir(tmp_path, exclude_plugins=())
    assert "procinterrupts.irq0" in fr2.metrics
    assert fr2.times.tolist() == [100, 101]


def test_read_telemetry_dir_unsorted_and_bad_value(tmp_path):
    write_csv(tmp_path / "a.csv", "#Time,x", [[102, 3.0], [100, 1.0], [101, 2.0]])
    fr = read_telemetry_dir(tmp_path)
    assert fr.times.tolist() == [100, 101, 102]
    assert fr.metrics["a.x"].tolist() == [1.0, 2.0, 3.0]
    write_csv(tmp_path / "b.csv", "#Time,y", [[100, "oops"]])
    from faultlab.core import ParseError

    with pytest.raises(ParseError, match="b.csv"):
        read_telemetry_dir(tmp_path)


# --- timelines from the execution log ----------------------------------------


def log_entry(ts, event, seq, task=None, attempt=1, extra=""):
    detail = task_detail(task, attempt, extra) if task is not None else ""
    return ExecutionLogEntry(
        abs_timestamp=ts, host="n1:30000", seq_num=seq, event=event, detail=detail
    )


def test_task_intervals_from_log():
    fault = Task(args="./leak 30", timestamp=0, duration=30, is_fault=True, seq_num=2, cores=(1,))
    app = Task(args="./bench cpu", timestamp=0, duration=50, is_fault=False, seq_num=1)
    entries = [
        ExecutionLogEntry(99, "n1", None, "session_start", "session=s recovered=False"),
        log_entry(100, "task_start", 1, app),
        log_entry(110, "task_start", 2, fault),
        log_entry(125, "task_restart", 2, fault, attempt=2),
        log_entry(140, "task_end", 2, fault, attempt=2, extra="reason=killed_deadline rc=-9"),
        log_entry(150, "task_end", 1, app, extra="reason=completed rc=0"),
    ]
    ivs = task_intervals(entries)
    assert len(ivs) == 2
    by_label = {iv.label: iv for iv in ivs}
    assert by_label["leak"] == Interval(110, 140, "leak", (1,), True)
    assert by_label["bench"].start == 100 and by_label["bench"].end == 150
    assert by_label["bench"].fault is False
    faults = fault_intervals(entries)
    assert [iv.label for iv in faults] == ["leak"]


def test_task_interval_without_end_is_clamped():
    t = Task(args="./dial 99", timestamp=0, duration=99, is_fault=True, seq_num=1)
    entries = [
        log_entry(100, "task_start", 1, t),
        ExecutionLogEntry(130, "n1", None, "connection_lost", "gone"),
    ]
    ivs = task_intervals(entries)
    assert ivs[0].start == 100
    assert ivs[0].end == 131  # last log timestamp + 1


def test_label_at_core_filtering_and_latest_wins():
    ivs = [
        Interval(100, 200, "leak", (1,), True),
        Interval(150, 260, "dial", None, True),
    ]
    assert label_at(99, ivs) == HEALTHY
    assert label_at(100, ivs) == "leak"
    assert label_at(150, ivs) == "dial"  # started later, wins
    assert label_at(210, ivs) == "dial"
    assert label_at(120, ivs, core=0) == HEALTHY  # leak is pinned to core 1
    assert label_at(120, ivs, core=1) == "leak"
    assert label_at(160, ivs, core=0) == "dial"  # unpinned fault hits all cores


# --- windowing ---------------------------------------------------------------


def two_core_frame(n_seconds, t0=1000):
    times = np.arange(t0, t0 + n_seconds, dtype=np.int64)
    rng = np.random.default_rng(42)
    return TelemetryFrame(
        times=times,
        metrics={
            "procstat.usr": rng.uniform(0, 100, n_seconds),
            "procstat.usr.core0": rng.uniform(0, 100, n_seconds),
            "procstat.usr.core1": rng.uniform(0, 100, n_seconds),
        },
    )


def test_window_count_and_first_end():
    fr = two_core_frame(121)  # seconds 1000..1120
    sets = build_feature_sets(fr, faults=(), window=60, step=10)
    node = sets["node"]
    assert node.window_ends.tolist() == [1060, 1070, 1080, 1090, 1100, 1110, 1120]
    assert node.X.shape == (7, 11)  # one node metric x 11 stats
    assert set(sets) == {"node", "core0", "core1"}


def test_feature_names_and_core_rename():
    fr = two_core_frame(80)
    sets = build_feature_sets(fr, faults=(), window=60, step=10)
    node = sets["node"]
    assert node.feature_names == [f"procstat.usr_{s}" for s in STAT_NAMES]
    core1 = sets["core1"]
    assert core1.feature_names[:11] == [f"procstat.usr_{s}" for s in STAT_NAMES]
    assert core1.feature_names[11:] == [f"procstat.usr.core_{s}" for s in STAT_NAMES]
    # the renamed column carries core1 data, not core0 data
    fr_idx = np.where((fr.times >= 1000) & (fr.times < 1060))[0]
    want_avg = fr.metrics["procstat.usr.core1"][fr_idx].mean()
    got = core1.X[0, core1.feature_names.index("procstat.usr.core_avg")]
    assert got == pytest.approx(want_avg)


def test_sparse_window_skipped():
    times = np.concatenate(
        [np.arange(1000, 1029, dtype=np.int64), np.arange(1090, 1161, dtype=np.int64)]
    )
    fr = TelemetryFrame(
        times=times, metrics={"m.x": np.arange(len(times), dtype=np.float64)}
    )
    sets = build_feature_sets(fr, faults=(), window=60, step=10)
    node = sets["node"]
    # ends whose window holds fewer than MIN_WINDOW_SAMPLES samples are skipped
    assert MIN_WINDOW_SAMPLES == 30
    assert 1060 in node.skipped_ends  # only 29 samples in [1000, 1060)
    assert 1150 in node.window_ends.tolist()  # [1090, 1150) has 60
    assert all(e not in node.window_ends for e in node.skipped_ends)


def test_window_labels_mode_recent_ambiguous():
    fr = two_core_frame(60)  # seconds 1000..1059, single window end 1060
    # healthy for 1000..1029, then a leak covering 1030..1059: 30/30 tie
    faults = [Interval(1030, 1060, "leak", None, True)]
    sets = build_feature_sets(fr, faults=faults, window=60, step=10)
    node = sets["node"]
    assert node.window_ends.tolist() == [1060]
    assert node.labels_mode == ["leak"]  # tie broken toward the later label
    assert node.labels_recent == ["leak"]
    assert node.ambiguous.tolist() == [True]

    all_healthy = build_feature_sets(fr, faults=(), window=60, step=10)["node"]
    assert all_healthy.labels_mode == [HEALTHY]
    assert all_healthy.ambiguous.tolist() == [False]


def test_window_labels_majority():
    fr = two_core_frame(60)
    faults = [Interval(1029, 1060, "dial", None, True)]  # 31 seconds of dial
    node = build_feature_sets(fr, faults=faults, window=60, step=10)["node"]
    assert node.labels_mode == ["dial"]
    faults = [Interval(1031, 1060, "dial", None, True)]  # 29 seconds: healthy wins
    node = build_feature_sets(fr, faults=faults, window=60, step=10)["node"]
    assert node.labels_mode == [HEALTHY]
    assert node.labels_recent == ["dial"]


def test_core_views_label_only_pinned_core():
    fr = two_core_frame(60)
    faults = [Interval(1000, 1060, "leak", (1,), True)]
    sets = build_feature_sets(fr, faults=faults, window=60, step=10)
    assert sets["core1"].labels_mode == ["leak"]
    assert sets["core0"].labels_mode == [HEALTHY]
    assert sets["node"].labels_mode == ["leak"]


def test_vector_length_is_22_per_base_metric():
    times = np.arange(2000, 2090, dtype=np.int64)
    rng = np.random.default_rng(1)
    fr = TelemetryFrame(
        times=times,
        metrics={
            "a.one": rng.uniform(size=90),
            "b.two": np.cumsum(rng.uniform(size=90)),
            "c.three": rng.normal(size=90),
        },
    )
    out = postprocess(fr)
    assert len(out.metrics) == 6  # three metrics + three derivative channels
    node = build_feature_sets(out, faults=(), window=60, step=10)["node"]
    assert node.X.shape[1] == 3 * 22


# --- persistence ---------------------------------------------------------------


def test_feature_set_round_trip(tmp_path):
    fr = two_core_frame(100)
    faults = [Interval(1010, 1050, "memeater", (0,), True)]
    sets = build_feature_sets(fr, faults=faults, window=60, step=10)
    path = tmp_path / "core0.csv"
    write_feature_set(sets["core0"], path)
    schema = json.loads((tmp_path / "core0.schema.json").read_text())
    assert schema["view"] == "core0"
    assert schema["window"] == 60 and schema["step"] == 10
    assert schema["features"] == sets["core0"].feature_names

    back = read_feature_set(path)
    assert back.view == "core0"
    assert back.feature_names == sets["core0"].feature_names
    assert back.window_ends.tolist() == sets["core0"].window_ends.tolist()
    assert back.labels_mode == sets["core0"].labels_mode
    assert back.labels_recent == sets["core0"].labels_recent
    assert back.ambiguous.tolist() == sets["core0"].ambiguous.tolist()
    np.testing.assert_allclose(back.X, sets["core0"].X, rtol=1e-12)
