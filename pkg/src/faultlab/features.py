"""Telemetry feature pipeline.

Turns raw monitoring CSVs plus an execution log into labeled,
fixed-length feature vectors suitable for the classifiers:

1. read a telemetry directory (one CSV per monitoring plugin, first
   column ``#Time``, per-core columns suffixed ``.coreN``),
2. postprocess: drop constant metrics, turn cumulative counters into
   per-interval increments, add an ``allocated`` channel from the
   execution log, and add a ``_der`` first-difference channel for every
   metric,
3. slide a window over the aligned series and compute 11 descriptive
   statistics per metric per window,
4. label each window from the fault timeline reconstructed out of the
   execution log.

Windows are [T - window, T): a window is identified by its end time and
never sees samples from T itself. Windows with too few samples (after
telemetry dropouts) are skipped rather than padded.
"""

from __future__ import annotations

import json
import logging
import os
import re
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from faultlab.core import (
    ExecutionLogEntry,
    ParseError,
    parse_task_detail,
    program_from_args,
)

log = logging.getLogger(__name__)

__all__ = [
    "COUNTER_PREFIXES",
    "EXCLUDED_PLUGINS",
    "HEALTHY",
    "MIN_WINDOW_SAMPLES",
    "STAT_NAMES",
    "Interval",
    "TelemetryFrame",
    "FeatureSet",
    "read_telemetry_dir",
    "is_counter",
    "first_differences",
    "postprocess",
    "window_stats",
    "task_intervals",
    "fault_intervals",
    "allocation_intervals",
    "label_at",
    "build_feature_sets",
    "write_feature_set",
    "read_feature_set",
]

# cumulative-counter metrics live under these plugins; everything else is
# treated as a gauge
COUNTER_PREFIXES = ("perfevent.", "procinterrupts.")
# interrupt counts are dominated by the node's own housekeeping and mostly
# add noise, so the plugin is dropped unless explicitly requested
EXCLUDED_PLUGINS = ("procinterrupts",)
HEALTHY = "healthy"
MIN_WINDOW_SAMPLES = 30

STAT_NAMES = (
    "avg",
    "std",
    "median",
    "min",
    "max",
    "skew",
    "kurt",
    "perc5",
    "perc25",
    "perc75",
    "perc95",
)

_CORE_SUFFIX_RE = re.compile(r"\.core(\d+)(_der)?$")


@dataclass
class TelemetryFrame:
    """Aligned telemetry: one shared time axis, one array per metric."""

    times: np.ndarray  # int64 seconds, ascending
    metrics: dict[str, np.ndarray]  # full name -> float64, aligned to times

    @property
    def n(self) -> int:
        return len(self.times)

    def core_ids(self) -> list[int]:
        ids = {
            int(m.group(1))
            for name in self.metrics
            if (m := _CORE_SUFFIX_RE.search(name))
        }
        return sorted(ids)


def read_telemetry_dir(path, exclude_plugins=EXCLUDED_PLUGINS) -> TelemetryFrame:
    """Read every ``<plugin>.csv`` under ``path`` into one aligned frame.

    Metrics are named ``<plugin>.<column>``. Plugins are aligned on the
    intersection of their timestamps; plugins with no data rows are
    skipped with a warning.
    """
    path = os.fspath(path)
    plugins: dict[str, dict[int, list[float]]] = {}
    columns: dict[str, list[str]] = {}
    for fname in sorted(os.listdir(path)):
        if not fname.endswith(".csv"):
            continue
        plugin = fname[: -len(".csv")]
        if plugin in exclude_plugins:
            continue
        fpath = os.path.join(path, fname)
        with open(fpath, "r", encoding="utf-8") as fh:
            header = fh.readline().strip()
            cells = header.split(",")
            if not cells or cells[0] != "#Time":
                raise ParseError(f"{fname}: first column must be #Time, got {header!r}")
            cols = cells[1:]
            rows: dict[int, list[float]] = {}
            for lineno, line in enumerate(fh, start=2):
                line = line.strip()
                if not line:
                    continue
                parts = line.split(",")
                if len(parts) != len(cells):
                    raise ParseError(
                        f"{fname}: line {lineno}: expected {len(cells)} cells, got {len(parts)}"
                    )
                try:
                    t = int(float(parts[0]))
                    rows[t] = [float(v) for v in parts[1:]]
                except ValueError:
                    raise ParseError(f"{fname}: line {lineno}: non-numeric value") from None
        if not rows:
            log.warning("telemetry plugin %s has no samples, skipping", plugin)
            continue
        plugins[plugin] = rows
        columns[plugin] = cols

    if not plugins:
        return TelemetryFrame(times=np.empty(0, dtype=np.int64), metrics={})

    shared = None
    for rows in plugins.values():
        shared = set(rows) if shared is None else shared & set(rows)
    times = np.array(sorted(shared), dtype=np.int64)
    metrics: dict[str, np.ndarray] = {}
    for plugin, rows in plugins.items():
        data = np.array([rows[t] for t in times], dtype=np.float64)
        if data.size == 0:
            data = data.reshape(len(times), len(columns[plugin]))
        for j, col in enumerate(columns[plugin]):
            metrics[f"{plugin}.{col}"] = data[:, j]
    return TelemetryFrame(times=times, metrics=metrics)


def first_differences(arr: np.ndarray) -> np.ndarray:
    """Per-sample increments; the first element has no past, so 0."""
    if len(arr) == 0:
        return arr.astype(np.float64)
    return np.diff(arr, prepend=arr[0]).astype(np.float64)


def is_counter(name: str, series: np.ndarray, prefixes=COUNTER_PREFIXES) -> bool:
    """A metric is a cumulative counter when it lives under a counter
    plugin and never decreases (resets disqualify the series)."""
    if not name.startswith(tuple(prefixes)):
        return False
    return bool(np.all(np.diff(series) >= 0))


# --- execution-log timelines -------------------------------------------------


@dataclass(frozen=True)
class Interval:
    """Half-open [start, end) during which one task was running."""

    start: int
    end: int
    label: str
    cores: tuple[int, ...] | None
    fault: bool


def task_intervals(entries: list[ExecutionLogEntry]) -> list[Interval]:
    """Rebuild the per-task run intervals out of an execution log.

    A task needs a task_start to count; a missing task_end (log cut off
    mid-run) clamps the interval to just past the last log timestamp.
    """
    entries = sorted(entries, key=lambda e: e.abs_timestamp)
    last_ts = max((e.abs_timestamp for e in entries), default=0)
    starts: dict[int, tuple[int, dict]] = {}
    ends: dict[int, int] = {}
    for e in entries:
        if e.seq_num is None:
            continue
        if e.event == "task_start" and e.seq_num not in starts:
            parsed = parse_task_detail(e.detail)
            if parsed is None:
                log.warning("task_start for seq %d has odd detail %r", e.seq_num, e.detail)
                continue
            starts[e.seq_num] = (e.abs_timestamp, parsed)
        elif e.event == "task_end":
            ends[e.seq_num] = e.abs_timestamp
    out = []
    for seq, (start, parsed) in starts.items():
        end = ends.get(seq, last_ts + 1)
        out.append(
            Interval(
                start=start,
                end=max(end, start + 1),
                label=program_from_args(parsed["args"]),
                cores=parsed["cores"],
                fault=parsed["fault"],
            )
        )
    out.sort(key=lambda iv: (iv.start, iv.end))
    return out


def fault_intervals(entries: list[ExecutionLogEntry]) -> list[Interval]:
    return [iv for iv in task_intervals(entries) if iv.fault]


def allocation_intervals(entries: list[ExecutionLogEntry]) -> list[Interval]:
    return [iv for iv in task_intervals(entries) if not iv.fault]


def _applies(iv: Interval, core: int | None) -> bool:
    # node view (core None) counts every interval; a core view only counts
    # intervals pinned to that core or not pinned at all
    return core is None or iv.cores is None or core in iv.cores


def label_at(t: int, intervals, core: int | None = None) -> str:
    """Ground-truth state of one second: the latest-starting fault
    covering it, or healthy."""
    best = None
    for idx, iv in enumerate(intervals):
        if iv.start <= t < iv.end and _applies(iv, core):
            if best is None or (iv.start, idx) > (best[1].start, best[0]):
                best = (idx, iv)
    return best[1].label if best else HEALTHY


def _paint_labels(times: np.ndarray, intervals, core: int | None) -> np.ndarray:
    """Vectorized label_at over a whole time axis."""
    labels = np.full(len(times), HEALTHY, dtype=object)
    order = sorted(range(len(intervals)), key=lambda i: (intervals[i].start, i))
    for i in order:
        iv = intervals[i]
        if not _applies(iv, core):
            continue
        mask = (times >= iv.start) & (times < iv.end)
        labels[mask] = iv.label
    return labels


def _paint_active(times: np.ndarray, intervals, core: int | None) -> np.ndarray:
    active = np.zeros(len(times), dtype=np.float64)
    for iv in intervals:
        if not _applies(iv, core):
            continue
        active[(times >= iv.start) & (times < iv.end)] = 1.0
    return active


# --- postprocessing ----------------------------------------------------------


def postprocess(
    frame: TelemetryFrame,
    allocation=None,
    counter_prefixes=COUNTER_PREFIXES,
) -> TelemetryFrame:
    """Constant-drop, counter-diff, allocation channels, derivatives.

    Constancy is judged on the raw series, so a steadily increasing
    counter survives even if its increments happen to be constant.
    ``allocation`` is the non-fault interval list; None leaves the
    allocated channels out entirely.
    """
    out: dict[str, np.ndarray] = {}
    dropped = 0
    for name in sorted(frame.metrics):
        arr = np.asarray(frame.metrics[name], dtype=np.float64)
        if arr.size == 0 or np.all(arr == arr[0]):
            dropped += 1
            continue
        out[name] = first_differences(arr) if is_counter(name, arr, counter_prefixes) else arr
    if dropped:
        log.info("postprocess: dropped %d constant metrics", dropped)

    if allocation is not None:
        out["allocated"] = _paint_active(frame.times, allocation, core=None)
        for core in frame.core_ids():
            out[f"allocated.core{core}"] = _paint_active(frame.times, allocation, core)

    for name in list(out):
        out[f"{name}_der"] = first_differences(out[name])
    return TelemetryFrame(times=frame.times.copy(), metrics=out)


# --- window statistics ---------------------------------------------------------


def window_stats(values: np.ndarray) -> np.ndarray:
    """The 11 summary statistics per column; shape (11, n_cols).

    Population moments throughout. Degenerate windows define skewness and
    kurtosis as 0 rather than nan. Degenerate means constant values (the
    min == max test, since a constant column's computed variance can be
    rounding noise that turns the moment ratios into garbage like +-1) or
    a variance so small that its square underflows to zero.
    """
    values = np.asarray(values, dtype=np.float64)
    mean = values.mean(axis=0)
    col_min = values.min(axis=0)
    col_max = values.max(axis=0)
    centered = values - mean
    m2 = (centered**2).mean(axis=0)
    m3 = (centered**3).mean(axis=0)
    m4 = (centered**4).mean(axis=0)
    nondeg = (m2 * m2 > 0) & (col_max > col_min)
    skew = np.zeros_like(m2)
    kurt = np.zeros_like(m2)
    np.divide(m3, m2**1.5, out=skew, where=nondeg)
    np.divide(m4, m2**2, out=kurt, where=nondeg)
    kurt[nondeg] -= 3.0
    percs = np.percentile(values, [5, 25, 50, 75, 95], axis=0)
    return np.vstack(
        [
            mean,
            np.sqrt(m2),
            percs[2],
            col_min,
            col_max,
            skew,
            kurt,
            percs[0],
            percs[1],
            percs[3],
            percs[4],
        ]
    )


# --- feature sets ----------------------------------------------------------------


@dataclass
class FeatureSet:
    """Labeled window features for one view (the node or one core)."""

    view: str
    feature_names: list[str]
    X: np.ndarray  # (n_windows, n_features)
    window_ends: np.ndarray  # int64
    labels_mode: list[str]
    labels_recent: list[str]
    ambiguous: np.ndarray  # bool
    window: int
    step: int
    skipped_ends: list[int] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.window_ends)


def _mode_latest(seq) -> str:
    counts = Counter(seq)
    best = max(counts.values())
    tied = {lbl for lbl, c in counts.items() if c == best}
    if len(tied) == 1:
        return next(iter(tied))
    # tie: prefer whichever state is in force latest in the window
    for lbl in reversed(seq):
        if lbl in tied:
            return lbl
    return seq[-1]


def build_feature_sets(
    frame: TelemetryFrame,
    faults=(),
    window: int = 60,
    step: int = 10,
    min_samples: int = MIN_WINDOW_SAMPLES,
) -> dict[str, FeatureSet]:
    """Windowed features for the node view and one view per core.

    A core view carries the node-level metrics plus that core's own
    metrics renamed to a core-neutral ``<name>.core`` so feature vectors
    line up across cores.
    """
    if frame.n == 0:
        raise ParseError("telemetry frame is empty")
    names = sorted(frame.metrics)
    matrix = np.column_stack([frame.metrics[n] for n in names])
    col = {n: i for i, n in enumerate(names)}

    node_names = [n for n in names if not _CORE_SUFFIX_RE.search(n)]
    views: dict[str, tuple[list[str], list[int], int | None]] = {
        "node": ([f"{n}_{s}" for n in node_names for s in STAT_NAMES],
                 [col[n] for n in node_names], None)
    }
    for core in frame.core_ids():
        suffix = re.compile(rf"\.core{core}(_der)?$")
        core_names = [n for n in names if suffix.search(n)]
        ordered = node_names + core_names
        renamed = node_names + [suffix.sub(r".core\1", n) for n in core_names]
        views[f"core{core}"] = (
            [f"{n}_{s}" for n in renamed for s in STAT_NAMES],
            [col[n] for n in ordered],
            core,
        )

    times = frame.times
    fault_list = list(faults)
    labels_per_view = {
        view: _paint_labels(times, fault_list, core) for view, (_, _, core) in views.items()
    }

    t0, t_last = int(times[0]), int(times[-1])
    ends = list(range(t0 + window, t_last + 2, step))
    rows = {view: [] for view in views}
    meta = {view: {"ends": [], "mode": [], "recent": [], "amb": []} for view in views}
    skipped: list[int] = []
    for end in ends:
        lo = np.searchsorted(times, end - window, side="left")
        hi = np.searchsorted(times, end, side="left")
        if hi - lo < min_samples:
            skipped.append(end)
            continue
        stats = window_stats(matrix[lo:hi])
        for view, (_, cols, _core) in views.items():
            rows[view].append(stats[:, cols].T.ravel())
            seq = list(labels_per_view[view][lo:hi])
            m = meta[view]
            m["ends"].append(end)
            m["mode"].append(_mode_latest(seq))
            m["recent"].append(seq[-1])
            m["amb"].append(len(set(seq)) > 1)

    out = {}
    for view, (feature_names, cols, _core) in views.items():
        m = meta[view]
        X = (
            np.vstack(rows[view])
            if rows[view]
            else np.empty((0, len(feature_names)))
        )
        out[view] = FeatureSet(
            view=view,
            feature_names=feature_names,
            X=X,
            window_ends=np.array(m["ends"], dtype=np.int64),
            labels_mode=m["mode"],
            labels_recent=m["recent"],
            ambiguous=np.array(m["amb"], dtype=bool),
            window=window,
            step=step,
            skipped_ends=list(skipped),
        )
    return out


# --- persistence -----------------------------------------------------------------


def write_feature_set(fs: FeatureSet, path) -> None:
    """One CSV per view plus a .schema.json sidecar describing it."""
    path = os.fspath(path)
    header = ["window_end", "ambiguous", "label_mode", "label_recent"] + fs.feature_names
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for i in range(fs.n):
            cells = [
                str(int(fs.window_ends[i])),
                str(int(fs.ambiguous[i])),
                fs.labels_mode[i],
                fs.labels_recent[i],
            ] + [repr(float(v)) for v in fs.X[i]]
            fh.write(",".join(cells) + "\n")
    schema = {
        "view": fs.view,
        "window": fs.window,
        "step": fs.step,
        "stats": list(STAT_NAMES),
        "features": fs.feature_names,
        "windows": fs.n,
        "skipped_ends": fs.skipped_ends,
    }
    with open(_schema_path(path), "w", encoding="utf-8") as fh:
        json.dump(schema, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _schema_path(csv_path: str) -> str:
    base = csv_path[: -len(".csv")] if csv_path.endswith(".csv") else csv_path
    return base + ".schema.json"


def read_feature_set(path) -> FeatureSet:
    path = os.fspath(path)
    schema = {}
    if os.path.exists(_schema_path(path)):
        with open(_schema_path(path), "r", encoding="utf-8") as fh:
            schema = json.load(fh)
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        if header[:4] != ["window_end", "ambiguous", "label_mode", "label_recent"]:
            raise ParseError(f"{path}: not a feature CSV")
        feature_names = header[4:]
        ends, amb, mode, recent, rows = [], [], [], [], []
        for line in fh:
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            ends.append(int(cells[0]))
            amb.append(bool(int(cells[1])))
            mode.append(cells[2])
            recent.append(cells[3])
            rows.append([float(v) for v in cells[4:]])
    view = schema.get("view") or os.path.basename(path).rsplit(".", 2)[0]
    return FeatureSet(
        view=view,
        feature_names=feature_names,
        X=np.array(rows, dtype=np.float64) if rows else np.empty((0, len(feature_names))),
        window_ends=np.array(ends, dtype=np.int64),
        labels_mode=mode,
        labels_recent=recent,
        ambiguous=np.array(amb, dtype=bool),
        window=int(schema.get("window", 0)),
        step=int(schema.get("step", 0)),
        skipped_ends=list(schema.get("skipped_ends", [])),
    )
