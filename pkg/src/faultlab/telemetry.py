"""Synthetic telemetry for whole injection sessions.

Running a multi-hour session just to exercise the analysis side is slow
and needs a room full of hardware. This module fabricates the artifacts
such a session leaves behind: a telemetry directory (one CSV per
monitoring plugin) and the matching execution log, for any workload.

Each fault program gets a distinct additive signature over a small
metric basis (cpu shares, memory, page faults, instruction and
cache-miss rates), applied to its pinned cores for the duration of each
injected task. Non-fault tasks contribute a generic application load.
Baselines drift slowly across the session, moving later samples away
from earlier ones the way long-running nodes do, and everything gets
measurement noise on top. perfevent and procinterrupts series are
emitted as cumulative counters, the way the real collectors report
them.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from faultlab.core import (
    ExecutionLogEntry,
    ExecutionLogWriter,
    Task,
    Workload,
    log_file_name,
    program_from_args,
    task_detail,
)

__all__ = ["SimConfig", "SimSession", "FAULT_EFFECTS", "simulate_session", "write_simulated_session"]

# additive per-second effects while a fault is active. Units: cpu shares in
# percent (applied per pinned core), instr in 1e9/s, cmiss in 1e6/s, memory
# in MB, fault rates in events/s. free_rate accumulates over the interval
# and is released when the task ends.
FAULT_EFFECTS = {
    "leak": dict(pgfault=800, free_rate=15, usr=8, instr=0.15),
    "memeater": dict(free_step=1500, free_rate=18, pgmajfault=25, usr=6, cached=-300),
    "ddot": dict(cmiss=80, instr=1.2, usr=65, sys=3),
    "dial": dict(instr=3.0, usr=88, cmiss=5),
    "cpufreq": dict(usr=45, instr=-0.04, sys=4),  # busy but starved of cycles
    "pagefail": dict(pgfault=3000, pgmajfault=150, sys=18, iowait=6),
    "ioerr": dict(iowait=32, sys=14, dirty=25, pgmajfault=40),
    "copy": dict(iowait=42, dirty=350, cached=700, free_rate=4, usr=10),
}
APP_EFFECT = dict(usr=50, instr=1.0, cmiss=20, free_step=250)

_CORE_KEYS = ("usr", "sys", "iowait", "instr", "cmiss")
_NODE_KEYS = ("pgfault", "pgmajfault", "free_step", "free_rate", "cached", "dirty")


@dataclass
class SimConfig:
    cores: int = 4
    host: str = "simnode:30000"
    tail_seconds: int = 60  # telemetry keeps running past the last window
    noise: float = 1.0  # absolute sigma on cpu shares
    drift: float = 1.0  # scales the slow baseline wander


@dataclass
class SimSession:
    telemetry_dir: str
    log_path: str
    session_start: int
    entries: list


def _intervals(workload: Workload, cores: int):
    """(start, end, effects, core list, low) per task, session-relative."""
    out = []
    for t in workload.tasks:
        program = program_from_args(t.args)
        if t.is_fault:
            effects = FAULT_EFFECTS.get(program)
            if effects is None:
                raise ValueError(f"no signature for fault program {program!r}")
        else:
            effects = APP_EFFECT
        pinned = t.cores if t.cores is not None else tuple(range(cores))
        pinned = tuple(c for c in pinned if c < cores)
        low = "--low" in t.args.split()
        out.append((t.timestamp, t.end, effects, pinned, low))
    return out


def simulate_session(
    workload: Workload,
    seed: int = 0,
    session_start: int = 1_700_000_000,
    config: SimConfig | None = None,
):
    """Build the raw plugin tables and the execution log entries.

    Returns (times, tables, entries) where tables maps plugin name to
    (column names, 2d float array) and times are absolute seconds.
    """
    cfg = config or SimConfig()
    rng = np.random.default_rng(seed)
    n = int(workload.end_time) + cfg.tail_seconds + 1
    t_rel = np.arange(n, dtype=np.float64)
    times = session_start + t_rel.astype(np.int64)
    span = max(n - 1, 1)

    # slow baseline wander, shared by all cores
    drift_cpu = cfg.drift * (1.5 * t_rel / span + 1.0 * np.sin(2 * math.pi * t_rel / 5400.0))
    drift_mem = cfg.drift * (-800.0 * t_rel / span + 300.0 * np.sin(2 * math.pi * t_rel / 7000.0))

    usr = np.tile(3.0 + drift_cpu, (cfg.cores, 1))
    sys_ = np.full((cfg.cores, n), 1.5)
    iowait = np.full((cfg.cores, n), 0.5)
    instr = np.full((cfg.cores, n), 0.05)  # 1e9/s
    cmiss = np.full((cfg.cores, n), 1.0)  # 1e6/s
    free = 56000.0 + drift_mem
    cached = np.full(n, 9000.0)
    dirty = np.full(n, 40.0)
    pgfault = np.full(n, 120.0)
    pgmajfault = np.full(n, 2.0)

    core_planes = {"usr": usr, "sys": sys_, "iowait": iowait, "instr": instr, "cmiss": cmiss}
    for start, end, effects, pinned, low in _intervals(workload, cfg.cores):
        lo = max(0, int(start))
        hi = min(n, int(end))
        if hi <= lo:
            continue
        scale = 0.5 if low else 1.0
        for key, value in effects.items():
            v = value * scale
            if key in _CORE_KEYS:
                for c in pinned:
                    core_planes[key][c, lo:hi] += v
            elif key == "free_rate":
                free[lo:hi] -= v * (np.arange(hi - lo, dtype=np.float64) + 1.0)
            elif key == "free_step":
                free[lo:hi] -= v
            elif key == "cached":
                cached[lo:hi] += v
            elif key == "dirty":
                dirty[lo:hi] += v
            elif key == "pgfault":
                pgfault[lo:hi] += v
            elif key == "pgmajfault":
                pgmajfault[lo:hi] += v
            else:
                raise ValueError(f"unknown effect key {key!r}")

    # measurement noise
    usr = np.clip(usr + rng.normal(0, cfg.noise, usr.shape), 0.0, 98.0)
    sys_ = np.clip(sys_ + rng.normal(0, cfg.noise * 0.5, sys_.shape), 0.0, 90.0)
    iowait = np.clip(iowait + rng.normal(0, cfg.noise * 0.4, iowait.shape), 0.0, 90.0)
    idle = np.clip(100.0 - usr - sys_ - iowait, 0.0, 100.0)
    instr = np.clip(instr * rng.normal(1.0, 0.02, instr.shape), 0.002, None)
    cmiss = np.clip(cmiss * rng.normal(1.0, 0.03, cmiss.shape), 0.05, None)
    free = np.clip(free + rng.normal(0, 30.0, n), 500.0, None)
    cached = np.clip(cached + rng.normal(0, 25.0, n), 100.0, None)
    dirty = np.clip(dirty + rng.normal(0, 4.0, n), 0.0, None)
    pgfault = np.clip(pgfault * rng.normal(1.0, 0.05, n) + rng.normal(0, 5, n), 0.0, None)
    pgmajfault = np.clip(pgmajfault + rng.normal(0, 0.8, n), 0.0, None)

    def per_core_table(node_avg, planes):
        cols, data = [], []
        for name, plane in planes.items():
            cols.append(name)
            data.append(plane.mean(axis=0) if node_avg else plane.sum(axis=0))
        for name, plane in planes.items():
            for c in range(cfg.cores):
                cols.append(f"{name}.core{c}")
                data.append(plane[c])
        return cols, np.column_stack(data)

    cpu_cols, cpu_data = per_core_table(
        True, {"usr": usr, "sys": sys_, "iowait": iowait, "idle": idle}
    )
    # counters: integrate the rates, in raw event units
    instr_counts = np.cumsum(instr * 1e9, axis=1)
    cmiss_counts = np.cumsum(cmiss * 1e6, axis=1)
    perf_cols, perf_data = per_core_table(
        False, {"instructions": instr_counts, "cache_misses": cmiss_counts}
    )
    irq = np.cumsum(np.clip(100.0 + rng.normal(0, 8.0, n), 0.0, None))

    tables = {
        "procstat": (cpu_cols, cpu_data),
        "meminfo": (["free", "cached", "dirty"], np.column_stack([free, cached, dirty])),
        "vmstat": (["pgfault", "pgmajfault"], np.column_stack([pgfault, pgmajfault])),
        "perfevent": (perf_cols, perf_data),
        "procinterrupts": (["irq_total"], irq.reshape(-1, 1)),
    }
    entries = _execution_log_entries(workload, session_start, cfg.host)
    return times, tables, entries


def _execution_log_entries(workload: Workload, session_start: int, host: str):
    entries = [
        ExecutionLogEntry(session_start, host, None, "session_start", "session=sim recovered=False")
    ]
    events = []
    for t in workload.tasks:
        start = session_start + t.timestamp
        end = session_start + t.end
        # faults run to their window; applications finish on their own
        extra = "reason=killed_deadline rc=-9" if t.is_fault else "reason=completed rc=0"
        events.append((start, "task_start", t, task_detail(t, 1)))
        events.append((end, "task_end", t, task_detail(t, 1, extra)))
    events.sort(key=lambda e: e[0])
    for ts, event, task, detail in events:
        entries.append(ExecutionLogEntry(ts, host, task.seq_num, event, detail))
    entries.append(
        ExecutionLogEntry(
            session_start + workload.end_time + 1, host, None, "session_end", "session=sim"
        )
    )
    return entries


def write_simulated_session(
    out_dir,
    workload: Workload,
    seed: int = 0,
    session_start: int = 1_700_000_000,
    config: SimConfig | None = None,
) -> SimSession:
    """Write telemetry/<plugin>.csv files and the execution log."""
    cfg = config or SimConfig()
    out_dir = os.fspath(out_dir)
    telem_dir = os.path.join(out_dir, "telemetry")
    os.makedirs(telem_dir, exist_ok=True)
    times, tables, entries = simulate_session(workload, seed, session_start, cfg)
    for plugin, (cols, data) in tables.items():
        path = os.path.join(telem_dir, f"{plugin}.csv")
        counter = plugin in ("perfevent", "procinterrupts")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("#Time," + ",".join(cols) + "\n")
            for i, t in enumerate(times):
                row = data[i]
                if counter:
                    cells = [f"{v:.0f}" for v in row]
                else:
                    cells = [f"{v:.4f}" for v in row]
                fh.write(f"{t}," + ",".join(cells) + "\n")
    log_path = os.path.join(out_dir, log_file_name(cfg.host, session_start))
    with ExecutionLogWriter(log_path) as writer:
        for entry in entries:
            writer.record(entry)
    return SimSession(
        telemetry_dir=telem_dir,
        log_path=log_path,
        session_start=session_start,
        entries=entries,
    )
