"""Core domain types and file formats.

Three text formats live here, all semicolon separated so that shell
command strings can be carried verbatim in the final column:

* workload CSV: one injection task per row, header
  ``timestamp;duration;seqNum;isFault;cores;args``
* execution log CSV: one status event per row, header
  ``abs_timestamp;host;seqNum;event;detail``
* tool config: ``key = value`` lines shared by engine and controller.

Workload timestamps are seconds relative to the session start; execution
log timestamps are absolute UNIX seconds.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass

__all__ = [
    "FaultlabError",
    "ParseError",
    "ValidationError",
    "Task",
    "Workload",
    "ExecutionLogEntry",
    "ExecutionLogWriter",
    "ToolConfig",
    "EVENTS",
    "WORKLOAD_HEADER",
    "LOG_HEADER",
    "parse_core_list",
    "format_core_list",
    "parse_workload",
    "parse_workload_text",
    "write_workload",
    "workload_to_text",
    "read_execution_log",
    "parse_log_text",
    "log_file_name",
    "parse_tool_config",
    "parse_tool_config_text",
    "parse_hosts_file",
    "program_from_args",
]


class FaultlabError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(FaultlabError):
    """A file or message could not be parsed."""


class ValidationError(FaultlabError):
    """Parsed data violates a structural constraint."""


WORKLOAD_HEADER = "timestamp;duration;seqNum;isFault;cores;args"
LOG_HEADER = "abs_timestamp;host;seqNum;event;detail"

# Every status event an engine or controller may record.
EVENTS = frozenset(
    {
        "task_start",
        "task_end",
        "task_restart",
        "error",
        "connection_lost",
        "connection_restored",
        "session_start",
        "session_end",
    }
)


def parse_core_list(text: str) -> tuple[int, ...] | None:
    """Parse a core pinning spec such as ``"0-7"`` or ``"4,6"``.

    Returns an ascending, de-duplicated tuple of core ids, or None for an
    empty spec (no pinning).
    """
    text = text.strip()
    if not text:
        return None
    cores: set[int] = set()
    for part in text.split(","):
        part = part.strip()
        m = re.fullmatch(r"(\d+)-(\d+)", part)
        if m:
            lo, hi = int(m.group(1)), int(m.group(2))
            if hi < lo:
                raise ParseError(f"bad core range {part!r}")
            cores.update(range(lo, hi + 1))
        elif re.fullmatch(r"\d+", part):
            cores.add(int(part))
        else:
            raise ParseError(f"bad core spec {part!r}")
    return tuple(sorted(cores))


def format_core_list(cores: tuple[int, ...] | None) -> str:
    """Inverse of parse_core_list; consecutive runs collapse to ``lo-hi``."""
    if not cores:
        return ""
    out: list[str] = []
    run_start = prev = cores[0]
    for c in list(cores[1:]) + [None]:  # type: ignore[list-item]
        if c is not None and c == prev + 1:
            prev = c
            continue
        out.append(str(run_start) if run_start == prev else f"{run_start}-{prev}")
        if c is not None:
            run_start = prev = c
    return ",".join(out)


def _parse_bool(text: str, where: str) -> bool:
    if text in ("True", "true"):
        return True
    if text in ("False", "false"):
        return False
    raise ParseError(f"{where}: bad boolean {text!r}")


@dataclass(frozen=True)
class Task:
    """One scheduled command, either an application run or a fault."""

    args: str
    timestamp: int
    duration: int
    is_fault: bool
    seq_num: int
    cores: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        if self.timestamp < 0:
            raise ValidationError(f"task {self.seq_num}: negative timestamp")
        if self.duration <= 0:
            # zero-duration tasks are rejected outright: they could never
            # produce a task_start/task_end pair
            raise ValidationError(f"task {self.seq_num}: duration must be > 0")
        if self.seq_num < 1:
            raise ValidationError("seq_num must be >= 1")
        if not self.args.strip():
            raise ValidationError(f"task {self.seq_num}: empty args")
        if "\n" in self.args or "\r" in self.args:
            raise ValidationError(f"task {self.seq_num}: args must be single-line")
        if self.cores is not None:
            if len(self.cores) == 0:
                object.__setattr__(self, "cores", None)
            else:
                ordered = tuple(sorted(set(self.cores)))
                if ordered[0] < 0:
                    raise ValidationError(f"task {self.seq_num}: negative core id")
                object.__setattr__(self, "cores", ordered)

    @property
    def end(self) -> int:
        return self.timestamp + self.duration


@dataclass(frozen=True)
class Workload:
    """An ordered set of tasks making up one injection session."""

    tasks: tuple[Task, ...]

    def __post_init__(self) -> None:
        ordered = tuple(sorted(self.tasks, key=lambda t: (t.timestamp, t.seq_num)))
        object.__setattr__(self, "tasks", ordered)
        seen: set[int] = set()
        for t in ordered:
            if t.seq_num in seen:
                raise ValidationError(f"duplicate seq_num {t.seq_num}")
            seen.add(t.seq_num)
        # fault tasks must never overlap each other; application tasks may
        prev: Task | None = None
        for t in ordered:
            if not t.is_fault:
                continue
            if prev is not None and prev.end > t.timestamp:
                raise ValidationError(
                    f"fault tasks {prev.seq_num} and {t.seq_num} overlap"
                )
            prev = t

    def __iter__(self):
        return iter(self.tasks)

    def __len__(self) -> int:
        return len(self.tasks)

    @property
    def end_time(self) -> int:
        """End of the last task window, 0 for an empty workload."""
        return max((t.end for t in self.tasks), default=0)

    def faults(self) -> tuple[Task, ...]:
        return tuple(t for t in self.tasks if t.is_fault)


def _parse_workload_row(line: str, lineno: int) -> Task:
    parts = line.split(";", 5)
    if len(parts) != 6:
        raise ParseError(f"line {lineno}: expected 6 fields, got {len(parts)}")
    ts_s, dur_s, seq_s, fault_s, cores_s, args = parts
    try:
        ts, dur, seq = int(ts_s), int(dur_s), int(seq_s)
    except ValueError as exc:
        raise ParseError(f"line {lineno}: {exc}") from None
    try:
        return Task(
            args=args,
            timestamp=ts,
            duration=dur,
            is_fault=_parse_bool(fault_s, f"line {lineno}"),
            seq_num=seq,
            cores=parse_core_list(cores_s),
        )
    except FaultlabError as exc:
        raise type(exc)(f"line {lineno}: {exc}") from None


def parse_workload_text(text: str) -> Workload:
    lines = text.splitlines()
    if not lines or lines[0].strip() != WORKLOAD_HEADER:
        raise ParseError(f"line 1: expected header {WORKLOAD_HEADER!r}")
    tasks = [
        _parse_workload_row(line, i)
        for i, line in enumerate(lines[1:], start=2)
        if line.strip()
    ]
    return Workload(tuple(tasks))


def parse_workload(path: str | os.PathLike) -> Workload:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_workload_text(fh.read())


def _workload_row(t: Task) -> str:
    fault = "True" if t.is_fault else "False"
    return f"{t.timestamp};{t.duration};{t.seq_num};{fault};{format_core_list(t.cores)};{t.args}"


def workload_to_text(w: Workload) -> str:
    return "\n".join([WORKLOAD_HEADER] + [_workload_row(t) for t in w.tasks]) + "\n"


def write_workload(w: Workload, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(workload_to_text(w))


@dataclass(frozen=True)
class ExecutionLogEntry:
    """One status event, as recorded by the controller or engine."""

    abs_timestamp: int
    host: str
    seq_num: int | None
    event: str
    detail: str = ""

    def __post_init__(self) -> None:
        if self.event not in EVENTS:
            raise ValidationError(f"unknown event {self.event!r}")

    def to_row(self) -> str:
        seq = "" if self.seq_num is None else str(self.seq_num)
        detail = self.detail.replace("\n", " ").replace("\r", " ")
        host = self.host.replace(";", ",")
        return f"{self.abs_timestamp};{host};{seq};{self.event};{detail}"


def _parse_log_row(line: str, lineno: int) -> ExecutionLogEntry:
    parts = line.split(";", 4)
    if len(parts) != 5:
        raise ParseError(f"line {lineno}: expected 5 fields, got {len(parts)}")
    ts_s, host, seq_s, event, detail = parts
    try:
        ts = int(ts_s)
        seq = int(seq_s) if seq_s.strip() else None
    except ValueError as exc:
        raise ParseError(f"line {lineno}: {exc}") from None
    try:
        return ExecutionLogEntry(ts, host, seq, event, detail)
    except FaultlabError as exc:
        raise ParseError(f"line {lineno}: {exc}") from None


def parse_log_text(text: str) -> list[ExecutionLogEntry]:
    lines = text.splitlines()
    if not lines or lines[0].strip() != LOG_HEADER:
        raise ParseError(f"line 1: expected header {LOG_HEADER!r}")
    return [
        _parse_log_row(line, i)
        for i, line in enumerate(lines[1:], start=2)
        if line.strip()
    ]


def read_execution_log(path: str | os.PathLike) -> list[ExecutionLogEntry]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_log_text(fh.read())


def log_file_name(host: str, session_start: int) -> str:
    """Log file name for one host: ``<host>_<session-start-unixtime>.log.csv``.

    Characters that are unsafe in file names (the port colon, slashes) are
    replaced with '-'.
    """
    safe = re.sub(r"[:/\\\s]", "-", host)
    return f"{safe}_{session_start}.log.csv"


# --- task status details ----------------------------------------------------
#
# Task-scoped statuses carry a detail string that is rich enough to rebuild
# the task offline from the execution log alone. The args go last because
# they may contain anything.

_DETAIL_RE = re.compile(
    r"^attempt=(\d+) fault=(True|False) cores=([0-9,\-]*)\s?(.*?)\s?args=(.*)$"
)


def task_detail(task: Task, attempt: int, extra: str = "") -> str:
    head = f"attempt={attempt} fault={task.is_fault} cores={format_core_list(task.cores)}"
    if extra:
        head += f" {extra}"
    return f"{head} args={task.args}"


def parse_task_detail(detail: str) -> dict | None:
    """Inverse of task_detail; returns None for non-task details."""
    m = _DETAIL_RE.match(detail)
    if not m:
        return None
    return {
        "attempt": int(m.group(1)),
        "fault": m.group(2) == "True",
        "cores": parse_core_list(m.group(3)),
        "extra": m.group(4),
        "args": m.group(5),
    }


class ExecutionLogWriter:
    """Append-only log writer; every entry is flushed within 1 s of the call.

    Entries are flushed immediately, which comfortably meets that bound and
    keeps logs usable while a session is still running.
    """

    def __init__(self, path: str | os.PathLike):
        self.path = str(path)
        exists = os.path.exists(self.path) and os.path.getsize(self.path) > 0
        self._fh = open(self.path, "a", encoding="utf-8")
        if not exists:
            self._fh.write(LOG_HEADER + "\n")
            self._fh.flush()

    def record(self, entry: ExecutionLogEntry) -> None:
        self._fh.write(entry.to_row() + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "ExecutionLogWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


# --- tool configuration -------------------------------------------------

_CONFIG_DEFAULTS = {
    "listen_port": 30000,
    "target_hosts": (),
    "pool_size": 4,
    "exact_duration_mode": False,
    "companion_commands": (),
    "results_dir": "faultlab-results",
}


@dataclass(frozen=True)
class ToolConfig:
    """Shared engine/controller configuration, read from key = value text."""

    listen_port: int = 30000
    target_hosts: tuple[str, ...] = ()
    pool_size: int = 4
    exact_duration_mode: bool = False
    companion_commands: tuple[str, ...] = ()
    results_dir: str = "faultlab-results"

    def __post_init__(self) -> None:
        if not (0 <= self.listen_port <= 65535):
            raise ValidationError(f"listen_port {self.listen_port} out of range")
        if self.pool_size < 1:
            raise ValidationError("pool_size must be >= 1")


def parse_tool_config_text(text: str) -> ToolConfig:
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError(f"line {lineno}: expected key = value")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in _CONFIG_DEFAULTS:
            raise ParseError(f"line {lineno}: unknown config key {key!r}")
        if key in ("listen_port", "pool_size"):
            try:
                values[key] = int(val)
            except ValueError:
                raise ParseError(f"line {lineno}: {key} must be an integer") from None
        elif key == "exact_duration_mode":
            values[key] = _parse_bool(val, f"line {lineno}")
        elif key in ("target_hosts", "companion_commands"):
            values[key] = tuple(p.strip() for p in val.split(",") if p.strip())
        else:
            values[key] = val
    return ToolConfig(**values)


def parse_tool_config(path: str | os.PathLike) -> ToolConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_tool_config_text(fh.read())


def parse_hosts_file(path: str | os.PathLike) -> tuple[str, ...]:
    """One ``host:port`` per line; blank lines and # comments are skipped."""
    hosts: list[str] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                hosts.append(line)
    return tuple(hosts)


_MODULE_RUN = re.compile(r"-m\s+faultlab\s+(fault|bench)\s+([a-z]+)")


def program_from_args(args: str) -> str:
    """Best-effort program name for a task command line.

    ``... -m faultlab fault leak --duration 60`` maps to ``leak``; for
    anything else the basename of the first token is used, so legacy-style
    commands like ``./leak 316`` label correctly too.
    """
    m = _MODULE_RUN.search(args)
    if m:
        return m.group(2)
    parts = args.split()
    head = 0
    if parts and parts[0] == "sudo" and len(parts) > 1:
        head = 1
    return os.path.basename(parts[head]) if parts else ""
