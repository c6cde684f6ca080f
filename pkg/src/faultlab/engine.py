"""Injection engine daemon.

The engine listens for controller connections, executes task commands on
schedule and reports status events back. One controller (identified by
the session id in its greet) is the master; everyone else may watch but
commands from non-masters are rejected. A master that reconnects with
the same session id is re-accepted, which is what lets a controller ride
out an engine reboot.

Scheduling model: every accepted task gets an absolute start time of
session epoch + task timestamp, where the epoch is the engine-local
receipt time of the greet that opened the session. At the start time the
task needs a free worker slot or it is rejected with a pool_exhausted
error. Duration is enforced in one of two modes: max-duration (kill at
the deadline, natural exits stand) or exact-duration (natural exits are
restarted until the deadline, then killed).

Crash recovery: accepted commands and terminal statuses are appended to
``results_dir/journal.csv`` (fsynced on terminal statuses). On boot the
engine replays the journal and reschedules un-completed tasks whose
window has not yet closed, using the persisted epoch.
"""

from __future__ import annotations

import heapq
import logging
import os
import signal
import subprocess
import threading
import time
from dataclasses import dataclass, field
from queue import Empty, Queue

from faultlab.core import (
    ExecutionLogEntry,
    Task,
    ToolConfig,
    format_core_list,
    parse_core_list,
    parse_task_detail,
    task_detail,
)
from faultlab.protocol import Message, MessageServer, status

log = logging.getLogger(__name__)

__all__ = ["InjectionEngine", "TaskOutcome", "run_task", "task_detail", "parse_task_detail"]

TERMINATE_GRACE = 2.0
_EXACT_MODE_MARGIN = 0.05  # seconds left in the window worth a restart


@dataclass
class TaskOutcome:
    seq_num: int
    reason: str  # completed | killed_deadline
    returncode: int | None
    attempts: int
    started_at: float
    ended_at: float


def _kill_group(proc: subprocess.Popen, sig: int) -> None:
    try:
        os.killpg(proc.pid, sig)
    except (ProcessLookupError, PermissionError):
        pass


def _spawn(task: Task, out_dir: str) -> tuple[subprocess.Popen, object, object]:
    os.makedirs(out_dir, exist_ok=True)
    out = open(os.path.join(out_dir, "stdout.log"), "ab")
    err = open(os.path.join(out_dir, "stderr.log"), "ab")
    proc = subprocess.Popen(
        task.args,
        shell=True,
        stdout=out,
        stderr=err,
        start_new_session=True,  # its own process group, so kills reach children
    )
    return proc, out, err


def pin_cores(pid: int, cores: tuple[int, ...]) -> str | None:
    """Pin a process; returns an error string instead of raising so the
    task still runs unpinned when the mask is invalid for this host."""
    if not hasattr(os, "sched_setaffinity"):
        return "pinning unsupported on this platform"
    try:
        os.sched_setaffinity(pid, cores)
        return None
    except OSError as exc:
        return f"cannot pin to {format_core_list(cores)}: {exc}"


def run_task(
    task: Task,
    results_dir: str,
    exact_duration: bool,
    emit,
    deadline_mono: float | None = None,
    terminate_event: threading.Event | None = None,
    register=None,
) -> TaskOutcome:
    """Execute one task to its deadline. ``emit(event, seq, detail)``
    receives every status; ``register(proc)`` exposes the live process so
    a terminate command can reach it."""
    out_dir = os.path.join(results_dir, str(task.seq_num))
    started = time.monotonic()
    deadline = deadline_mono if deadline_mono is not None else started + task.duration
    attempt = 1
    reason = "completed"
    rc: int | None = None
    while True:
        try:
            proc, out, err = _spawn(task, out_dir)
        except OSError as exc:
            emit("error", task.seq_num, task_detail(task, attempt, f"spawn_failed={exc}"))
            break
        if register is not None:
            register(proc)
        if task.cores:
            pin_error = pin_cores(proc.pid, task.cores)
            if pin_error:
                emit("error", task.seq_num, task_detail(task, attempt, f"pin_failed={pin_error}"))
        event = "task_start" if attempt == 1 else "task_restart"
        emit(event, task.seq_num, task_detail(task, attempt))
        try:
            remaining = deadline - time.monotonic()
            rc = proc.wait(timeout=max(0.0, remaining))
        except subprocess.TimeoutExpired:
            _kill_group(proc, signal.SIGKILL)
            rc = proc.wait()
            reason = "killed_deadline"
        finally:
            out.close()
            err.close()
        if reason == "killed_deadline":
            break
        if terminate_event is not None and terminate_event.is_set():
            reason = "killed_deadline"
            break
        if exact_duration and time.monotonic() < deadline - _EXACT_MODE_MARGIN:
            attempt += 1
            continue  # task_restart is emitted by the next spawn
        break
    ended = time.monotonic()
    emit(
        "task_end",
        task.seq_num,
        task_detail(task, attempt, f"reason={reason} rc={rc}"),
    )
    return TaskOutcome(task.seq_num, reason, rc, attempt, started, ended)


# --- journal --------------------------------------------------------------


class Journal:
    """Append-only session journal under the engine results directory."""

    def __init__(self, path: str):
        self.path = path
        self._fh = None
        self._lock = threading.Lock()

    def _open(self):
        if self._fh is None:
            os.makedirs(os.path.dirname(self.path) or ".", exist_ok=True)
            self._fh = open(self.path, "a", encoding="utf-8")
        return self._fh

    def _write(self, line: str, sync: bool) -> None:
        with self._lock:
            fh = self._open()
            fh.write(line + "\n")
            fh.flush()
            if sync:
                os.fsync(fh.fileno())

    def session(self, session_id: str, epoch: int) -> None:
        self._write(f"session;{session_id};{epoch}", sync=True)

    def closed(self, session_id: str) -> None:
        self._write(f"closed;{session_id}", sync=True)

    def accepted(self, t: Task) -> None:
        self._write(
            f"accepted;{t.seq_num};{t.timestamp};{t.duration};{t.is_fault};"
            f"{format_core_list(t.cores)};{t.args}",
            sync=False,
        )

    def terminal(self, seq_num: int, event: str) -> None:
        self._write(f"terminal;{seq_num};{event}", sync=True)

    def close(self) -> None:
        with self._lock:
            if self._fh is not None:
                self._fh.close()
                self._fh = None

    def load(self) -> tuple[str, int, dict[int, Task]] | None:
        """Replay the journal: (session_id, epoch, pending tasks) of the
        last session, or None when there is nothing to recover.

        Raises ValueError on a corrupt journal.
        """
        if not os.path.exists(self.path):
            return None
        session_id: str | None = None
        epoch = 0
        pending: dict[int, Task] = {}
        closed = False
        with open(self.path, "r", encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.rstrip("\n")
                if not line:
                    continue
                kind, _, rest = line.partition(";")
                try:
                    if kind == "session":
                        sid, _, epoch_s = rest.partition(";")
                        session_id, epoch = sid, int(epoch_s)
                        pending.clear()
                        closed = False
                    elif kind == "closed":
                        closed = True
                        pending.clear()
                    elif kind == "accepted":
                        seq_s, ts_s, dur_s, fault_s, cores_s, args = rest.split(";", 5)
                        pending[int(seq_s)] = Task(
                            args=args,
                            timestamp=int(ts_s),
                            duration=int(dur_s),
                            is_fault=fault_s == "True",
                            seq_num=int(seq_s),
                            cores=parse_core_list(cores_s),
                        )
                    elif kind == "terminal":
                        seq_s, _, _event = rest.partition(";")
                        pending.pop(int(seq_s), None)
                    else:
                        raise ValueError(f"unknown record {kind!r}")
                except Exception as exc:
                    raise ValueError(f"journal line {lineno}: {exc}") from None
        if session_id is None or closed:
            return None
        return session_id, epoch, pending


# --- the daemon ------------------------------------------------------------


@dataclass
class _Scheduled:
    due_mono: float
    seq_num: int
    task: Task
    deadline_mono: float | None = None
    cancelled: bool = False

    def __lt__(self, other: "_Scheduled") -> bool:
        return (self.due_mono, self.seq_num) < (other.due_mono, other.seq_num)


class InjectionEngine:
    """One engine daemon instance. start() spins up the listener and
    worker machinery; stop() tears everything down."""

    def __init__(self, config: ToolConfig, host: str = "0.0.0.0"):
        self.config = config
        self._bind_host = host
        self.results_dir = config.results_dir
        self.journal = Journal(os.path.join(self.results_dir, "journal.csv"))
        self.server: MessageServer | None = None
        self.port: int | None = None

        self.master_session_id: str | None = None
        self.master_conn_id: int | None = None
        self.epoch: int | None = None  # wall clock, seconds
        self._recovered = False
        self._accepted_seqs: set[int] = set()
        self.active_tasks: dict[int, subprocess.Popen] = {}
        self._terminate_events: dict[int, threading.Event] = {}

        self._state_lock = threading.RLock()
        self._heap: list[_Scheduled] = []
        self._scheduled: dict[int, _Scheduled] = {}
        self._heap_cond = threading.Condition()
        self._ready: Queue[_Scheduled] = Queue()
        self._free_workers = threading.Semaphore(config.pool_size)
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self.emitted: list[ExecutionLogEntry] = []  # in-process observers/tests
        self._emit_q: Queue = Queue()

    # -- lifecycle ---------------------------------------------------

    def start(self) -> None:
        os.makedirs(self.results_dir, exist_ok=True)
        self._recover()
        self.server = MessageServer(
            self.config.listen_port,
            self._on_message,
            on_disconnect=self._on_disconnect,
            host=self._bind_host,
        )
        self.port = self.server.port
        for name, target in [("engine-emit", self._emit_loop), ("engine-sched", self._sched_loop)]:
            t = threading.Thread(target=target, daemon=True, name=name)
            t.start()
            self._threads.append(t)
        for i in range(self.config.pool_size):
            t = threading.Thread(target=self._worker_loop, daemon=True, name=f"engine-worker-{i}")
            t.start()
            self._threads.append(t)
        log.info("engine listening on port %d, pool size %d", self.port, self.config.pool_size)

    def stop(self) -> None:
        self._stop.set()
        with self._heap_cond:
            self._heap_cond.notify_all()
        with self._state_lock:
            procs = list(self.active_tasks.values())
        for proc in procs:
            _kill_group(proc, signal.SIGKILL)
        if self.server is not None:
            self.server.close()
        self._emit_q.put(None)
        for t in self._threads:
            t.join(timeout=5)
        self.journal.close()

    def _recover(self) -> None:
        try:
            state = self.journal.load()
        except ValueError as exc:
            log.warning("corrupt journal, starting fresh: %s", exc)
            self._emit("error", None, f"journal unreadable, starting fresh: {exc}")
            return
        if state is None:
            return
        session_id, epoch, pending = state
        self.master_session_id = session_id
        self.epoch = epoch
        self._recovered = True
        self._accepted_seqs.update(pending)
        now_wall = time.time()
        rescheduled = 0
        for task in pending.values():
            window_end = epoch + task.timestamp + task.duration
            if window_end <= now_wall:
                self.journal.terminal(task.seq_num, "error")
                self._emit("error", task.seq_num, task_detail(task, 1, "missed_window"))
                continue
            self._schedule(task, recovered=True)
            rescheduled += 1
        log.info(
            "recovered session %s (epoch %d): %d pending, %d rescheduled",
            session_id, epoch, len(pending), rescheduled,
        )

    # -- status emission ---------------------------------------------

    def _emit(self, event: str, seq_num: int | None, detail: str, journal_terminal: bool = False) -> None:
        msg = status(event, int(time.time()), seq_num=seq_num, detail=detail)
        self._emit_q.put((msg, journal_terminal))

    def _emit_loop(self) -> None:
        # single consumer: journal terminal records and broadcast order match
        while True:
            item = self._emit_q.get()
            if item is None:
                return
            msg, journal_terminal = item
            if journal_terminal:
                self.journal.terminal(msg.seq_num, msg.event)
            self.emitted.append(
                ExecutionLogEntry(msg.abs_timestamp, "engine", msg.seq_num, msg.event, msg.detail)
            )
            if self.server is not None:
                self.server.broadcast(msg)

    # -- command handling ----------------------------------------------

    def _on_message(self, conn_id: int, msg: Message) -> None:
        if msg.kind != "command":
            return
        if msg.action == "greet":
            self._handle_greet(conn_id, msg.session_id)
            return
        with self._state_lock:
            is_master = conn_id == self.master_conn_id and self.master_conn_id is not None
        if not is_master:
            if self.server is not None:
                self.server.send(
                    conn_id,
                    status("error", int(time.time()), detail="not master: command rejected"),
                )
            return
        if msg.action == "start_task":
            self._handle_start_task(msg.task)
        elif msg.action == "terminate_task":
            self._handle_terminate(msg.task.seq_num)
        elif msg.action == "end_session":
            self._handle_end_session()

    def _session_busy(self) -> bool:
        with self._heap_cond:
            pending = any(not s.cancelled for s in self._heap)
        return pending or bool(self.active_tasks)

    def _handle_greet(self, conn_id: int, session_id: str) -> None:
        with self._state_lock:
            if session_id == self.master_session_id:
                self.master_conn_id = conn_id
                self._emit(
                    "session_start",
                    None,
                    f"session={session_id} recovered={self._recovered}",
                )
                return
            if self.master_conn_id is not None or self._session_busy():
                # someone else owns a live session: observer only
                if self.server is not None:
                    self.server.send(
                        conn_id,
                        status(
                            "error",
                            int(time.time()),
                            detail=f"observer: session {self.master_session_id} active",
                        ),
                    )
                return
            # engine is idle: adopt the new session
            self.master_session_id = session_id
            self.master_conn_id = conn_id
            self.epoch = int(time.time())
            self._recovered = False
            self._accepted_seqs = set()
            self.journal.session(session_id, self.epoch)
            self._emit("session_start", None, f"session={session_id} recovered=False")

    def _handle_start_task(self, task: Task) -> None:
        with self._state_lock:
            if task.seq_num in self._accepted_seqs:
                self._emit("error", task.seq_num, "duplicate start_task ignored")
                return
            self._accepted_seqs.add(task.seq_num)
        self.journal.accepted(task)
        self._schedule(task, recovered=False)

    def _handle_terminate(self, seq_num: int) -> None:
        with self._state_lock:
            proc = self.active_tasks.get(seq_num)
            ev = self._terminate_events.get(seq_num)
            sched = self._scheduled.get(seq_num)
        if proc is not None:
            if ev is not None:
                ev.set()
            _kill_group(proc, signal.SIGTERM)
            timer = threading.Timer(TERMINATE_GRACE, _kill_group, args=(proc, signal.SIGKILL))
            timer.daemon = True
            timer.start()
        elif sched is not None and not sched.cancelled:
            sched.cancelled = True
            self.journal.terminal(seq_num, "error")
            self._emit("error", seq_num, "terminated before start", journal_terminal=False)

    def _handle_end_session(self) -> None:
        with self._heap_cond:
            for s in self._heap:
                s.cancelled = True
        with self._state_lock:
            procs = list(self.active_tasks.values())
            sid = self.master_session_id
            self.master_session_id = None
            self.master_conn_id = None
            self._recovered = False
        for proc in procs:
            _kill_group(proc, signal.SIGTERM)
        self.journal.closed(sid or "")
        self._emit("session_end", None, f"session={sid}")

    def _on_disconnect(self, conn_id: int) -> None:
        with self._state_lock:
            if conn_id == self.master_conn_id:
                self.master_conn_id = None  # session stays alive for a re-greet

    # -- scheduling ----------------------------------------------------

    def _schedule(self, task: Task, recovered: bool) -> None:
        now_wall = time.time()
        now_mono = time.monotonic()
        start_wall = (self.epoch or int(now_wall)) + task.timestamp
        due = now_mono + max(0.0, start_wall - now_wall)  # late commands start now
        deadline = None
        if recovered:
            # recovered tasks keep their original window so the schedule's
            # no-overlap guarantees still hold after a reboot
            deadline = now_mono + ((self.epoch or 0) + task.timestamp + task.duration - now_wall)
        entry = _Scheduled(due_mono=due, seq_num=task.seq_num, task=task, deadline_mono=deadline)
        with self._heap_cond:
            heapq.heappush(self._heap, entry)
            self._scheduled[task.seq_num] = entry
            self._heap_cond.notify()

    def _sched_loop(self) -> None:
        while not self._stop.is_set():
            with self._heap_cond:
                while not self._heap and not self._stop.is_set():
                    self._heap_cond.wait(timeout=0.5)
                if self._stop.is_set():
                    return
                entry = self._heap[0]
                delay = entry.due_mono - time.monotonic()
                if delay > 0:
                    self._heap_cond.wait(timeout=min(delay, 0.5))
                    continue
                heapq.heappop(self._heap)
                self._scheduled.pop(entry.seq_num, None)
            if entry.cancelled:
                continue
            # worker slot must be free at start time, not merely eventually
            if not self._free_workers.acquire(blocking=False):
                self.journal.terminal(entry.seq_num, "error")
                self._emit("error", entry.seq_num, f"pool_exhausted seq={entry.seq_num}")
                continue
            self._ready.put(entry)

    def _worker_loop(self) -> None:
        while not self._stop.is_set():
            try:
                entry = self._ready.get(timeout=0.5)
            except Empty:
                continue
            terminate_ev = threading.Event()

            def register(proc, seq=entry.seq_num, ev=terminate_ev):
                with self._state_lock:
                    self.active_tasks[seq] = proc
                    self._terminate_events[seq] = ev

            try:
                run_task(
                    entry.task,
                    self.results_dir,
                    self.config.exact_duration_mode,
                    self._emit_terminal_aware,
                    deadline_mono=entry.deadline_mono,
                    terminate_event=terminate_ev,
                    register=register,
                )
            finally:
                with self._state_lock:
                    self.active_tasks.pop(entry.seq_num, None)
                    self._terminate_events.pop(entry.seq_num, None)
                self._free_workers.release()

    def _emit_terminal_aware(self, event: str, seq_num: int | None, detail: str) -> None:
        self._emit(event, seq_num, detail, journal_terminal=event == "task_end")
