"""Controller: replays a workload against one or more engines.

The controller opens a channel per target host, greets each engine with a
shared random session id, then dispatches every task command to every
connected engine a little ahead of its scheduled start. Engines do their
own scheduling; the controller only has to get commands there early
enough. All statuses coming back are appended to one execution log per
host, named ``<host>_<session-start-unixtime>.log.csv``.

A session needs at least one reachable engine to start. Hosts that die
mid-session are dropped and the run continues on the rest.
"""

from __future__ import annotations

import logging
import os
import signal
import subprocess
import threading
import time
import uuid
from collections import Counter
from dataclasses import dataclass, field

from faultlab.core import (
    ExecutionLogEntry,
    ExecutionLogWriter,
    FaultlabError,
    Workload,
    log_file_name,
)
from faultlab.protocol import Channel, ChannelError, command, connect_with_retry

log = logging.getLogger(__name__)

__all__ = ["SessionSummary", "run_session", "parse_host_spec"]

DEFAULT_ENGINE_PORT = 30000
DISPATCH_LEAD = 2.0  # send commands this many seconds before their start
SESSION_START_TIMEOUT = 10.0
SESSION_END_GRACE = 10.0


def parse_host_spec(spec: str) -> tuple[str, tuple[str, int]]:
    """'host[:port]' -> (label, (host, port)). The label keeps the port so
    two engines on one machine stay distinguishable in the logs."""
    spec = spec.strip()
    if not spec:
        raise FaultlabError("empty host spec")
    host, sep, port_s = spec.rpartition(":")
    if not sep:
        host, port = spec, DEFAULT_ENGINE_PORT
    else:
        try:
            port = int(port_s)
        except ValueError:
            raise FaultlabError(f"bad port in host spec {spec!r}") from None
    return f"{host}:{port}", (host, port)


@dataclass
class _HostState:
    label: str
    address: tuple[str, int]
    channel: Channel | None = None
    writer: ExecutionLogWriter | None = None
    counts: Counter = field(default_factory=Counter)
    log_path: str | None = None
    failed: str | None = None
    session_started: threading.Event = field(default_factory=threading.Event)
    session_ended: threading.Event = field(default_factory=threading.Event)

    @property
    def ok(self) -> bool:
        return self.channel is not None and self.failed is None


@dataclass
class SessionSummary:
    session_id: str
    connected: list[str]
    failed: dict[str, str]  # label -> reason
    log_paths: dict[str, str]
    counts: dict[str, Counter]

    def total(self, event: str) -> int:
        return sum(c.get(event, 0) for c in self.counts.values())


def _receiver(host: _HostState, stop: threading.Event) -> None:
    while not stop.is_set():
        msg = host.channel.recv(timeout=0.2)
        if msg is None:
            if host.channel.dead:
                host.failed = host.failed or "connection lost"
                host.session_started.set()  # unblock waiters
                host.session_ended.set()
                return
            continue
        if msg.kind != "status":
            continue
        entry = ExecutionLogEntry(
            abs_timestamp=msg.abs_timestamp,
            host=host.label,
            seq_num=msg.seq_num,
            event=msg.event,
            detail=msg.detail,
        )
        host.writer.record(entry)
        host.counts[msg.event] += 1
        if msg.event == "session_start":
            host.session_started.set()
        elif msg.event == "session_end":
            host.session_ended.set()
        elif msg.event == "error" and not host.session_started.is_set():
            # rejected before the session opened (another master is active)
            if msg.detail.startswith(("observer", "not master")):
                host.failed = msg.detail
                host.session_started.set()


def _sleep_until(target_mono: float, abort) -> None:
    while True:
        remaining = target_mono - time.monotonic()
        if remaining <= 0 or abort():
            return
        time.sleep(min(0.2, remaining))


def _start_companions(commands) -> list[subprocess.Popen]:
    procs = []
    for cmd in commands:
        try:
            procs.append(
                subprocess.Popen(cmd, shell=True, start_new_session=True)
            )
            log.info("companion started: %s", cmd)
        except OSError as exc:
            log.warning("companion failed to start (%s): %s", cmd, exc)
    return procs


def _stop_companions(procs: list[subprocess.Popen]) -> None:
    for proc in procs:
        if proc.poll() is not None:
            continue
        try:
            os.killpg(proc.pid, signal.SIGTERM)
        except (ProcessLookupError, PermissionError):
            continue
    deadline = time.monotonic() + 2.0
    for proc in procs:
        timeout = max(0.0, deadline - time.monotonic())
        try:
            proc.wait(timeout=timeout)
        except subprocess.TimeoutExpired:
            try:
                os.killpg(proc.pid, signal.SIGKILL)
            except (ProcessLookupError, PermissionError):
                pass
            proc.wait()


def run_session(
    workload: Workload,
    hosts,
    log_dir: str = ".",
    session_id: str | None = None,
    lead_time: float = DISPATCH_LEAD,
    connect_timeout: float = 15.0,
    retry_interval: float = 1.0,
    companion_commands=(),
    end_grace: float = SESSION_END_GRACE,
) -> SessionSummary:
    """Run one injection session and return per-host event counts.

    ``hosts`` is an iterable of 'host[:port]' strings. Raises FaultlabError
    when no engine accepts the session.
    """
    sid = session_id or uuid.uuid4().hex[:12]
    session_wall = int(time.time())
    os.makedirs(log_dir, exist_ok=True)

    states = []
    for spec in hosts:
        label, address = parse_host_spec(spec)
        states.append(_HostState(label=label, address=address))
    if not states:
        raise FaultlabError("no target hosts given")

    greeting = command("greet", session_id=sid)
    for host in states:
        try:
            host.channel = connect_with_retry(
                host.address,
                retry_interval=retry_interval,
                give_up_after=connect_timeout,
                greeting=greeting,
            )
        except ChannelError as exc:
            host.failed = str(exc)
            log.warning("host %s unreachable: %s", host.label, exc)

    live = [h for h in states if h.ok]
    if not live:
        raise FaultlabError(f"no engine reachable for session {sid}")

    stop = threading.Event()
    receivers = []
    for host in live:
        host.log_path = os.path.join(log_dir, log_file_name(host.label, session_wall))
        host.writer = ExecutionLogWriter(host.log_path)
        t = threading.Thread(
            target=_receiver, args=(host, stop), daemon=True, name=f"recv-{host.label}"
        )
        t.start()
        receivers.append(t)

    companions: list[subprocess.Popen] = []
    try:
        start_deadline = time.monotonic() + SESSION_START_TIMEOUT
        for host in live:
            host.session_started.wait(timeout=max(0.0, start_deadline - time.monotonic()))
            if not host.session_started.is_set() and host.failed is None:
                host.failed = "no session_start from engine"
        if not any(h.ok for h in live):
            raise FaultlabError(f"no engine accepted session {sid}")

        companions = _start_companions(companion_commands)

        t0 = time.monotonic()
        tasks = sorted(workload.tasks, key=lambda t: (t.timestamp, t.seq_num))
        for task in tasks:
            _sleep_until(
                t0 + task.timestamp - lead_time, abort=lambda: not any(h.ok for h in live)
            )
            if not any(h.ok for h in live):
                log.error("all hosts lost, abandoning dispatch at seq %d", task.seq_num)
                break
            for host in live:
                if not host.ok:
                    continue
                try:
                    host.channel.send(command("start_task", task=task))
                except ChannelError as exc:
                    host.failed = str(exc)

        _sleep_until(t0 + workload.end_time + 0.5, abort=lambda: not any(h.ok for h in live))
        for host in live:
            if not host.ok:
                continue
            try:
                host.channel.send(command("end_session"))
            except ChannelError as exc:
                host.failed = str(exc)
        end_deadline = time.monotonic() + end_grace
        for host in live:
            if host.ok:
                host.session_ended.wait(timeout=max(0.0, end_deadline - time.monotonic()))
    finally:
        _stop_companions(companions)
        stop.set()
        for t in receivers:
            t.join(timeout=5)
        for host in live:
            if host.channel is not None:
                host.channel.close()
            if host.writer is not None:
                host.writer.close()

    summary = SessionSummary(
        session_id=sid,
        connected=[h.label for h in states if h.channel is not None and h.session_started.is_set() and h.failed is None],
        failed={h.label: h.failed for h in states if h.failed},
        log_paths={h.label: h.log_path for h in live if h.log_path},
        counts={h.label: h.counts for h in live},
    )
    for host in states:
        log.info(
            "host %s: %s",
            host.label,
            dict(host.counts) if host.counts else host.failed or "no events",
        )
    return summary
