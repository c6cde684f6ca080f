"""Wire protocol between controllers and engines.

Every message is one frame: a 4-byte big-endian payload length followed by
a UTF-8 JSON object. Frames above 16 MiB are rejected on both ends. Two
message kinds exist:

* command (controller to engine): ``start_task``, ``terminate_task``,
  ``end_session`` or ``greet``. ``greet`` opens or resumes a session and
  carries the controller's session id; the task commands carry a task.
* status (engine to controller): a status event plus timestamp and detail.

The client side is :class:`Channel`, which owns a background thread that
transparently reconnects after connection loss, queues outbound messages
while disconnected (bounded, oldest dropped first) and surfaces
``connection_lost`` / ``connection_restored`` as locally generated status
messages in its receive queue.
"""

from __future__ import annotations

import json
import logging
import socket
import struct
import threading
import time
from collections import deque
from dataclasses import dataclass
from queue import Empty, Queue

from faultlab.core import FaultlabError, Task

log = logging.getLogger(__name__)

__all__ = [
    "FRAME_LIMIT",
    "ACTIONS",
    "ProtocolError",
    "ChannelError",
    "Message",
    "command",
    "status",
    "encode_message",
    "decode_message",
    "Channel",
    "connect_with_retry",
    "MessageServer",
]

FRAME_LIMIT = 16 * 1024 * 1024
_HEADER = struct.Struct(">I")

ACTIONS = frozenset({"start_task", "terminate_task", "end_session", "greet"})
_TASK_ACTIONS = frozenset({"start_task", "terminate_task"})


class ProtocolError(FaultlabError):
    """Malformed frame or message; the connection must be dropped."""


class ChannelError(FaultlabError):
    """The channel is closed or gave up reconnecting."""


@dataclass(frozen=True)
class Message:
    kind: str
    # command fields
    action: str | None = None
    task: Task | None = None
    session_id: str | None = None
    # status fields
    event: str | None = None
    seq_num: int | None = None
    abs_timestamp: int | None = None
    detail: str = ""

    def __post_init__(self) -> None:
        if self.kind == "command":
            if self.action not in ACTIONS:
                raise ProtocolError(f"unknown action {self.action!r}")
            if (self.task is not None) != (self.action in _TASK_ACTIONS):
                raise ProtocolError(f"action {self.action} task mismatch")
            if self.action == "greet" and not self.session_id:
                raise ProtocolError("greet requires a session_id")
        elif self.kind == "status":
            if not self.event:
                raise ProtocolError("status requires an event")
            if self.abs_timestamp is None:
                raise ProtocolError("status requires abs_timestamp")
        else:
            raise ProtocolError(f"unknown message kind {self.kind!r}")


def command(action: str, task: Task | None = None, session_id: str | None = None) -> Message:
    return Message(kind="command", action=action, task=task, session_id=session_id)


def status(event: str, abs_timestamp: int, seq_num: int | None = None, detail: str = "") -> Message:
    return Message(
        kind="status",
        event=event,
        seq_num=seq_num,
        abs_timestamp=abs_timestamp,
        detail=detail,
    )


def _task_to_obj(t: Task) -> dict:
    return {
        "args": t.args,
        "timestamp": t.timestamp,
        "duration": t.duration,
        "is_fault": t.is_fault,
        "seq_num": t.seq_num,
        "cores": list(t.cores) if t.cores else None,
    }


def _task_from_obj(obj: dict) -> Task:
    try:
        cores = obj["cores"]
        return Task(
            args=obj["args"],
            timestamp=obj["timestamp"],
            duration=obj["duration"],
            is_fault=obj["is_fault"],
            seq_num=obj["seq_num"],
            cores=tuple(cores) if cores else None,
        )
    except (KeyError, TypeError, FaultlabError) as exc:
        raise ProtocolError(f"bad task object: {exc}") from None


def encode_message(msg: Message) -> bytes:
    if msg.kind == "command":
        obj = {
            "kind": "command",
            "action": msg.action,
            "task": _task_to_obj(msg.task) if msg.task else None,
            "session_id": msg.session_id,
        }
    else:
        obj = {
            "kind": "status",
            "event": msg.event,
            "seq_num": msg.seq_num,
            "abs_timestamp": msg.abs_timestamp,
            "detail": msg.detail,
        }
    payload = json.dumps(obj, separators=(",", ":"), sort_keys=True).encode("utf-8")
    if len(payload) > FRAME_LIMIT:
        raise ProtocolError(f"frame of {len(payload)} bytes exceeds limit")
    return _HEADER.pack(len(payload)) + payload


def decode_message(buf: bytes) -> tuple[Message, bytes] | None:
    """Decode one frame from the front of ``buf``.

    Returns (message, remaining bytes), or None when the buffer does not
    yet hold a complete frame. Partial input is never consumed.
    """
    if len(buf) < _HEADER.size:
        return None
    (length,) = _HEADER.unpack_from(buf)
    if length > FRAME_LIMIT:
        raise ProtocolError(f"frame of {length} bytes exceeds limit")
    end = _HEADER.size + length
    if len(buf) < end:
        return None
    try:
        obj = json.loads(buf[_HEADER.size : end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"malformed payload: {exc}") from None
    if not isinstance(obj, dict):
        raise ProtocolError("payload must be a JSON object")
    kind = obj.get("kind")
    try:
        if kind == "command":
            task_obj = obj.get("task")
            msg = Message(
                kind="command",
                action=obj.get("action"),
                task=_task_from_obj(task_obj) if task_obj else None,
                session_id=obj.get("session_id"),
            )
        elif kind == "status":
            msg = Message(
                kind="status",
                event=obj.get("event"),
                seq_num=obj.get("seq_num"),
                abs_timestamp=obj.get("abs_timestamp"),
                detail=obj.get("detail") or "",
            )
        else:
            raise ProtocolError(f"unknown message kind {kind!r}")
    except TypeError as exc:
        raise ProtocolError(f"bad message fields: {exc}") from None
    return msg, buf[end:]


OUTBOUND_BOUND = 1024


class Channel:
    """Reconnecting client connection to one engine.

    Use :func:`connect_with_retry` to obtain a connected channel. All
    socket work happens on one background thread; ``send`` only enqueues
    and ``recv`` only reads the inbound queue, so callers never block on
    the network.
    """

    def __init__(
        self,
        address: tuple[str, int],
        retry_interval: float = 1.0,
        give_up_after: float | None = None,
        greeting: Message | None = None,
    ):
        self.address = address
        self.retry_interval = retry_interval
        self.give_up_after = give_up_after
        self.greeting = greeting
        self._outbound: deque[Message] = deque(maxlen=OUTBOUND_BOUND)
        self._outbound_lock = threading.Lock()
        self._inbound: Queue[Message] = Queue()
        self._sock: socket.socket | None = None
        self._closed = threading.Event()
        self._connected_once = threading.Event()
        self._dead = threading.Event()
        self._thread = threading.Thread(target=self._run, daemon=True, name=f"channel-{address}")

    # -- public surface ----------------------------------------------

    @property
    def connected(self) -> bool:
        return self._sock is not None

    @property
    def dead(self) -> bool:
        return self._dead.is_set()

    def send(self, msg: Message) -> None:
        """Queue a message; while disconnected the queue is bounded to
        1024 entries and the oldest entries are dropped first."""
        if self._closed.is_set() or self._dead.is_set():
            raise ChannelError(f"channel to {self.address} is closed")
        with self._outbound_lock:
            if len(self._outbound) == self._outbound.maxlen:
                log.warning("outbound queue full for %s, dropping oldest", self.address)
            self._outbound.append(msg)

    def recv(self, timeout: float | None = None) -> Message | None:
        try:
            return self._inbound.get(timeout=timeout)
        except Empty:
            return None

    def close(self) -> None:
        self._closed.set()
        sock = self._sock
        if sock is not None:
            try:
                sock.close()
            except OSError:
                pass
        if self._thread.is_alive():
            self._thread.join(timeout=5)

    # -- background IO -----------------------------------------------

    def _emit_local(self, event: str, detail: str = "") -> None:
        self._inbound.put(status(event, int(time.time()), detail=detail))

    def _connect_once(self) -> socket.socket | None:
        try:
            sock = socket.create_connection(self.address, timeout=2.0)
        except OSError:
            return None
        try:
            # guard against TCP self-connection: with nobody listening on a
            # loopback port in the ephemeral range, connect() can pick that
            # same port as source and happily connect the socket to itself
            if sock.getsockname() == sock.getpeername():
                sock.close()
                return None
        except OSError:
            sock.close()
            return None
        sock.settimeout(None)
        return sock

    def _reconnect_loop(self) -> socket.socket | None:
        started = time.monotonic()
        while not self._closed.is_set():
            sock = self._connect_once()
            if sock is not None:
                return sock
            if (
                self.give_up_after is not None
                and time.monotonic() - started + self.retry_interval > self.give_up_after
            ):
                return None
            self._closed.wait(self.retry_interval)
        return None

    def _lose(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass
            self._sock = None
            if not self._closed.is_set():
                self._emit_local("connection_lost", f"lost connection to {self.address[0]}:{self.address[1]}")

    def _run(self) -> None:
        buf = b""
        while not self._closed.is_set():
            if self._sock is None:
                sock = self._reconnect_loop()
                if sock is None:
                    if not self._closed.is_set():
                        self._dead.set()
                        self._emit_local("error", f"gave up reconnecting to {self.address[0]}:{self.address[1]}")
                    return
                buf = b""
                self._sock = sock
                if self._connected_once.is_set():
                    self._emit_local(
                        "connection_restored",
                        f"restored connection to {self.address[0]}:{self.address[1]}",
                    )
                self._connected_once.set()
                if self.greeting is not None:
                    try:
                        self._sock.sendall(encode_message(self.greeting))
                    except OSError:
                        self._lose()
                        continue
            # flush queued messages, keeping the current one on failure
            while True:
                with self._outbound_lock:
                    msg = self._outbound[0] if self._outbound else None
                if msg is None:
                    break
                try:
                    self._sock.sendall(encode_message(msg))
                except OSError:
                    self._lose()
                    break
                with self._outbound_lock:
                    if self._outbound and self._outbound[0] is msg:
                        self._outbound.popleft()
            if self._sock is None:
                continue
            # read with a short timeout so queued sends stay responsive
            try:
                self._sock.settimeout(0.05)
                data = self._sock.recv(65536)
            except socket.timeout:
                continue
            except OSError:
                # includes EBADF when close() races with this loop
                self._lose()
                continue
            finally:
                try:
                    if self._sock is not None:
                        self._sock.settimeout(None)
                except OSError:
                    pass
            if not data:
                self._lose()
                continue
            buf += data
            try:
                while True:
                    got = decode_message(buf)
                    if got is None:
                        break
                    msg, buf = got
                    self._inbound.put(msg)
            except ProtocolError as exc:
                log.error("protocol error from %s: %s", self.address, exc)
                self._lose()


def connect_with_retry(
    address: tuple[str, int],
    retry_interval: float = 1.0,
    give_up_after: float | None = None,
    greeting: Message | None = None,
) -> Channel:
    """Open a channel, blocking until the first connection is up.

    Raises ChannelError when the initial connection cannot be made within
    ``give_up_after`` seconds (None retries forever).
    """
    ch = Channel(address, retry_interval, give_up_after, greeting)
    ch._thread.start()
    deadline = None if give_up_after is None else time.monotonic() + give_up_after + 1.0
    while True:
        if ch._connected_once.wait(timeout=0.02):
            return ch
        if ch.dead or (deadline is not None and time.monotonic() > deadline):
            ch.close()
            raise ChannelError(f"could not connect to {address[0]}:{address[1]}")


class MessageServer:
    """Engine-side listener: accepts connections, decodes commands.

    ``handler(conn_id, message)`` runs on the reader thread of each
    connection; ``on_disconnect(conn_id)`` fires when a connection drops.
    Malformed frames drop the offending connection only.
    """

    def __init__(self, port: int, handler, on_disconnect=None, host: str = "0.0.0.0"):
        self._handler = handler
        self._on_disconnect = on_disconnect
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, port))
        self._listener.listen(16)
        self.port = self._listener.getsockname()[1]
        self._conns: dict[int, socket.socket] = {}
        self._send_locks: dict[int, threading.Lock] = {}
        self._lock = threading.Lock()
        self._closed = threading.Event()
        self._next_id = 0
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True, name="server-accept")
        self._accept_thread.start()

    def _accept_loop(self) -> None:
        while not self._closed.is_set():
            try:
                sock, _addr = self._listener.accept()
            except OSError:
                return
            with self._lock:
                conn_id = self._next_id
                self._next_id += 1
                self._conns[conn_id] = sock
                self._send_locks[conn_id] = threading.Lock()
            threading.Thread(
                target=self._read_loop, args=(conn_id, sock), daemon=True, name=f"server-read-{conn_id}"
            ).start()

    def _read_loop(self, conn_id: int, sock: socket.socket) -> None:
        buf = b""
        try:
            while not self._closed.is_set():
                data = sock.recv(65536)
                if not data:
                    break
                buf += data
                while True:
                    got = decode_message(buf)
                    if got is None:
                        break
                    msg, buf = got
                    self._handler(conn_id, msg)
        except (OSError, ProtocolError) as exc:
            if not self._closed.is_set():
                log.warning("connection %d dropped: %s", conn_id, exc)
        finally:
            self.drop(conn_id)
            if self._on_disconnect is not None and not self._closed.is_set():
                self._on_disconnect(conn_id)

    def send(self, conn_id: int, msg: Message) -> bool:
        """Send to one connection; returns False if it is gone."""
        with self._lock:
            sock = self._conns.get(conn_id)
            lock = self._send_locks.get(conn_id)
        if sock is None or lock is None:
            return False
        try:
            with lock:
                sock.settimeout(5.0)
                sock.sendall(encode_message(msg))
                sock.settimeout(None)
            return True
        except OSError:
            self.drop(conn_id)
            return False

    def broadcast(self, msg: Message) -> None:
        with self._lock:
            ids = list(self._conns)
        for conn_id in ids:
            self.send(conn_id, msg)

    def drop(self, conn_id: int) -> None:
        with self._lock:
            sock = self._conns.pop(conn_id, None)
            self._send_locks.pop(conn_id, None)
        if sock is not None:
            _shutdown_close(sock)

    def connection_ids(self) -> list[int]:
        with self._lock:
            return list(self._conns)

    def close(self) -> None:
        self._closed.set()
        _shutdown_close(self._listener)
        with self._lock:
            socks = list(self._conns.values())
            self._conns.clear()
            self._send_locks.clear()
        for sock in socks:
            _shutdown_close(sock)


def _shutdown_close(sock: socket.socket) -> None:
    # close() alone does not wake a thread blocked in recv()/accept() on the
    # same socket; shutdown() sends the FIN and unblocks it
    try:
        sock.shutdown(socket.SHUT_RDWR)
    except OSError:
        pass
    try:
        sock.close()
    except OSError:
        pass
