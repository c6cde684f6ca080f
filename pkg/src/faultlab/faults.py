"""Fault programs and micro benchmarks.

Eight self-bounded fault programs reproduce common failure signatures on
the node they run on. Each takes a duration, stops on its own within a
2 s grace of that duration, and supports a low-intensity variant that
halves its dominant knob (allocation rate, matrix sizes, failure
probability, file size). Programs behave deterministically under a seed.

The three programs that would need privileged OS interfaces to do real
damage (``cpufreq``, ``pagefail``, ``ioerr``) default to faithful
simulations. The real thing is opt-in behind ``--real --i-have-root``
and refuses to run otherwise.

Benchmarks (cpu, mem, io) report achieved throughput and are used both
for interference measurements and as well-behaved application commands.
"""

from __future__ import annotations

import json
import math
import os
import random
import tempfile
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from faultlab.core import FaultlabError, ValidationError

__all__ = [
    "FAULT_PROGRAMS",
    "BENCHMARKS",
    "FaultProgramSpec",
    "ExitReport",
    "RootRequired",
    "run_fault_program",
    "run_benchmark",
    "llc_bytes",
]

FAULT_PROGRAMS = (
    "leak",
    "memeater",
    "ddot",
    "dial",
    "cpufreq",
    "pagefail",
    "ioerr",
    "copy",
)
BENCHMARKS = ("cpu", "mem", "io")

MB = 1024 * 1024
GRACE_SECONDS = 2.0

# default knobs, normal intensity; "low" halves the marked knob
LEAK_BLOCK_MB = 16  # allocated once per second, never freed
MEMEATER_CHUNK_MB = 36  # initial allocation and per-expansion growth
MEMEATER_EXPAND_EVERY = 2.0
DDOT_CACHE_MULTIPLIERS = (0.9, 5.0, 10.0)
DDOT_SWITCH_EVERY = 2.0
DDOT_FALLBACK_CACHE = 20 * MB
CPUFREQ_CAP = 0.5  # fraction of nominal speed left available
PAGEFAIL_P = 0.5
IOERR_CANDIDATE = 1.0 / 500.0  # one I/O op in 500 becomes a failure candidate
IOERR_GATE = 0.2
COPY_FILE_MB = 400
COPY_SLEEP = 2.0


class RootRequired(FaultlabError):
    """Real mode was requested without the explicit root opt-in."""


@dataclass(frozen=True)
class FaultProgramSpec:
    name: str
    duration: float
    low: bool = False
    seed: int | None = None
    real: bool = False
    i_have_root: bool = False
    params: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.name not in FAULT_PROGRAMS:
            raise ValidationError(f"unknown fault program {self.name!r}")
        if self.duration <= 0:
            raise ValidationError("duration must be positive")

    @property
    def intensity(self) -> str:
        return "low" if self.low else "normal"


@dataclass
class ExitReport:
    name: str
    intensity: str
    elapsed: float
    metrics: dict
    ok: bool = True
    message: str = ""

    def to_json(self) -> str:
        return json.dumps(
            {
                "name": self.name,
                "intensity": self.intensity,
                "elapsed": round(self.elapsed, 4),
                "ok": self.ok,
                "message": self.message,
                **{k: v for k, v in sorted(self.metrics.items())},
            },
            sort_keys=True,
        )


def llc_bytes() -> int:
    """Size of the largest CPU cache, from sysfs; 20 MB when undetectable."""
    base = "/sys/devices/system/cpu/cpu0/cache"
    best = 0
    try:
        for entry in os.listdir(base):
            if not entry.startswith("index"):
                continue
            try:
                with open(os.path.join(base, entry, "size")) as fh:
                    text = fh.read().strip()
            except OSError:
                continue
            mult = 1
            if text.endswith("K"):
                mult, text = 1024, text[:-1]
            elif text.endswith("M"):
                mult, text = MB, text[:-1]
            try:
                best = max(best, int(text) * mult)
            except ValueError:
                continue
    except OSError:
        pass
    return best or DDOT_FALLBACK_CACHE


def _require_real_allowed(spec: FaultProgramSpec) -> None:
    if not spec.i_have_root:
        raise RootRequired(
            f"{spec.name}: real mode touches privileged OS interfaces; re-run with --real --i-have-root as root"
        )
    if os.geteuid() != 0:
        raise RootRequired(f"{spec.name}: real mode requires root (euid is {os.geteuid()})")


def _touch_pages(buf: bytearray, start: int = 0) -> None:
    # write one byte per page so the kernel actually commits the memory
    for off in range(start, len(buf), 4096):
        buf[off] = 0x5A


def _run_leak(spec: FaultProgramSpec, t_end: float, rng: random.Random) -> dict:
    block = int(spec.params.get("block_mb", LEAK_BLOCK_MB)) * MB
    if spec.low:
        block //= 2
    hoard = []
    allocated = 0
    next_alloc = time.monotonic()
    while time.monotonic() < t_end:
        now = time.monotonic()
        if now >= next_alloc:
            buf = bytearray(block)
            _touch_pages(buf)
            hoard.append(buf)  # never released: that is the fault
            allocated += block
            next_alloc += 1.0
        time.sleep(min(0.05, max(0.0, next_alloc - time.monotonic())))
    return {"allocated_mb": allocated // MB, "blocks": len(hoard)}


def _run_memeater(spec: FaultProgramSpec, t_end: float, rng: random.Random) -> dict:
    chunk = int(spec.params.get("chunk_mb", MEMEATER_CHUNK_MB)) * MB
    if spec.low:
        chunk //= 2
    buf = bytearray(chunk)
    _touch_pages(buf)
    stripe = bytes(range(256)) * 4096  # 1 MB write pattern
    next_expand = time.monotonic() + MEMEATER_EXPAND_EVERY
    writes = 0
    while time.monotonic() < t_end:
        # saturate memory bandwidth by rewriting random stripes
        off = rng.randrange(max(1, len(buf) - len(stripe)))
        buf[off : off + len(stripe)] = stripe
        writes += 1
        if time.monotonic() >= next_expand:
            old = len(buf)
            buf += bytes(chunk)
            _touch_pages(buf, start=old)
            next_expand += MEMEATER_EXPAND_EVERY
    return {"resident_mb": len(buf) // MB, "stripe_writes": writes}


def _run_ddot(spec: FaultProgramSpec, t_end: float, rng: random.Random) -> dict:
    cache = int(spec.params.get("cache_bytes", 0)) or llc_bytes()
    sizes = []
    for mult in DDOT_CACHE_MULTIPLIERS:
        target = cache * mult
        if spec.low:
            target /= 2
        n = max(1, int(target // (2 * 8)))  # two float64 operand vectors
        sizes.append(n)
    ops = 0
    idx = 0
    a = b = None
    switch_at = 0.0
    while time.monotonic() < t_end:
        if time.monotonic() >= switch_at:
            n = sizes[idx % len(sizes)]
            idx += 1
            a = np.ones(n)
            b = np.full(n, 2.0)
            switch_at = time.monotonic() + DDOT_SWITCH_EVERY
        float(np.dot(a, b))  # streams both operands through the cache
        ops += 1
    return {"dot_ops": ops, "cache_bytes": cache, "sizes": sizes}


def _run_dial(spec: FaultProgramSpec, t_end: float, rng: random.Random) -> dict:
    # ALU pressure: tight scalar floating point on random operands
    ops = 0
    acc = 1.0
    duty_off = 0.5 if spec.low else 0.0
    while time.monotonic() < t_end:
        for _ in range(5000):
            x = rng.random()
            acc = acc * 0.999999 + math.sqrt(x * x + 1.0) - math.sin(x)
        ops += 5000
        if duty_off:
            time.sleep(0.01 / (1.0 - duty_off) * duty_off)
    return {"float_ops": ops, "acc": round(acc, 3)}


def _sidechannel_path(spec: FaultProgramSpec) -> str | None:
    return spec.params.get("sidechannel") or os.environ.get("FAULTLAB_SIDECHANNEL")


def _run_cpufreq(spec: FaultProgramSpec, t_end: float, rng: random.Random) -> dict:
    if spec.real:
        return _run_cpufreq_real(spec, t_end)
    cap = CPUFREQ_CAP
    if spec.low:
        cap = 1.0 - (1.0 - CPUFREQ_CAP) / 2.0  # halve the slowdown
    side = _sidechannel_path(spec)
    if side:
        with open(side, "a", encoding="utf-8") as fh:
            fh.write(json.dumps({"program": "cpufreq", "cap": cap, "state": "on"}) + "\n")
    period = 0.1
    cycles = 0
    try:
        while time.monotonic() < t_end:
            # duty-cycle the core: busy for cap, sleep for the rest
            busy_until = time.monotonic() + period * cap
            x = 0.0
            while time.monotonic() < busy_until:
                x = x * 0.5 + 1.0
            time.sleep(period * (1.0 - cap))
            cycles += 1
    finally:
        if side:
            with open(side, "a", encoding="utf-8") as fh:
                fh.write(json.dumps({"program": "cpufreq", "cap": 1.0, "state": "off"}) + "\n")
    return {"cap": cap, "cycles": cycles}


_PSTATE_KNOB = "/sys/devices/system/cpu/intel_pstate/max_perf_pct"


def _run_cpufreq_real(spec: FaultProgramSpec, t_end: float) -> dict:
    _require_real_allowed(spec)
    cap = CPUFREQ_CAP if not spec.low else 0.75
    with open(_PSTATE_KNOB, "r+") as fh:
        previous = fh.read().strip()
        fh.seek(0)
        fh.write(str(int(cap * 100)))
    try:
        while time.monotonic() < t_end:
            time.sleep(0.2)
    finally:
        with open(_PSTATE_KNOB, "w") as fh:
            fh.write(previous)
    return {"cap": cap, "restored": int(previous)}


def _run_pagefail(spec: FaultProgramSpec, t_end: float, rng: random.Random) -> dict:
    if spec.real:
        _require_real_allowed(spec)
        raise FaultlabError("pagefail: real mode is not implemented on this kernel; use the simulation")
    p = PAGEFAIL_P / 2.0 if spec.low else PAGEFAIL_P
    chunk = 4 * MB
    requests = failed = 0
    window: list[bytearray] = []
    while time.monotonic() < t_end:
        requests += 1
        if rng.random() < p:
            # the allocation "fails": the requester stalls and retries later
            failed += 1
            time.sleep(0.02)
            continue
        buf = bytearray(chunk)
        _touch_pages(buf)
        window.append(buf)
        if len(window) > 16:
            window.pop(0)
        time.sleep(0.005)
    return {"requests": requests, "failed": failed, "fail_p": p}


def _run_ioerr(spec: FaultProgramSpec, t_end: float, rng: random.Random) -> dict:
    if spec.real:
        _require_real_allowed(spec)
        raise FaultlabError("ioerr: real mode needs the kernel fault-injection debugfs; use the simulation")
    gate = IOERR_GATE / 2.0 if spec.low else IOERR_GATE
    ops_limit = int(spec.params.get("ops_limit", 0)) or None
    workdir = spec.params.get("dir") or tempfile.gettempdir()
    path = os.path.join(workdir, f"faultlab-ioerr-{os.getpid()}.dat")
    block = os.urandom(4096)
    ops = candidates = failed = 0
    try:
        with open(path, "w+b") as fh:
            while time.monotonic() < t_end:
                ops += 1
                inject = False
                if rng.random() < IOERR_CANDIDATE:
                    candidates += 1
                    if rng.random() < gate:
                        inject = True
                if inject:
                    # the operation is dropped as if the device returned EIO
                    failed += 1
                    time.sleep(0.01)
                else:
                    fh.seek(rng.randrange(64) * 4096)
                    if ops % 2:
                        fh.write(block)
                    else:
                        fh.read(4096)
                if ops_limit and ops >= ops_limit:
                    break
    finally:
        try:
            os.unlink(path)
        except OSError:
            pass
    return {"ops": ops, "candidates": candidates, "failed": failed, "gate": gate}


def _run_copy(spec: FaultProgramSpec, t_end: float, rng: random.Random) -> dict:
    file_mb = int(spec.params.get("file_mb", COPY_FILE_MB))
    if spec.low:
        file_mb //= 2
    workdir = spec.params.get("dir") or tempfile.gettempdir()
    path = os.path.join(workdir, f"faultlab-copy-{os.getpid()}.dat")
    chunk = os.urandom(MB)
    cycles = 0
    written = read = 0
    try:
        while time.monotonic() < t_end:
            with open(path, "wb") as fh:
                for _ in range(file_mb):
                    if time.monotonic() >= t_end:
                        break
                    fh.write(chunk)
                    written += 1
                fh.flush()
                os.fsync(fh.fileno())
            with open(path, "rb") as fh:
                while time.monotonic() < t_end:
                    data = fh.read(MB)
                    if not data:
                        break
                    read += 1
            cycles += 1
            slept = 0.0
            while slept < COPY_SLEEP and time.monotonic() < t_end:
                time.sleep(0.1)
                slept += 0.1
    except OSError as exc:
        raise FaultlabError(f"copy: {exc}") from None
    finally:
        try:
            os.unlink(path)
        except OSError:
            pass
    return {"cycles": cycles, "written_mb": written, "read_mb": read, "file_mb": file_mb}


_RUNNERS = {
    "leak": _run_leak,
    "memeater": _run_memeater,
    "ddot": _run_ddot,
    "dial": _run_dial,
    "cpufreq": _run_cpufreq,
    "pagefail": _run_pagefail,
    "ioerr": _run_ioerr,
    "copy": _run_copy,
}


def run_fault_program(spec: FaultProgramSpec) -> ExitReport:
    if spec.real and spec.name not in ("cpufreq", "pagefail", "ioerr"):
        raise FaultlabError(f"{spec.name} has no real mode; it is always a real load")
    rng = random.Random(spec.seed)
    t0 = time.monotonic()
    metrics = _RUNNERS[spec.name](spec, t0 + spec.duration, rng)
    return ExitReport(
        name=spec.name,
        intensity=spec.intensity,
        elapsed=time.monotonic() - t0,
        metrics=metrics,
    )


# --- benchmarks ----------------------------------------------------------

_BENCH_N = 192  # matmul operand size; 2 * n^3 flops each


def _bench_cpu(threads: int, duration: float, ops: int | None) -> dict:
    done = [0] * threads
    stop = time.monotonic() + duration
    per_thread = None if ops is None else max(1, ops // threads)

    def worker(slot: int) -> None:
        a = np.random.default_rng(slot).random((_BENCH_N, _BENCH_N))
        b = a.T.copy()
        count = 0
        while per_thread is None or count < per_thread:
            if per_thread is None and time.monotonic() >= stop:
                break
            a @ b
            count += 1
            if time.monotonic() >= stop + GRACE_SECONDS:
                break
        done[slot] = count

    ts = [threading.Thread(target=worker, args=(i,)) for i in range(threads)]
    t0 = time.monotonic()
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    elapsed = time.monotonic() - t0
    total = sum(done)
    flops = total * 2 * _BENCH_N**3
    return {"matmuls": total, "gflops": round(flops / elapsed / 1e9, 3), "work_elapsed": round(elapsed, 4)}


def _bench_mem(threads: int, duration: float, ops: int | None) -> dict:
    size = 8 * MB  # element count; 64 MB per float64 array, well past LLC
    done = [0] * threads
    stop = time.monotonic() + duration
    per_thread = None if ops is None else max(1, ops // threads)

    def worker(slot: int) -> None:
        b = np.ones(size)
        c = np.full(size, 2.0)
        a = np.empty(size)
        count = 0
        while per_thread is None or count < per_thread:
            if per_thread is None and time.monotonic() >= stop:
                break
            np.multiply(c, 3.0, out=a)
            np.add(a, b, out=a)  # classic triad a = b + 3c
            count += 1
        done[slot] = count

    ts = [threading.Thread(target=worker, args=(i,)) for i in range(threads)]
    t0 = time.monotonic()
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    elapsed = time.monotonic() - t0
    moved = sum(done) * 4 * size * 8  # read b, read c, write a twice
    return {"triads": sum(done), "gbps": round(moved / elapsed / 1e9, 3), "work_elapsed": round(elapsed, 4)}


def _bench_io(threads: int, duration: float, ops: int | None, workdir: str | None = None) -> dict:
    workdir = workdir or tempfile.gettempdir()
    chunk = os.urandom(MB)
    file_mb = 64
    stop = time.monotonic() + duration
    t0 = time.monotonic()
    moved = 0
    cycles = 0
    path = os.path.join(workdir, f"faultlab-bench-io-{os.getpid()}.dat")
    try:
        while time.monotonic() < stop and (ops is None or cycles < ops):
            with open(path, "wb") as fh:
                for _ in range(file_mb):
                    if time.monotonic() >= stop + GRACE_SECONDS:
                        break
                    fh.write(chunk)
                    moved += MB
                fh.flush()
                os.fsync(fh.fileno())
            with open(path, "rb") as fh:
                while True:
                    data = fh.read(MB)
                    if not data:
                        break
                    moved += len(data)
            cycles += 1
    finally:
        try:
            os.unlink(path)
        except OSError:
            pass
    elapsed = time.monotonic() - t0
    return {"cycles": cycles, "mbps": round(moved / MB / elapsed, 2), "work_elapsed": round(elapsed, 4)}


def run_benchmark(
    kind: str,
    threads: int = 1,
    duration: float = 5.0,
    ops: int | None = None,
    workdir: str | None = None,
) -> ExitReport:
    """Run one benchmark; with ``ops`` set it does fixed work instead of a
    fixed time, which makes run times comparable across conditions."""
    if kind not in BENCHMARKS:
        raise ValidationError(f"unknown benchmark {kind!r}")
    if threads < 1:
        raise ValidationError("threads must be >= 1")
    t0 = time.monotonic()
    if kind == "cpu":
        metrics = _bench_cpu(threads, duration, ops)
    elif kind == "mem":
        metrics = _bench_mem(threads, duration, ops)
    else:
        metrics = _bench_io(threads, duration, ops, workdir)
    return ExitReport(
        name=f"bench-{kind}",
        intensity="normal",
        elapsed=time.monotonic() - t0,
        metrics=metrics,
    )
