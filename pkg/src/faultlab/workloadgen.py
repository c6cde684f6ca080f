"""Workload generation from statistical specs.

Application and fault tasks form two independent renewal streams: each
next start time is the previous start plus a draw from the inter-arrival
distribution, durations are drawn per task, and the command is picked by
weight among that stream's command list. Fault starts are shifted right
when a draw would overlap the previous fault; application tasks may
overlap freely.

Samplers draw by inverse CDF (or resampling) with an explicit RNG so runs
are reproducible. No fitting beyond affine mean scaling happens here:
distribution parameters are inputs, not estimates.

A GenSpec can be read from ``key = value`` text, e.g.::

    time_span = 86400
    seed = 42
    app_duration = normal(1800, 180)
    app_interarrival = normal(2400, 240)
    fault_duration = johnson_su(0.0, 1.5, 80, 25)
    fault_interarrival = exp_weibull(0.9, 300, 2.1)
    # weight ; cores ; command template ({duration} is substituted)
    app_command = 1 ; 0-7 ; ./hpl lininput
    fault_command = 1 ; 6 ; ./leak {duration}
"""

from __future__ import annotations

import math
import os
import random
import re
from dataclasses import dataclass

from faultlab.core import (
    ParseError,
    Task,
    ValidationError,
    Workload,
    parse_core_list,
)

__all__ = [
    "DistributionSpec",
    "CommandSpec",
    "GenSpec",
    "sample",
    "sample_many",
    "fit_empirical",
    "parse_distribution",
    "format_distribution",
    "generate_workload",
    "generate_probe",
    "parse_genspec",
    "parse_genspec_text",
    "PROBE_DURATION",
    "PROBE_SPACING",
]

KINDS = ("normal", "exp_weibull", "johnson_su", "empirical")

# Probe workloads exercise every command once at a fixed short cadence so a
# fresh deployment can be smoke-checked end to end.
PROBE_DURATION = 10
PROBE_SPACING = 15

_RESAMPLE_CAP = 10_000


@dataclass(frozen=True)
class DistributionSpec:
    """One duration or inter-arrival distribution.

    params by kind:
      normal(mu, sigma)                    draws <= 0 are resampled
      exp_weibull(k, lam, alpha)           exponentiated Weibull, inverse CDF
      johnson_su(gamma, delta, xi, lam)    draws <= 0 are resampled
      empirical(s1, s2, ...)               uniform resampling of the samples
    """

    kind: str
    params: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValidationError(f"unknown distribution kind {self.kind!r}")
        p = self.params
        if self.kind == "normal":
            if len(p) != 2 or p[0] <= 0 or p[1] < 0:
                raise ValidationError(f"normal needs (mu > 0, sigma >= 0), got {p}")
        elif self.kind == "exp_weibull":
            if len(p) != 3 or any(v <= 0 for v in p):
                raise ValidationError(f"exp_weibull needs 3 positive params, got {p}")
        elif self.kind == "johnson_su":
            if len(p) != 4 or p[1] <= 0 or p[3] <= 0:
                raise ValidationError(f"johnson_su needs (gamma, delta > 0, xi, lam > 0), got {p}")
        else:  # empirical
            if not p or all(v <= 0 for v in p):
                raise ValidationError("empirical needs samples with a positive mean")


def sample(d: DistributionSpec, rng: random.Random) -> float:
    """One positive draw from ``d``."""
    if d.kind == "normal":
        mu, sigma = d.params
        for _ in range(_RESAMPLE_CAP):
            x = rng.gauss(mu, sigma)
            if x > 0:
                return x
        raise ValidationError(f"normal({mu}, {sigma}): resampling never produced a positive draw")
    if d.kind == "exp_weibull":
        k, lam, alpha = d.params
        u = rng.random()
        return lam * (-math.log(1.0 - u ** (1.0 / alpha))) ** (1.0 / k)
    if d.kind == "johnson_su":
        gamma, delta, xi, lam = d.params
        for _ in range(_RESAMPLE_CAP):
            z = rng.gauss(0.0, 1.0)
            x = xi + lam * math.sinh((z - gamma) / delta)
            if x > 0:
                return x
        raise ValidationError(f"johnson_su{d.params}: resampling never produced a positive draw")
    samples = d.params
    return samples[rng.randrange(len(samples))]


def sample_many(d: DistributionSpec, rng: random.Random, n: int) -> list[float]:
    return [sample(d, rng) for _ in range(n)]


def fit_empirical(samples, target_mean: float) -> DistributionSpec:
    """Empirical resampler scaled so its mean equals ``target_mean``.

    Scaling is affine: every sample is multiplied by target_mean / mean.
    """
    samples = tuple(float(s) for s in samples)
    if not samples:
        raise ValidationError("fit_empirical needs at least one sample")
    mean = sum(samples) / len(samples)
    if mean <= 0 or target_mean <= 0:
        raise ValidationError("fit_empirical needs positive means")
    scale = target_mean / mean
    return DistributionSpec("empirical", tuple(s * scale for s in samples))


_DIST_RE = re.compile(r"^([a-z_]+)\s*\(([^)]*)\)$")


def parse_distribution(text: str) -> DistributionSpec:
    m = _DIST_RE.match(text.strip())
    if not m:
        raise ParseError(f"bad distribution literal {text!r}")
    kind, body = m.group(1), m.group(2)
    try:
        params = tuple(float(p) for p in body.split(",")) if body.strip() else ()
    except ValueError:
        raise ParseError(f"bad distribution parameters in {text!r}") from None
    try:
        return DistributionSpec(kind, params)
    except ValidationError as exc:
        raise ParseError(str(exc)) from None


def format_distribution(d: DistributionSpec) -> str:
    params = ", ".join(f"{p:g}" for p in d.params)
    return f"{d.kind}({params})"


@dataclass(frozen=True)
class CommandSpec:
    """One launchable command template with selection weight and pinning."""

    template: str
    is_fault: bool
    weight: float = 1.0
    cores: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        if not self.template.strip():
            raise ValidationError("empty command template")
        if self.weight <= 0:
            raise ValidationError(f"weight must be positive, got {self.weight}")

    def args_for(self, duration: int) -> str:
        if "{duration}" in self.template:
            return self.template.replace("{duration}", str(duration))
        return self.template


@dataclass(frozen=True)
class GenSpec:
    time_span: int
    commands: tuple[CommandSpec, ...]
    app_duration: DistributionSpec | None = None
    app_interarrival: DistributionSpec | None = None
    fault_duration: DistributionSpec | None = None
    fault_interarrival: DistributionSpec | None = None
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.time_span <= 0:
            raise ValidationError("time_span must be positive")
        if not self.commands:
            raise ValidationError("at least one command is required")
        if any(c.is_fault for c in self.commands) and not (
            self.fault_duration and self.fault_interarrival
        ):
            raise ValidationError("fault commands need fault_duration and fault_interarrival")
        if any(not c.is_fault for c in self.commands) and not (
            self.app_duration and self.app_interarrival
        ):
            raise ValidationError("app commands need app_duration and app_interarrival")

    def apps(self) -> tuple[CommandSpec, ...]:
        return tuple(c for c in self.commands if not c.is_fault)

    def faults(self) -> tuple[CommandSpec, ...]:
        return tuple(c for c in self.commands if c.is_fault)


def _pick(commands: tuple[CommandSpec, ...], rng: random.Random) -> CommandSpec:
    weights = [c.weight for c in commands]
    return rng.choices(commands, weights=weights, k=1)[0]


def generate_workload(g: GenSpec, rng: random.Random | None = None) -> Workload:
    """Generate one workload; identical (GenSpec, seed) gives identical output."""
    if rng is None:
        rng = random.Random(g.seed)
    drafts: list[tuple[int, int, int, CommandSpec]] = []  # (start, duration, order, cmd)
    order = 0

    apps = g.apps()
    if apps:
        t = 0.0
        while True:
            t += sample(g.app_interarrival, rng)
            start = int(round(t))
            if start >= g.time_span:
                break
            duration = max(1, int(round(sample(g.app_duration, rng))))
            drafts.append((start, duration, order, _pick(apps, rng)))
            order += 1

    faults = g.faults()
    if faults:
        t = 0.0
        prev_end = 0
        while True:
            t += sample(g.fault_interarrival, rng)
            start = int(round(t))
            if start < prev_end:
                start = prev_end  # shift right off the previous fault
                t = float(start)
            if start >= g.time_span:
                break
            duration = max(1, int(round(sample(g.fault_duration, rng))))
            drafts.append((start, duration, order, _pick(faults, rng)))
            prev_end = start + duration
            order += 1

    drafts.sort(key=lambda d: (d[0], d[2]))
    tasks = [
        Task(
            args=cmd.args_for(duration),
            timestamp=start,
            duration=duration,
            is_fault=cmd.is_fault,
            seq_num=seq,
            cores=cmd.cores,
        )
        for seq, (start, duration, _, cmd) in enumerate(drafts, start=1)
    ]
    return Workload(tuple(tasks))


def generate_probe(g: GenSpec) -> Workload:
    """One task per distinct command, short and evenly spaced."""
    seen: list[CommandSpec] = []
    for c in g.commands:
        if c not in seen:
            seen.append(c)
    tasks = [
        Task(
            args=c.args_for(PROBE_DURATION),
            timestamp=i * PROBE_SPACING,
            duration=PROBE_DURATION,
            is_fault=c.is_fault,
            seq_num=i + 1,
            cores=c.cores,
        )
        for i, c in enumerate(seen)
    ]
    return Workload(tuple(tasks))


_GENSPEC_DISTS = {
    "app_duration",
    "app_interarrival",
    "fault_duration",
    "fault_interarrival",
}


def _parse_command_value(value: str, is_fault: bool, lineno: int) -> CommandSpec:
    # "weight ; cores ; template" with the template last so it may contain
    # anything, mirroring the workload CSV layout
    parts = value.split(";", 2)
    if len(parts) != 3:
        raise ParseError(f"line {lineno}: expected 'weight ; cores ; template'")
    weight_s, cores_s, template = (p.strip() for p in parts)
    try:
        weight = float(weight_s) if weight_s else 1.0
        return CommandSpec(
            template=template,
            is_fault=is_fault,
            weight=weight,
            cores=parse_core_list(cores_s),
        )
    except (ValueError, ValidationError, ParseError) as exc:
        raise ParseError(f"line {lineno}: {exc}") from None


def parse_genspec_text(text: str) -> GenSpec:
    values: dict = {}
    commands: list[CommandSpec] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError(f"line {lineno}: expected key = value")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key in ("time_span", "seed"):
            try:
                values[key] = int(val)
            except ValueError:
                raise ParseError(f"line {lineno}: {key} must be an integer") from None
        elif key in _GENSPEC_DISTS:
            try:
                values[key] = parse_distribution(val)
            except ParseError as exc:
                raise ParseError(f"line {lineno}: {exc}") from None
        elif key == "app_command":
            commands.append(_parse_command_value(val, False, lineno))
        elif key == "fault_command":
            commands.append(_parse_command_value(val, True, lineno))
        else:
            raise ParseError(f"line {lineno}: unknown genspec key {key!r}")
    if "time_span" not in values:
        raise ParseError("genspec is missing time_span")
    try:
        return GenSpec(commands=tuple(commands), **values)
    except ValidationError as exc:
        raise ParseError(str(exc)) from None


def parse_genspec(path: str | os.PathLike) -> GenSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_genspec_text(fh.read())
