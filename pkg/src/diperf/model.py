"""Shared vocabulary for load experiments.

All timestamps are integer milliseconds; aggregation quanta are integer
seconds.  A record line reads

    REC <tester_id> <sequence> <start_ms> <end_ms> <outcome> <latency_ms|-> <overhead_ms|->

with the outcome spelled exactly ``OK|TIMEOUT|STARTFAIL|SVCERR`` and ``-``
marking an absent optional field.  Record *files* carry global
(reconciled) timestamps; the same layout travels tester->controller with
local timestamps plus a trailing ``OFF <offset_ms> <uncertainty_ms>``
(see :mod:`diperf.transport`).

Every type here is an immutable value; instances are safe to share
across threads.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from fractions import Fraction


class ValidationError(ValueError):
    """A domain value violates an invariant; ``field`` names the first offender."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class Outcome(enum.Enum):
    """Classification of one client invocation."""

    SUCCESS = "OK"
    TIMEOUT = "TIMEOUT"
    START_FAILURE = "STARTFAIL"
    SERVICE_ERROR = "SVCERR"

    @property
    def wire(self) -> str:
        return self.value

    @classmethod
    def from_wire(cls, token: str) -> "Outcome":
        try:
            return cls(token)
        except ValueError:
            raise ValidationError("outcome", f"unknown outcome {token!r}") from None


@dataclass(frozen=True)
class TestDescription:
    """What one tester has to do, as handed out by the controller.

    ``client_command`` is an opaque command line; the substring
    ``{target}`` is replaced with the current target address at
    invocation time (which lets calibration re-point the client at a
    throwaway echo service).  A ``timeserver_address`` of ``-`` means
    "no time server": local clocks are taken as global, which is only
    sensible for single-host runs.
    """

    experiment_duration: float  # seconds a tester keeps starting clients
    invocation_interval: float  # seconds, minimum gap between client starts
    sync_interval: float        # seconds between clock resynchronizations
    client_command: str
    target_address: str         # host:port
    timeserver_address: str     # host:port, or "-" for identity mapping
    client_timeout: float       # seconds before an invocation is killed
    max_invocation_rate: float | None = None  # starts/second cap, optional

    def to_json(self) -> str:
        return json.dumps(
            {
                "experiment_duration": self.experiment_duration,
                "invocation_interval": self.invocation_interval,
                "sync_interval": self.sync_interval,
                "client_command": self.client_command,
                "target_address": self.target_address,
                "timeserver_address": self.timeserver_address,
                "client_timeout": self.client_timeout,
                "max_invocation_rate": self.max_invocation_rate,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "TestDescription":
        raw = json.loads(text)
        return cls(
            experiment_duration=raw["experiment_duration"],
            invocation_interval=raw["invocation_interval"],
            sync_interval=raw["sync_interval"],
            client_command=raw["client_command"],
            target_address=raw["target_address"],
            timeserver_address=raw["timeserver_address"],
            client_timeout=raw["client_timeout"],
            max_invocation_rate=raw.get("max_invocation_rate"),
        )


def validate(description: TestDescription) -> TestDescription:
    """Return ``description`` unchanged, or raise naming the first bad field."""
    d = description
    if not d.experiment_duration > 0:
        raise ValidationError("experiment_duration", "must be > 0")
    if d.invocation_interval < 0:
        raise ValidationError("invocation_interval", "must be >= 0")
    if not d.sync_interval > 0:
        raise ValidationError("sync_interval", "must be > 0")
    if not d.client_command.strip():
        raise ValidationError("client_command", "must be non-empty")
    if not d.target_address.strip():
        raise ValidationError("target_address", "must be non-empty")
    if not d.timeserver_address.strip():
        raise ValidationError("timeserver_address", "must be non-empty")
    if not d.client_timeout > 0:
        raise ValidationError("client_timeout", "must be > 0")
    if d.max_invocation_rate is not None and not d.max_invocation_rate > 0:
        raise ValidationError("max_invocation_rate", "must be > 0 when set")
    return description


@dataclass(frozen=True, order=True)
class InvocationRecord:
    """One timed client invocation.

    ``start_ms``/``end_ms`` are on the emitting tester's clock when the
    record travels the control channel, and on the reconciled global
    clock once persisted to a record file.  Field order makes records
    sort by (tester, sequence), which coincides with per-tester start
    order.
    """

    tester_id: int
    sequence: int
    start_ms: int
    end_ms: int
    outcome: Outcome = field(compare=False)
    latency_estimate: int | None = field(default=None, compare=False)  # one-way ms
    client_overhead: int | None = field(default=None, compare=False)   # ms

    def __post_init__(self):
        if self.tester_id < 1:
            raise ValidationError("tester_id", "must be >= 1")
        if self.sequence < 1:
            raise ValidationError("sequence", "must be >= 1")
        if self.end_ms < self.start_ms:
            raise ValidationError("end_ms", "must be >= start_ms")

    @property
    def duration_ms(self) -> int:
        return self.end_ms - self.start_ms


def _opt(value: int | None) -> str:
    return "-" if value is None else str(value)


def _parse_opt(token: str, field_name: str) -> int | None:
    if token == "-":
        return None
    try:
        return int(token)
    except ValueError:
        raise ValidationError(field_name, f"expected integer or '-', got {token!r}") from None


def format_record_line(record: InvocationRecord) -> str:
    return (
        f"REC {record.tester_id} {record.sequence} {record.start_ms} "
        f"{record.end_ms} {record.outcome.wire} "
        f"{_opt(record.latency_estimate)} {_opt(record.client_overhead)}"
    )


def parse_record_line(line: str) -> InvocationRecord:
    parts = line.split()
    if len(parts) != 8 or parts[0] != "REC":
        raise ValidationError("record", f"malformed record line: {line!r}")
    return InvocationRecord(
        tester_id=int(parts[1]),
        sequence=int(parts[2]),
        start_ms=int(parts[3]),
        end_ms=int(parts[4]),
        outcome=Outcome.from_wire(parts[5]),
        latency_estimate=_parse_opt(parts[6], "latency_estimate"),
        client_overhead=_parse_opt(parts[7], "client_overhead"),
    )


@dataclass(frozen=True)
class ClockOffset:
    """Additive correction from one tester's clock to global time.

    ``uncertainty`` is half the round trip of the winning probe; the
    mapping can be wrong by at most the one-way latency to the time
    server.  Adding a constant preserves the order of local timestamps.
    """

    tester_id: int
    offset: int            # signed ms; local + offset = global
    uncertainty: int       # ms, >= 0
    measured_at_local: int  # ms on the tester clock

    def __post_init__(self):
        if self.uncertainty < 0:
            raise ValidationError("uncertainty", "must be >= 0")

    def to_json(self) -> str:
        return json.dumps(
            {
                "tester_id": self.tester_id,
                "offset": self.offset,
                "uncertainty": self.uncertainty,
                "measured_at_local": self.measured_at_local,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "ClockOffset":
        raw = json.loads(text)
        return cls(
            tester_id=raw["tester_id"],
            offset=raw["offset"],
            uncertainty=raw["uncertainty"],
            measured_at_local=raw["measured_at_local"],
        )


IDENTITY_OFFSET = ClockOffset(tester_id=0, offset=0, uncertainty=0, measured_at_local=0)


@dataclass(frozen=True)
class MetricSeries:
    """A time-quantized series: (quantum start in global seconds, value).

    Quantum starts are strictly increasing multiples of ``quantum``
    counted from second 0.
    """

    quantum: int  # seconds
    points: tuple[tuple[int, float], ...]

    def __post_init__(self):
        if self.quantum <= 0:
            raise ValidationError("quantum", "must be > 0")
        prev = None
        for t, _ in self.points:
            if t % self.quantum != 0:
                raise ValidationError("points", f"time {t} is not a multiple of {self.quantum}")
            if prev is not None and t <= prev:
                raise ValidationError("points", f"times not strictly increasing at {t}")
            prev = t

    def times(self) -> list[int]:
        return [t for t, _ in self.points]

    def values(self) -> list[float]:
        return [v for _, v in self.points]

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class ClientStats:
    """Per-tester aggregate over (its active window intersected with) the peak window.

    ``utilization`` is kept as an exact rational so that
    ``fairness * utilization == jobs_completed`` holds without float
    rounding; ``fairness`` is the total number of jobs the service
    completed while this client was active, and is absent for clients
    that completed nothing inside the window.
    """

    tester_id: int
    jobs_completed: int
    active_window: tuple[int, int]  # global ms, [start, end]
    utilization: Fraction
    fairness: int | None

    def __post_init__(self):
        if not 0 <= self.utilization <= 1:
            raise ValidationError("utilization", "must lie in [0, 1]")
