"""Central time-stamp server and client-side clock offset estimation.

The server answers ``TIME\\n`` with ``TIME <server_ms>\\n`` and closes the
connection.  Clients estimate their offset NTP-style: fire a handful of
probes, keep the one with the smallest round trip, and take the server
timestamp against the local midpoint.  With symmetric routes the error
is bounded by rounding; with asymmetric one-way latencies f and b it is
exactly |f - b| / 2, so never worse than the network latency itself.

Nothing here ever adjusts a clock: offsets are applied when records are
analyzed, not on-line.
"""

from __future__ import annotations

import logging
import socket
import socketserver
import threading
import time
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

from .model import ClockOffset, ValidationError

log = logging.getLogger(__name__)

PROBES_PER_SYNC = 5


def wall_ms() -> int:
    return int(time.time() * 1000)


@dataclass(frozen=True)
class TimeProbe:
    """One round trip to the time server: local send/receive bracket the server stamp."""

    send_local: int   # ms, local clock when the request left
    server_time: int  # ms, server clock when it was served
    recv_local: int   # ms, local clock when the reply arrived

    def __post_init__(self):
        if self.recv_local < self.send_local:
            raise ValidationError("recv_local", "must be >= send_local")

    @property
    def rtt(self) -> int:
        return self.recv_local - self.send_local


def estimate_offset(probes: Sequence[TimeProbe], tester_id: int = 0) -> ClockOffset:
    """Estimate local->global offset from the minimum-RTT probe.

    offset = server_time - midpoint(send, recv); uncertainty is half the
    winning round trip (rounded up).  Probes with larger RTTs never
    change the estimate.
    """
    if not probes:
        raise ValueError("estimate_offset requires at least one probe")
    best = min(probes, key=lambda p: p.rtt)
    midpoint = (best.send_local + best.recv_local) // 2
    return ClockOffset(
        tester_id=tester_id,
        offset=best.server_time - midpoint,
        uncertainty=(best.rtt + 1) // 2,
        measured_at_local=best.recv_local,
    )


def to_global(local_ms: int, offset: ClockOffset) -> int:
    return local_ms + offset.offset


def offset_for(history: Iterable[ClockOffset], local_ms: int) -> ClockOffset | None:
    """Latest offset measured at or before ``local_ms``, or None."""
    best = None
    for off in history:
        if off.measured_at_local <= local_ms and (
            best is None or off.measured_at_local > best.measured_at_local
        ):
            best = off
    return best


class ResyncSchedule:
    """Fires every ``sync_interval`` seconds, checked between invocations.

    Probing never interrupts a running invocation, so actual resync
    times lag the schedule by at most one invocation duration.
    """

    def __init__(self, sync_interval: float):
        if sync_interval <= 0:
            raise ValueError("sync_interval must be > 0")
        self.interval_ms = int(sync_interval * 1000)
        self._next_due: int | None = None  # None until the initial sync

    def due(self, now_local_ms: int) -> bool:
        return self._next_due is None or now_local_ms >= self._next_due

    def mark(self, now_local_ms: int) -> None:
        self._next_due = now_local_ms + self.interval_ms


class _TimeHandler(socketserver.StreamRequestHandler):
    def handle(self):
        try:
            line = self.rfile.readline(64).decode("ascii", "replace").strip()
        except OSError:
            return
        if line == "TIME":
            stamp = self.server.clock()  # type: ignore[attr-defined]
            self.wfile.write(f"TIME {stamp}\n".encode("ascii"))
        # anything else: close silently


class TimestampServer(socketserver.ThreadingTCPServer):
    """Lightweight global-time source; one timestamp per connection."""

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, host: str = "127.0.0.1", port: int = 0,
                 clock: Callable[[], int] = wall_ms):
        super().__init__((host, port), _TimeHandler)
        self.clock = clock
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def start(self) -> "TimestampServer":
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()
        if self._thread:
            self._thread.join(timeout=5)


def parse_hostport(address: str) -> tuple[str, int]:
    host, sep, port = address.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"expected host:port, got {address!r}")
    return host or "127.0.0.1", int(port)


def probe_once(address: str, timeout: float = 5.0,
               clock: Callable[[], int] = wall_ms) -> TimeProbe:
    """One TIME round trip; raises OSError if the server is unreachable."""
    host, port = parse_hostport(address)
    send_local = clock()
    with socket.create_connection((host, port), timeout=timeout) as sock:
        sock.sendall(b"TIME\n")
        reply = b""
        while not reply.endswith(b"\n"):
            chunk = sock.recv(64)
            if not chunk:
                break
            reply += chunk
    recv_local = clock()
    parts = reply.decode("ascii", "replace").split()
    if len(parts) != 2 or parts[0] != "TIME":
        raise OSError(f"bad time server reply: {reply!r}")
    return TimeProbe(send_local=send_local, server_time=int(parts[1]), recv_local=recv_local)


def sync_clock(address: str, tester_id: int = 0, probes: int = PROBES_PER_SYNC,
               timeout: float = 5.0, clock: Callable[[], int] = wall_ms) -> ClockOffset:
    """Probe ``probes`` times and estimate the offset from the best round trip."""
    samples = []
    last_err: OSError | None = None
    for _ in range(probes):
        try:
            samples.append(probe_once(address, timeout=timeout, clock=clock))
        except OSError as err:
            last_err = err
    if not samples:
        raise last_err if last_err else OSError("no probes completed")
    return estimate_offset(samples, tester_id=tester_id)
