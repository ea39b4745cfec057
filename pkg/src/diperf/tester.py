"""Per-node agent: repeatedly runs the client against the target and times it.

The loop keeps exactly one invocation in flight.  A client finishing
inside the invocation interval is followed after the remainder of the
interval; one running longer is followed back-to-back.  An optional
rate cap bounds starts per second regardless of how fast the client
returns.  Between invocations (never during one) the agent resyncs its
clock against the time-stamp server and refreshes its one-way latency
estimate toward the target.

Every spawned client yields exactly one record: exit 0 is a success,
nonzero a service error, a process that cannot be spawned a start
failure, and one still running at the timeout is killed and recorded as
a timeout.  If the controller goes away mid-invocation, the client is
killed and that record is never emitted.
"""

from __future__ import annotations

import logging
import shlex
import socket
import statistics
import subprocess
import sys
import threading
import time
from typing import Callable

from . import timesync
from .model import ClockOffset, InvocationRecord, Outcome, TestDescription, validate
from .timesync import ResyncSchedule, parse_hostport, wall_ms
from .transport import (
    HEARTBEAT_INTERVAL,
    MISSED_HEARTBEATS,
    decode_description,
    format_wire_record,
)

log = logging.getLogger(__name__)

PACING_SLACK_MS = 50   # scheduling slack allowed on start spacing
POLL_INTERVAL_S = 0.02  # granularity for timeout/stop checks on a running client

EmitFn = Callable[[InvocationRecord, ClockOffset], None]


class SyncFailure(RuntimeError):
    """The initial clock synchronization never succeeded."""


def probe_target_latency(target_address: str, attempts: int = 3,
                         timeout: float = 5.0) -> int | None:
    """One-way ms estimate: half the best TCP connect round trip, or None."""
    try:
        host, port = parse_hostport(target_address)
    except ValueError:
        return None
    best: float | None = None
    for _ in range(attempts):
        t0 = time.perf_counter()
        try:
            with socket.create_connection((host, port), timeout=timeout):
                pass
        except OSError:
            continue
        rtt = time.perf_counter() - t0
        if best is None or rtt < best:
            best = rtt
    if best is None:
        return None
    return int(best * 1000 / 2)


def invoke_client(command: str, timeout: float, *, tester_id: int = 1,
                  sequence: int = 1, latency_estimate: int | None = None,
                  client_overhead: int | None = None,
                  clock: Callable[[], int] = wall_ms,
                  stop_event: threading.Event | None = None) -> InvocationRecord | None:
    """Run the client once and classify the outcome.

    Returns None only when ``stop_event`` fired mid-flight (the client is
    killed and the invocation is dropped).
    """
    if timeout <= 0:
        raise ValueError("timeout must be > 0")
    argv = shlex.split(command)
    start = clock()
    try:
        if not argv:
            raise FileNotFoundError("empty client command")
        proc = subprocess.Popen(argv, stdout=subprocess.DEVNULL,
                                stderr=subprocess.DEVNULL)
    except (OSError, ValueError) as err:
        log.debug("client failed to start: %s", err)
        return InvocationRecord(tester_id, sequence, start, max(start, clock()),
                                Outcome.START_FAILURE, latency_estimate, client_overhead)

    timeout_ms = int(timeout * 1000)
    outcome: Outcome | None = None
    while outcome is None:
        rc = proc.poll()
        if rc is not None:
            outcome = Outcome.SUCCESS if rc == 0 else Outcome.SERVICE_ERROR
            break
        if stop_event is not None and stop_event.is_set():
            _kill(proc)
            return None
        if clock() - start >= timeout_ms:
            _kill(proc)
            outcome = Outcome.TIMEOUT
            break
        if stop_event is not None:
            stop_event.wait(POLL_INTERVAL_S)
        else:
            time.sleep(POLL_INTERVAL_S)
    end = max(start, clock())
    if outcome is Outcome.TIMEOUT and end - start < timeout_ms:
        end = start + timeout_ms  # clock() granularity; the child did live that long
    return InvocationRecord(tester_id, sequence, start, end, outcome,
                            latency_estimate, client_overhead)


def _kill(proc: subprocess.Popen) -> None:
    try:
        proc.kill()
        proc.wait(timeout=10)
    except (OSError, subprocess.TimeoutExpired):
        pass


class TesterSession:
    """Drives one test description to completion, streaming records via ``emit``."""

    def __init__(self, description: TestDescription, tester_id: int = 1,
                 emit: EmitFn | None = None, *,
                 client_overhead: int | None = None,
                 clock: Callable[[], int] = wall_ms,
                 stop_event: threading.Event | None = None,
                 sync_fn: Callable[[], ClockOffset] | None = None,
                 latency_fn: Callable[[], int | None] | None = None):
        self.description = validate(description)
        self.tester_id = tester_id
        self.emit = emit or (lambda record, offset: None)
        self.client_overhead = client_overhead
        self.clock = clock
        self.stop_event = stop_event or threading.Event()
        self._sync_fn = sync_fn or self._default_sync
        self._latency_fn = latency_fn or (
            lambda: probe_target_latency(description.target_address))
        self.offset_history: list[ClockOffset] = []
        self.records_emitted = 0

    def _default_sync(self) -> ClockOffset:
        address = self.description.timeserver_address
        if address == "-":
            return ClockOffset(self.tester_id, 0, 0, self.clock())
        return timesync.sync_clock(address, tester_id=self.tester_id, clock=self.clock)

    def _sync(self, initial: bool = False) -> ClockOffset | None:
        attempts = 3 if initial else 1
        for attempt in range(attempts):
            try:
                offset = self._sync_fn()
            except OSError as err:
                log.warning("clock sync attempt %d failed: %s", attempt + 1, err)
                continue
            self.offset_history.append(offset)
            return offset
        return None

    def run(self) -> int:
        """Loop until the deadline (or stop); returns the number of records emitted."""
        d = self.description
        schedule = ResyncSchedule(d.sync_interval)
        offset = self._sync(initial=True)
        if offset is None:
            raise SyncFailure(f"cannot reach time server {d.timeserver_address}")
        schedule.mark(self.clock())
        latency = self._latency_fn()

        interval_ms = int(d.invocation_interval * 1000)
        session_start = self.clock()
        deadline = session_start + int(d.experiment_duration * 1000)
        rate = d.max_invocation_rate
        rate_window: list[int] = []  # recent start times, newest last
        command = d.client_command.replace("{target}", d.target_address)
        sequence = 1
        last_start: int | None = None

        while not self.stop_event.is_set():
            now = self.clock()
            gate = now
            if last_start is not None:
                gate = max(gate, last_start + interval_ms)
            if rate is not None:
                if rate >= 1:
                    cap = int(rate)  # starts allowed in any sliding second
                    if len(rate_window) >= cap:
                        gate = max(gate, rate_window[-cap] + 1000)
                elif last_start is not None:
                    gate = max(gate, last_start + int(1000 / rate))
            if gate >= deadline:
                break
            if gate > now and self.stop_event.wait((gate - now) / 1000.0):
                break
            start_at = self.clock()
            if start_at >= deadline:
                break
            record = invoke_client(
                command, d.client_timeout, tester_id=self.tester_id,
                sequence=sequence, latency_estimate=latency,
                client_overhead=self.client_overhead, clock=self.clock,
                stop_event=self.stop_event)
            if record is None:
                break  # stopped mid-flight; the invocation is dropped
            last_start = record.start_ms
            if rate is not None and rate >= 1:
                rate_window.append(record.start_ms)
                del rate_window[:-int(rate)]
            sequence += 1
            try:
                self.emit(record, offset)
                self.records_emitted += 1
            except (OSError, ValueError):
                log.warning("record sink gone; stopping session")
                break
            now = self.clock()
            if schedule.due(now):
                refreshed = self._sync()
                if refreshed is not None:
                    offset = refreshed
                    latency = self._latency_fn()
                schedule.mark(self.clock())
        return self.records_emitted


# ---------------------------------------------------------------------------
# agent drivers

def run_channel_agent(tester_id: int, heartbeat_interval: float = HEARTBEAT_INTERVAL,
                      stdin=None, stdout=None) -> int:
    """Drive a session over stdio: the spawning controller owns both pipes."""
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    write_lock = threading.Lock()
    stop_event = threading.Event()
    started = threading.Event()
    state: dict = {"description": None, "reason": None, "last_line": time.monotonic()}

    def send(line: str) -> None:
        with write_lock:
            stdout.write(line + "\n")
            stdout.flush()

    def reader() -> None:
        try:
            for raw in stdin:
                state["last_line"] = time.monotonic()
                line = raw.rstrip("\n")
                if line.startswith("START "):
                    try:
                        state["description"] = decode_description(line[len("START "):])
                        send("ACK")
                        started.set()
                    except Exception as err:
                        log.error("bad START payload: %s", err)
                        state["reason"] = "bad-start"
                        stop_event.set()
                        return
                elif line == "PING":
                    send("PONG")
                elif line == "STOP":
                    state["reason"] = "stopped"
                    stop_event.set()
                    return
        except (OSError, ValueError):
            pass
        state["reason"] = state["reason"] or "disconnect"
        stop_event.set()

    def watchdog() -> None:
        limit = MISSED_HEARTBEATS * heartbeat_interval
        while not stop_event.wait(heartbeat_interval / 4):
            if time.monotonic() - state["last_line"] > limit:
                state["reason"] = "controller-timeout"
                stop_event.set()
                return

    threading.Thread(target=reader, daemon=True, name="agent-reader").start()
    threading.Thread(target=watchdog, daemon=True, name="agent-watchdog").start()

    started.wait(timeout=MISSED_HEARTBEATS * heartbeat_interval)
    description = state["description"]
    if description is None:
        log.error("no START received; exiting (%s)", state["reason"])
        return 1

    def emit(record: InvocationRecord, offset: ClockOffset) -> None:
        send(format_wire_record(record, offset))

    session = TesterSession(description, tester_id=tester_id, emit=emit,
                            stop_event=stop_event)
    try:
        session.run()
    except SyncFailure as err:
        _try_send(send, "BYE sync-failed")
        log.error("%s", err)
        return 1
    reason = state["reason"]
    if reason is None:
        _try_send(send, "BYE done")
    elif reason == "stopped":
        _try_send(send, "BYE stopped")
    # on disconnect the pipe is gone; nothing to say
    log.info("session over (%s), %d records", reason or "done", session.records_emitted)
    return 0


def _try_send(send: Callable[[str], None], line: str) -> None:
    try:
        send(line)
    except (OSError, ValueError):
        pass


def calibrate_overhead(description: TestDescription, runs: int) -> int:
    """Median client duration against a throwaway no-op echo service, in ms.

    Requires the client command to carry a ``{target}`` placeholder so
    the measurement can be pointed away from the real target.
    """
    from .mock_target import MockService, ServiceModel

    if runs < 1:
        raise ValueError("calibration needs at least one run")
    echo = MockService(ServiceModel(slots=64, base_service_ms=1)).start()
    try:
        command = description.client_command.replace("{target}", echo.address)
        durations = []
        for seq in range(1, runs + 1):
            record = invoke_client(command, description.client_timeout, sequence=seq)
            if record is not None and record.outcome is Outcome.SUCCESS:
                durations.append(record.duration_ms)
        if not durations:
            raise RuntimeError("calibration produced no successful run")
        return int(statistics.median(durations))
    finally:
        echo.stop()


def run_standalone(description: TestDescription, out_path: str, tester_id: int = 1,
                   calibrate: int = 0) -> int:
    """Offline mode: run the session and write global-time record lines."""
    from .model import format_record_line
    from .timesync import to_global

    validate(description)
    overhead = calibrate_overhead(description, calibrate) if calibrate else None
    if calibrate:
        log.info("calibrated client overhead: %d ms", overhead)

    sink = sys.stdout if out_path == "-" else open(out_path, "w", encoding="ascii")
    try:
        def emit(record: InvocationRecord, offset: ClockOffset) -> None:
            mapped = InvocationRecord(
                record.tester_id, record.sequence,
                to_global(record.start_ms, offset), to_global(record.end_ms, offset),
                record.outcome, record.latency_estimate, record.client_overhead)
            sink.write(format_record_line(mapped) + "\n")
            sink.flush()

        session = TesterSession(description, tester_id=tester_id, emit=emit,
                                client_overhead=overhead)
        try:
            emitted = session.run()
        except SyncFailure as err:
            log.error("%s", err)
            return 1
        log.info("standalone session done, %d records", emitted)
        return 0
    finally:
        if sink is not sys.stdout:
            sink.close()
