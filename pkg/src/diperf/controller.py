"""Experiment orchestration: launch testers, collect records, track liveness.

Testers are launched in ID order with a fixed ramp delay, building load
gradually.  Each control channel gets a reader thread; record lines are
converted to global time using the clock offset they carry and appended
to the output file behind a single writer lock.  A heartbeat thread
pings every active tester; one that misses two heartbeats (or whose
channel closes without a clean goodbye) is moved to the failed set, its
history is kept, and nothing more is accepted from it.
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .model import InvocationRecord, Outcome, TestDescription, validate
from .timesync import to_global, wall_ms
from .transport import (
    HEARTBEAT_INTERVAL,
    MISSED_HEARTBEATS,
    ChannelClosed,
    DeployReport,
    LineChannel,
    NodeEndpoint,
    Transport,
    encode_description,
    parse_wire_record,
)

log = logging.getLogger(__name__)

ACK_TIMEOUT = 30.0


class ExperimentError(RuntimeError):
    """The experiment could not run at all (e.g. no testers available)."""


@dataclass(frozen=True)
class ExperimentPlan:
    description: TestDescription
    candidates: tuple[NodeEndpoint, ...]
    ramp_delay: float  # seconds between tester launches
    output_path: str
    payload: str | None = None         # client code file to distribute
    heartbeat_interval: float = HEARTBEAT_INTERVAL
    live_quantum: int = 0              # seconds between live snapshots; 0 = off
    probe_timeout: float = 5.0

    def __post_init__(self):
        if self.ramp_delay < 0:
            raise ValueError("ramp_delay must be >= 0")
        if not self.candidates:
            raise ValueError("at least one candidate node is required")


@dataclass
class TesterHandle:
    tester_id: int
    node: NodeEndpoint
    channel: LineChannel
    launched_at: float           # controller monotonic seconds
    last_seen: float
    state: str = "launched"      # launched -> active -> finished | failed
    records: int = 0
    failure_reason: str | None = None
    failed_at_ms: int | None = None  # controller clock, global ms


class ReporterRegistry:
    """Tracks which testers may still report; a tester is in exactly one state."""

    def __init__(self):
        self._lock = threading.Lock()
        self._handles: dict[int, TesterHandle] = {}

    def add(self, handle: TesterHandle) -> None:
        with self._lock:
            self._handles[handle.tester_id] = handle

    def get(self, tester_id: int) -> TesterHandle | None:
        with self._lock:
            return self._handles.get(tester_id)

    def handles(self) -> list[TesterHandle]:
        with self._lock:
            return list(self._handles.values())

    def accepts(self, tester_id: int) -> bool:
        with self._lock:
            handle = self._handles.get(tester_id)
            return handle is not None and handle.state in ("launched", "active")

    def mark_active(self, tester_id: int) -> None:
        with self._lock:
            handle = self._handles.get(tester_id)
            if handle and handle.state == "launched":
                handle.state = "active"

    def mark_finished(self, tester_id: int) -> None:
        with self._lock:
            handle = self._handles.get(tester_id)
            if handle and handle.state in ("launched", "active"):
                handle.state = "finished"

    def mark_failed(self, tester_id: int, reason: str, at_ms: int) -> TesterHandle | None:
        """Move to failed; idempotent, unknown IDs are ignored with a log entry."""
        with self._lock:
            handle = self._handles.get(tester_id)
            if handle is None:
                log.warning("failure notice for unknown tester %d (%s)", tester_id, reason)
                return None
            if handle.state in ("failed", "finished"):
                return None
            handle.state = "failed"
            handle.failure_reason = reason
            handle.failed_at_ms = at_ms
            return handle

    def all_terminal(self) -> bool:
        with self._lock:
            return all(h.state in ("failed", "finished") for h in self._handles.values())


@dataclass(frozen=True)
class LiveSnapshot:
    time_ms: int
    records_total: int
    throughput_per_min: float
    load: int
    mean_response_ms: float

    def csv_row(self) -> str:
        return (f"{self.time_ms // 1000},{self.records_total},"
                f"{self.throughput_per_min:.2f},{self.load},{self.mean_response_ms:.1f}")


class LiveView:
    """Rolling metrics over records received so far; advisory only.

    Values may be revised as late records arrive; the offline analysis
    pass is authoritative.  Per-quantum counts here can only grow toward
    the final analysis totals, never beyond them.
    """

    CSV_HEADER = "time,records,throughput_per_min,load,mean_response_ms"

    def __init__(self, quantum: int = 60):
        if quantum <= 0:
            raise ValueError("quantum must be > 0")
        self.quantum = quantum
        self._lock = threading.Lock()
        self._records: list[InvocationRecord] = []

    def add(self, record: InvocationRecord) -> None:
        with self._lock:
            self._records.append(record)

    def snapshot(self, now_ms: int) -> LiveSnapshot:
        window_ms = self.quantum * 1000
        lo = now_ms - window_ms
        with self._lock:
            records = list(self._records)
        completions = [r for r in records
                       if r.outcome is Outcome.SUCCESS and lo <= r.end_ms < now_ms]
        in_flight = sum(1 for r in records if r.start_ms <= now_ms < r.end_ms)
        throughput = len(completions) * 60_000 / window_ms
        mean_rt = (sum(r.duration_ms for r in completions) / len(completions)
                   if completions else 0.0)
        return LiveSnapshot(now_ms, len(records), throughput, in_flight, mean_rt)


@dataclass
class ExperimentSummary:
    output_path: str
    total_records: int
    span_ms: int
    records_per_tester: dict[int, int] = field(default_factory=dict)
    finished: list[int] = field(default_factory=list)
    failures: list[tuple[int, str, int]] = field(default_factory=list)
    deploy_failures: list[DeployReport] = field(default_factory=list)
    launch_times: list[float] = field(default_factory=list)

    def to_text(self) -> str:
        lines = [
            f"records: {self.total_records} -> {self.output_path}",
            f"wall-clock span: {self.span_ms / 1000:.1f}s",
            f"testers finished: {sorted(self.finished)}",
        ]
        for tid in sorted(self.records_per_tester):
            lines.append(f"  tester {tid}: {self.records_per_tester[tid]} records")
        for tid, reason, at_ms in self.failures:
            lines.append(f"  FAILED tester {tid}: {reason} at {at_ms}")
        for report in self.deploy_failures:
            lines.append(f"  DEPLOY FAILED {report.node_id}: {report.error}")
        return "\n".join(lines)


class Controller:
    """Runs one experiment plan end to end."""

    def __init__(self, plan: ExperimentPlan, transport: Transport | None = None,
                 live_stream=None):
        validate(plan.description)
        self.plan = plan
        self.transport = transport or Transport()
        self.registry = ReporterRegistry()
        self.live = LiveView(plan.live_quantum) if plan.live_quantum else None
        self._live_stream = live_stream
        self._write_lock = threading.Lock()
        self._sink = None
        self._stop = threading.Event()
        self._started_at_ms: int | None = None

    # -- failure handling ----------------------------------------------

    def on_tester_failure(self, tester_id: int, reason: str) -> None:
        handle = self.registry.mark_failed(tester_id, reason, wall_ms())
        if handle is not None:
            log.warning("tester %d failed: %s", tester_id, reason)
            handle.channel.close(kill=True)

    # -- record intake ---------------------------------------------------

    def _persist(self, record: InvocationRecord) -> None:
        from .model import format_record_line
        with self._write_lock:
            self._sink.write(format_record_line(record) + "\n")
            self._sink.flush()

    def _reader(self, handle: TesterHandle) -> None:
        tid = handle.tester_id
        while not self._stop.is_set():
            try:
                line = handle.channel.recv(timeout=1.0)
            except TimeoutError:
                continue
            except ChannelClosed:
                if self.registry.accepts(tid):
                    self.on_tester_failure(tid, "disconnect")
                return
            handle.last_seen = time.monotonic()
            if line == "ACK":
                self.registry.mark_active(tid)
            elif line == "PONG":
                pass
            elif line.startswith("REC "):
                if not self.registry.accepts(tid):
                    log.debug("dropping record from non-active tester %d", tid)
                    continue
                try:
                    record, offset = parse_wire_record(line)
                except ValueError as err:
                    log.warning("tester %d sent a bad record line: %s", tid, err)
                    continue
                mapped = InvocationRecord(
                    tid, record.sequence,
                    to_global(record.start_ms, offset), to_global(record.end_ms, offset),
                    record.outcome, record.latency_estimate, record.client_overhead)
                self._persist(mapped)
                handle.records += 1
                if self.live:
                    self.live.add(mapped)
            elif line.startswith("BYE"):
                reason = line[4:].strip() or "done"
                if reason in ("done", "stopped"):
                    self.registry.mark_finished(tid)
                else:
                    self.on_tester_failure(tid, f"bye: {reason}")
                return
            else:
                log.debug("tester %d: unexpected line %r", tid, line)

    # -- liveness ----------------------------------------------------------

    def _heartbeat_loop(self) -> None:
        interval = self.plan.heartbeat_interval
        while not self._stop.wait(interval):
            for handle in self.registry.handles():
                if handle.state not in ("launched", "active"):
                    continue
                try:
                    handle.channel.send("PING")
                except ChannelClosed:
                    self.on_tester_failure(handle.tester_id, "disconnect")
                    continue
                if time.monotonic() - handle.last_seen > MISSED_HEARTBEATS * interval:
                    self.on_tester_failure(handle.tester_id, "heartbeat-timeout")

    def _live_loop(self) -> None:
        stream = self._live_stream
        print(LiveView.CSV_HEADER, file=stream, flush=True)
        while not self._stop.wait(self.plan.live_quantum):
            print(self.live.snapshot(wall_ms()).csv_row(), file=stream, flush=True)

    # -- launch -------------------------------------------------------------

    def _agent_args(self, tester_id: int) -> list[str]:
        return ["tester", "--id", str(tester_id),
                "--heartbeat", str(self.plan.heartbeat_interval)]

    def _description_for(self, staged_payload: str | None) -> TestDescription:
        d = self.plan.description
        if staged_payload is None or "{payload}" not in d.client_command:
            return d
        return TestDescription(
            d.experiment_duration, d.invocation_interval, d.sync_interval,
            d.client_command.replace("{payload}", staged_payload),
            d.target_address, d.timeserver_address, d.client_timeout,
            d.max_invocation_rate)

    def _launch(self, tester_id: int, node: NodeEndpoint,
                staged_payload: str | None, readers: list[threading.Thread]) -> None:
        channel = self.transport.open_control_channel(node, self._agent_args(tester_id))
        handle = TesterHandle(tester_id, node, channel,
                              launched_at=time.monotonic(), last_seen=time.monotonic())
        self.registry.add(handle)
        description = self._description_for(staged_payload)
        try:
            channel.send(f"START {encode_description(description)}")
        except ChannelClosed:
            self.on_tester_failure(tester_id, "launch-failed")
            return
        reader = threading.Thread(target=self._reader, args=(handle,),
                                  daemon=True, name=f"reader-{tester_id}")
        reader.start()
        readers.append(reader)

    # -- main ---------------------------------------------------------------

    def run(self) -> ExperimentSummary:
        plan = self.plan
        started_ms = wall_ms()
        self._started_at_ms = started_ms

        available = self.transport.probe_availability(
            list(plan.candidates), timeout=plan.probe_timeout)
        if not available:
            raise ExperimentError("no candidate node is available")
        log.info("%d/%d candidate nodes available", len(available), len(plan.candidates))

        deploy_failures: list[DeployReport] = []
        staged: dict[str, str] = {}
        if plan.payload is not None:
            if not Path(plan.payload).is_file():
                raise ExperimentError(f"client payload not readable: {plan.payload}")
            reports = self.transport.distribute_code(plan.payload, available)
            deployed = []
            for node, report in zip(available, reports):
                if report.ok:
                    staged[node.node_id] = report.staged_path
                    deployed.append(node)
                else:
                    deploy_failures.append(report)
            available = deployed
            if not available:
                raise ExperimentError("client code could not be deployed anywhere")

        self._sink = open(plan.output_path, "w", encoding="ascii")
        readers: list[threading.Thread] = []
        launch_times: list[float] = []
        heartbeat = threading.Thread(target=self._heartbeat_loop, daemon=True,
                                     name="heartbeat")
        heartbeat.start()
        live_thread = None
        if self.live:
            live_thread = threading.Thread(target=self._live_loop, daemon=True,
                                           name="live-view")
            live_thread.start()

        try:
            for index, node in enumerate(available):
                if index > 0 and plan.ramp_delay > 0:
                    if self._stop.wait(plan.ramp_delay):
                        break
                tester_id = index + 1
                launch_times.append(time.monotonic())
                self._launch(tester_id, node, staged.get(node.node_id), readers)
                log.info("launched tester %d on %s", tester_id, node.node_id)

            while not self.registry.all_terminal():
                time.sleep(0.2)
        except KeyboardInterrupt:
            log.warning("interrupted; sending STOP to all testers")
            for handle in self.registry.handles():
                try:
                    handle.channel.send("STOP")
                except ChannelClosed:
                    pass
            deadline = time.monotonic() + 10
            while not self.registry.all_terminal() and time.monotonic() < deadline:
                time.sleep(0.2)
        finally:
            self._stop.set()
            for handle in self.registry.handles():
                handle.channel.close(kill=True)
            for reader in readers:
                reader.join(timeout=5)
            heartbeat.join(timeout=5)
            if live_thread:
                live_thread.join(timeout=5)
            with self._write_lock:
                self._sink.close()

        handles = self.registry.handles()
        summary = ExperimentSummary(
            output_path=plan.output_path,
            total_records=sum(h.records for h in handles),
            span_ms=wall_ms() - started_ms,
            records_per_tester={h.tester_id: h.records for h in handles},
            finished=[h.tester_id for h in handles if h.state == "finished"],
            failures=[(h.tester_id, h.failure_reason or "?", h.failed_at_ms or 0)
                      for h in handles if h.state == "failed"],
            deploy_failures=deploy_failures,
            launch_times=launch_times,
        )
        return summary


def run_experiment(plan: ExperimentPlan, transport: Transport | None = None) -> ExperimentSummary:
    return Controller(plan, transport=transport).run()
