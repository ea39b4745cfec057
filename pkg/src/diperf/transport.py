"""Moves client code to nodes and carries the control/metric channels.

Two interchangeable backends: ``local`` spawns tester agents as child
processes with pipes standing in for the remote shell, ``ssh`` shells
out to the system ssh/scp executables.  Either way a control channel is
a line-oriented duplex stream: whole lines, in order, with closure
detectable from both ends.

Channel protocol, controller->tester: ``START <base64(description)>``,
``PING``, ``STOP``.  Tester->controller: ``ACK``, ``PONG``,
``REC ... OFF <offset_ms> <uncertainty_ms>`` (a record line with local
timestamps plus the governing clock offset), ``BYE <reason>``.  The
controller pings every HEARTBEAT_INTERVAL seconds; a tester that sees
nothing for two intervals treats the controller as gone.
"""

from __future__ import annotations

import base64
import hashlib
import logging
import os
import queue
import shutil
import subprocess
import sys
import tempfile
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .model import ClockOffset, InvocationRecord, TestDescription, format_record_line, parse_record_line

log = logging.getLogger(__name__)

HEARTBEAT_INTERVAL = 15.0  # seconds between controller PINGs
MISSED_HEARTBEATS = 2      # tolerated before either side declares disconnect

BACKENDS = ("local", "ssh")


@dataclass(frozen=True)
class NodeEndpoint:
    """A candidate tester node."""

    node_id: str
    address: str  # host or host:port; ignored by the local backend
    backend: str = "local"

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ValueError(f"unknown backend {self.backend!r}")


@dataclass(frozen=True)
class DeployReport:
    node_id: str
    ok: bool
    staged_path: str | None = None
    sha256: str | None = None
    error: str | None = None


class ChannelClosed(ConnectionError):
    """The peer went away; no more lines will arrive."""


class LineChannel:
    """Duplex line stream over a child process's stdin/stdout.

    Reads are pumped by a daemon thread into a queue, so ``recv`` can
    time out without losing data; writes are serialized and flushed per
    line, so no partial or interleaved line is ever delivered.
    """

    _EOF = object()

    def __init__(self, proc: subprocess.Popen, name: str = "?"):
        self.proc = proc
        self.name = name
        self._lines: queue.Queue = queue.Queue()
        self._send_lock = threading.Lock()
        self._eof = threading.Event()
        self._reader = threading.Thread(target=self._pump, daemon=True,
                                        name=f"chan-read-{name}")
        self._reader.start()

    def _pump(self) -> None:
        try:
            for raw in self.proc.stdout:  # type: ignore[union-attr]
                self._lines.put(raw.rstrip("\n"))
        except (OSError, ValueError):
            pass
        self._eof.set()
        self._lines.put(self._EOF)

    def send(self, line: str) -> None:
        if "\n" in line:
            raise ValueError("a channel line may not contain newlines")
        try:
            with self._send_lock:
                self.proc.stdin.write(line + "\n")  # type: ignore[union-attr]
                self.proc.stdin.flush()             # type: ignore[union-attr]
        except (OSError, ValueError) as err:
            raise ChannelClosed(f"channel {self.name}: peer gone ({err})") from err

    def recv(self, timeout: float | None = None) -> str:
        """Next line; raises TimeoutError or ChannelClosed."""
        try:
            item = self._lines.get(timeout=timeout)
        except queue.Empty:
            raise TimeoutError(f"channel {self.name}: no line within {timeout}s") from None
        if item is self._EOF:
            self._lines.put(self._EOF)  # keep the channel observably closed
            raise ChannelClosed(f"channel {self.name}: closed")
        return item

    @property
    def closed(self) -> bool:
        return self._eof.is_set() and self._lines.qsize() <= 1

    def close(self, kill: bool = False) -> None:
        try:
            self.proc.stdin.close()  # type: ignore[union-attr]
        except OSError:
            pass
        if kill and self.proc.poll() is None:
            self.proc.kill()
        try:
            self.proc.wait(timeout=10)
        except subprocess.TimeoutExpired:
            self.proc.kill()


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


class Transport:
    """Backend-dispatching facade for probing, staging, and channels."""

    def __init__(self, staging_root: str | None = None,
                 ssh_binary: str = "ssh", scp_binary: str = "scp",
                 python: str | None = None):
        self.staging_root = Path(staging_root) if staging_root else Path(
            tempfile.mkdtemp(prefix="diperf-stage-"))
        self.ssh_binary = ssh_binary
        self.scp_binary = scp_binary
        self.python = python or sys.executable

    # -- availability ------------------------------------------------

    def _probe_argv(self, node: NodeEndpoint, timeout: float) -> list[str]:
        if node.backend == "local":
            return ["true"]
        return self._ssh_argv(node, timeout) + ["true"]

    def _ssh_argv(self, node: NodeEndpoint, timeout: float) -> list[str]:
        return [
            self.ssh_binary,
            "-o", "BatchMode=yes",
            "-o", f"ConnectTimeout={max(1, int(timeout))}",
            node.address,
        ]

    def probe_availability(self, candidates: Sequence[NodeEndpoint],
                           timeout: float = 5.0) -> list[NodeEndpoint]:
        """Nodes that answered a trivial command in time, input order kept."""
        if timeout <= 0:
            raise ValueError("timeout must be > 0")
        available = []
        for node in candidates:
            try:
                result = subprocess.run(
                    self._probe_argv(node, timeout),
                    timeout=timeout, capture_output=True)
                ok = result.returncode == 0
            except (subprocess.TimeoutExpired, OSError):
                ok = False
            if ok:
                available.append(node)
            else:
                log.info("node %s (%s) unavailable", node.node_id, node.address)
        return available

    # -- code distribution --------------------------------------------

    def node_staging_dir(self, node: NodeEndpoint) -> str:
        if node.backend == "local":
            return str(self.staging_root / node.node_id)
        return f".diperf-stage/{node.node_id}"

    def distribute_code(self, payload: str | Path,
                        nodes: Sequence[NodeEndpoint]) -> list[DeployReport]:
        """Copy the payload to each node's staging dir; per-node failures don't abort."""
        payload = Path(payload)
        source_digest = _sha256(payload)
        reports = []
        for node in nodes:
            try:
                if node.backend == "local":
                    reports.append(self._stage_local(node, payload, source_digest))
                else:
                    reports.append(self._stage_ssh(node, payload, source_digest))
            except Exception as err:  # per-node isolation
                reports.append(DeployReport(node.node_id, ok=False, error=str(err)))
        return reports

    def _stage_local(self, node: NodeEndpoint, payload: Path, digest: str) -> DeployReport:
        dest_dir = Path(self.node_staging_dir(node))
        dest_dir.mkdir(parents=True, exist_ok=True)
        dest = dest_dir / payload.name
        shutil.copy2(payload, dest)
        staged = _sha256(dest)
        if staged != digest:
            return DeployReport(node.node_id, ok=False, staged_path=str(dest),
                                error="checksum mismatch after copy")
        return DeployReport(node.node_id, ok=True, staged_path=str(dest), sha256=staged)

    def _stage_ssh(self, node: NodeEndpoint, payload: Path, digest: str,
                   timeout: float = 60.0) -> DeployReport:
        dest_dir = self.node_staging_dir(node)
        dest = f"{dest_dir}/{payload.name}"
        mkdir = subprocess.run(
            self._ssh_argv(node, timeout) + [f"mkdir -p {dest_dir}"],
            timeout=timeout, capture_output=True, text=True)
        if mkdir.returncode != 0:
            return DeployReport(node.node_id, ok=False,
                                error=f"mkdir failed: {mkdir.stderr.strip()}")
        copy = subprocess.run(
            [self.scp_binary, "-q", "-o", "BatchMode=yes",
             str(payload), f"{node.address}:{dest}"],
            timeout=timeout, capture_output=True, text=True)
        if copy.returncode != 0:
            return DeployReport(node.node_id, ok=False,
                                error=f"copy failed: {copy.stderr.strip()}")
        check = subprocess.run(
            self._ssh_argv(node, timeout) + [f"sha256sum {dest}"],
            timeout=timeout, capture_output=True, text=True)
        remote_digest = check.stdout.split()[0] if check.returncode == 0 and check.stdout else None
        if remote_digest is not None and remote_digest != digest:
            return DeployReport(node.node_id, ok=False, staged_path=dest,
                                error="checksum mismatch after copy")
        return DeployReport(node.node_id, ok=True, staged_path=dest,
                            sha256=remote_digest or digest)

    # -- control channels ---------------------------------------------

    def open_control_channel(self, node: NodeEndpoint,
                             agent_args: Sequence[str]) -> LineChannel:
        """Launch the agent on the node; its stdio is the channel."""
        if node.backend == "local":
            argv = [self.python, "-u", "-m", "diperf", *agent_args]
        else:
            remote = " ".join(["python3", "-u", "-m", "diperf", *agent_args])
            argv = self._ssh_argv(node, 15.0) + [remote]
        proc = subprocess.Popen(
            argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
            stderr=None, text=True, bufsize=1)
        return LineChannel(proc, name=node.node_id)


# -- wire helpers for the REC ... OFF line ------------------------------

def format_wire_record(record: InvocationRecord, offset: ClockOffset) -> str:
    return f"{format_record_line(record)} OFF {offset.offset} {offset.uncertainty}"


def parse_wire_record(line: str) -> tuple[InvocationRecord, ClockOffset]:
    head, sep, tail = line.partition(" OFF ")
    if not sep:
        raise ValueError(f"wire record without OFF fields: {line!r}")
    record = parse_record_line(head)
    fields = tail.split()
    if len(fields) != 2:
        raise ValueError(f"malformed OFF fields: {line!r}")
    offset = ClockOffset(
        tester_id=record.tester_id,
        offset=int(fields[0]),
        uncertainty=int(fields[1]),
        measured_at_local=record.start_ms,  # governing offset precedes the start
    )
    return record, offset


def encode_description(description: TestDescription) -> str:
    return base64.b64encode(description.to_json().encode("utf-8")).decode("ascii")


def decode_description(blob: str) -> TestDescription:
    return TestDescription.from_json(base64.b64decode(blob).decode("utf-8"))
