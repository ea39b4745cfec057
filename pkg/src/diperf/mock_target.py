"""A configurable stand-in target service with a matching one-shot client.

The service models m concurrent servers with a FIFO queue: a request
(``JOB\\n``) waits for a free slot in strict arrival order, holds it for
the service time, then gets ``DONE\\n``.  With a bounded queue, requests
arriving beyond slots+queue are refused immediately with ``BUSY\\n`` (the
client exits nonzero), so a saturated deployment either degrades
gracefully into growing latency (unbounded queue) or collapses into
failures (bounded queue).

Long-run throughput can never exceed slots / service_time, and strict
FIFO hands continuously backlogged clients near-identical job counts.
"""

from __future__ import annotations

import logging
import random
import socket
import socketserver
import threading
import time
from collections import deque
from dataclasses import dataclass

from .timesync import parse_hostport

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_REFUSED = 2   # service answered BUSY (or garbage)
EXIT_NO_SERVICE = 3


@dataclass(frozen=True)
class ServiceModel:
    """Sizing of the mock service: m slots, fixed service time, FIFO queue."""

    slots: int
    base_service_ms: float
    queue_capacity: int | None = None  # None = unbounded
    exponential: bool = False          # draw service times ~ Exp(base) instead of fixed
    seed: int | None = None

    def __post_init__(self):
        if self.slots < 1:
            raise ValueError("slots must be >= 1")
        if self.base_service_ms <= 0:
            raise ValueError("base_service_ms must be > 0")
        if self.queue_capacity is not None and self.queue_capacity < 0:
            raise ValueError("queue_capacity must be >= 0")


class _SlotPool:
    """Strict-FIFO admission to ``slots`` servers with an optional queue bound."""

    def __init__(self, model: ServiceModel):
        self.model = model
        self._cond = threading.Condition()
        self._waiting: deque[int] = deque()
        self._in_service = 0
        self._next_ticket = 0

    def acquire(self) -> bool:
        """Block FIFO until a slot is free; False if refused at arrival."""
        with self._cond:
            busy = self._in_service >= self.model.slots
            if (
                self.model.queue_capacity is not None
                and busy
                and len(self._waiting) >= self.model.queue_capacity
            ):
                return False
            ticket = self._next_ticket
            self._next_ticket += 1
            self._waiting.append(ticket)
            while not (self._waiting[0] == ticket and self._in_service < self.model.slots):
                self._cond.wait()
            self._waiting.popleft()
            self._in_service += 1
            self._cond.notify_all()
            return True

    def release(self) -> None:
        with self._cond:
            self._in_service -= 1
            self._cond.notify_all()


class _JobHandler(socketserver.StreamRequestHandler):
    def handle(self):
        server: MockService = self.server  # type: ignore[assignment]
        try:
            line = self.rfile.readline(64).decode("ascii", "replace").strip()
        except OSError:
            return
        if line != "JOB":
            # latency probes just connect and close; don't occupy a slot
            return
        if not server.pool.acquire():
            self._reply(b"BUSY\n")
            return
        try:
            time.sleep(server.draw_service_s())
        finally:
            server.pool.release()
        self._reply(b"DONE\n")

    def _reply(self, payload: bytes) -> None:
        try:
            self.wfile.write(payload)
        except OSError:
            pass  # client gave up; slot accounting already settled


class MockService(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True
    request_queue_size = 256

    def __init__(self, model: ServiceModel, host: str = "127.0.0.1", port: int = 0):
        super().__init__((host, port), _JobHandler)
        self.model = model
        self.pool = _SlotPool(model)
        self._rng = random.Random(model.seed)
        self._thread: threading.Thread | None = None

    def draw_service_s(self) -> float:
        base_s = self.model.base_service_ms / 1000.0
        if self.model.exponential:
            return self._rng.expovariate(1.0 / base_s)
        return base_s

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def start(self) -> "MockService":
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()
        if self._thread:
            self._thread.join(timeout=5)


def request_job(address: str, timeout: float = 600.0) -> str:
    """Send one JOB and return the service's one-line verdict (DONE/BUSY)."""
    host, port = parse_hostport(address)
    with socket.create_connection((host, port), timeout=timeout) as sock:
        sock.sendall(b"JOB\n")
        reply = b""
        while not reply.endswith(b"\n"):
            chunk = sock.recv(64)
            if not chunk:
                break
            reply += chunk
    return reply.decode("ascii", "replace").strip()


def mock_client(address: str, timeout: float = 600.0) -> int:
    """One RPC-like call: exit 0 on DONE, nonzero on refusal or no service."""
    try:
        verdict = request_job(address, timeout=timeout)
    except OSError as err:
        log.debug("mock client could not reach %s: %s", address, err)
        return EXIT_NO_SERVICE
    return EXIT_OK if verdict == "DONE" else EXIT_REFUSED
