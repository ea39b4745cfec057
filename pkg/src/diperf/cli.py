"""Single entry point: timeserver, tester, controller, mock service/client, analyze.

``DIPERF_LOG`` selects log verbosity (debug/info/warning/error); logs go
to stderr so they never pollute a control channel riding on stdio.
Subcommand modules are imported lazily to keep client-side process
startup cheap.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys


def _setup_logging() -> None:
    level = os.environ.get("DIPERF_LOG", "warning").strip().lower()
    numeric = {
        "debug": logging.DEBUG,
        "info": logging.INFO,
        "warning": logging.WARNING,
        "error": logging.ERROR,
    }.get(level, logging.WARNING)
    logging.basicConfig(
        level=numeric, stream=sys.stderr,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diperf",
        description="Distributed service load testing and metric aggregation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("timeserver", help="run the central time-stamp server")
    p.add_argument("--listen", required=True, metavar="HOST:PORT")

    p = sub.add_parser("tester", help="run a tester agent")
    p.add_argument("--controller", metavar="HOST:PORT",
                   help="channel mode: stdio carries the control channel")
    p.add_argument("--desc", metavar="FILE", help="standalone mode: description JSON")
    p.add_argument("--out", metavar="FILE", default="-",
                   help="standalone mode: record file destination ('-' = stdout)")
    p.add_argument("--id", type=int, default=1, help="tester id (assigned by launch order)")
    p.add_argument("--heartbeat", type=float, default=15.0,
                   help="controller heartbeat interval, seconds")
    p.add_argument("--calibrate", type=int, default=0, metavar="N",
                   help="standalone mode: measure client overhead over N echo runs")

    p = sub.add_parser("controller", help="run an experiment")
    p.add_argument("--targets", required=True, metavar="FILE",
                   help="candidate nodes, one 'node_id address backend' per line")
    p.add_argument("--client", required=True, metavar="FILE",
                   help="client code payload to distribute")
    p.add_argument("--target-service", required=True, metavar="HOST:PORT")
    p.add_argument("--timeserver", required=True, metavar="HOST:PORT")
    p.add_argument("--ramp", type=float, default=25.0,
                   help="seconds between tester launches")
    p.add_argument("--duration", type=float, default=3600.0,
                   help="per-tester session length, seconds")
    p.add_argument("--interval", type=float, default=1.0,
                   help="minimum gap between client starts, seconds")
    p.add_argument("--sync", type=float, default=300.0,
                   help="clock resynchronization period, seconds")
    p.add_argument("--timeout", type=float, default=120.0,
                   help="per-invocation client timeout, seconds")
    p.add_argument("--max-rate", type=float, default=None,
                   help="cap on client starts per second per tester")
    p.add_argument("--client-command", default="{payload} {target}",
                   help="client command template; {payload} and {target} are substituted")
    p.add_argument("--heartbeat", type=float, default=15.0)
    p.add_argument("--live-quantum", type=int, default=0,
                   help="emit live metric snapshots every N seconds (0 = off)")
    p.add_argument("--staging-dir", default=None)
    p.add_argument("--out", required=True, metavar="FILE")

    p = sub.add_parser("mock-service", help="run the built-in queueing target service")
    p.add_argument("--listen", required=True, metavar="HOST:PORT")
    p.add_argument("--slots", type=int, default=1)
    p.add_argument("--service-ms", type=float, default=700.0)
    p.add_argument("--queue", default="unbounded",
                   help="'unbounded' or the maximum number of waiting requests")
    p.add_argument("--service-dist", choices=["deterministic", "exponential"],
                   default="deterministic")
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("mock-client", help="one-shot client for the mock service")
    p.add_argument("target", metavar="HOST:PORT")
    p.add_argument("--timeout", type=float, default=600.0)

    p = sub.add_parser("analyze", help="aggregate a record file into a report bundle")
    p.add_argument("--records", required=True, metavar="FILE")
    p.add_argument("--out-dir", required=True, metavar="DIR")
    p.add_argument("--quantum-throughput", type=int, default=60)
    p.add_argument("--quantum-load", type=int, default=1)
    p.add_argument("--quantum-response", type=int, default=60)
    p.add_argument("--ma-window", type=int, default=160)
    p.add_argument("--poly-degree", type=int, default=6)
    p.add_argument("--latency-legs", type=int, choices=[1, 2], default=2,
                   help="latency multiples subtracted from response time")
    p.add_argument("--peak-window", default=None, metavar="START:END",
                   help="override peak window detection (global seconds)")

    return parser


def _cmd_timeserver(args) -> int:
    from .timesync import TimestampServer, parse_hostport

    host, port = parse_hostport(args.listen)
    server = TimestampServer(host, port)
    print(f"time server listening on {server.address}", file=sys.stderr)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def _cmd_tester(args) -> int:
    from . import tester
    from .model import TestDescription

    if args.desc:
        description = TestDescription.from_json(
            open(args.desc, "r", encoding="utf-8").read())
        return tester.run_standalone(description, args.out, tester_id=args.id,
                                     calibrate=args.calibrate)
    return tester.run_channel_agent(args.id, heartbeat_interval=args.heartbeat)


def _parse_nodes_file(path: str):
    from .transport import NodeEndpoint

    nodes = []
    with open(path, "r", encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            if len(fields) != 3:
                raise SystemExit(f"bad nodes line (want 'node_id address backend'): {line!r}")
            nodes.append(NodeEndpoint(fields[0], fields[1], fields[2]))
    return nodes


def _cmd_controller(args) -> int:
    from .controller import Controller, ExperimentError, ExperimentPlan
    from .model import TestDescription
    from .transport import Transport

    command = args.client_command.replace("{target}", args.target_service)
    description = TestDescription(
        experiment_duration=args.duration,
        invocation_interval=args.interval,
        sync_interval=args.sync,
        client_command=command,
        target_address=args.target_service,
        timeserver_address=args.timeserver,
        client_timeout=args.timeout,
        max_invocation_rate=args.max_rate,
    )
    plan = ExperimentPlan(
        description=description,
        candidates=tuple(_parse_nodes_file(args.targets)),
        ramp_delay=args.ramp,
        output_path=args.out,
        payload=args.client,
        heartbeat_interval=args.heartbeat,
        live_quantum=args.live_quantum,
    )
    transport = Transport(staging_root=args.staging_dir)
    try:
        summary = Controller(plan, transport=transport).run()
    except ExperimentError as err:
        print(f"experiment aborted: {err}", file=sys.stderr)
        return 1
    print(summary.to_text())
    return 0


def _cmd_mock_service(args) -> int:
    from .mock_target import MockService, ServiceModel
    from .timesync import parse_hostport

    queue = None if args.queue == "unbounded" else int(args.queue)
    model = ServiceModel(slots=args.slots, base_service_ms=args.service_ms,
                         queue_capacity=queue,
                         exponential=args.service_dist == "exponential",
                         seed=args.seed)
    host, port = parse_hostport(args.listen)
    server = MockService(model, host, port)
    print(f"mock service listening on {server.address}", file=sys.stderr)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def _cmd_mock_client(args) -> int:
    from .mock_target import mock_client

    return mock_client(args.target, timeout=args.timeout)


def _cmd_analyze(args) -> int:
    from .reports import run_analysis

    peak = None
    if args.peak_window:
        lo, _, hi = args.peak_window.partition(":")
        peak = (int(lo) * 1000, int(hi) * 1000)
    bundle = run_analysis(
        args.records, args.out_dir,
        quantum_throughput=args.quantum_throughput,
        quantum_load=args.quantum_load,
        quantum_response=args.quantum_response,
        ma_window=args.ma_window,
        poly_degree=args.poly_degree,
        latency_legs=args.latency_legs,
        peak_window=peak,
    )
    print(f"report bundle written to {bundle.out_dir}")
    return 0


_COMMANDS = {
    "timeserver": _cmd_timeserver,
    "tester": _cmd_tester,
    "controller": _cmd_controller,
    "mock-service": _cmd_mock_service,
    "mock-client": _cmd_mock_client,
    "analyze": _cmd_analyze,
}


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    return _COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
