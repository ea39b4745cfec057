import os
import stat
import sys

import pytest

from diperf.mock_target import MockService, ServiceModel
from diperf.timesync import TimestampServer

sys.path.insert(0, os.path.dirname(__file__))  # for oracles / harness imports


@pytest.fixture
def timeserver():
    server = TimestampServer().start()
    yield server
    server.stop()


@pytest.fixture
def mock_service_factory():
    servers = []

    def factory(slots=1, service_ms=100.0, queue_capacity=None, **kwargs):
        model = ServiceModel(slots=slots, base_service_ms=service_ms,
                             queue_capacity=queue_capacity, **kwargs)
        server = MockService(model).start()
        servers.append(server)
        return server

    yield factory
    for server in servers:
        server.stop()


def _write_script(path, body):
    path.write_text(body)
    path.chmod(path.stat().st_mode | stat.S_IEXEC)
    return str(path)


@pytest.fixture
def fake_remote(tmp_path):
    """ssh/scp stand-ins: hosts named dead-* fail, others run locally.

    Commands execute inside a private 'remote home' so relative staging
    paths stay contained.
    """
    home = tmp_path / "remote-home"
    home.mkdir()
    ssh = _write_script(tmp_path / "fake-ssh", f"""#!/bin/bash
while [ "$1" = "-o" ]; do shift 2; done
host="$1"; shift
case "$host" in dead-*) exit 255 ;; esac
cd {home} && exec sh -c "$*"
""")
    scp = _write_script(tmp_path / "fake-scp", f"""#!/bin/bash
while true; do
  case "$1" in
    -q) shift ;;
    -o) shift 2 ;;
    *) break ;;
  esac
done
src="$1"; dst="$2"
host="${{dst%%:*}}"; path="${{dst#*:}}"
case "$host" in dead-*) exit 1 ;; esac
cd {home} || exit 1
mkdir -p "$(dirname "$path")"
cp "$src" "$path"
""")
    return {"ssh": ssh, "scp": scp, "home": home}
