import random
import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diperf.timesync import (
    ResyncSchedule,
    TimeProbe,
    TimestampServer,
    estimate_offset,
    offset_for,
    parse_hostport,
    probe_once,
    sync_clock,
    to_global,
)
from diperf.model import ClockOffset


class TestEstimator:
    def test_single_probe_midpoint(self):
        off = estimate_offset([TimeProbe(1000, 5000, 1100)])
        assert off.offset == 3950
        assert off.uncertainty == 50

    def test_min_rtt_probe_wins(self):
        probes = [
            TimeProbe(0, 10_000, 160),        # rtt 160
            TimeProbe(1000, 11_040, 1040),    # rtt 40 <- winner
            TimeProbe(2000, 12_090, 2090),    # rtt 90
        ]
        off = estimate_offset(probes)
        best = estimate_offset([probes[1]])
        assert off.offset == best.offset
        assert off.uncertainty == 20

    def test_empty_probe_list_rejected(self):
        with pytest.raises(ValueError):
            estimate_offset([])

    @given(
        st.lists(
            st.tuples(st.integers(0, 10**9), st.integers(0, 10**7), st.integers(0, 2000)),
            min_size=1, max_size=20,
        ),
        st.integers(0, 10**9), st.integers(0, 10**7), st.integers(0, 5000),
    )
    @settings(max_examples=200, deadline=None)
    def test_larger_rtt_probe_never_changes_estimate(self, base, t0, server, extra):
        probes = [TimeProbe(t, t + s, t + r) for t, s, r in base]
        reference = estimate_offset(probes)
        worst = max(p.rtt for p in probes)
        bigger = TimeProbe(t0, t0 + server, t0 + worst + 1 + extra)
        assert estimate_offset(probes + [bigger]) == reference

    def test_symmetric_simulation_recovers_offset_within_latency(self):
        # a tester whose clock is 4,000,000 ms behind global, one-way <= 80ms
        rng = random.Random(7)
        true_offset = 4_000_000
        probes = []
        for _ in range(5):
            t0 = rng.randrange(0, 100_000)
            latency = rng.randrange(0, 81)
            server = t0 + true_offset + latency
            t1 = t0 + 2 * latency
            probes.append(TimeProbe(t0, server, t1))
        estimated = estimate_offset(probes)
        assert abs(estimated.offset - true_offset) <= 80

    def test_asymmetric_error_bounded_by_worst_leg(self):
        true_offset = -2_500_000
        for f, b in [(10, 31), (80, 0), (0, 80), (45, 44), (120, 61)]:
            t0 = 50_000
            probe = TimeProbe(t0, t0 + true_offset + f, t0 + f + b)
            est = estimate_offset([probe])
            assert abs(est.offset - true_offset) <= max(f, b)

    def test_asymmetric_error_is_half_the_leg_difference(self):
        # forward f, backward b: the midpoint estimate misses truth by (f-b)/2
        true_offset = 777_000
        for f, b in [(10, 30), (80, 0), (0, 80), (44, 44), (120, 60)]:
            t0 = 1_000
            probe = TimeProbe(t0, t0 + true_offset + f, t0 + f + b)
            est = estimate_offset([probe])
            assert est.offset - true_offset == (f - b) // 2


class TestMapping:
    def test_identity(self):
        assert to_global(0, ClockOffset(1, 0, 0, 0)) == 0

    def test_arithmetic(self):
        assert to_global(1000, ClockOffset(1, -250, 5, 0)) == 750

    @given(st.integers(-10**12, 10**12), st.integers(-10**12, 10**12),
           st.integers(-10**10, 10**10))
    @settings(max_examples=100, deadline=None)
    def test_order_preserved(self, a, b, offset_ms):
        if a == b:
            return
        lo, hi = min(a, b), max(a, b)
        off = ClockOffset(1, offset_ms, 0, 0)
        assert to_global(lo, off) < to_global(hi, off)

    def test_offset_for_picks_latest_preceding(self):
        history = [ClockOffset(1, o, 0, measured) for o, measured in
                   [(10, 0), (20, 1000), (30, 5000)]]
        assert offset_for(history, 0).offset == 10
        assert offset_for(history, 999).offset == 10
        assert offset_for(history, 1000).offset == 20
        assert offset_for(history, 10_000).offset == 30

    def test_offset_for_none_before_first(self):
        history = [ClockOffset(1, 10, 0, 500)]
        assert offset_for(history, 499) is None

    def test_offset_for_replay_oracle(self):
        rng = random.Random(3)
        history = []
        t = 0
        for _ in range(40):
            t += rng.randrange(1, 1000)
            history.append(ClockOffset(1, rng.randrange(-10**6, 10**6), 0, t))
        rng.shuffle(history)
        for _ in range(300):
            query = rng.randrange(0, 45_000)
            expected = None
            for off in history:
                if off.measured_at_local <= query and (
                        expected is None
                        or off.measured_at_local > expected.measured_at_local):
                    expected = off
            assert offset_for(history, query) == expected


class TestResyncSchedule:
    def test_hour_at_five_minutes_gives_about_twelve_probes(self):
        schedule = ResyncSchedule(300)
        clock = 0
        syncs = 0
        while clock < 3_600_000:
            if schedule.due(clock):
                syncs += 1
                schedule.mark(clock)
            clock += 1_500  # invocation every 1.5s
        assert 11 <= syncs <= 13

    def test_interval_longer_than_session_gives_one_probe(self):
        schedule = ResyncSchedule(7200)
        syncs = 0
        for clock in range(0, 3_600_000, 1000):
            if schedule.due(clock):
                syncs += 1
                schedule.mark(clock)
        assert syncs == 1

    def test_rejects_nonpositive_interval(self):
        with pytest.raises(ValueError):
            ResyncSchedule(0)


class TestServer:
    def test_sequential_probes_monotone(self, timeserver):
        first = probe_once(timeserver.address)
        second = probe_once(timeserver.address)
        assert second.server_time >= first.server_time

    def test_probe_shape(self, timeserver):
        probe = probe_once(timeserver.address)
        assert probe.recv_local >= probe.send_local
        assert probe.rtt < 5000

    def test_hundred_concurrent_clients_all_served(self, timeserver):
        results = []
        errors = []

        def worker():
            try:
                results.append(probe_once(timeserver.address, timeout=10))
            except OSError as err:  # pragma: no cover - would fail the test
                errors.append(err)

        threads = [threading.Thread(target=worker) for _ in range(100)]
        for t in threads:
            t.start()
        for t in threads:
            t.join(timeout=30)
        assert not errors
        assert len(results) == 100

    def test_dead_server_raises(self):
        with pytest.raises(OSError):
            probe_once("127.0.0.1:1", timeout=0.5)

    def test_sync_clock_small_offset_on_same_host(self, timeserver):
        off = sync_clock(timeserver.address, tester_id=4)
        assert off.tester_id == 4
        assert abs(off.offset) <= off.uncertainty + 50

    def test_sync_clock_dead_server(self):
        with pytest.raises(OSError):
            sync_clock("127.0.0.1:1", timeout=0.3)

    def test_parse_hostport(self):
        assert parse_hostport("10.0.0.1:99") == ("10.0.0.1", 99)
        with pytest.raises(ValueError):
            parse_hostport("nocolon")
