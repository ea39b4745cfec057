import random

import pytest

from diperf.model import (
    ClientStats,
    ClockOffset,
    InvocationRecord,
    MetricSeries,
    Outcome,
    TestDescription,
    ValidationError,
    format_record_line,
    parse_record_line,
    validate,
)
from fractions import Fraction


def desc(**overrides):
    base = dict(
        experiment_duration=3600, invocation_interval=1, sync_interval=300,
        client_command="client {target}", target_address="127.0.0.1:9000",
        timeserver_address="127.0.0.1:9001", client_timeout=120,
    )
    base.update(overrides)
    return TestDescription(**base)


class TestValidate:
    def test_paper_scale_parameters_accepted(self):
        d = desc()
        assert validate(d) is d

    def test_zero_duration_rejected(self):
        with pytest.raises(ValidationError) as err:
            validate(desc(experiment_duration=0))
        assert err.value.field == "experiment_duration"

    def test_negative_sync_interval_rejected(self):
        with pytest.raises(ValidationError) as err:
            validate(desc(sync_interval=-5))
        assert err.value.field == "sync_interval"

    def test_zero_interval_is_fine(self):
        validate(desc(invocation_interval=0))

    def test_rate_cap_must_be_positive_when_set(self):
        validate(desc(max_invocation_rate=3))
        with pytest.raises(ValidationError) as err:
            validate(desc(max_invocation_rate=0))
        assert err.value.field == "max_invocation_rate"

    def test_empty_command_rejected(self):
        with pytest.raises(ValidationError) as err:
            validate(desc(client_command="  "))
        assert err.value.field == "client_command"


class TestSerialization:
    def test_description_json_round_trip(self):
        d = desc(max_invocation_rate=3.0)
        assert TestDescription.from_json(d.to_json()) == d

    def test_description_json_no_rate(self):
        d = desc()
        assert TestDescription.from_json(d.to_json()) == d

    def test_record_line_round_trip_full(self):
        rec = InvocationRecord(3, 17, 1_000_000, 1_000_800, Outcome.SUCCESS, 40, 20)
        assert parse_record_line(format_record_line(rec)) == rec
        parsed = parse_record_line(format_record_line(rec))
        assert parsed.outcome is Outcome.SUCCESS
        assert parsed.latency_estimate == 40
        assert parsed.client_overhead == 20

    def test_record_line_round_trip_absent_fields(self):
        rec = InvocationRecord(1, 1, 5, 9, Outcome.TIMEOUT)
        line = format_record_line(rec)
        assert line == "REC 1 1 5 9 TIMEOUT - -"
        parsed = parse_record_line(line)
        assert parsed == rec
        assert parsed.latency_estimate is None

    def test_record_line_all_outcomes(self):
        for outcome in Outcome:
            rec = InvocationRecord(1, 1, 0, 1, outcome)
            assert parse_record_line(format_record_line(rec)).outcome is outcome

    def test_malformed_record_line(self):
        with pytest.raises(ValidationError):
            parse_record_line("REC 1 2 3")
        with pytest.raises(ValidationError):
            parse_record_line("REC 1 1 0 1 BOGUS - -")

    def test_clock_offset_json_round_trip(self):
        off = ClockOffset(5, -123456, 40, 99_000)
        assert ClockOffset.from_json(off.to_json()) == off


class TestInvariants:
    def test_record_end_before_start_rejected(self):
        with pytest.raises(ValidationError):
            InvocationRecord(1, 1, 100, 99, Outcome.SUCCESS)

    def test_record_ids_one_based(self):
        with pytest.raises(ValidationError):
            InvocationRecord(0, 1, 0, 1, Outcome.SUCCESS)
        with pytest.raises(ValidationError):
            InvocationRecord(1, 0, 0, 1, Outcome.SUCCESS)

    def test_sequence_order_matches_start_order(self):
        # per-tester sequences follow start order, so the two sorts agree
        rng = random.Random(42)
        records = []
        for tid in range(1, 6):
            t = rng.randrange(10_000)
            for seq in range(1, 50):
                t += rng.randrange(1, 500)
                records.append(InvocationRecord(tid, seq, t, t + 10, Outcome.SUCCESS))
        shuffled = records[:]
        rng.shuffle(shuffled)
        by_sequence = sorted(shuffled, key=lambda r: (r.tester_id, r.sequence))
        by_start = sorted(shuffled, key=lambda r: (r.tester_id, r.start_ms))
        assert by_sequence == by_start
        assert sorted(shuffled) == by_sequence  # dataclass ordering does the same

    def test_offset_uncertainty_nonnegative(self):
        with pytest.raises(ValidationError):
            ClockOffset(1, 0, -1, 0)

    def test_series_times_must_be_quantum_multiples(self):
        with pytest.raises(ValidationError):
            MetricSeries(60, ((30, 1.0),))

    def test_series_times_strictly_increasing(self):
        with pytest.raises(ValidationError):
            MetricSeries(60, ((60, 1.0), (60, 2.0)))
        MetricSeries(60, ((60, 1.0), (120, 2.0)))

    def test_series_quantum_positive(self):
        with pytest.raises(ValidationError):
            MetricSeries(0, ())

    def test_client_stats_utilization_bounds(self):
        ClientStats(1, 5, (0, 100), Fraction(1, 2), 10)
        with pytest.raises(ValidationError):
            ClientStats(1, 5, (0, 100), Fraction(3, 2), 10)
