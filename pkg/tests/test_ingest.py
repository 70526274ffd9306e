import datetime as dt
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from caseaudit.ingest import (
    AssignmentEvent,
    AvailabilityCalendar,
    IngestError,
    SeedCounts,
    Unavailability,
    aggregate_table,
    aggregate_units,
    build_sample,
    parse_calendar,
    parse_events,
    parse_seeds,
    read_units_jsonl,
    scan_class_labels,
    write_calendar,
    write_events,
    write_seeds,
    write_units_jsonl,
)
from caseaudit.model import CourtConfig
from caseaudit.simulate import GeneratorSpec, simulate_assignments

D0 = dt.date(2008, 2, 28)


def write(tmp_path, text, name="events.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def prop(unit):
    return unit.covariates[:, 0]


# --- parsing ------------------------------------------------------------------


def test_parse_single_event(tmp_path, court_config):
    p = write(tmp_path, "date,class,chair,count\n2008-02-28,HC,3,12\n")
    assert parse_events(p, court_config) == [AssignmentEvent(D0, "HC", 3, 12)]


def test_parse_header_only_is_empty(tmp_path, court_config):
    p = write(tmp_path, "date,class,chair,count\n")
    assert parse_events(p, court_config) == []


def test_parse_empty_file(tmp_path, court_config):
    with pytest.raises(IngestError, match="empty file"):
        parse_events(write(tmp_path, ""), court_config)


def test_parse_bad_chair_reports_line(tmp_path, court_config):
    p = write(tmp_path, "date,class,chair,count\n2008-02-28,HC,3,1\n2008-02-28,HC,12,1\n")
    with pytest.raises(IngestError, match=r"events\.csv:3: chair 12 outside 1\.\.11"):
        parse_events(p, court_config)


@pytest.mark.parametrize(
    "row, pattern",
    [
        ("2008-02-30,HC,3,1", "unparseable date"),
        ("2008-02-28,XX,3,1", "unknown class label"),
        ("2008-02-28,HC,x,1", "not an integer"),
        ("2008-02-28,HC,3,0", "count must be >= 1"),
        ("2008-02-28,HC,3", "expected 4 fields"),
    ],
)
def test_parse_rejects_bad_rows(tmp_path, court_config, row, pattern):
    p = write(tmp_path, f"date,class,chair,count\n{row}\n")
    with pytest.raises(IngestError, match=r"events\.csv:2: .*" + pattern):
        parse_events(p, court_config)


def test_parse_bad_header(tmp_path, court_config):
    with pytest.raises(IngestError, match=":1: header"):
        parse_events(write(tmp_path, "day,class,chair,n\n"), court_config)


def test_parse_sorts_by_date_and_skips_blank_lines(tmp_path, court_config):
    p = write(tmp_path, "date,class,chair,count\n2008-03-01,HC,1,1\n\n2008-02-28,AC,2,1\n")
    assert [e.date for e in parse_events(p, court_config)] == [D0, dt.date(2008, 3, 1)]
    assert scan_class_labels(p) == ["AC", "HC"]


def test_calendar_and_seed_round_trip(tmp_path, court_config):
    cal = AvailabilityCalendar((Unavailability(4, D0, dt.date(2008, 3, 5), "leave"),))
    seeds = SeedCounts({("HC", 1): 10, ("AC", 11): 0, ("RE", 5): 3})
    write_calendar(tmp_path / "c.csv", cal)
    write_seeds(tmp_path / "s.csv", seeds)
    assert parse_calendar(tmp_path / "c.csv", court_config) == cal
    assert parse_seeds(tmp_path / "s.csv", court_config) == seeds


def test_calendar_rejects_reversed_span(tmp_path, court_config):
    p = write(tmp_path, "chair,start_date,end_date,reason\n2,2008-03-02,2008-03-01,x\n", "c.csv")
    with pytest.raises(IngestError, match="c.csv:2"):
        parse_calendar(p, court_config)


def test_seeds_reject_negative(tmp_path, court_config):
    p = write(tmp_path, "class,chair,count\nHC,1,-1\n", "s.csv")
    with pytest.raises(IngestError, match="negative"):
        parse_seeds(p, court_config)


def test_calendar_end_date_inclusive():
    cal = AvailabilityCalendar((Unavailability(2, D0, D0 + dt.timedelta(days=2)),))
    assert not cal.availability(D0 + dt.timedelta(days=2), 3)[1]
    assert cal.availability(D0 + dt.timedelta(days=3), 3)[1]
    assert cal.availability(D0 - dt.timedelta(days=1), 3).all()


def test_events_round_trip(tmp_path, court_config):
    events = [AssignmentEvent(D0, "HC", 3, 12), AssignmentEvent(D0 + dt.timedelta(1), "Rcl", 11, 1)]
    write_events(tmp_path / "e.csv", events)
    assert parse_events(tmp_path / "e.csv", court_config) == events


# --- sample construction ------------------------------------------------------


def test_fresh_class_proportions_are_uniform(court_config, caplog):
    with caplog.at_level(logging.WARNING):
        units = build_sample([AssignmentEvent(D0, "HC", 3, 2)], court_config)
    assert "no seed counts" in caplog.text
    np.testing.assert_allclose(prop(units[0]), np.full(11, 1 / 11))


def test_seed_history_sets_proportions(court_config):
    seeds = SeedCounts({("HC", 1): 7})
    units = build_sample([AssignmentEvent(D0, "HC", 3, 2)], court_config, seeds=seeds)
    expected = np.zeros(11)
    expected[0] = 1.0
    np.testing.assert_array_equal(prop(units[0]), expected)


def test_same_day_assignments_do_not_enter_proportions(court_config):
    ev = [
        AssignmentEvent(D0, "HC", 2, 1),
        AssignmentEvent(D0, "AC", 5, 4),
        AssignmentEvent(D0 + dt.timedelta(1), "HC", 4, 1),
    ]
    units = build_sample(ev, court_config, seeds=SeedCounts())
    assert [(u.day, court_config.class_labels[u.class_index]) for u in units] == [
        (D0, "AC"), (D0, "HC"), (D0 + dt.timedelta(1), "HC"),
    ]
    np.testing.assert_allclose(prop(units[1]), np.full(11, 1 / 11))
    expected = np.zeros(11)
    expected[1] = 1.0
    np.testing.assert_array_equal(prop(units[2]), expected)


def test_availability_conflicts_are_all_reported(court_config):
    cal = AvailabilityCalendar((Unavailability(3, D0, D0), Unavailability(4, D0, D0)))
    ev = [AssignmentEvent(D0, "HC", 3, 1), AssignmentEvent(D0, "AC", 4, 2), AssignmentEvent(D0, "AC", 5, 1)]
    with pytest.raises(IngestError) as info:
        build_sample(ev, court_config, calendar=cal, seeds=SeedCounts())
    msg = str(info.value)
    assert "unavailable chair 3" in msg and "unavailable chair 4" in msg


def test_day_without_any_available_chair():
    cfg = CourtConfig(2, ("a",))
    cal = AvailabilityCalendar((Unavailability(1, D0, D0), Unavailability(2, D0, D0)))
    with pytest.raises(IngestError, match="no chair available"):
        build_sample([AssignmentEvent(D0, "a", 1, 1)], cfg, calendar=cal, seeds=SeedCounts())


event_lists = st.lists(
    st.tuples(st.integers(0, 20), st.sampled_from(["a", "b", "c"]), st.integers(1, 4), st.integers(1, 5)),
    max_size=40,
)


@settings(max_examples=60, deadline=None)
@given(raw=event_lists)
def test_sample_is_exclusive_and_lossless(raw):
    cfg = CourtConfig(4, ("a", "b", "c"))
    events = sorted(AssignmentEvent(D0 + dt.timedelta(d), c, ch, k) for d, c, ch, k in raw)
    units = build_sample(events, cfg, seeds=SeedCounts())
    keys = [(u.day, u.class_index) for u in units]
    assert len(keys) == len(set(keys))
    assert keys == sorted(keys)
    assert sum(u.total for u in units) == sum(e.count for e in events)
    for u in units:
        assert prop(u).sum() == pytest.approx(1.0, abs=1e-12)
        assert (prop(u) >= 0).all()
    np.testing.assert_array_equal(aggregate_units(units, cfg).counts, aggregate_table(events, cfg).counts)


# --- aggregates and persistence ------------------------------------------------


def test_aggregate_empty(court_config):
    t = aggregate_table([], court_config)
    assert t.counts.shape == (14, 11) and t.grand_total == 0


def test_aggregate_matches_simulator_counters():
    cfg = CourtConfig(5, ("a", "b"))
    res = simulate_assignments(GeneratorSpec(n_days=30, intensities=6, seed=5), cfg)
    t = aggregate_table(res.events, cfg)
    np.testing.assert_array_equal(t.counts, res.counts)
    assert t.grand_total == sum(r["n_cases"] for r in res.truth)


def test_aggregate_csv_margins(tmp_path):
    cfg = CourtConfig(3, ("a", "b"))
    t = aggregate_table([AssignmentEvent(D0, "a", 1, 2), AssignmentEvent(D0, "b", 3, 5)], cfg)
    t.write_csv(tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_text().splitlines() == [
        "class,1,2,3,total", "a,2,0,0,2", "b,0,0,5,5", "total,2,0,5,7",
    ]


def test_units_jsonl_round_trip(tmp_path):
    cfg = CourtConfig(4, ("a", "b"))
    cal = AvailabilityCalendar((Unavailability(2, D0, D0 + dt.timedelta(3)),))
    res = simulate_assignments(GeneratorSpec(n_days=10, intensities=5, availability=cal, seed=3), cfg)
    units = build_sample(res.events, cfg, calendar=cal, seeds=SeedCounts())
    write_units_jsonl(tmp_path / "u.jsonl", units, cfg)
    back = read_units_jsonl(tmp_path / "u.jsonl", cfg)
    assert len(back) == len(units)
    for a, b in zip(units, back):
        assert (a.day, a.class_index) == (b.day, b.class_index)
        np.testing.assert_array_equal(a.counts, b.counts)
        np.testing.assert_array_equal(a.availability, b.availability)
        np.testing.assert_array_equal(a.covariates, b.covariates)
