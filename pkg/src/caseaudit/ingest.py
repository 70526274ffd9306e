"""Reading assignment records and turning them into sample units.

Three CSV inputs, all UTF-8 with a header row:

``events``   ``date,class,chair,count``            one row per (day, class, chair)
``calendar`` ``chair,start_date,end_date,reason``  inclusive unavailability spans
``seeds``    ``class,chair,count``                 history before the sample window

Sample units can be written to and read back from JSON lines.
"""

from __future__ import annotations

import csv
import datetime as dt
import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import PROPORTION, CourtConfig, SampleUnit

log = logging.getLogger(__name__)

EVENT_HEADER = ("date", "class", "chair", "count")
CALENDAR_HEADER = ("chair", "start_date", "end_date", "reason")
SEED_HEADER = ("class", "chair", "count")


class IngestError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass(frozen=True, order=True)
class AssignmentEvent:
    date: dt.date
    class_label: str
    chair: int
    count: int


@dataclass(frozen=True)
class Unavailability:
    chair: int
    start: dt.date
    end: dt.date
    reason: str = ""


@dataclass(frozen=True)
class AvailabilityCalendar:
    """Spans during which a chair cannot receive cases. Empty means every
    chair is always available."""

    spans: tuple[Unavailability, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "spans", tuple(self.spans))
        for s in self.spans:
            if s.start > s.end:
                raise IngestError(f"chair {s.chair}: span starts {s.start} after it ends {s.end}")

    def availability(self, day: dt.date, n_chairs: int) -> np.ndarray:
        out = np.ones(n_chairs, dtype=bool)
        for s in self.spans:
            if s.start <= day <= s.end and 1 <= s.chair <= n_chairs:
                out[s.chair - 1] = False
        return out


@dataclass
class SeedCounts:
    """Class x chair counts accumulated before the sample window."""

    counts: dict[tuple[str, int], int] = field(default_factory=dict)

    def matrix(self, config: CourtConfig) -> np.ndarray:
        out = np.zeros((config.n_classes, config.n_chairs), dtype=np.int64)
        for (label, chair), k in self.counts.items():
            out[config.class_index(label), chair - 1] += k
        return out


def _read_rows(path: Path, header: tuple[str, ...]):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            first = next(reader)
        except StopIteration:
            raise IngestError(f"{path}: empty file, expected header {','.join(header)}") from None
        if tuple(h.strip() for h in first) != header:
            raise IngestError(
                f"{path}:1: header {','.join(first)!r} != expected {','.join(header)!r}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise IngestError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            yield lineno, [c.strip() for c in row]


def _date(text: str, where: str) -> dt.date:
    try:
        return dt.date.fromisoformat(text)
    except ValueError:
        raise IngestError(f"{where}: unparseable date {text!r}") from None


def _int(text: str, where: str, what: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise IngestError(f"{where}: {what} {text!r} is not an integer") from None


def _chair(text: str, where: str, n_chairs: int) -> int:
    chair = _int(text, where, "chair")
    if not 1 <= chair <= n_chairs:
        raise IngestError(f"{where}: chair {chair} outside 1..{n_chairs}")
    return chair


def parse_events(path, config: CourtConfig) -> list[AssignmentEvent]:
    """Read an event CSV; rows are returned sorted by date (stable)."""
    path = Path(path)
    labels = set(config.class_labels)
    events = []
    for lineno, (d, label, chair, count) in _read_rows(path, EVENT_HEADER):
        where = f"{path}:{lineno}"
        if label not in labels:
            raise IngestError(f"{where}: unknown class label {label!r}")
        k = _int(count, where, "count")
        if k < 1:
            raise IngestError(f"{where}: count must be >= 1, got {k}")
        events.append(AssignmentEvent(_date(d, where), label, _chair(chair, where, config.n_chairs), k))
    events.sort(key=lambda e: e.date)
    return events


def scan_class_labels(path) -> list[str]:
    """Distinct class labels of an event file, sorted."""
    return sorted({row[1] for _, row in _read_rows(Path(path), EVENT_HEADER)})


def parse_calendar(path, config: CourtConfig) -> AvailabilityCalendar:
    path = Path(path)
    spans = []
    for lineno, (chair, start, end, reason) in _read_rows(path, CALENDAR_HEADER):
        where = f"{path}:{lineno}"
        s, e = _date(start, where), _date(end, where)
        if s > e:
            raise IngestError(f"{where}: start {s} after end {e}")
        spans.append(Unavailability(_chair(chair, where, config.n_chairs), s, e, reason))
    return AvailabilityCalendar(tuple(spans))


def parse_seeds(path, config: CourtConfig) -> SeedCounts:
    path = Path(path)
    labels = set(config.class_labels)
    counts: dict[tuple[str, int], int] = defaultdict(int)
    for lineno, (label, chair, count) in _read_rows(path, SEED_HEADER):
        where = f"{path}:{lineno}"
        if label not in labels:
            raise IngestError(f"{where}: unknown class label {label!r}")
        k = _int(count, where, "count")
        if k < 0:
            raise IngestError(f"{where}: negative seed count {k}")
        counts[(label, _chair(chair, where, config.n_chairs))] += k
    return SeedCounts(dict(counts))


def write_events(path, events: Iterable[AssignmentEvent]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVENT_HEADER)
        for e in events:
            w.writerow([e.date.isoformat(), e.class_label, e.chair, e.count])


def write_calendar(path, calendar: AvailabilityCalendar) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CALENDAR_HEADER)
        for s in calendar.spans:
            w.writerow([s.chair, s.start.isoformat(), s.end.isoformat(), s.reason])


def write_seeds(path, seeds: SeedCounts) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SEED_HEADER)
        for (label, chair), k in sorted(seeds.counts.items()):
            w.writerow([label, chair, k])


def running_proportions(history: np.ndarray) -> np.ndarray:
    """Per-chair share of a class's history; uniform when there is none.

    Every chair, available or not, is in the denominator.
    """
    total = history.sum()
    if total <= 0:
        return np.full(history.shape[0], 1.0 / history.shape[0])
    return history / total


def build_sample(
    events: Sequence[AssignmentEvent],
    config: CourtConfig,
    calendar: AvailabilityCalendar | None = None,
    seeds: SeedCounts | None = None,
) -> list[SampleUnit]:
    """One sample unit per (day, class) with at least one assignment.

    The proportion covariate of a unit uses the seed history plus every
    assignment strictly before that day; same-day assignments never enter.
    Units are ordered by day, then by class index.
    """
    calendar = calendar or AvailabilityCalendar()
    if seeds is None:
        log.warning("no seed counts given; proportions start at 1/%d", config.n_chairs)
        seeds = SeedCounts()
    history = seeds.matrix(config).astype(float)
    n = config.n_chairs

    by_day: dict[dt.date, dict[int, np.ndarray]] = {}
    for e in events:
        day = by_day.setdefault(e.date, {})
        ci = config.class_index(e.class_label)
        if ci not in day:
            day[ci] = np.zeros(n, dtype=np.int64)
        day[ci][e.chair - 1] += e.count

    conflicts = []
    units = []
    ncov = config.n_covariates
    prop_col = config.covariate_names.index(PROPORTION) if PROPORTION in config.covariate_names else None
    for day in sorted(by_day):
        avail = calendar.availability(day, n)
        if not avail.any():
            conflicts.append(f"{day}: no chair available")
            continue
        for ci in sorted(by_day[day]):
            counts = by_day[day][ci]
            bad = np.flatnonzero((counts > 0) & ~avail)
            if bad.size:
                conflicts.extend(
                    f"{day} {config.class_labels[ci]}: {counts[b]} case(s) on unavailable chair {b + 1}"
                    for b in bad
                )
                continue
            cov = np.zeros((n, ncov))
            if prop_col is not None:
                cov[:, prop_col] = running_proportions(history[ci])
            units.append(SampleUnit(day, ci, counts.copy(), avail, cov))
        for ci, counts in by_day[day].items():
            history[ci] += counts
    if conflicts:
        raise IngestError("availability conflicts:\n  " + "\n  ".join(conflicts))
    return units


@dataclass(frozen=True)
class AggregateTable:
    """Class x chair totals with margins."""

    class_labels: tuple[str, ...]
    counts: np.ndarray

    @property
    def class_totals(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def chair_totals(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    @property
    def grand_total(self) -> int:
        return int(self.counts.sum())

    def write_csv(self, path) -> None:
        n = self.counts.shape[1]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["class", *range(1, n + 1), "total"])
            for label, row, tot in zip(self.class_labels, self.counts, self.class_totals):
                w.writerow([label, *row.tolist(), int(tot)])
            w.writerow(["total", *self.chair_totals.tolist(), self.grand_total])


def aggregate_table(events: Iterable[AssignmentEvent], config: CourtConfig) -> AggregateTable:
    counts = np.zeros((config.n_classes, config.n_chairs), dtype=np.int64)
    for e in events:
        counts[config.class_index(e.class_label), e.chair - 1] += e.count
    return AggregateTable(config.class_labels, counts)


def aggregate_units(units: Iterable[SampleUnit], config: CourtConfig) -> AggregateTable:
    counts = np.zeros((config.n_classes, config.n_chairs), dtype=np.int64)
    for u in units:
        counts[u.class_index] += u.counts
    return AggregateTable(config.class_labels, counts)


def write_units_jsonl(path, units: Iterable[SampleUnit], config: CourtConfig) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u in units:
            rec = {
                "day": u.day.isoformat(),
                "class": config.class_labels[u.class_index],
                "counts": u.counts.tolist(),
                "availability": [int(v) for v in u.availability],
                "covariates": {
                    name: u.covariates[:, k].tolist()
                    for k, name in enumerate(config.covariate_names)
                },
            }
            fh.write(json.dumps(rec) + "\n")


def read_units_jsonl(path, config: CourtConfig) -> list[SampleUnit]:
    units = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                cov = np.column_stack([rec["covariates"][name] for name in config.covariate_names])
                units.append(
                    SampleUnit(
                        dt.date.fromisoformat(rec["day"]),
                        config.class_index(rec["class"]),
                        rec["counts"],
                        np.array(rec["availability"], dtype=bool),
                        cov,
                    )
                )
            except (KeyError, ValueError) as exc:
                raise IngestError(f"{path}:{lineno}: {exc}") from None
    return units
