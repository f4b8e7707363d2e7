"""CDR data model, on-disk formats, trajectories and home detection.

File formats (all CSV with a header row):

* CDR file: ``caller_id,callee_id,timestamp,duration_s,kind,tower_id`` with
  ISO-8601 UTC timestamps such as ``2014-02-28T13:05:22Z``; ``kind`` is
  ``call`` or ``sms``; ``callee_id`` may be empty.
* Tower file: ``tower_id,lat,lon,area_id``.
* Area file: ``area_id,name,population``.
"""

from __future__ import annotations

import csv
import hashlib
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from functools import cached_property
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple, Sequence

log = logging.getLogger(__name__)

CDR_HEADER = ("caller_id", "callee_id", "timestamp", "duration_s", "kind", "tower_id")
TOWER_HEADER = ("tower_id", "lat", "lon", "area_id")
AREA_HEADER = ("area_id", "name", "population")
HOME_HEADER = ("user_id", "home_area_id", "night_visit_count")
EVENT_KINDS = ("call", "sms")

# Hard error when more than this share of data rows is rejected.
MAX_REJECT_SHARE = 0.5


class CdrFormatError(ValueError):
    """Raised for files that do not follow the documented CSV schemas."""


def parse_timestamp(text: str) -> datetime:
    """Parse ``YYYY-MM-DDTHH:MM:SSZ`` into an aware UTC datetime."""
    if len(text) != 20 or not text.endswith("Z") or text[10] != "T":
        raise ValueError(f"not an ISO-8601 UTC timestamp: {text!r}")
    return datetime.fromisoformat(text[:-1]).replace(tzinfo=timezone.utc)


def format_timestamp(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def to_local(ts: datetime, utc_offset_hours: float = 0.0) -> datetime:
    return ts + timedelta(hours=utc_offset_hours)


def day_class(ts: datetime, utc_offset_hours: float = 0.0) -> str:
    """``"weekend"`` for local Saturdays and Sundays, else ``"weekday"``."""
    return "weekend" if to_local(ts, utc_offset_hours).weekday() >= 5 else "weekday"


@dataclass(frozen=True)
class NightWindow:
    """Local-time hour window; wraps past midnight when start > end."""

    start_hour: int = 19
    end_hour: int = 7

    def __post_init__(self):
        if not (0 <= self.start_hour < 24 and 0 <= self.end_hour < 24):
            raise ValueError("night window hours must lie in [0, 24)")

    def contains(self, ts: datetime, utc_offset_hours: float = 0.0) -> bool:
        hour = to_local(ts, utc_offset_hours).hour
        if self.start_hour <= self.end_hour:
            return self.start_hour <= hour < self.end_hour
        return hour >= self.start_hour or hour < self.end_hour


@dataclass(frozen=True, slots=True)
class CdrRecord:
    caller_id: str
    callee_id: str | None
    timestamp: datetime
    duration: int
    event_kind: str
    tower_id: str


@dataclass(frozen=True, slots=True)
class Tower:
    tower_id: str
    lat: float
    lon: float
    area_id: str


class TowerRegistry:
    """Tower locations and the tower -> area mapping."""

    def __init__(self, towers: Iterable[Tower]):
        self._towers: dict[str, Tower] = {}
        for t in towers:
            if not (-90.0 <= t.lat <= 90.0) or not (-180.0 <= t.lon <= 180.0):
                raise ValueError(f"tower {t.tower_id}: coordinates out of range")
            if t.tower_id in self._towers:
                raise ValueError(f"duplicate tower id {t.tower_id}")
            self._towers[t.tower_id] = t

    def __contains__(self, tower_id: str) -> bool:
        return tower_id in self._towers

    def __getitem__(self, tower_id: str) -> Tower:
        return self._towers[tower_id]

    def __iter__(self) -> Iterator[Tower]:
        return iter(self._towers.values())

    def __len__(self) -> int:
        return len(self._towers)

    def area_of(self, tower_id: str) -> str:
        return self._towers[tower_id].area_id

    def area_centroids(self) -> dict[str, tuple[float, float]]:
        """Arithmetic mean tower position per area, as (lat, lon)."""
        acc: dict[str, list[float]] = defaultdict(lambda: [0.0, 0.0, 0])
        for t in self._towers.values():
            a = acc[t.area_id]
            a[0] += t.lat
            a[1] += t.lon
            a[2] += 1
        return {k: (v[0] / v[2], v[1] / v[2]) for k, v in sorted(acc.items())}

    @classmethod
    def from_csv(cls, path) -> "TowerRegistry":
        rows = _read_csv(path, TOWER_HEADER)
        try:
            towers = [Tower(r[0], float(r[1]), float(r[2]), r[3]) for r in rows]
        except (ValueError, IndexError) as exc:
            raise CdrFormatError(f"{path}: malformed tower row ({exc})") from None
        return cls(towers)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TOWER_HEADER)
            for t in self._towers.values():
                w.writerow([t.tower_id, f"{t.lat:.6f}", f"{t.lon:.6f}", t.area_id])


@dataclass(frozen=True, slots=True)
class Area:
    area_id: str
    name: str
    base_population: int


class AreaRegistry:
    """Administrative areas, kept sorted by ``area_id``."""

    def __init__(self, areas: Iterable[Area]):
        self.areas = tuple(sorted(areas, key=lambda a: a.area_id))
        if not self.areas:
            raise ValueError("area registry is empty")
        for a in self.areas:
            if a.base_population <= 0:
                raise ValueError(f"area {a.area_id}: population must be positive")
        self.ids = tuple(a.area_id for a in self.areas)
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("duplicate area ids")
        self.index = {a: i for i, a in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.areas)

    def __iter__(self) -> Iterator[Area]:
        return iter(self.areas)

    @property
    def total_population(self) -> int:
        return sum(a.base_population for a in self.areas)

    @classmethod
    def from_csv(cls, path) -> "AreaRegistry":
        rows = _read_csv(path, AREA_HEADER)
        try:
            return cls(Area(r[0], r[1], int(r[2])) for r in rows)
        except (ValueError, IndexError) as exc:
            raise CdrFormatError(f"{path}: malformed area row ({exc})") from None

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(AREA_HEADER)
            for a in self.areas:
                w.writerow([a.area_id, a.name, a.base_population])


def _read_csv(path, header: Sequence[str]) -> list[list[str]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        first = next(reader, None)
        if first is None or tuple(first) != tuple(header):
            raise CdrFormatError(f"{path}: expected header {','.join(header)}, got {first}")
        return [row for row in reader if row]


@dataclass
class ParseReport:
    """Counts accepted and rejected CDR rows by rejection reason."""

    accepted: int = 0
    rejected: Counter = field(default_factory=Counter)

    @property
    def n_rejected(self) -> int:
        return sum(self.rejected.values())

    @property
    def n_rows(self) -> int:
        return self.accepted + self.n_rejected


def parse_cdr_file(
    path,
    towers: TowerRegistry,
    *,
    window: tuple[datetime, datetime] | None = None,
    report: ParseReport | None = None,
) -> Iterator[CdrRecord]:
    """Stream records from a CDR CSV file in file order.

    Malformed rows are skipped and tallied in ``report``. Once the file is
    exhausted, a :class:`CdrFormatError` is raised if more than half of the
    data rows were rejected.

    ``window`` is an optional ``[start, end)`` observation window; rows
    outside it are rejected.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    fh = open(path, newline="")
    reader = csv.reader(fh)
    header = next(reader, None)
    if header is None or tuple(header) != CDR_HEADER:
        fh.close()
        raise CdrFormatError(f"{path}: expected header {','.join(CDR_HEADER)}, got {header}")
    return _iter_records(fh, reader, path, towers, window, report if report is not None else ParseReport())


def _iter_records(fh, reader, path, towers, window, report) -> Iterator[CdrRecord]:
    with fh:
        for row in reader:
            if not row:
                continue
            reason = None
            rec = None
            if len(row) != len(CDR_HEADER):
                reason = "field_count"
            else:
                caller, callee, ts_text, dur, kind, tower = row
                try:
                    ts = parse_timestamp(ts_text)
                except ValueError:
                    reason = "bad_timestamp"
                else:
                    if tower not in towers:
                        reason = "unknown_tower"
                    elif kind not in EVENT_KINDS:
                        reason = "bad_kind"
                    elif not caller:
                        reason = "missing_caller"
                    elif window is not None and not (window[0] <= ts < window[1]):
                        reason = "out_of_window"
                    else:
                        try:
                            duration = int(dur)
                        except ValueError:
                            duration = -1
                        if duration < 0:
                            reason = "bad_duration"
                        else:
                            rec = CdrRecord(caller, callee or None, ts, duration, kind, tower)
            if rec is None:
                report.rejected[reason] += 1
                continue
            report.accepted += 1
            yield rec
    if report.n_rejected:
        log.warning("%s: rejected %d of %d rows %s", path, report.n_rejected,
                    report.n_rows, dict(report.rejected))
    if report.n_rows and report.n_rejected > MAX_REJECT_SHARE * report.n_rows:
        raise CdrFormatError(
            f"{path}: {report.n_rejected} of {report.n_rows} rows rejected; wrong schema?"
        )


def read_cdr_file(path, towers: TowerRegistry, *, window=None) -> tuple[list[CdrRecord], ParseReport]:
    report = ParseReport()
    records = list(parse_cdr_file(path, towers, window=window, report=report))
    return records, report


def write_cdr_file(records: Iterable[CdrRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CDR_HEADER)
        for r in records:
            w.writerow([r.caller_id, r.callee_id or "", format_timestamp(r.timestamp),
                        r.duration, r.event_kind, r.tower_id])


class Visit(NamedTuple):
    timestamp: datetime
    tower_id: str
    area_id: str


@dataclass(frozen=True)
class Trajectory:
    """Time-ordered visits of one user."""

    user_id: str
    visits: tuple[Visit, ...]

    def __len__(self) -> int:
        return len(self.visits)

    @cached_property
    def visit_counts(self) -> dict[str, int]:
        """Visits per area (the n_i), keyed by area id in sorted order."""
        return dict(sorted(Counter(v.area_id for v in self.visits).items()))

    @property
    def n_visits(self) -> int:
        return len(self.visits)

    @property
    def areas(self) -> tuple[str, ...]:
        return tuple(v.area_id for v in self.visits)

    def center_of_mass(self, coords) -> tuple[float, float]:
        """Visit-weighted mean (lat, lon) given per-area coordinates."""
        if not self.visits:
            raise ValueError(f"user {self.user_id}: empty trajectory")
        lat = lon = 0.0
        for area, n in self.visit_counts.items():
            lat += n * coords[area][0]
            lon += n * coords[area][1]
        return lat / self.n_visits, lon / self.n_visits

    def between(self, start: datetime | None = None, end: datetime | None = None) -> "Trajectory":
        keep = tuple(v for v in self.visits
                     if (start is None or v.timestamp >= start) and (end is None or v.timestamp < end))
        return Trajectory(self.user_id, keep)


def build_trajectories(records: Iterable[CdrRecord], towers: TowerRegistry) -> list[Trajectory]:
    """Group records by caller into time-sorted trajectories.

    Only the caller side is located. Visits with equal timestamps keep their
    input order (the sort is stable). Returns trajectories ordered by user id.
    """
    by_user: dict[str, list[Visit]] = defaultdict(list)
    for r in records:
        by_user[r.caller_id].append(Visit(r.timestamp, r.tower_id, towers.area_of(r.tower_id)))
    out = []
    for user in sorted(by_user):
        visits = by_user[user]
        visits.sort(key=lambda v: v.timestamp)
        out.append(Trajectory(user, tuple(visits)))
    return out


@dataclass(frozen=True, slots=True)
class HomeAssignment:
    user_id: str
    home_area_id: str
    night_visit_count: int


def detect_home(
    trajectory: Trajectory,
    night_window: NightWindow = NightWindow(),
    utc_offset_hours: float = 0.0,
) -> HomeAssignment:
    """Home = area with most night-time visits, ties to the lowest area id.

    Users without any night visit fall back to their most visited area.
    """
    if not trajectory.visits:
        raise ValueError(f"user {trajectory.user_id}: empty trajectory")
    night = Counter(v.area_id for v in trajectory.visits
                    if night_window.contains(v.timestamp, utc_offset_hours))
    counts = night if night else Counter(trajectory.visit_counts)
    home = min(counts, key=lambda a: (-counts[a], a))
    return HomeAssignment(trajectory.user_id, home, night.get(home, 0))


def detect_homes(trajectories: Iterable[Trajectory], night_window: NightWindow = NightWindow(),
                 utc_offset_hours: float = 0.0) -> dict[str, HomeAssignment]:
    return {t.user_id: detect_home(t, night_window, utc_offset_hours) for t in trajectories if t.visits}


def write_homes(homes: Iterable[HomeAssignment], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HOME_HEADER)
        for h in homes:
            w.writerow([h.user_id, h.home_area_id, h.night_visit_count])


def read_homes(path) -> dict[str, HomeAssignment]:
    rows = _read_csv(path, HOME_HEADER)
    return {r[0]: HomeAssignment(r[0], r[1], int(r[2])) for r in rows}


def split_by_period(
    records: Iterable[CdrRecord],
    split_instant: datetime,
    window: tuple[datetime, datetime],
) -> tuple[list[CdrRecord], list[CdrRecord]]:
    """Partition records into ``timestamp < split_instant`` and the rest."""
    start, end = window
    if not (start <= split_instant <= end):
        raise ValueError(f"split {split_instant} outside observation window [{start}, {end}]")
    train, test = [], []
    for r in records:
        (train if r.timestamp < split_instant else test).append(r)
    return train, test


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
