from __future__ import annotations

import random
from collections import Counter
from datetime import datetime, timedelta, timezone

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdrcontain.cdr import (
    CDR_HEADER,
    CdrFormatError,
    CdrRecord,
    NightWindow,
    ParseReport,
    Tower,
    TowerRegistry,
    build_trajectories,
    day_class,
    detect_home,
    parse_cdr_file,
    parse_timestamp,
    read_cdr_file,
    split_by_period,
    write_cdr_file,
)

from .conftest import T0, make_records, make_towers


def write_rows(path, rows, header=CDR_HEADER):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(r) + "\n")


GOOD = [
    ("U1", "U2", "2014-03-01T10:00:00Z", "30", "call", "tA"),
    ("U1", "", "2014-03-01T11:00:00Z", "0", "sms", "tB"),
    ("U2", "U1", "2014-03-01T12:00:00Z", "12", "call", "tC"),
]


class TestParse:
    def test_well_formed(self, tmp_path, towers):
        write_rows(tmp_path / "c.csv", GOOD)
        records, report = read_cdr_file(tmp_path / "c.csv", towers)
        assert len(records) == 3 and report.n_rejected == 0
        assert records[1].callee_id is None
        assert records[0].timestamp == datetime(2014, 3, 1, 10, tzinfo=timezone.utc)

    def test_file_order(self, tmp_path, towers):
        write_rows(tmp_path / "c.csv", GOOD[::-1])
        records, _ = read_cdr_file(tmp_path / "c.csv", towers)
        assert [r.tower_id for r in records] == ["tC", "tB", "tA"]

    def test_unknown_tower_counted(self, tmp_path, towers):
        rows = GOOD + [("U3", "", "2014-03-01T12:00:00Z", "0", "sms", "tZ")]
        write_rows(tmp_path / "c.csv", rows)
        records, report = read_cdr_file(tmp_path / "c.csv", towers)
        assert len(records) == 3
        assert report.rejected == Counter(unknown_tower=1)

    def test_reject_reasons(self, tmp_path, towers):
        rows = [GOOD[0]] * 6 + [
            ("U1", "", "2014-03-01 10:00:00", "0", "sms", "tA"),
            ("U1", "", "2014-03-01T10:00:00Z", "0", "fax", "tA"),
            ("", "", "2014-03-01T10:00:00Z", "0", "sms", "tA"),
            ("U1", "", "2014-03-01T10:00:00Z", "-4", "sms", "tA"),
            ("U1", "2014-03-01T10:00:00Z", "0", "sms", "tA"),
        ]
        write_rows(tmp_path / "c.csv", rows)
        report = ParseReport()
        records = list(parse_cdr_file(tmp_path / "c.csv", towers, report=report))
        assert len(records) == 6
        assert report.rejected == Counter(bad_timestamp=1, bad_kind=1, missing_caller=1,
                                          bad_duration=1, field_count=1)

    def test_majority_rejected_is_fatal(self, tmp_path, towers):
        bad = ("U1", "", "yesterday", "0", "sms", "tA")
        write_rows(tmp_path / "c.csv", GOOD[:2] * 2 + [bad] * 6)
        with pytest.raises(CdrFormatError):
            read_cdr_file(tmp_path / "c.csv", towers)

    def test_half_rejected_is_tolerated(self, tmp_path, towers):
        bad = ("U1", "", "yesterday", "0", "sms", "tA")
        write_rows(tmp_path / "c.csv", GOOD[:2] * 2 + [GOOD[0]] + [bad] * 5)
        records, report = read_cdr_file(tmp_path / "c.csv", towers)
        assert len(records) == 5 and report.n_rejected == 5

    def test_missing_file(self, tmp_path, towers):
        with pytest.raises(FileNotFoundError):
            parse_cdr_file(tmp_path / "nope.csv", towers)

    def test_bad_header(self, tmp_path, towers):
        write_rows(tmp_path / "c.csv", GOOD, header=("a", "b"))
        with pytest.raises(CdrFormatError):
            parse_cdr_file(tmp_path / "c.csv", towers)

    def test_window_rejects(self, tmp_path, towers):
        write_rows(tmp_path / "c.csv", GOOD)
        window = (parse_timestamp("2014-03-01T10:30:00Z"), parse_timestamp("2014-03-02T00:00:00Z"))
        records, report = read_cdr_file(tmp_path / "c.csv", towers, window=window)
        assert len(records) == 2 and report.rejected == Counter(out_of_window=1)

    def test_roundtrip(self, tmp_path, towers):
        write_rows(tmp_path / "c.csv", GOOD)
        records, _ = read_cdr_file(tmp_path / "c.csv", towers)
        write_cdr_file(records, tmp_path / "d.csv")
        assert (tmp_path / "c.csv").read_text() == (tmp_path / "d.csv").read_text()

    def test_timestamp_format(self):
        with pytest.raises(ValueError):
            parse_timestamp("2014-03-01T10:00:00+00:00")


class TestRegistries:
    def test_coordinates_checked(self):
        with pytest.raises(ValueError):
            TowerRegistry([Tower("t", 91.0, 0.0, "A")])

    def test_duplicate_tower(self):
        with pytest.raises(ValueError):
            TowerRegistry([Tower("t", 0.0, 0.0, "A"), Tower("t", 1.0, 0.0, "B")])

    def test_centroids(self):
        reg = TowerRegistry([Tower("t1", 1.0, 2.0, "A"), Tower("t2", 3.0, 4.0, "A"), Tower("t3", 5.0, 6.0, "B")])
        assert reg.area_centroids() == {"A": (2.0, 3.0), "B": (5.0, 6.0)}

    def test_csv_roundtrip(self, tmp_path, towers, areas):
        towers.to_csv(tmp_path / "t.csv")
        areas.to_csv(tmp_path / "a.csv")
        assert [t.tower_id for t in TowerRegistry.from_csv(tmp_path / "t.csv")] == [t.tower_id for t in towers]
        back = type(areas).from_csv(tmp_path / "a.csv")
        assert back.ids == areas.ids and back.total_population == 4000


class TestTrajectories:
    def test_single_user(self, towers):
        trajs = build_trajectories(make_records({"u": "ABA"}, towers), towers)
        assert len(trajs) == 1
        t = trajs[0]
        assert t.areas == ("A", "B", "A")
        assert t.visit_counts == {"A": 2, "B": 1} and t.n_visits == 3

    def test_interleaved_users(self, towers):
        recs = make_records({"u1": "ABC", "u2": "CCD"}, towers)
        random.Random(0).shuffle(recs)
        trajs = build_trajectories(recs, towers)
        assert [t.user_id for t in trajs] == ["u1", "u2"]
        assert trajs[0].areas == ("A", "B", "C") and trajs[1].areas == ("C", "C", "D")
        for t in trajs:
            stamps = [v.timestamp for v in t.visits]
            assert stamps == sorted(stamps)

    def test_same_timestamp_keeps_input_order(self, towers):
        recs = [CdrRecord("u", None, T0, 0, "sms", "tB"), CdrRecord("u", None, T0, 0, "sms", "tA")]
        assert build_trajectories(recs, towers)[0].areas == ("B", "A")

    def test_empty(self, towers):
        assert build_trajectories([], towers) == []

    @given(st.lists(st.tuples(st.sampled_from("uvw"), st.integers(0, 50), st.sampled_from("ABCD")),
                    max_size=40), st.randoms(use_true_random=False))
    def test_permutation_invariance(self, events, rnd):
        towers = make_towers()
        # distinct (user, time) pairs so no same-timestamp tie-break is involved
        seen = {}
        for u, k, a in events:
            seen[(u, k)] = a
        recs = [CdrRecord(u, None, T0 + timedelta(minutes=k), 0, "sms", f"t{a}") for (u, k), a in seen.items()]
        shuffled = recs[:]
        rnd.shuffle(shuffled)
        a = build_trajectories(recs, towers)
        b = build_trajectories(shuffled, towers)
        assert a == b
        for t in a:
            assert sum(t.visit_counts.values()) == t.n_visits
            assert all(n >= 1 for n in t.visit_counts.values())


class TestHome:
    night = NightWindow(19, 7)

    def traj(self, towers, spec):
        recs = [CdrRecord("u", None, T0.replace(hour=h) + timedelta(days=d), 0, "sms", f"t{a}")
                for d, (h, a) in enumerate(spec)]
        return build_trajectories(recs, towers)[0]

    def test_unanimous(self, towers):
        h = detect_home(self.traj(towers, [(22, "A")] * 5 + [(12, "B")] * 9), self.night)
        assert h.home_area_id == "A" and h.night_visit_count == 5

    def test_majority(self, towers):
        h = detect_home(self.traj(towers, [(22, "A")] * 3 + [(2, "B")] * 2), self.night)
        assert h.home_area_id == "A" and h.night_visit_count == 3

    def test_tie_lowest_id(self, towers):
        h = detect_home(self.traj(towers, [(22, "C")] * 2 + [(2, "B")] * 2), self.night)
        assert h.home_area_id == "B"

    def test_daytime_fallback(self, towers):
        h = detect_home(self.traj(towers, [(10, "C")] * 3 + [(14, "A")]), self.night)
        assert h.home_area_id == "C" and h.night_visit_count == 0

    def test_empty(self):
        from cdrcontain.cdr import Trajectory

        with pytest.raises(ValueError):
            detect_home(Trajectory("u", ()), self.night)

    def test_offset_shifts_night(self, towers):
        traj = self.traj(towers, [(17, "A")] * 2 + [(10, "B")])
        assert detect_home(traj, self.night, 0).home_area_id == "A"  # no night visits: fallback
        assert detect_home(traj, self.night, 3).night_visit_count == 2  # 20:00 local

    @given(st.lists(st.tuples(st.integers(0, 23), st.sampled_from("ABCD")), min_size=1, max_size=30))
    def test_home_is_night_argmax(self, spec):
        towers = make_towers()
        traj = self.traj(towers, spec)
        home = detect_home(traj, self.night)
        night = Counter(a for h, a in spec if self.night.contains(T0.replace(hour=h)))
        counts = night or Counter(a for _, a in spec)
        assert counts[home.home_area_id] == max(counts.values())


def test_night_window_wraps():
    w = NightWindow(19, 7)
    assert w.contains(T0.replace(hour=23)) and w.contains(T0.replace(hour=3))
    assert not w.contains(T0.replace(hour=7)) and not w.contains(T0.replace(hour=12))
    assert NightWindow(1, 5).contains(T0.replace(hour=4))
    with pytest.raises(ValueError):
        NightWindow(24, 3)


def test_day_class_local_date():
    sat_late = datetime(2014, 3, 8, 23, 30, tzinfo=timezone.utc)
    assert day_class(sat_late) == "weekend"
    assert day_class(sat_late, utc_offset_hours=1) == "weekend"  # Sunday 00:30
    assert day_class(datetime(2014, 3, 9, 23, 30, tzinfo=timezone.utc), utc_offset_hours=1) == "weekday"


class TestSplit:
    def records(self, towers):
        return make_records({"u": "ABCDABCDAB"}, towers)  # hourly from T0

    def test_hand_count(self, towers):
        recs = self.records(towers)
        window = (T0, T0 + timedelta(hours=10))
        train, test = split_by_period(recs, T0 + timedelta(hours=3, minutes=30), window)
        assert (len(train), len(test)) == (4, 6)

    def test_boundaries(self, towers):
        recs = self.records(towers)
        window = (T0, T0 + timedelta(hours=10))
        assert split_by_period(recs, T0, window) == ([], recs)
        assert split_by_period(recs, window[1], window) == (recs, [])

    def test_outside_window(self, towers):
        with pytest.raises(ValueError):
            split_by_period(self.records(towers), T0 - timedelta(seconds=1), (T0, T0 + timedelta(hours=10)))

    @settings(max_examples=50)
    @given(st.integers(0, 600))
    def test_partition(self, minutes):
        towers = make_towers()
        recs = self.records(towers)
        window = (T0, T0 + timedelta(hours=10))
        train, test = split_by_period(recs, T0 + timedelta(minutes=minutes), window)
        assert train + test == recs
        assert all(r.timestamp < T0 + timedelta(minutes=minutes) <= s.timestamp for r in train for s in test)
