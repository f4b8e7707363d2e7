from __future__ import annotations

from collections import defaultdict
from datetime import timedelta
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdrcontain.cdr import HomeAssignment, day_class
from cdrcontain.mobility import (
    MobilityMatrix,
    TransitionCounts,
    allocate_population,
    estimate_matrix,
    quarantine_areas,
    read_matrix,
    reestimate_without_users,
    write_matrix,
)

from .conftest import T0, make_trajectories

AREAS = ("A", "B", "C", "D")


def oracle_matrix(trajectories, area_ids, day_class_filter="all"):
    """Pooled transition counts by nested loops, normalized with exact fractions."""
    counts = defaultdict(int)
    for t in trajectories:
        for k in range(1, len(t.visits)):
            if day_class_filter != "all" and day_class(t.visits[k].timestamp) != day_class_filter:
                continue
            counts[t.visits[k - 1].area_id, t.visits[k].area_id] += 1
    out = {}
    for i in area_ids:
        total = sum(counts[i, j] for j in area_ids)
        for j in area_ids:
            out[i, j] = Fraction(counts[i, j], total) if total else Fraction(int(i == j))
    return out


def assert_matches_oracle(matrix, oracle):
    for (i, j), p in oracle.items():
        assert matrix[i, j] == float(p), (i, j)


class TestEstimate:
    def test_hand_example(self):
        # A->B, A->B, A->C with returns in between
        trajs = make_trajectories({"u": "ABABAC"})
        m = estimate_matrix(trajs, area_ids=AREAS)
        assert m["A", "B"] == 2 / 3
        assert m["A", "C"] == 1 / 3 and m["B", "A"] == 1.0
        assert m["C", "C"] == 1.0 and m["D", "D"] == 1.0  # never left: identity rows

    def test_stationary_user(self):
        m = estimate_matrix(make_trajectories({"u": "AAAA"}), area_ids=AREAS)
        assert m["A", "A"] == 1.0 and m.max_row_error() == 0.0

    def test_block_diagonal(self):
        m = estimate_matrix(make_trajectories({"u": "ABBA", "v": "CDDC"}), area_ids=AREAS)
        v = m.values
        assert not v[:2, 2:].any() and not v[2:, :2].any()
        assert m.is_row_stochastic()
        assert_matches_oracle(m, oracle_matrix(make_trajectories({"u": "ABBA", "v": "CDDC"}), AREAS))

    def test_no_transitions(self):
        with pytest.raises(ValueError):
            estimate_matrix(make_trajectories({"u": "A", "v": "B"}), area_ids=AREAS)
        with pytest.raises(ValueError):
            estimate_matrix([])

    def test_destination_day_classifies(self):
        # Friday 23:00 -> Saturday 01:00 is a weekend transition
        fri = T0 + timedelta(days=4, hours=11)
        trajs = make_trajectories({"u": "AB"}, start=fri, step=timedelta(hours=2))
        assert day_class(trajs[0].visits[1].timestamp) == "weekend"
        counts = TransitionCounts.from_trajectories(trajs, AREAS)
        assert counts.totals("weekend")[0, 1] == 1 and counts.totals("weekday").sum() == 0
        assert estimate_matrix(trajs, "weekend", AREAS)["A", "B"] == 1.0
        with pytest.raises(ValueError):
            estimate_matrix(trajs, "weekday", AREAS)

    def test_unknown_area(self):
        with pytest.raises(ValueError):
            estimate_matrix(make_trajectories({"u": "AB"}), area_ids=("A",))

    @settings(max_examples=60, deadline=None)
    @given(st.dictionaries(st.sampled_from([f"u{i}" for i in range(10)]),
                           st.text(alphabet="ABCD", min_size=1, max_size=30), min_size=1),
           st.sampled_from(["all", "weekday", "weekend"]))
    def test_equals_brute_force(self, paths, cls):
        # 7-hour steps walk the events across weekends
        trajs = make_trajectories(paths, step=timedelta(hours=7))
        oracle = oracle_matrix(trajs, AREAS, cls)
        counts = TransitionCounts.from_trajectories(trajs, AREAS)
        if counts.totals(cls).sum() == 0:
            with pytest.raises(ValueError):
                estimate_matrix(trajs, cls, AREAS)
            return
        m = estimate_matrix(trajs, cls, AREAS)
        assert_matches_oracle(m, oracle)
        assert m.is_row_stochastic(1e-12)


def random_stochastic(rng, n, zero_share=0.3):
    v = rng.random((n, n)) * (rng.random((n, n)) > zero_share)
    v[np.arange(n), np.arange(n)] += 0.01
    return v / v.sum(axis=1, keepdims=True)


class TestQuarantine:
    def test_single_area(self):
        rng = np.random.default_rng(0)
        m = MobilityMatrix(random_stochastic(rng, 5), tuple("ABCDE"))
        q = quarantine_areas(m, {"C"})
        v = q.values
        assert v[2, 2] == 1.0
        assert not np.delete(v[2], 2).any() and not np.delete(v[:, 2], 2).any()
        assert q.is_row_stochastic()

    def test_hand_example(self):
        m = MobilityMatrix(np.array([[0.5, 0.3, 0.2], [0.1, 0.8, 0.1], [0.0, 0.4, 0.6]]), ("1", "2", "3"))
        v = quarantine_areas(m, {"2"}).values
        np.testing.assert_allclose(v, [[0.8, 0.0, 0.2], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], atol=1e-15)
        assert np.abs(v.sum(axis=1) - 1).max() <= 1e-12

    def test_idempotent(self):
        rng = np.random.default_rng(1)
        m = MobilityMatrix(random_stochastic(rng, 6), tuple("ABCDEF"))
        once = quarantine_areas(m, {"B", "E"})
        np.testing.assert_array_equal(quarantine_areas(once, {"B"}).values, once.values)

    def test_errors(self):
        m = MobilityMatrix(np.eye(2), ("A", "B"))
        with pytest.raises(ValueError):
            quarantine_areas(m, {"Z"})
        with pytest.raises(ValueError):
            quarantine_areas(m, set())

    @settings(max_examples=60)
    @given(st.integers(2, 8), st.integers(0, 2**32 - 1), st.data())
    def test_properties(self, n, seed, data):
        rng = np.random.default_rng(seed)
        ids = tuple(f"a{i}" for i in range(n))
        m = MobilityMatrix(random_stochastic(rng, n), ids)
        chosen = data.draw(st.sets(st.sampled_from(ids), min_size=1))
        v = quarantine_areas(m, chosen).values
        assert np.abs(v.sum(axis=1) - 1).max() <= 1e-12
        assert v.min() >= 0 and v.max() <= 1
        off = ~np.eye(n, dtype=bool)
        assert np.all(v[off] <= m.values[off])


class TestReestimate:
    paths = {"u": "AABAC", "v": "CCDC", "w": "ABAB"}

    def test_exclude_nobody(self):
        trajs = make_trajectories(self.paths)
        np.testing.assert_array_equal(reestimate_without_users(trajs, set(), area_ids=AREAS).values,
                                      estimate_matrix(trajs, area_ids=AREAS).values)

    def test_exclude_only_visitor(self):
        trajs = make_trajectories(self.paths)
        m = reestimate_without_users(trajs, {"v"}, area_ids=AREAS)
        assert m["D", "D"] == 1.0 and m.values[:, 3].sum() == 1.0
        kept = [t for t in trajs if t.user_id != "v"]
        assert_matches_oracle(m, oracle_matrix(kept, AREAS))

    def test_identical_users(self):
        trajs = make_trajectories({"u": "ABCA", "v": "ABCA"})
        np.testing.assert_array_equal(reestimate_without_users(trajs, {"v"}, area_ids=AREAS).values,
                                      estimate_matrix(trajs, area_ids=AREAS).values)

    def test_errors(self):
        trajs = make_trajectories(self.paths)
        with pytest.raises(ValueError):
            reestimate_without_users(trajs, {"u", "v", "w"}, area_ids=AREAS)
        with pytest.raises(ValueError):
            reestimate_without_users(trajs, {"nobody"}, area_ids=AREAS)

    def test_counts_path_agrees(self):
        trajs = make_trajectories(self.paths)
        counts = TransitionCounts.from_trajectories(trajs, AREAS)
        np.testing.assert_array_equal(counts.matrix("all", {"u"}).values,
                                      reestimate_without_users(trajs, {"u"}, area_ids=AREAS).values)


class TestAllocate:
    def homes(self, spec):
        return [HomeAssignment(f"u{k}", a, 0) for k, a in enumerate(spec)]

    def test_even(self):
        assert allocate_population(self.homes("AB"), 1000, ("A", "B")).tolist() == [500, 500]

    def test_two_to_one(self):
        assert allocate_population(self.homes("AAB"), 999, ("A", "B")).tolist() == [666, 333]

    def test_unhomed_area_gets_zero(self):
        assert allocate_population(self.homes("AAB"), 10, ("A", "B", "C")).tolist() == [7, 3, 0]

    def test_errors(self):
        with pytest.raises(ValueError):
            allocate_population([], 10, ("A",))
        with pytest.raises(ValueError):
            allocate_population(self.homes("A"), 0, ("A",))
        with pytest.raises(ValueError):
            allocate_population(self.homes("Z"), 10, ("A",))

    @given(st.lists(st.sampled_from("ABCDE"), min_size=1, max_size=40), st.integers(1, 10**9))
    def test_sum_exact(self, spec, total):
        pops = allocate_population(self.homes(spec), total, tuple("ABCDE"))
        assert pops.sum() == total
        share = np.array([spec.count(a) for a in "ABCDE"]) / len(spec) * total
        assert np.all(np.abs(pops - share) < 1.0)


def test_matrix_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    m = MobilityMatrix(random_stochastic(rng, 4), AREAS, "weekend", "abc123")
    write_matrix(m, tmp_path / "m.csv")
    assert (tmp_path / "m.meta.json").exists()
    back = read_matrix(tmp_path / "m.csv")
    np.testing.assert_array_equal(back.values, m.values)
    assert (back.area_ids, back.day_class, back.source_digest) == (AREAS, "weekend", "abc123")
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "origin_area,dest_area,probability"


def test_matrix_validation():
    with pytest.raises(ValueError):
        MobilityMatrix(np.eye(3), ("A", "B"))
    with pytest.raises(ValueError):
        MobilityMatrix(np.eye(2), ("A", "B"), day_class="holiday")
    m = MobilityMatrix(np.eye(2), ("A", "B"))
    with pytest.raises(ValueError):
        m.values[0, 0] = 0.5
