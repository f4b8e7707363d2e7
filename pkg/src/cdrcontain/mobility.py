"""Mobility matrices estimated from trajectories, plus isolation transforms."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .cdr import HomeAssignment, Trajectory, day_class

DAY_CLASSES = ("weekday", "weekend", "all")
MATRIX_HEADER = ("origin_area", "dest_area", "probability")


@dataclass(frozen=True, eq=False)
class MobilityMatrix:
    """Row-stochastic area-to-area daily movement probabilities.

    ``values[i, j]`` is the probability that someone in ``area_ids[i]``
    travels to ``area_ids[j]`` within one time step. Stored dense.
    """

    values: np.ndarray
    area_ids: tuple[str, ...]
    day_class: str = "all"
    source_digest: str = ""
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        n = len(self.area_ids)
        if values.shape != (n, n):
            raise ValueError(f"matrix shape {values.shape} does not match {n} areas")
        if self.day_class not in DAY_CLASSES:
            raise ValueError(f"unknown day class {self.day_class!r}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "area_ids", tuple(self.area_ids))
        object.__setattr__(self, "index", {a: i for i, a in enumerate(self.area_ids)})

    @property
    def n(self) -> int:
        return len(self.area_ids)

    def __getitem__(self, pair: tuple[str, str]) -> float:
        return float(self.values[self.index[pair[0]], self.index[pair[1]]])

    def max_row_error(self) -> float:
        return float(np.abs(self.values.sum(axis=1) - 1.0).max())

    def is_row_stochastic(self, tol: float = 1e-12) -> bool:
        v = self.values
        return bool(v.min() >= 0.0 and v.max() <= 1.0 and self.max_row_error() <= tol)

    def replace(self, values: np.ndarray) -> "MobilityMatrix":
        return MobilityMatrix(values, self.area_ids, self.day_class, self.source_digest)


@dataclass(frozen=True, eq=False)
class TransitionCounts:
    """Per-user transition counts in COO form.

    Each entry is ``(user, origin, dest, weekend) -> count`` where indices refer
    to ``user_ids`` and ``area_ids``. Consecutive visits in the same area count
    as ``i -> i`` transitions; a transition is classed by the local day of its
    destination visit.
    """

    area_ids: tuple[str, ...]
    user_ids: tuple[str, ...]
    user: np.ndarray
    origin: np.ndarray
    dest: np.ndarray
    weekend: np.ndarray
    count: np.ndarray

    @classmethod
    def from_trajectories(
        cls,
        trajectories: Iterable[Trajectory],
        area_ids: Sequence[str] | None = None,
        utc_offset_hours: float = 0.0,
    ) -> "TransitionCounts":
        trajectories = list(trajectories)
        if area_ids is None:
            area_ids = sorted({v.area_id for t in trajectories for v in t.visits})
        area_ids = tuple(area_ids)
        index = {a: i for i, a in enumerate(area_ids)}
        n = len(area_ids)
        user_ids = tuple(t.user_id for t in trajectories)
        keys: list[np.ndarray] = []
        for u, traj in enumerate(trajectories):
            if len(traj.visits) < 2:
                continue
            try:
                idx = np.fromiter((index[v.area_id] for v in traj.visits), dtype=np.int64,
                                  count=len(traj.visits))
            except KeyError as exc:
                raise ValueError(f"user {traj.user_id}: unknown area {exc}") from None
            wk = np.fromiter((day_class(v.timestamp, utc_offset_hours) == "weekend"
                              for v in traj.visits[1:]), dtype=np.int64, count=len(traj.visits) - 1)
            keys.append(((u * n + idx[:-1]) * n + idx[1:]) * 2 + wk)
        if keys:
            uniq, cnt = np.unique(np.concatenate(keys), return_counts=True)
        else:
            uniq = cnt = np.zeros(0, dtype=np.int64)
        wk = uniq % 2
        rest = uniq // 2
        dest = rest % n
        rest //= n
        origin = rest % n
        user = rest // n
        return cls(area_ids, user_ids, user, origin, dest, wk.astype(bool), cnt.astype(np.int64))

    @property
    def n_areas(self) -> int:
        return len(self.area_ids)

    def _user_index(self, users: Iterable[str]) -> np.ndarray:
        pos = {u: i for i, u in enumerate(self.user_ids)}
        try:
            return np.array(sorted(pos[u] for u in set(users)), dtype=np.int64)
        except KeyError as exc:
            raise ValueError(f"unknown user {exc}") from None

    def totals(self, day_class_filter: str = "all", exclude_users: Iterable[str] = ()) -> np.ndarray:
        """Pooled ``n x n`` integer counts over the kept users."""
        if day_class_filter not in DAY_CLASSES:
            raise ValueError(f"unknown day class {day_class_filter!r}")
        n = self.n_areas
        keep = np.ones(len(self.count), dtype=bool)
        if day_class_filter == "weekday":
            keep &= ~self.weekend
        elif day_class_filter == "weekend":
            keep &= self.weekend
        excluded = self._user_index(exclude_users)
        if len(excluded):
            keep &= ~np.isin(self.user, excluded)
        flat = np.zeros(n * n, dtype=np.int64)
        np.add.at(flat, self.origin[keep] * n + self.dest[keep], self.count[keep])
        return flat.reshape(n, n)

    def matrix(self, day_class_filter: str = "all", exclude_users: Iterable[str] = (),
               source_digest: str = "") -> MobilityMatrix:
        exclude_users = set(exclude_users)
        if exclude_users and not set(self.user_ids) - exclude_users:
            raise ValueError("excluding every user leaves no data to estimate from")
        counts = self.totals(day_class_filter, exclude_users)
        if counts.sum() == 0:
            raise ValueError(f"no {day_class_filter} transitions observed")
        return MobilityMatrix(normalize_counts(counts), self.area_ids, day_class_filter, source_digest)


def normalize_counts(counts: np.ndarray) -> np.ndarray:
    """Row-normalize counts; rows without outflow become identity rows."""
    counts = np.asarray(counts, dtype=float)
    rows = counts.sum(axis=1)
    out = np.zeros_like(counts)
    seen = rows > 0
    out[seen] = counts[seen] / rows[seen, None]
    idle = np.flatnonzero(~seen)
    out[idle, idle] = 1.0
    return out


def estimate_matrix(
    trajectories: Iterable[Trajectory],
    day_class_filter: str = "all",
    area_ids: Sequence[str] | None = None,
    utc_offset_hours: float = 0.0,
) -> MobilityMatrix:
    """Pool transition counts over users and normalize each origin row."""
    trajectories = list(trajectories)
    if not trajectories:
        raise ValueError("no trajectories")
    return TransitionCounts.from_trajectories(trajectories, area_ids, utc_offset_hours).matrix(day_class_filter)


def reestimate_without_users(
    trajectories: Iterable[Trajectory],
    excluded_users: Iterable[str],
    day_class_filter: str = "all",
    area_ids: Sequence[str] | None = None,
    utc_offset_hours: float = 0.0,
) -> MobilityMatrix:
    """Estimate the matrix after dropping every record of ``excluded_users``."""
    trajectories = list(trajectories)
    excluded = set(excluded_users)
    known = {t.user_id for t in trajectories}
    if excluded - known:
        raise ValueError(f"unknown users: {sorted(excluded - known)[:5]}")
    kept = [t for t in trajectories if t.user_id not in excluded]
    if not kept:
        raise ValueError("excluding every user leaves no data to estimate from")
    if area_ids is None:
        area_ids = sorted({v.area_id for t in trajectories for v in t.visits})
    return estimate_matrix(kept, day_class_filter, area_ids, utc_offset_hours)


def quarantine_areas(matrix: MobilityMatrix, area_set: Iterable[str]) -> MobilityMatrix:
    """Cut every quarantined area off from the rest of the network.

    Quarantined rows become identity rows. Their columns are zeroed in every
    other row and the removed probability is added to that row's diagonal,
    so travellers who would have entered a quarantined area stay put.
    """
    area_set = set(area_set)
    if not area_set:
        raise ValueError("empty quarantine set")
    unknown = area_set - set(matrix.area_ids)
    if unknown:
        raise ValueError(f"unknown areas: {sorted(unknown)}")
    q = np.array(sorted(matrix.index[a] for a in area_set))
    values = matrix.values.copy()
    removed = values[:, q].sum(axis=1)
    values[:, q] = 0.0
    diag = np.arange(matrix.n)
    values[diag, diag] += removed
    values[q, :] = 0.0
    values[q, q] = 1.0
    return matrix.replace(values)


def allocate_population(
    home_assignments: Iterable[HomeAssignment] | Mapping[str, HomeAssignment],
    total_population: int,
    area_ids: Sequence[str],
) -> np.ndarray:
    """Spread ``total_population`` over areas in proportion to homed users.

    Uses largest-remainder rounding (ties to the lower area index) so the
    result sums exactly to ``total_population``.
    """
    if isinstance(home_assignments, Mapping):
        home_assignments = home_assignments.values()
    if total_population <= 0:
        raise ValueError("total_population must be positive")
    index = {a: i for i, a in enumerate(area_ids)}
    users = np.zeros(len(area_ids), dtype=np.int64)
    for h in home_assignments:
        try:
            users[index[h.home_area_id]] += 1
        except KeyError:
            raise ValueError(f"home area {h.home_area_id} not in area list") from None
    total_users = int(users.sum())
    if total_users == 0:
        raise ValueError("no home assignments")
    scaled = users * int(total_population)
    out = scaled // total_users
    remainder = scaled % total_users
    short = int(total_population) - int(out.sum())
    order = np.lexsort((np.arange(len(users)), -remainder))
    out[order[:short]] += 1
    return out


def write_matrix(matrix: MobilityMatrix, path) -> None:
    """Write nonzero entries as CSV triplets plus a ``.meta.json`` sidecar."""
    path = Path(path)
    rows, cols = np.nonzero(matrix.values)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MATRIX_HEADER)
        for i, j in zip(rows, cols):
            w.writerow([matrix.area_ids[i], matrix.area_ids[j], repr(float(matrix.values[i, j]))])
    meta = {"day_class": matrix.day_class, "n_areas": matrix.n,
            "area_ids": list(matrix.area_ids), "source_digest": matrix.source_digest}
    with open(_meta_path(path), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_matrix(path) -> MobilityMatrix:
    path = Path(path)
    with open(_meta_path(path)) as fh:
        meta = json.load(fh)
    area_ids = tuple(meta["area_ids"])
    index = {a: i for i, a in enumerate(area_ids)}
    values = np.zeros((len(area_ids), len(area_ids)))
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        if tuple(next(reader, ())) != MATRIX_HEADER:
            raise ValueError(f"{path}: expected header {','.join(MATRIX_HEADER)}")
        for o, d, p in reader:
            values[index[o], index[d]] = float(p)
    return MobilityMatrix(values, area_ids, meta["day_class"], meta.get("source_digest", ""))


def _meta_path(path: Path) -> Path:
    return path.with_name(path.stem + ".meta.json")
