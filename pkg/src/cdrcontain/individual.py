"""Per-user spatial indicators and user selection for isolation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import sparse

from .cdr import HomeAssignment, Trajectory
from .epidemic import MetaPopState
from .geodesy import haversine_km

INDICATOR_HEADER = ("user_id", "radius_km", "entropy_nats", "home_staying", "progmosis_risk", "home_area")
DIRECTIONS = ("highest", "lowest", "random")


@dataclass(frozen=True)
class OccupancyProfile:
    """Share of a user's events spent in each visited area."""

    user_id: str
    fractions: Mapping[str, float]

    @classmethod
    def from_trajectory(cls, trajectory: Trajectory) -> "OccupancyProfile":
        if not trajectory.visits:
            raise ValueError(f"user {trajectory.user_id}: empty trajectory")
        n = trajectory.n_visits
        return cls(trajectory.user_id, {a: c / n for a, c in trajectory.visit_counts.items()})


@dataclass(frozen=True, eq=False)
class EpidemicSnapshot:
    """Infected and susceptible fractions per area on one day."""

    area_ids: tuple[str, ...]
    infected: np.ndarray
    susceptible: np.ndarray

    def __post_init__(self):
        i = np.asarray(self.infected, dtype=float)
        s = np.asarray(self.susceptible, dtype=float)
        if i.shape != (len(self.area_ids),) or s.shape != i.shape:
            raise ValueError("snapshot arrays must match the area list")
        if i.min(initial=0) < 0 or s.min(initial=0) < 0 or np.any(i + s > 1 + 1e-12):
            raise ValueError("snapshot fractions must be non-negative with i + s <= 1")
        object.__setattr__(self, "infected", i)
        object.__setattr__(self, "susceptible", s)

    @classmethod
    def from_state(cls, state: MetaPopState, area_ids: Sequence[str]) -> "EpidemicSnapshot":
        N = np.asarray(state.N, dtype=float)
        i = np.divide(state.I, N, out=np.zeros_like(N), where=N > 0)
        s = np.divide(state.S, N, out=np.zeros_like(N), where=N > 0)
        return cls(tuple(area_ids), i, s)


@dataclass(frozen=True)
class IndicatorSet:
    user_id: str
    radius_of_gyration: float
    entropy: float
    home_staying: float
    progmosis_risk: float
    home_area: str


def radius_of_gyration(trajectory: Trajectory, coords: Mapping[str, tuple[float, float]]) -> float:
    """Visit-weighted RMS great-circle distance (km) from the center of mass.

    ``coords`` maps area ids to (lat, lon) centroids; the center of mass is
    the visit-weighted arithmetic mean of those coordinates.
    """
    counts = trajectory.visit_counts
    if not counts:
        raise ValueError(f"user {trajectory.user_id}: empty trajectory")
    lat_cm, lon_cm = trajectory.center_of_mass(coords)
    areas = list(counts)
    n = np.array([counts[a] for a in areas], dtype=float)
    lat = np.array([coords[a][0] for a in areas])
    lon = np.array([coords[a][1] for a in areas])
    d = haversine_km(lat, lon, lat_cm, lon_cm)
    return float(np.sqrt((n * d**2).sum() / n.sum()))


def movement_entropy(trajectory: Trajectory) -> float:
    """Shannon entropy (nats) of the visit distribution over areas."""
    counts = trajectory.visit_counts
    if not counts:
        raise ValueError(f"user {trajectory.user_id}: empty trajectory")
    p = np.array(list(counts.values()), dtype=float) / trajectory.n_visits
    return float(-(p * np.log(p)).sum()) + 0.0


def home_staying(trajectory: Trajectory, home: HomeAssignment | str) -> float:
    """Share of the user's events located in the home area."""
    if not trajectory.visits:
        raise ValueError(f"user {trajectory.user_id}: no events")
    home_area = home.home_area_id if isinstance(home, HomeAssignment) else home
    return trajectory.visit_counts.get(home_area, 0) / trajectory.n_visits


def progmosis_risk(profile: OccupancyProfile, snapshot: EpidemicSnapshot, beta: float) -> float:
    """Contagion risk ``beta * sum_{l,m} T_l T_m (i_l s_m + i_m s_l)``.

    The double sum over ordered pairs factorizes to ``2 (T.i)(T.s)``.
    """
    total = sum(profile.fractions.values())
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"user {profile.user_id}: occupancy sums to {total}, not 1")
    index = {a: k for k, a in enumerate(snapshot.area_ids)}
    ti = ts = 0.0
    for area, frac in profile.fractions.items():
        k = index[area]
        ti += frac * snapshot.infected[k]
        ts += frac * snapshot.susceptible[k]
    return 2.0 * beta * ti * ts


class OccupancyMatrix:
    """Sparse users x areas occupancy shares for bulk risk scoring."""

    def __init__(self, trajectories: Iterable[Trajectory], area_ids: Sequence[str]):
        index = {a: k for k, a in enumerate(area_ids)}
        rows, cols, vals = [], [], []
        self.user_ids: list[str] = []
        for t in trajectories:
            if not t.visits:
                continue
            u = len(self.user_ids)
            self.user_ids.append(t.user_id)
            for area, c in t.visit_counts.items():
                rows.append(u)
                cols.append(index[area])
                vals.append(c / t.n_visits)
        self.area_ids = tuple(area_ids)
        self.shares = sparse.csr_matrix((vals, (rows, cols)), shape=(len(self.user_ids), len(area_ids)))

    def progmosis(self, snapshot: EpidemicSnapshot, beta: float) -> np.ndarray:
        if snapshot.area_ids != self.area_ids:
            raise ValueError("snapshot areas differ from occupancy areas")
        return 2.0 * beta * (self.shares @ snapshot.infected) * (self.shares @ snapshot.susceptible)


def compute_indicators(
    trajectories: Iterable[Trajectory],
    homes: Mapping[str, HomeAssignment],
    coords: Mapping[str, tuple[float, float]],
    snapshot: EpidemicSnapshot | None = None,
    beta: float = 0.0,
) -> list[IndicatorSet]:
    """Indicator table for every non-empty trajectory.

    Without a snapshot the Progmosis risk is reported as 0.
    """
    out = []
    for t in trajectories:
        if not t.visits:
            continue
        home = homes[t.user_id]
        risk = 0.0
        if snapshot is not None:
            risk = progmosis_risk(OccupancyProfile.from_trajectory(t), snapshot, beta)
        out.append(IndicatorSet(t.user_id, radius_of_gyration(t, coords), movement_entropy(t),
                                home_staying(t, home), risk, home.home_area_id))
    return out


def rank_users(
    indicator_values: Mapping[str, float],
    direction: str,
    fraction: float,
    rng: np.random.Generator | None = None,
) -> list[str]:
    """Pick ``ceil(fraction * n_users)`` users at one extreme of an indicator.

    ``direction`` is ``"highest"``, ``"lowest"`` or ``"random"`` (uniform
    draw without replacement from ``rng``). Ties go to the lower user id.
    The selection is returned sorted by user id.
    """
    if not indicator_values:
        raise ValueError("empty indicator table")
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}")
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    users = sorted(indicator_values)
    k = min(len(users), math.ceil(round(fraction * len(users), 9)))
    if direction == "random":
        if rng is None:
            raise ValueError("random selection needs an rng")
        picked = rng.choice(len(users), size=k, replace=False)
        return sorted(users[i] for i in picked)
    sign = -1.0 if direction == "highest" else 1.0
    order = sorted(users, key=lambda u: (sign * indicator_values[u], u))
    return sorted(order[:k])


def write_indicators(indicators: Iterable[IndicatorSet], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(INDICATOR_HEADER)
        for s in indicators:
            w.writerow([s.user_id, repr(s.radius_of_gyration), repr(s.entropy),
                        repr(s.home_staying), repr(s.progmosis_risk), s.home_area])
