"""Reproducible synthetic CDR datasets.

Users move by exploration and preferential return anchored at a home area:
at each communication event a user relocates with probability ``jump_prob``
(scaled by ``weekend_factor`` on weekends). A relocation goes home with
probability ``return_home_bias``; otherwise the user explores a new area
with probability ``exploration_prob * S**-exploration_gamma`` (``S`` = number
of distinct areas visited so far, destination weighted by population times
``distance**-distance_decay``) or returns to an already visited area in
proportion to past visits. Night-time events bring the user back home with
probability ``night_home_prob``.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, fields
from datetime import date, datetime, time, timedelta, timezone
from pathlib import Path

import numpy as np
import yaml

from .cdr import (
    CDR_HEADER,
    Area,
    AreaRegistry,
    HomeAssignment,
    NightWindow,
    Tower,
    TowerRegistry,
    write_homes,
)
from .geodesy import pairwise_km


@dataclass(frozen=True)
class GeneratorConfig:
    n_users: int = 1000
    n_areas: int = 50
    towers_per_area: int = 3
    start_date: str = "2014-02-28"
    n_days: int = 60
    mean_daily_events: float = 4.0
    event_rate_sigma: float = 0.8
    jump_prob: float = 0.3
    exploration_prob: float = 0.6
    exploration_gamma: float = 0.21
    return_home_bias: float = 0.5
    distance_decay: float = 2.0
    weekend_factor: float = 0.5
    night_home_prob: float = 0.9
    night_start_hour: int = 19
    night_end_hour: int = 7
    utc_offset_hours: float = 0.0
    call_share: float = 0.6
    mean_call_duration_s: float = 90.0
    total_population: int = 2_000_000
    population_sigma: float = 1.0
    lat_min: float = 4.4
    lat_max: float = 10.7
    lon_min: float = -8.6
    lon_max: float = -2.5

    def __post_init__(self):
        if self.n_users <= 0 or self.n_areas <= 0:
            raise ValueError("n_users and n_areas must be positive")
        if self.towers_per_area <= 0 or self.n_days <= 0:
            raise ValueError("towers_per_area and n_days must be positive")
        if self.total_population < self.n_areas:
            raise ValueError("total_population must give every area at least one person")
        for name in ("jump_prob", "exploration_prob", "return_home_bias", "night_home_prob", "call_share"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")

    @classmethod
    def from_dict(cls, data: dict | None) -> "GeneratorConfig":
        data = dict(data or {})
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown generator config keys: {sorted(unknown)}")
        if "start_date" in data:
            data["start_date"] = str(data["start_date"])
        return cls(**data)

    @property
    def window(self) -> tuple[datetime, datetime]:
        start = datetime.combine(date.fromisoformat(self.start_date), time(), tzinfo=timezone.utc)
        return start, start + timedelta(days=self.n_days)


@dataclass
class SyntheticDataset:
    cdr_path: Path
    tower_path: Path
    area_path: Path
    home_path: Path
    towers: TowerRegistry
    areas: AreaRegistry
    homes: dict[str, HomeAssignment]
    window: tuple[datetime, datetime]


def _largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    quota = weights / weights.sum() * total
    out = np.floor(quota).astype(np.int64)
    short = total - int(out.sum())
    order = np.lexsort((np.arange(len(weights)), -(quota - out)))
    out[order[:short]] += 1
    return out


def generate_synthetic_cdr(config: GeneratorConfig, seed: int, out_dir) -> SyntheticDataset:
    """Write a synthetic dataset into ``out_dir`` and return its handles.

    Output is a pure function of ``(config, seed)``: rerunning produces
    byte-identical files.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    n_areas, n_users = config.n_areas, config.n_users

    width = len(str(n_areas - 1))
    area_ids = [f"SP{i:0{width}d}" for i in range(n_areas)]
    centers_lat = rng.uniform(config.lat_min, config.lat_max, n_areas)
    centers_lon = rng.uniform(config.lon_min, config.lon_max, n_areas)
    pop_weights = rng.lognormal(0.0, config.population_sigma, n_areas)
    populations = np.maximum(_largest_remainder(pop_weights, config.total_population - n_areas), 0) + 1
    areas = AreaRegistry(Area(a, f"Area {a}", int(p)) for a, p in zip(area_ids, populations))

    twidth = len(str(n_areas * config.towers_per_area - 1))
    towers = []
    for i, a in enumerate(area_ids):
        jitter = rng.uniform(-0.03, 0.03, (config.towers_per_area, 2))
        for k in range(config.towers_per_area):
            tid = f"T{i * config.towers_per_area + k:0{twidth}d}"
            towers.append(Tower(tid, round(float(centers_lat[i] + jitter[k, 0]), 6),
                                round(float(centers_lon[i] + jitter[k, 1]), 6), a))
    registry = TowerRegistry(towers)
    cent = registry.area_centroids()
    dist = pairwise_km([cent[a][0] for a in area_ids], [cent[a][1] for a in area_ids])
    np.fill_diagonal(dist, np.inf)
    attract = populations[None, :] * np.maximum(dist, 1.0) ** (-config.distance_decay)

    uwidth = len(str(n_users - 1))
    user_ids = [f"U{u:0{uwidth}d}" for u in range(n_users)]
    homes_idx = rng.choice(n_areas, size=n_users, p=populations / populations.sum())
    sigma = config.event_rate_sigma
    rates = config.mean_daily_events * rng.lognormal(-0.5 * sigma**2, sigma, n_users)

    night = NightWindow(config.night_start_hour, config.night_end_hour)
    start, _ = config.window
    day_info = []
    for d in range(config.n_days):
        day_start = start + timedelta(days=d)
        local = day_start + timedelta(hours=config.utc_offset_hours)
        day_info.append((int(day_start.timestamp()), local.weekday() >= 5))
    night_hours = np.array([night.contains(start + timedelta(hours=h - config.utc_offset_hours),
                                           config.utc_offset_hours) for h in range(24)])

    rows = []
    for u in range(n_users):
        home = int(homes_idx[u])
        loc = home
        visits = np.zeros(n_areas, dtype=np.int64)
        counts = rng.poisson(rates[u], config.n_days)
        if counts.sum() == 0:
            counts[rng.integers(config.n_days)] = 1
        total = int(counts.sum())
        secs = rng.integers(0, 86400, total)
        draws = rng.random((total, 6))
        towers_pick = rng.integers(0, config.towers_per_area, total)
        callees = rng.integers(0, n_users - 1, total) if n_users > 1 else np.zeros(total, dtype=int)
        durations = 1 + rng.exponential(config.mean_call_duration_s, total).astype(np.int64)
        pos = 0
        for d in range(config.n_days):
            c = int(counts[d])
            if not c:
                continue
            day_ts, weekend = day_info[d]
            jump = config.jump_prob * (config.weekend_factor if weekend else 1.0)
            for s in np.sort(secs[pos:pos + c]):
                r = draws[pos]
                if night_hours[(int(s) // 3600 + int(config.utc_offset_hours)) % 24] and loc != home:
                    if r[0] < config.night_home_prob:
                        loc = home
                elif r[1] < jump:
                    if r[2] < config.return_home_bias:
                        loc = home
                    else:
                        loc = _relocate(loc, visits, attract, config, r[3], r[4])
                visits[loc] += 1
                callee = int(callees[pos])
                callee += callee >= u
                is_call = r[5] < config.call_share
                rows.append((day_ts + int(s), u, pos, callee,
                             int(durations[pos]) if is_call else 0,
                             "call" if is_call else "sms",
                             f"T{loc * config.towers_per_area + int(towers_pick[pos]):0{twidth}d}"))
                pos += 1

    rows.sort(key=lambda t: (t[0], t[1], t[2]))
    cdr_path = out_dir / "cdr.csv"
    with open(cdr_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CDR_HEADER)
        for ts, u, _, callee, dur, kind, tower in rows:
            stamp = datetime.fromtimestamp(ts, tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
            w.writerow([user_ids[u], user_ids[callee] if n_users > 1 else "", stamp, dur, kind, tower])

    tower_path = out_dir / "towers.csv"
    area_path = out_dir / "areas.csv"
    home_path = out_dir / "homes_truth.csv"
    registry.to_csv(tower_path)
    areas.to_csv(area_path)
    homes = {user_ids[u]: HomeAssignment(user_ids[u], area_ids[int(homes_idx[u])], 0) for u in range(n_users)}
    write_homes(homes.values(), home_path)
    with open(out_dir / "generator_config.yaml", "w") as fh:
        yaml.safe_dump({"seed": seed, **asdict(config)}, fh, sort_keys=True)
    return SyntheticDataset(cdr_path, tower_path, area_path, home_path, registry, areas, homes, config.window)


def _relocate(loc: int, visits: np.ndarray, attract: np.ndarray, config: GeneratorConfig,
              u_explore: float, u_pick: float) -> int:
    seen = visits > 0
    n_seen = int(seen.sum())
    explore = u_explore < config.exploration_prob * max(n_seen, 1) ** (-config.exploration_gamma)
    if not explore:
        weights = visits.astype(float)
        weights[loc] = 0.0
        if weights.sum() <= 0:
            explore = True
    if explore:
        weights = attract[loc].copy()
        weights[seen] = 0.0
        weights[loc] = 0.0
        if weights.sum() <= 0:
            return loc
    cum = np.cumsum(weights)
    return int(min(np.searchsorted(cum, u_pick * cum[-1], side="right"), len(cum) - 1))
