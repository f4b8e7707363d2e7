"""Experiment configuration and the CDR-to-simulation-inputs pipeline.

An experiment is one YAML file::

    seed: 7
    workers: 1
    data:
      cdr: data/cdr.csv          # paths are relative to this file
      towers: data/towers.csv
      areas: data/areas.csv
      split: 2014-04-14T00:00:00Z
    simulation: {horizon: 210, runs: 1000, mode: stochastic}
    params: {beta: 0.45, sigma: 0.18, gamma: 0.2, rho: 0.48}
    scenarios:
      - {kind: none}
      - {kind: geo_placerank, k: 5, delay: 3}

Every key has a default except the three data paths.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np
import yaml

from .cdr import (
    AreaRegistry,
    NightWindow,
    TowerRegistry,
    build_trajectories,
    detect_homes,
    file_sha256,
    format_timestamp,
    parse_timestamp,
    read_cdr_file,
    split_by_period,
    to_local,
)
from .epidemic import EpidemicParams, SimulationCalendar
from .geo import FlowTable, compute_eigenvector_centrality, compute_place_rank
from .individual import OccupancyMatrix, compute_indicators
from .mobility import TransitionCounts, allocate_population
from .scenarios import ScenarioInputs, ScenarioSpec

log = logging.getLogger(__name__)

DEFAULT_TRAINING_SHARE = 0.75


@dataclass
class DataConfig:
    cdr: str = ""
    towers: str = ""
    areas: str = ""
    window_start: str | None = None
    window_end: str | None = None
    split: str | None = None
    utc_offset_hours: float = 0.0
    night_start_hour: int = 19
    night_end_hour: int = 7
    matrix_window: str = "evaluation"

    def __post_init__(self):
        if self.matrix_window not in ("evaluation", "training"):
            raise ValueError("matrix_window must be 'evaluation' or 'training'")


@dataclass
class SimulationConfig:
    horizon: int = 210
    runs: int = 1000
    mode: str = "stochastic"
    seed_fraction: float = 0.001
    seed_area: str | None = None
    total_population: int | None = None
    demography: bool = False
    shrink_population: bool = False
    start_date: str | None = None


@dataclass
class TargetingConfig:
    centrality_input: str = "probability"
    placerank_relaxation: float = 0.5
    placerank_tolerance: float = 1e-9

    def __post_init__(self):
        if self.centrality_input not in ("probability", "flows"):
            raise ValueError("centrality_input must be 'probability' or 'flows'")


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    targeting: TargetingConfig = field(default_factory=TargetingConfig)
    params: dict = field(default_factory=lambda: {"beta": 0.45, "sigma": 0.18, "gamma": 0.2, "rho": 0.48})
    scenarios: list = field(default_factory=lambda: [{"kind": "none"}])
    generator: dict = field(default_factory=dict)
    seed: int = 0
    workers: int = 1
    base_dir: Path = field(default=Path("."), repr=False)

    @classmethod
    def from_dict(cls, raw: dict | None, base_dir=".") -> "ExperimentConfig":
        raw = dict(raw or {})
        _reject_unknown(raw, {f.name for f in fields(cls)} - {"base_dir"}, "top level")
        sections = {}
        for name, kind in (("data", DataConfig), ("simulation", SimulationConfig), ("targeting", TargetingConfig)):
            section = dict(raw.pop(name, None) or {})
            _reject_unknown(section, {f.name for f in fields(kind)}, name)
            sections[name] = kind(**{k: _plain(v) for k, v in section.items()})
        cfg = cls(**sections, **raw, base_dir=Path(base_dir))
        EpidemicParams(**cfg.params)
        return cfg

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else (self.base_dir / p)

    def epidemic_params(self) -> EpidemicParams:
        return EpidemicParams(**self.params)

    def scenario_specs(self, **overrides) -> list[ScenarioSpec]:
        return [self.scenario_spec(s, **overrides) for s in self.scenarios]

    def scenario_spec(self, entry: dict | None = None, **overrides) -> ScenarioSpec:
        sim = self.simulation
        defaults = dict(horizon=sim.horizon, runs=sim.runs, seed=self.seed, mode=sim.mode, seed_area=sim.seed_area)
        overrides = {k: v for k, v in overrides.items() if v is not None}
        return ScenarioSpec.from_dict({**(entry or {"kind": "none"}), **overrides}, **defaults)

    def as_dict(self) -> dict:
        out = asdict(self)
        out.pop("base_dir")
        return out


def _plain(value):
    # YAML turns bare ISO timestamps into datetimes
    if isinstance(value, datetime):
        value = value if value.tzinfo else value.replace(tzinfo=timezone.utc)
        return format_timestamp(value)
    return value


def _reject_unknown(section: dict, known: set, where: str) -> None:
    unknown = set(section) - known
    if unknown:
        raise ValueError(f"unknown config keys in {where}: {sorted(unknown)}")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    if raw is not None and not isinstance(raw, dict):
        raise ValueError(f"{path}: expected a mapping at the top level")
    return ExperimentConfig.from_dict(raw, base_dir=path.parent)


def default_split(window: tuple[datetime, datetime], share: float = DEFAULT_TRAINING_SHARE) -> datetime:
    """Day boundary nearest to ``share`` of the observation window."""
    start, end = window
    target = start + (end - start) * share
    midnight = target.replace(hour=0, minute=0, second=0, microsecond=0)
    split = midnight + timedelta(days=1) if target - midnight >= timedelta(hours=12) else midnight
    return min(max(split, start), end)


@dataclass
class Dataset:
    """Parsed CDRs with the training/evaluation split applied."""

    towers: TowerRegistry
    areas: AreaRegistry
    window: tuple[datetime, datetime]
    split: datetime
    training: list
    evaluation: list
    digests: dict

    @property
    def area_ids(self) -> tuple[str, ...]:
        return self.areas.ids


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    d = cfg.data
    if not (d.cdr and d.towers and d.areas):
        raise ValueError("config data section needs cdr, towers and areas paths")
    paths = {"cdr": cfg.resolve(d.cdr), "towers": cfg.resolve(d.towers), "areas": cfg.resolve(d.areas)}
    towers = TowerRegistry.from_csv(paths["towers"])
    areas = AreaRegistry.from_csv(paths["areas"])
    window = None
    if d.window_start and d.window_end:
        window = (parse_timestamp(d.window_start), parse_timestamp(d.window_end))
    records, report = read_cdr_file(paths["cdr"], towers, window=window)
    if report.n_rejected:
        log.warning("rejected %d of %d CDR rows: %s", report.n_rejected, report.n_rows, dict(report.rejected))
    if not records:
        raise ValueError("no CDR records inside the observation window")
    if window is None:
        first = min(r.timestamp for r in records)
        last = max(r.timestamp for r in records)
        start = first.replace(hour=0, minute=0, second=0)
        window = (start, last.replace(hour=0, minute=0, second=0) + timedelta(days=1))
    split = parse_timestamp(d.split) if d.split else default_split(window)
    train, test = split_by_period(records, split, window)
    if not train or not test:
        raise ValueError(f"split {format_timestamp(split)} leaves an empty training or evaluation period")
    digests = {name: file_sha256(p) for name, p in sorted(paths.items())}
    return Dataset(towers, areas, window, split, build_trajectories(train, towers),
                   build_trajectories(test, towers), digests)


def build_inputs(cfg: ExperimentConfig, dataset: Dataset | None = None) -> ScenarioInputs:
    """Everything a scenario needs, derived from the configured CDRs.

    Homes, indicators, occupancy and area scores use the training period.
    The simulation matrices use the period named by ``data.matrix_window``.
    """
    ds = dataset or load_dataset(cfg)
    d, sim, tgt = cfg.data, cfg.simulation, cfg.targeting
    area_ids = ds.area_ids
    night = NightWindow(d.night_start_hour, d.night_end_hour)
    homes = detect_homes(ds.training, night, d.utc_offset_hours)
    total = sim.total_population or ds.areas.total_population
    populations = allocate_population(homes, total, area_ids)

    params = cfg.epidemic_params()
    if sim.demography:
        params = params.with_demography(populations)

    train_counts = TransitionCounts.from_trajectories(ds.training, area_ids, d.utc_offset_hours)
    sim_trajs = ds.evaluation if d.matrix_window == "evaluation" else ds.training
    sim_counts = TransitionCounts.from_trajectories(sim_trajs, area_ids, d.utc_offset_hours)
    digest = ds.digests["cdr"][:16]
    weekday = sim_counts.matrix("weekday", source_digest=digest)
    weekend = sim_counts.matrix("weekend", source_digest=digest)

    placerank = compute_place_rank(FlowTable.from_counts(train_counts), tgt.placerank_tolerance,
                                   relaxation=tgt.placerank_relaxation)
    if tgt.centrality_input == "flows":
        centrality = compute_eigenvector_centrality(train_counts.totals().astype(float), area_ids=area_ids)
    else:
        centrality = compute_eigenvector_centrality(train_counts.matrix("all"))

    coords = ds.towers.area_centroids()
    indicators = {s.user_id: s for s in compute_indicators(ds.training, homes, coords)}
    start = sim.start_date or to_local(ds.split, d.utc_offset_hours).date().isoformat()
    calendar = SimulationCalendar(datetime.fromisoformat(str(start)).date())
    return ScenarioInputs(
        area_ids=area_ids,
        populations=populations,
        params=params,
        calendar=calendar,
        weekday=weekday,
        weekend=weekend,
        sim_counts=sim_counts,
        placerank=placerank,
        centrality=centrality,
        indicators=indicators,
        occupancy=OccupancyMatrix(ds.training, area_ids),
        seed_fraction=sim.seed_fraction,
        shrink_population=sim.shrink_population,
        digests={**ds.digests, "split": format_timestamp(ds.split)},
    )


def check_seed_fraction(inputs: ScenarioInputs) -> None:
    """Warn when the seed rounds to zero infected people."""
    if round(inputs.seed_fraction * float(np.sum(inputs.populations))) == 0:
        log.warning("seed fraction %g of %d people rounds to no infections",
                    inputs.seed_fraction, int(np.sum(inputs.populations)))
