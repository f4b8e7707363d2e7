"""Monte Carlo containment experiments.

A :class:`ScenarioInputs` bundle carries everything derived from the CDRs:
baseline simulation matrices (evaluation window), transition counts for
re-estimating matrices without isolated users, and the area scores and user
indicators computed on the training window. :func:`run_scenario` replays the
epidemic ``spec.runs`` times; run ``r`` always draws from streams derived from
``(spec.seed, r)``, so every scenario compared under one seed sees the same
seed areas and the same dynamics noise.
"""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .epidemic import (
    EpidemicParams,
    Intervention,
    MetaPopState,
    SimulationCalendar,
    run,
    seed_outbreak,
    seed_size,
)
from .geo import AreaScores, select_top_areas
from .individual import EpidemicSnapshot, IndicatorSet, OccupancyMatrix, rank_users
from .mobility import MobilityMatrix, TransitionCounts, quarantine_areas

log = logging.getLogger(__name__)

SCENARIO_KINDS = (
    "none",
    "geo_centrality",
    "geo_placerank",
    "indiv_random",
    "indiv_radius",
    "indiv_entropy",
    "indiv_homestay",
    "indiv_progmosis",
)
# indicator attribute and the extreme that gets isolated
_STATIC_INDICATORS = {
    "indiv_radius": ("radius_of_gyration", "highest"),
    "indiv_entropy": ("entropy", "highest"),
    "indiv_homestay": ("home_staying", "lowest"),
}

AGGREGATE_HEADER = ("day", "mean_cum_infections", "ci_lo", "ci_hi")
RUNS_HEADER = ("run_id", "day", "S", "E", "I", "R", "cum_infections")
TIMESERIES_HEADER = ("run_id", "day", "area_id", "S", "E", "I", "R", "cum_infections")
COMPARISON_HEADER = ("scenario", "final_mean", "ci_lo", "ci_hi", "reduction_vs_none")


class ScenarioError(RuntimeError):
    """A run failed; ``run_index`` says which one."""

    def __init__(self, run_index: int, message: str):
        super().__init__(f"run {run_index}: {message}")
        self.run_index = run_index


@dataclass(frozen=True)
class ScenarioSpec:
    kind: str = "none"
    k: int | None = None
    fraction: float | None = None
    delay: int = 3
    horizon: int = 210
    runs: int = 1000
    seed: int = 0
    mode: str = "stochastic"
    seed_area: str | None = None
    label: str | None = None

    def __post_init__(self):
        if self.kind not in SCENARIO_KINDS:
            raise ValueError(f"unknown scenario kind {self.kind!r}")
        if self.runs < 1:
            raise ValueError("runs must be at least 1")
        if not 0 <= self.delay < self.horizon:
            raise ValueError("delay must lie in [0, horizon)")
        if self.mode not in ("deterministic", "stochastic"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.kind.startswith("geo_") and (self.k is None or self.k < 0):
            raise ValueError(f"{self.kind} needs k >= 0")
        if self.kind.startswith("indiv_") and (self.fraction is None or not 0.0 <= self.fraction <= 1.0):
            raise ValueError(f"{self.kind} needs a fraction in [0, 1]")

    @property
    def name(self) -> str:
        if self.label:
            return self.label
        if self.kind == "none":
            return "none"
        size = f"k{self.k}" if self.kind.startswith("geo_") else f"f{self.fraction:g}"
        return f"{self.kind}_{size}_d{self.delay}"

    @classmethod
    def from_dict(cls, data: dict, **defaults) -> "ScenarioSpec":
        merged = {**defaults, **{k: v for k, v in data.items() if v is not None}}
        return cls(**merged)


@dataclass(eq=False)
class ScenarioInputs:
    area_ids: tuple[str, ...]
    populations: np.ndarray
    params: EpidemicParams
    calendar: SimulationCalendar
    weekday: MobilityMatrix
    weekend: MobilityMatrix
    sim_counts: TransitionCounts
    placerank: AreaScores
    centrality: AreaScores
    indicators: dict[str, IndicatorSet]
    occupancy: OccupancyMatrix
    seed_fraction: float = 0.001
    shrink_population: bool = False
    home_users: np.ndarray | None = None
    digests: dict = field(default_factory=dict)

    def __post_init__(self):
        self.populations = np.asarray(self.populations, dtype=np.int64)
        index = {a: i for i, a in enumerate(self.area_ids)}
        users = np.zeros(len(self.area_ids), dtype=np.int64)
        for s in self.indicators.values():
            users[index[s.home_area]] += 1
        self.home_users = users
        self._known = set(self.sim_counts.user_ids)


@dataclass(frozen=True, eq=False)
class AggregateSeries:
    mean: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    n_runs: int

    def __len__(self) -> int:
        return len(self.mean)


@dataclass(eq=False)
class ScenarioResult:
    spec: ScenarioSpec
    totals: np.ndarray  # (runs, horizon + 1, 5): S, E, I, R, cumulative infections
    seed_areas: list[str]
    seed_requested: list[int]
    seed_realized: list
    aggregate: AggregateSeries
    area_series: list | None = None

    @property
    def cumulative(self) -> np.ndarray:
        return self.totals[:, :, 4]


def aggregate_runs(per_run_series) -> AggregateSeries:
    """Pointwise mean and empirical 2.5/97.5 percentiles across runs.

    Percentiles interpolate linearly between order statistics.
    """
    series = [np.asarray(s, dtype=float) for s in per_run_series]
    if not series:
        raise ValueError("no runs to aggregate")
    if len({s.shape for s in series}) != 1:
        raise ValueError("run series have different lengths")
    data = np.stack(series)
    base = data[0]
    mean = base + (data - base).mean(axis=0)
    lo, hi = np.percentile(data, [2.5, 97.5], axis=0)
    return AggregateSeries(mean, lo, hi, len(series))


class _Plan:
    """Per-scenario work that does not depend on the run index."""

    def __init__(self, inputs: ScenarioInputs, spec: ScenarioSpec):
        self.inputs = inputs
        self.spec = spec
        self.static: Intervention | None = None
        self.targets: list[str] = []
        kind = spec.kind
        if kind.startswith("geo_"):
            scores = inputs.placerank if kind == "geo_placerank" else inputs.centrality
            if spec.k:
                self.targets = select_top_areas(scores, spec.k)
                self.static = Intervention(quarantine_areas(inputs.weekday, self.targets),
                                           quarantine_areas(inputs.weekend, self.targets))
            else:
                self.static = Intervention(inputs.weekday, inputs.weekend)
        elif kind in _STATIC_INDICATORS:
            attr, direction = _STATIC_INDICATORS[kind]
            values = {u: getattr(s, attr) for u, s in inputs.indicators.items()}
            self.targets = rank_users(values, direction, spec.fraction) if spec.fraction else []

    def isolation(self, users: Sequence[str], state: MetaPopState, rng) -> Intervention:
        inp = self.inputs
        present = [u for u in users if u in inp._known]
        weekday = inp.sim_counts.matrix("weekday", present, inp.weekday.source_digest)
        weekend = inp.sim_counts.matrix("weekend", present, inp.weekend.source_digest)
        new_state = None
        if inp.shrink_population and users:
            new_state = _remove_isolated(state, users, inp, rng)
        return Intervention(weekday, weekend, new_state)

    def schedule(self, rng: np.random.Generator) -> dict:
        spec, inp = self.spec, self.inputs
        if spec.kind == "none":
            return {}
        if self.static is not None:
            return {spec.delay: self.static}
        if spec.kind in _STATIC_INDICATORS:
            return {spec.delay: lambda state: self.isolation(self.targets, state, rng)}
        if spec.kind == "indiv_random":
            def decide(state):
                users = rank_users(inp.indicators, "random", spec.fraction, rng) if spec.fraction else []
                return self.isolation(users, state, rng)
        else:
            def decide(state):
                users = []
                if spec.fraction:
                    snap = EpidemicSnapshot.from_state(state, inp.area_ids)
                    risk = inp.occupancy.progmosis(snap, inp.params.beta)
                    users = rank_users(dict(zip(inp.occupancy.user_ids, risk.tolist())), "highest", spec.fraction)
                return self.isolation(users, state, rng)
        return {spec.delay: decide}


def _remove_isolated(state: MetaPopState, users, inputs: ScenarioInputs, rng) -> MetaPopState:
    index = {a: i for i, a in enumerate(inputs.area_ids)}
    isolated = np.zeros(len(inputs.area_ids))
    for u in users:
        isolated[index[inputs.indicators[u].home_area]] += 1
    share = np.divide(isolated, inputs.home_users, out=np.zeros_like(isolated), where=inputs.home_users > 0)
    parts = []
    for c in ("S", "E", "I", "R"):
        x = getattr(state, c)
        parts.append(x - rng.binomial(x, share) if state.is_integer else x * (1.0 - share))
    return MetaPopState(*parts, state.t, state.cum_infections)


def simulate_run(inputs: ScenarioInputs, spec: ScenarioSpec, run_index: int, plan: _Plan | None = None):
    """One replicate; returns ``(result, seed_area, requested, realized)``."""
    plan = plan or _Plan(inputs, spec)
    seed_ss, dyn_ss, pick_ss = np.random.SeedSequence([spec.seed, run_index]).spawn(3)
    stochastic = spec.mode == "stochastic"
    state = MetaPopState.from_populations(inputs.populations, integer=stochastic)
    if spec.seed_area is not None:
        area = inputs.area_ids.index(spec.seed_area)
    else:
        populated = np.flatnonzero(inputs.populations > 0)
        area = int(populated[np.random.default_rng(seed_ss).integers(len(populated))])
    requested = seed_size(state, inputs.seed_fraction)
    seeded = seed_outbreak(state, area, inputs.seed_fraction)
    realized = seeded.I[area] - state.I[area]
    result = run(seeded, inputs.calendar, inputs.weekday, inputs.weekend, inputs.params, spec.horizon,
                 spec.mode, np.random.default_rng(dyn_ss) if stochastic else None,
                 plan.schedule(np.random.default_rng(pick_ss)))
    return result, inputs.area_ids[area], requested, realized


_WORKER: dict = {}


def _init_worker(inputs, spec):
    _WORKER["inputs"] = inputs
    _WORKER["spec"] = spec
    _WORKER["plan"] = _Plan(inputs, spec)


def _run_chunk(indices, keep_areas=False):
    return [_run_one(_WORKER["inputs"], _WORKER["spec"], int(r), _WORKER["plan"], keep_areas) for r in indices]


def _run_one(inputs, spec, r, plan, keep_areas):
    try:
        result, area, requested, realized = simulate_run(inputs, spec, r, plan)
    except ScenarioError:
        raise
    except Exception as exc:
        raise ScenarioError(r, f"{type(exc).__name__}: {exc}") from exc
    areas = result if keep_areas else None
    return result.totals(), area, requested, realized, areas


def run_scenario(inputs: ScenarioInputs, spec: ScenarioSpec, workers: int = 1,
                 keep_area_series: bool = False) -> ScenarioResult:
    """Run every replicate of ``spec`` and aggregate cumulative infections.

    Results are collected in run order, so the worker count never changes
    the output.
    """
    indices = list(range(spec.runs))
    if workers <= 1 or spec.runs == 1:
        plan = _Plan(inputs, spec)
        outputs = [_run_one(inputs, spec, r, plan, keep_area_series) for r in indices]
    else:
        chunks = [c for c in np.array_split(np.array(indices), workers * 4) if len(c)]
        with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(inputs, spec)) as pool:
            outputs = [o for part in pool.map(_run_chunk, chunks, [keep_area_series] * len(chunks)) for o in part]
    totals = np.stack([o[0] for o in outputs])
    return ScenarioResult(
        spec=spec,
        totals=totals,
        seed_areas=[o[1] for o in outputs],
        seed_requested=[o[2] for o in outputs],
        seed_realized=[o[3] for o in outputs],
        aggregate=aggregate_runs(totals[:, :, 4]),
        area_series=[o[4] for o in outputs] if keep_area_series else None,
    )


@dataclass(frozen=True)
class ComparisonRow:
    scenario: str
    final_mean: float
    ci_lo: float
    ci_hi: float
    reduction_vs_none: float


def compare_scenarios(inputs: ScenarioInputs, specs: Sequence[ScenarioSpec], workers: int = 1):
    """Run every spec under common random numbers and tabulate final sizes.

    ``reduction_vs_none`` is ``1 - final_mean / final_mean(none)``; when no
    ``none`` spec is listed the baseline is run without adding a row.
    Returns ``(rows, results)``.
    """
    if not specs:
        raise ValueError("no scenarios to compare")
    first = specs[0]
    for s in specs[1:]:
        if s.horizon != first.horizon:
            raise ValueError("all scenarios must share one horizon")
        if (s.seed, s.runs, s.mode) != (first.seed, first.runs, first.mode):
            raise ValueError("all scenarios must share seed, run count and mode")
    results = [run_scenario(inputs, s, workers) for s in specs]
    baseline = next((r for r in results if r.spec.kind == "none"), None)
    if baseline is None:
        baseline = run_scenario(inputs, replace(first, kind="none", k=None, fraction=None, label=None), workers)
    base_final = baseline.aggregate.mean[-1]
    rows = []
    for r in results:
        final = r.aggregate.mean[-1]
        reduction = 1.0 - final / base_final if base_final > 0 else 0.0
        rows.append(ComparisonRow(r.spec.name, float(final), float(r.aggregate.ci_lo[-1]),
                                  float(r.aggregate.ci_hi[-1]), float(reduction)))
    return rows, results


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    return str(int(x)) if x.is_integer() and abs(x) < 2**53 else repr(x)


def write_aggregate(agg: AggregateSeries, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(AGGREGATE_HEADER)
        for day in range(len(agg)):
            w.writerow([day, _fmt(agg.mean[day]), _fmt(agg.ci_lo[day]), _fmt(agg.ci_hi[day])])


def write_runs(result: ScenarioResult, path) -> None:
    """Area-summed series for every run."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RUNS_HEADER)
        for r, series in enumerate(result.totals):
            for day, row in enumerate(series):
                w.writerow([r, day, *(_fmt(v) for v in row)])


def write_timeseries(result: ScenarioResult, area_ids: Sequence[str], path) -> None:
    """Per-area series; needs ``keep_area_series=True`` when running."""
    if result.area_series is None:
        raise ValueError("run the scenario with keep_area_series=True")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TIMESERIES_HEADER)
        for r, sim in enumerate(result.area_series):
            for day in range(len(sim)):
                for a, area in enumerate(area_ids):
                    w.writerow([r, day, area, _fmt(sim.S[day, a]), _fmt(sim.E[day, a]), _fmt(sim.I[day, a]),
                                _fmt(sim.R[day, a]), _fmt(sim.cum_infections[day, a])])


def write_comparison(rows: Sequence[ComparisonRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COMPARISON_HEADER)
        for row in rows:
            w.writerow([row.scenario, _fmt(row.final_mean), _fmt(row.ci_lo), _fmt(row.ci_hi),
                        repr(row.reduction_vs_none)])
