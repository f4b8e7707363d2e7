"""Meta-population SEIR dynamics coupled through a mobility matrix.

Each daily step first applies the SEIR update inside every area and then
moves the resulting compartments along the mobility matrix:
``X_i(t+1) = sum_j m_ji * bracket_j(X(t))``. The deterministic mode evaluates
the difference equations directly. The stochastic mode draws the same events
as a binomial chain and relocates people multinomially.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from datetime import date, timedelta
from typing import Callable, Mapping, NamedTuple, Union

import numpy as np

from .mobility import MobilityMatrix

log = logging.getLogger(__name__)

COMPARTMENTS = ("S", "E", "I", "R")

# Above this many areas relocation walks only the nonzero matrix entries.
DENSE_RELOCATION_MAX_AREAS = 128


@dataclass(frozen=True, eq=False)
class EpidemicParams:
    """Per-day SEIR rates.

    ``nu`` is an absolute number of births per area per day (scalar or one
    value per area); ``mu`` is the per-capita natural death rate; ``rho`` is
    the infection mortality probability.
    """

    beta: float
    sigma: float
    gamma: float
    rho: float = 0.0
    nu: float | np.ndarray = 0.0
    mu: float = 0.0

    def __post_init__(self):
        for name in ("beta", "sigma", "gamma", "mu"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if np.any(np.asarray(self.nu) < 0):
            raise ValueError("nu must be non-negative")
        if not 0.0 <= self.rho < 1.0:
            raise ValueError("rho must lie in [0, 1)")
        if self.infectious_exit > 1.0:
            raise ValueError("(mu + gamma) / (1 - rho) must not exceed 1")

    @property
    def infectious_exit(self) -> float:
        """Daily share of I leaving the compartment, (mu + gamma) / (1 - rho)."""
        return (self.mu + self.gamma) / (1.0 - self.rho)

    @classmethod
    def ebola(cls, **overrides) -> "EpidemicParams":
        """Ebola (Sierra Leone 2014) rates without demography."""
        values = dict(beta=0.45, sigma=0.18, gamma=0.2, rho=0.48)
        values.update(overrides)
        return cls(**values)

    def with_demography(self, populations, birth_rate_per_1000: float = 36.0,
                        death_rate_per_1000: float = 10.0) -> "EpidemicParams":
        """Births proportional to initial area size and a flat natural death rate."""
        nu = np.asarray(populations, dtype=float) * birth_rate_per_1000 / 1000.0 / 365.0
        return EpidemicParams(self.beta, self.sigma, self.gamma, self.rho, nu,
                              death_rate_per_1000 / 1000.0 / 365.0)

    def as_dict(self) -> dict:
        nu = self.nu.tolist() if isinstance(self.nu, np.ndarray) else self.nu
        return {"beta": self.beta, "sigma": self.sigma, "gamma": self.gamma,
                "rho": self.rho, "nu": nu, "mu": self.mu}


@dataclass(frozen=True, eq=False)
class MetaPopState:
    """Compartment counts per area at step ``t``.

    Integer arrays mean the state belongs to the stochastic engine, float
    arrays to the deterministic one. ``cum_infections`` counts seeded
    infections plus every new exposure, by the area where it happened.
    """

    S: np.ndarray
    E: np.ndarray
    I: np.ndarray
    R: np.ndarray
    t: int = 0
    cum_infections: np.ndarray | None = None

    def __post_init__(self):
        arrays = [np.asarray(getattr(self, c)) for c in COMPARTMENTS]
        shape = arrays[0].shape
        if len(shape) != 1 or any(a.shape != shape for a in arrays):
            raise ValueError("compartments must be 1-d arrays of equal length")
        for c, a in zip(COMPARTMENTS, arrays):
            object.__setattr__(self, c, a)
        cum = self.cum_infections
        cum = np.zeros(shape, dtype=arrays[0].dtype) if cum is None else np.asarray(cum)
        object.__setattr__(self, "cum_infections", cum)

    @classmethod
    def from_populations(cls, populations, integer: bool = True) -> "MetaPopState":
        pops = np.asarray(populations, dtype=np.int64 if integer else float)
        zeros = np.zeros_like(pops)
        return cls(pops.copy(), zeros, zeros.copy(), zeros.copy())

    @property
    def n_areas(self) -> int:
        return len(self.S)

    @property
    def N(self) -> np.ndarray:
        return self.S + self.E + self.I + self.R

    @property
    def is_integer(self) -> bool:
        return all(np.issubdtype(getattr(self, c).dtype, np.integer) for c in COMPARTMENTS)

    def stacked(self) -> np.ndarray:
        return np.stack([self.S, self.E, self.I, self.R])

    def total_infections(self):
        return self.cum_infections.sum()


def seed_size(state: MetaPopState, seed_fraction: float) -> int:
    """Number of infected requested for ``seed_fraction`` of the total population."""
    return int(round(seed_fraction * float(state.N.sum())))


def seed_outbreak(
    state: MetaPopState,
    seed_area: int | None,
    seed_fraction: float,
    rng: np.random.Generator | None = None,
) -> MetaPopState:
    """Move ``round(seed_fraction * total population)`` people from S to I.

    The move happens in ``seed_area`` only and is capped at that area's
    susceptibles. With ``seed_area=None`` the area is drawn uniformly among
    populated areas using ``rng``.
    """
    if not 0.0 <= seed_fraction < 1.0:
        raise ValueError("seed_fraction must lie in [0, 1)")
    if seed_area is None:
        if rng is None:
            raise ValueError("an rng is required to draw the seed area")
        populated = np.flatnonzero(state.N > 0)
        if not len(populated):
            raise ValueError("no populated area to seed")
        seed_area = int(populated[rng.integers(len(populated))])
    if not 0 <= seed_area < state.n_areas:
        raise ValueError(f"seed area index {seed_area} out of range")
    if state.N[seed_area] <= 0:
        raise ValueError(f"seed area {seed_area} has zero population")
    requested = seed_size(state, seed_fraction)
    moved = min(requested, state.S[seed_area])
    if moved < requested:
        log.info("seed capped at %s susceptibles (requested %d)", moved, requested)
    S, I, cum = state.S.copy(), state.I.copy(), state.cum_infections.copy()
    S[seed_area] -= moved
    I[seed_area] += moved
    cum[seed_area] += moved
    return MetaPopState(S, state.E.copy(), I, state.R.copy(), state.t, cum)


def _values(matrix) -> np.ndarray:
    return matrix.values if isinstance(matrix, MobilityMatrix) else np.asarray(matrix, dtype=float)


def _check_dims(state: MetaPopState, values: np.ndarray) -> None:
    if values.shape != (state.n_areas, state.n_areas):
        raise ValueError(f"matrix shape {values.shape} does not match {state.n_areas} areas")


def _force_of_infection(S, I, N, beta):
    foi = np.zeros(len(S))
    np.divide(beta * I, N, out=foi, where=N > 0)
    return foi


def step_deterministic(state: MetaPopState, matrix, params: EpidemicParams) -> MetaPopState:
    """One day of the mean-field difference equations."""
    values = _values(matrix)
    _check_dims(state, values)
    S, E, I, R = (np.asarray(getattr(state, c), dtype=float) for c in COMPARTMENTS)
    N = S + E + I + R
    new_exposed = _force_of_infection(S, I, N, params.beta) * S
    brackets = np.stack([
        S + params.nu - new_exposed - params.mu * S,
        E + new_exposed - params.sigma * E - params.mu * E,
        I + params.sigma * E - params.infectious_exit * I,
        R + params.gamma * I - params.mu * R,
    ])
    if brackets.min() < 0.0:
        log.warning("step %d: clamped %d negative compartment values (min %.3g)",
                    state.t, int((brackets < 0).sum()), brackets.min())
        np.maximum(brackets, 0.0, out=brackets)
    moved = brackets @ values
    cum = np.asarray(state.cum_infections, dtype=float) + new_exposed
    return MetaPopState(moved[0], moved[1], moved[2], moved[3], state.t + 1, cum)


class Relocator:
    """Multinomial redistribution of integer counts along matrix rows."""

    def __init__(self, matrix):
        values = _values(matrix)
        self.n = values.shape[0]
        self.values = values
        self.dense = self.n <= DENSE_RELOCATION_MAX_AREAS
        if self.dense:
            # largest probabilities first: numpy's sampler stops once a row's count is used up
            self.order = np.argsort(-values, axis=1, kind="stable")
            self.sorted_values = np.take_along_axis(values, self.order, axis=1)
            self._flat = {}
            return
        nnz = (values > 0).sum(axis=1)
        width = int(nnz.max())
        self.cols = np.zeros((self.n, width), dtype=np.int64)
        self.cond = np.zeros((self.n, width))
        self.width = nnz
        for i in range(self.n):
            cols = np.flatnonzero(values[i])
            p = values[i, cols]
            tail = np.cumsum(p[::-1])[::-1]
            cond = np.divide(p, tail, out=np.ones_like(p), where=tail > 0)
            cond[-1] = 1.0
            self.cols[i, :len(cols)] = cols
            self.cond[i, :len(cols)] = np.clip(cond, 0.0, 1.0)

    def __call__(self, counts: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Relocate a ``(k, n)`` count array; returns the arriving counts."""
        if self.dense:
            k, n = counts.shape
            flat = self._flat.get(k)
            if flat is None:
                flat = self._flat[k] = (np.arange(k)[:, None, None] * n + self.order[None]).ravel()
            draws = rng.multinomial(counts, self.sorted_values)
            return np.bincount(flat, weights=draws.ravel(), minlength=k * n).astype(np.int64).reshape(k, n)
        k, n = counts.shape
        comp, rows = np.nonzero(counts)
        remaining = counts[comp, rows].astype(np.int64)
        out = np.zeros(k * n)
        for pos in range(int(self.width[rows].max()) if len(rows) else 0):
            active = remaining > 0
            if not active.any():
                break
            draw = np.zeros_like(remaining)
            draw[active] = rng.binomial(remaining[active], self.cond[rows[active], pos])
            remaining -= draw
            hit = draw > 0
            out += np.bincount(comp[hit] * n + self.cols[rows[hit], pos], weights=draw[hit],
                               minlength=k * n)
        return out.astype(np.int64).reshape(k, n)


def step_stochastic(state: MetaPopState, matrix, params: EpidemicParams,
                    rng: np.random.Generator, relocator: Relocator | None = None) -> MetaPopState:
    """One day of the binomial-chain SEIR followed by multinomial relocation."""
    if not state.is_integer:
        raise TypeError("stochastic steps need an integer state")
    values = _values(matrix)
    _check_dims(state, values)
    S, E, I, R = state.S, state.E, state.I, state.R
    N = S + E + I + R
    p_inf = -np.expm1(-_force_of_infection(S, I, N, params.beta))
    new_exposed = rng.binomial(S, p_inf)
    onset = rng.binomial(E, -math.expm1(-params.sigma))
    leaving = rng.binomial(I, min(1.0, params.infectious_exit))
    exit_rate = params.mu + params.gamma
    recover_share = params.gamma * (1.0 - params.rho) / exit_rate if exit_rate > 0 else 0.0
    recovered = rng.binomial(leaving, recover_share)
    S_b = S - new_exposed
    E_b = E + new_exposed - onset
    I_b = I + onset - leaving
    R_b = R + recovered
    if params.mu > 0:
        p_death = -math.expm1(-params.mu)
        S_b = S_b - rng.binomial(S_b, p_death)
        E_b = E_b - rng.binomial(E_b, p_death)
        R_b = R_b - rng.binomial(R, p_death)
    if np.any(np.asarray(params.nu) > 0):
        S_b = S_b + rng.poisson(np.broadcast_to(params.nu, S.shape))
    relocate = relocator if relocator is not None else Relocator(values)
    moved = relocate(np.stack([S_b, E_b, I_b, R_b]), rng)
    return MetaPopState(moved[0], moved[1], moved[2], moved[3], state.t + 1,
                        state.cum_infections + new_exposed)


@dataclass(frozen=True)
class SimulationCalendar:
    """Maps step index to a day class; ``constant`` forces one class everywhere."""

    start: date
    constant: str | None = None

    def date_of(self, t: int) -> date:
        return self.start + timedelta(days=t)

    def day_class(self, t: int) -> str:
        if self.constant is not None:
            return self.constant
        return "weekend" if self.date_of(t).weekday() >= 5 else "weekday"


class Intervention(NamedTuple):
    """Replacement matrices from a given day on, optionally with a new state."""

    weekday: object
    weekend: object
    state: MetaPopState | None = None


ScheduleEntry = Union[Intervention, tuple, Callable[[MetaPopState], object]]


@dataclass(frozen=True, eq=False)
class SimulationResult:
    """Daily per-area compartment series, shape ``(horizon + 1, n_areas)``."""

    S: np.ndarray
    E: np.ndarray
    I: np.ndarray
    R: np.ndarray
    cum_infections: np.ndarray
    day_classes: tuple[str, ...] = field(default=())

    def __len__(self) -> int:
        return self.S.shape[0]

    def state(self, t: int) -> MetaPopState:
        return MetaPopState(self.S[t], self.E[t], self.I[t], self.R[t], t, self.cum_infections[t])

    def states(self):
        return [self.state(t) for t in range(len(self))]

    def totals(self) -> np.ndarray:
        """Area sums as a ``(horizon + 1, 5)`` array of S, E, I, R, cumulative."""
        return np.stack([a.sum(axis=1) for a in (self.S, self.E, self.I, self.R, self.cum_infections)], axis=1)

    @property
    def cumulative(self) -> np.ndarray:
        return self.cum_infections.sum(axis=1)


def _as_intervention(value) -> Intervention:
    if isinstance(value, Intervention):
        return value
    return Intervention(*value)


def run(
    initial_state: MetaPopState,
    calendar: SimulationCalendar,
    weekday_matrix,
    weekend_matrix,
    params: EpidemicParams,
    horizon_days: int,
    mode: str = "deterministic",
    rng: np.random.Generator | None = None,
    intervention_schedule: Mapping[int, ScheduleEntry] | None = None,
) -> SimulationResult:
    """Simulate ``horizon_days`` daily steps.

    The step from day ``t`` to ``t + 1`` uses the matrix of day ``t``'s class.
    ``intervention_schedule`` maps a start day to replacement matrices, given
    either directly (an :class:`Intervention` or ``(weekday, weekend)`` pair) or
    as a callable receiving the state on that day, which lets decisions depend
    on the epidemic observed so far.
    """
    if horizon_days < 1:
        raise ValueError("horizon must be at least one day")
    if mode not in ("deterministic", "stochastic"):
        raise ValueError(f"unknown mode {mode!r}")
    stochastic = mode == "stochastic"
    if stochastic and rng is None:
        raise ValueError("stochastic mode needs an rng")
    schedule = dict(intervention_schedule or {})
    for day in schedule:
        if not 0 <= day <= horizon_days:
            raise ValueError(f"intervention day {day} outside horizon {horizon_days}")

    state = initial_state
    if not stochastic:
        state = MetaPopState(*(np.asarray(getattr(state, c), dtype=float) for c in COMPARTMENTS),
                             state.t, np.asarray(state.cum_infections, dtype=float))
    elif not state.is_integer:
        raise TypeError("stochastic mode needs an integer state")

    matrices = {"weekday": weekday_matrix, "weekend": weekend_matrix}
    relocators: dict[int, tuple[object, Relocator]] = {}
    n = state.n_areas
    dtype = state.S.dtype
    series = {c: np.empty((horizon_days + 1, n), dtype=dtype) for c in (*COMPARTMENTS, "cum")}
    classes = []

    def record(t, s):
        for c in COMPARTMENTS:
            series[c][t] = getattr(s, c)
        series["cum"][t] = s.cum_infections

    for t in range(horizon_days + 1):
        if t in schedule:
            entry = schedule[t]
            if callable(entry) and not isinstance(entry, tuple):
                entry = entry(state)
            change = _as_intervention(entry)
            matrices = {"weekday": change.weekday, "weekend": change.weekend}
            if change.state is not None:
                state = change.state
        record(t, state)
        if t == horizon_days:
            break
        cls = calendar.day_class(t)
        classes.append(cls)
        matrix = matrices[cls]
        if stochastic:
            cached = relocators.get(id(matrix))
            if cached is None or cached[0] is not matrix:
                cached = relocators[id(matrix)] = (matrix, Relocator(matrix))
            state = step_stochastic(state, matrix, params, rng, cached[1])
        else:
            state = step_deterministic(state, matrix, params)
    return SimulationResult(series["S"], series["E"], series["I"], series["R"], series["cum"], tuple(classes))
