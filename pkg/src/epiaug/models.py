"""Compartmental model definitions and the subject-level population state.

The population is a collection of N subjects, each moving through the
compartments of an SIR, SEIR, or SIRS model as a continuous-time Markov
chain.  Infection events for one subject occur at rate beta times the
current number of infectious subjects; all other transitions have constant
per-subject rates.  Counts are read as left limits: the count "at" time t
is the value just before t, so an event at t does not affect the count at t.

A :class:`PopulationHistory` stores the initial compartment of every subject
plus a globally ordered event list.  It is immutable; edits go through
:meth:`PopulationHistory.with_subject_path`, which returns a new history.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.special import gammaln, xlogy

__all__ = [
    "Transition",
    "ModelSpec",
    "ParameterVector",
    "EmissionSpec",
    "Dataset",
    "PopulationHistory",
    "EventTimeCollision",
    "get_model",
    "SIR",
    "SEIR",
    "SIRS",
    "emission_loglik",
    "complete_data_loglik",
    "sufficient_statistics",
    "SufficientStats",
]

RATE_PARAMS = ("beta", "gamma", "mu")


class EventTimeCollision(ValueError):
    """A proposed event time coincides with an existing breakpoint."""


@dataclass(frozen=True)
class Transition:
    """One allowed subject-level move.

    ``param`` names the rate parameter: "beta" transitions fire at rate
    beta * (number infectious), "gamma" and "mu" at the constant rate of
    that parameter.
    """

    src: int
    dst: int
    param: str


@dataclass(frozen=True)
class ModelSpec:
    name: str
    compartments: tuple[str, ...]
    transitions: tuple[Transition, ...]
    infectious: int  # index of the compartment driving infections
    monotone: bool  # True when no compartment is revisitable

    @property
    def n_states(self) -> int:
        return len(self.compartments)

    @property
    def params(self) -> tuple[str, ...]:
        """Rate parameters this model uses, in canonical order."""
        used = {t.param for t in self.transitions}
        return tuple(p for p in RATE_PARAMS if p in used)

    def transition_from(self, src: int, dst: int) -> Transition:
        for t in self.transitions:
            if t.src == src and t.dst == dst:
                return t
        raise ValueError(f"{self.name} has no transition {src}->{dst}")

    def exits(self, state: int) -> tuple[Transition, ...]:
        return tuple(t for t in self.transitions if t.src == state)


SIR = ModelSpec(
    name="sir",
    compartments=("S", "I", "R"),
    transitions=(Transition(0, 1, "beta"), Transition(1, 2, "mu")),
    infectious=1,
    monotone=True,
)

SEIR = ModelSpec(
    name="seir",
    compartments=("S", "E", "I", "R"),
    transitions=(
        Transition(0, 1, "beta"),
        Transition(1, 2, "gamma"),
        Transition(2, 3, "mu"),
    ),
    infectious=2,
    monotone=True,
)

SIRS = ModelSpec(
    name="sirs",
    compartments=("S", "I", "R"),
    transitions=(
        Transition(0, 1, "beta"),
        Transition(1, 2, "mu"),
        Transition(2, 0, "gamma"),
    ),
    infectious=1,
    monotone=False,
)

_MODELS = {m.name: m for m in (SIR, SEIR, SIRS)}


def get_model(name: str) -> ModelSpec:
    try:
        return _MODELS[name.lower()]
    except KeyError:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(_MODELS)}") from None


@dataclass(frozen=True)
class EmissionSpec:
    """Observation law for prevalence counts.

    kind "binomial": Y ~ Binomial(I, rho).
    kind "negbinomial": Y has mean m = rho * I and variance m + m^2 / phi.
    """

    kind: str = "binomial"

    def __post_init__(self):
        if self.kind not in ("binomial", "negbinomial"):
            raise ValueError(f"unknown emission kind {self.kind!r}")


@dataclass(frozen=True)
class ParameterVector:
    """Model parameters: rates, detection parameters, initial distribution.

    gamma is None for SIR; phi is None unless the emission is negative
    binomial.  p0 is the initial compartment distribution at the first
    observation time.
    """

    beta: float
    mu: float
    p0: np.ndarray
    gamma: float | None = None
    rho: float = 1.0
    phi: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "p0", np.asarray(self.p0, dtype=np.float64))

    def rate(self, param: str) -> float:
        value = getattr(self, param)
        if value is None:
            raise ValueError(f"parameter {param!r} not set")
        return value

    def validate(self, model: ModelSpec, emission: EmissionSpec | None = None) -> None:
        for p in model.params:
            v = getattr(self, p)
            if v is None or v < 0:
                raise ValueError(f"{p} must be a nonnegative float, got {v!r}")
        if self.p0.shape != (model.n_states,):
            raise ValueError(
                f"p0 must have length {model.n_states}, got shape {self.p0.shape}"
            )
        if np.any(self.p0 < 0) or abs(self.p0.sum() - 1.0) > 1e-8:
            raise ValueError("p0 must be a probability vector")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must lie in [0, 1], got {self.rho}")
        if emission is not None and emission.kind == "negbinomial":
            if self.phi is None or self.phi <= 0:
                raise ValueError("negbinomial emission requires phi > 0")

    def replaced(self, **changes) -> "ParameterVector":
        return replace(self, **changes)


@dataclass(frozen=True)
class Dataset:
    """Observed prevalence counts at fixed times, plus the population size."""

    times: np.ndarray
    counts: np.ndarray
    population: int

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64)
        counts = np.asarray(self.counts, dtype=np.int64)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "counts", counts)
        if times.ndim != 1 or times.size < 1:
            raise ValueError("need at least one observation time")
        if counts.shape != times.shape:
            raise ValueError("times and counts must have equal length")
        if times.size > 1 and np.any(np.diff(times) <= 0):
            raise ValueError("observation times must be strictly increasing")
        if np.any(counts < 0):
            raise ValueError("counts must be nonnegative")
        if self.population <= 0:
            raise ValueError("population must be positive")

    @property
    def n_obs(self) -> int:
        return self.times.size

    @property
    def window(self) -> tuple[float, float]:
        return float(self.times[0]), float(self.times[-1])

    @classmethod
    def from_csv(cls, path, population: int) -> "Dataset":
        times, counts = [], []
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or [f.strip() for f in reader.fieldnames[:2]] != ["time", "count"]:
                raise ValueError(f"{path}: expected CSV header 'time,count'")
            for row in reader:
                times.append(float(row["time"]))
                counts.append(int(row["count"]))
        return cls(np.array(times), np.array(counts), population)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["time", "count"])
            for t, y in zip(self.times, self.counts):
                writer.writerow([repr(float(t)), int(y)])


class PopulationHistory:
    """Subject-level configuration path over an observation window.

    Parameters
    ----------
    model : ModelSpec
    initial_states : (N,) int array, compartment of each subject at t0
    ev_times, ev_subject, ev_from, ev_to : parallel event arrays, globally
        sorted by time with no ties; every time lies strictly inside
        (t0, t_end)
    t0, t_end : window endpoints (the first and last observation times)
    """

    __slots__ = (
        "model",
        "initial_states",
        "ev_times",
        "ev_subject",
        "ev_from",
        "ev_to",
        "t0",
        "t_end",
        "_prefix",
    )

    def __init__(self, model, initial_states, ev_times, ev_subject, ev_from, ev_to, t0, t_end, check=True):
        self.model = model
        self.initial_states = np.asarray(initial_states, dtype=np.int8)
        self.ev_times = np.asarray(ev_times, dtype=np.float64)
        self.ev_subject = np.asarray(ev_subject, dtype=np.int64)
        self.ev_from = np.asarray(ev_from, dtype=np.int8)
        self.ev_to = np.asarray(ev_to, dtype=np.int8)
        self.t0 = float(t0)
        self.t_end = float(t_end)
        self._prefix = None
        if check:
            self.validate()

    # -- construction helpers ------------------------------------------------

    @classmethod
    def empty(cls, model: ModelSpec, initial_states, t0: float, t_end: float) -> "PopulationHistory":
        z = np.empty(0)
        return cls(model, initial_states, z, z.astype(np.int64), z.astype(np.int8), z.astype(np.int8), t0, t_end)

    @property
    def n_subjects(self) -> int:
        return self.initial_states.size

    @property
    def n_events(self) -> int:
        return self.ev_times.size

    def validate(self) -> None:
        n_states = self.model.n_states
        if np.any(self.initial_states < 0) or np.any(self.initial_states >= n_states):
            raise ValueError("initial state out of range")
        if self.t_end < self.t0:
            raise ValueError("t_end must be >= t0")
        if self.n_events:
            if np.any(np.diff(self.ev_times) <= 0):
                raise ValueError("event times must be strictly increasing (no ties)")
            if self.ev_times[0] <= self.t0 or self.ev_times[-1] >= self.t_end:
                raise ValueError("event times must lie strictly inside the window")
            if np.any(self.ev_subject < 0) or np.any(self.ev_subject >= self.n_subjects):
                raise ValueError("event subject out of range")
        # each event must be an allowed transition out of the subject's current state
        state = self.initial_states.copy()
        allowed = {(t.src, t.dst) for t in self.model.transitions}
        for k in range(self.n_events):
            j = self.ev_subject[k]
            frm, to = int(self.ev_from[k]), int(self.ev_to[k])
            if state[j] != frm:
                raise ValueError(
                    f"event {k}: subject {j} is in state {state[j]}, not {frm}"
                )
            if (frm, to) not in allowed:
                raise ValueError(f"event {k}: transition {frm}->{to} not in model")
            state[j] = to

    # -- count queries (left-limit convention) -------------------------------

    def _prefix_counts(self) -> np.ndarray:
        """(K+1, n_states) cumulative counts; row k = counts after k events."""
        if self._prefix is None:
            n = self.model.n_states
            init = np.bincount(self.initial_states, minlength=n)
            delta = np.zeros((self.n_events, n), dtype=np.int64)
            if self.n_events:
                rows = np.arange(self.n_events)
                np.subtract.at(delta, (rows, self.ev_from), 1)
                np.add.at(delta, (rows, self.ev_to), 1)
            self._prefix = np.vstack([init, init + np.cumsum(delta, axis=0)])
        return self._prefix

    def counts_at(self, t) -> np.ndarray:
        """Compartment counts just before time t (vectorized over t)."""
        prefix = self._prefix_counts()
        k = np.searchsorted(self.ev_times, np.asarray(t, dtype=np.float64), side="left")
        return prefix[k]

    def count_path(self) -> tuple[np.ndarray, np.ndarray]:
        """Step function of counts: (breakpoints, counts on each interval).

        breakpoints has length K+2 (window endpoints plus event times);
        counts[k] holds on (breakpoints[k], breakpoints[k+1]).
        """
        breaks = np.concatenate([[self.t0], self.ev_times, [self.t_end]])
        return breaks, self._prefix_counts()

    def prevalence_at(self, t) -> np.ndarray:
        return self.counts_at(t)[..., self.model.infectious]

    # -- subject-level queries ------------------------------------------------

    def events_of(self, j: int) -> np.ndarray:
        """Indices of subject j's events, in time order."""
        return np.nonzero(self.ev_subject == j)[0]

    def subject_path(self, j: int) -> tuple[int, np.ndarray, np.ndarray]:
        """(initial state, jump times, post-jump states) for subject j."""
        idx = self.events_of(j)
        return int(self.initial_states[j]), self.ev_times[idx], self.ev_to[idx].astype(np.int64)

    def excluded_prevalence(self, j: int) -> tuple[np.ndarray, np.ndarray]:
        """Infectious count excluding subject j, as a step function.

        Returns (breakpoints, values): breakpoints are the other subjects'
        event times with the window endpoints prepended/appended; values[k]
        is the excluded count on (breakpoints[k], breakpoints[k+1]).
        """
        keep = self.ev_subject != j
        times = self.ev_times[keep]
        inf = self.model.infectious
        init = int(np.count_nonzero(self.initial_states == inf))
        if self.initial_states[j] == inf:
            init -= 1
        delta = (self.ev_to[keep] == inf).astype(np.int64) - (self.ev_from[keep] == inf).astype(np.int64)
        values = np.concatenate([[init], init + np.cumsum(delta)])
        breaks = np.concatenate([[self.t0], times, [self.t_end]])
        return breaks, values

    # -- edits ---------------------------------------------------------------

    def with_subject_path(
        self,
        j: int,
        initial_state: int,
        jump_times: np.ndarray,
        jump_to: np.ndarray,
        forbidden_times: np.ndarray | None = None,
        check: bool = False,
    ) -> "PopulationHistory":
        """Replace subject j's path, returning a new history.

        jump_times must be strictly increasing and lie inside the window;
        jump_to gives the destination after each jump (sources are implied
        by walking from initial_state).  Raises EventTimeCollision when a
        jump time ties an existing event of another subject or any time in
        forbidden_times (e.g. the observation grid).
        """
        keep = self.ev_subject != j
        times = self.ev_times[keep]
        jump_times = np.asarray(jump_times, dtype=np.float64)
        jump_to = np.asarray(jump_to, dtype=np.int64)

        if jump_times.size:
            pos = np.searchsorted(times, jump_times)
            if times.size:
                hit = (pos < times.size) & (times[np.minimum(pos, times.size - 1)] == jump_times)
                if np.any(hit):
                    raise EventTimeCollision("proposed jump ties an existing event time")
            if forbidden_times is not None and np.any(
                np.isin(jump_times, forbidden_times)
            ):
                raise EventTimeCollision("proposed jump ties a protected time point")
        else:
            pos = np.empty(0, dtype=np.int64)

        frm = np.empty(jump_times.size, dtype=np.int8)
        prev = initial_state
        for i, dst in enumerate(jump_to):
            frm[i] = prev
            prev = dst

        new_states = self.initial_states.copy()
        new_states[j] = initial_state
        ev_times = np.insert(times, pos, jump_times)
        ev_subject = np.insert(self.ev_subject[keep], pos, j)
        ev_from = np.insert(self.ev_from[keep], pos, frm)
        ev_to = np.insert(self.ev_to[keep], pos, jump_to.astype(np.int8))
        return PopulationHistory(
            self.model, new_states, ev_times, ev_subject, ev_from, ev_to,
            self.t0, self.t_end, check=check,
        )


# -- emission law -------------------------------------------------------------


def emission_loglik(y, i_count, emission: EmissionSpec, theta: ParameterVector):
    """Log pmf of observed count(s) y given infectious count(s) i_count.

    Vectorized over y and i_count (broadcast together).  Impossible
    observations (binomial y > I, or positive y with zero mean) give -inf.
    """
    y = np.asarray(y, dtype=np.float64)
    i_count = np.asarray(i_count, dtype=np.float64)
    if emission.kind == "binomial":
        rho = theta.rho
        with np.errstate(divide="ignore", invalid="ignore"):
            out = (
                gammaln(i_count + 1)
                - gammaln(y + 1)
                - gammaln(i_count - y + 1)
                + xlogy(y, rho)
                + xlogy(i_count - y, 1.0 - rho)
            )
        out = np.where(y > i_count, -np.inf, out)
        # rho at the boundary: pmf degenerates at 0 or at I
        if rho == 0.0:
            out = np.where(y == 0, 0.0, -np.inf)
        elif rho == 1.0:
            out = np.where(y == i_count, 0.0, -np.inf)
        return out if out.ndim else float(out)
    # negative binomial with mean m = rho * I, dispersion phi
    phi = theta.phi
    if phi is None or phi <= 0:
        raise ValueError("negbinomial emission requires phi > 0")
    m = theta.rho * i_count
    with np.errstate(divide="ignore", invalid="ignore"):
        out = (
            gammaln(y + phi)
            - gammaln(phi)
            - gammaln(y + 1)
            + phi * np.log(phi / (phi + m))
            + xlogy(y, m / (phi + m))
        )
    out = np.where((m == 0) & (y > 0), -np.inf, out)
    out = np.where((m == 0) & (y == 0), 0.0, out)
    return out if out.ndim else float(out)


# -- complete-data likelihood and sufficient statistics ------------------------


def _event_param_codes(history: PopulationHistory) -> np.ndarray:
    """Map each event to the index of its rate parameter in RATE_PARAMS."""
    model = history.model
    table = np.full((model.n_states, model.n_states), -1, dtype=np.int64)
    for t in model.transitions:
        table[t.src, t.dst] = RATE_PARAMS.index(t.param)
    return table[history.ev_from, history.ev_to]


def _total_rate_per_interval(history: PopulationHistory, theta: ParameterVector) -> np.ndarray:
    """Sum of all subjects' exit rates on each inter-event interval."""
    model = history.model
    counts = history._prefix_counts()  # (K+1, n)
    i_col = counts[:, model.infectious]
    total = np.zeros(counts.shape[0])
    for t in model.transitions:
        if t.param == "beta":
            total = total + theta.beta * counts[:, t.src] * i_col
        else:
            total = total + theta.rate(t.param) * counts[:, t.src]
    return total


def complete_data_loglik(
    history: PopulationHistory,
    dataset: Dataset,
    theta: ParameterVector,
    model: ModelSpec,
    emission: EmissionSpec = EmissionSpec("binomial"),
) -> float:
    """Joint log density of the full subject-level path and the observations.

    Three pieces: the emission terms at each observation time, the initial
    compartment assignment under theta.p0, and the CTMC path density (one
    rate factor per event at its left limit, plus the survival exposure
    integral).  The value only depends on the path through its lumped event
    sequence, so subject labels do not matter.
    """
    if model is not history.model and model.name != history.model.name:
        raise ValueError("model mismatch between history and argument")
    ll = ctmc_population_loglik(history, theta)
    if not np.isfinite(ll):
        return -np.inf
    i_obs = history.prevalence_at(dataset.times)
    ll += float(np.sum(emission_loglik(dataset.counts, i_obs, emission, theta)))
    return float(ll)


def ctmc_population_loglik(history: PopulationHistory, theta: ParameterVector) -> float:
    """Log density of the subject-level configuration path (no emission terms).

    Includes the initial-state probabilities of all subjects, the log jump
    rates (infection events use the left-limit infectious count), and the
    exposure integral of the total rate over the window.
    """
    model = history.model
    init = np.bincount(history.initial_states, minlength=model.n_states)
    ll = float(np.sum(xlogy(init, theta.p0)))
    if not np.isfinite(ll):
        return -np.inf

    if history.n_events:
        codes = _event_param_codes(history)
        prefix = history._prefix_counts()
        i_left = prefix[:-1, model.infectious]  # infectious count before each event
        rates = np.empty(history.n_events)
        for p_idx, p in enumerate(RATE_PARAMS):
            sel = codes == p_idx
            if not np.any(sel):
                continue
            if p == "beta":
                rates[sel] = theta.beta * i_left[sel]
            else:
                rates[sel] = theta.rate(p)
        if np.any(rates <= 0):
            return -np.inf
        ll += float(np.sum(np.log(rates)))

    breaks = np.concatenate([[history.t0], history.ev_times, [history.t_end]])
    total = _total_rate_per_interval(history, theta)
    ll -= float(np.sum(total * np.diff(breaks)))
    return ll


@dataclass(frozen=True)
class SufficientStats:
    """Event counts and exposure integrals entering the rate updates.

    n_events[p] counts transitions whose rate parameter is p; exposure[p]
    integrates the matching rate basis over the window (S*I dt for beta,
    source-compartment occupancy dt otherwise).  init_counts are the
    compartment counts at the start of the window.
    """

    n_events: dict
    exposure: dict
    init_counts: np.ndarray


def sufficient_statistics(history: PopulationHistory, model: ModelSpec) -> SufficientStats:
    if model.name != history.model.name:
        raise ValueError("model mismatch between history and argument")
    codes = _event_param_codes(history)
    n_events = {}
    for p in model.params:
        n_events[p] = int(np.count_nonzero(codes == RATE_PARAMS.index(p)))

    breaks = np.concatenate([[history.t0], history.ev_times, [history.t_end]])
    dt = np.diff(breaks)
    counts = history._prefix_counts()
    i_col = counts[:, model.infectious]
    exposure = {}
    for t in model.transitions:
        if t.param == "beta":
            exposure["beta"] = float(np.sum(counts[:, t.src] * i_col * dt))
        else:
            exposure[t.param] = float(np.sum(counts[:, t.src] * dt))

    init = np.bincount(history.initial_states, minlength=model.n_states)
    return SufficientStats(n_events=n_events, exposure=exposure, init_counts=init)
