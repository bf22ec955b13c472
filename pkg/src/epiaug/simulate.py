"""Forward epidemic simulation.

Exact Gillespie simulation of the lumped count chain (with optional
epoch-varying rates), disaggregation of a count path into a subject-level
history, observation sampling, and multinomial tau-leaping for approximate
particle propagation.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .models import (
    Dataset,
    EmissionSpec,
    ModelSpec,
    ParameterVector,
    PopulationHistory,
)

__all__ = [
    "LumpedPath",
    "EpochSchedule",
    "gillespie_simulate",
    "lump",
    "disaggregate",
    "draw_observed_counts",
    "sample_observations",
    "tau_leap_simulate",
    "propagate_tau_leap",
    "write_count_csv",
]


@dataclass(frozen=True)
class LumpedPath:
    """Count-chain event sequence: which transition fired, and when."""

    model: ModelSpec
    initial_counts: np.ndarray
    times: np.ndarray
    channels: np.ndarray
    t0: float
    t_end: float

    def __post_init__(self):
        object.__setattr__(
            self, "initial_counts", np.asarray(self.initial_counts, dtype=np.int64)
        )
        object.__setattr__(self, "times", np.asarray(self.times, dtype=np.float64))
        object.__setattr__(self, "channels", np.asarray(self.channels, dtype=np.int64))
        if self.initial_counts.size != self.model.n_states:
            raise ValueError("initial_counts must have one entry per compartment")
        if np.any(self.initial_counts < 0):
            raise ValueError("initial_counts must be nonnegative")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("event times must be strictly increasing")
        if self.times.size and (
            self.times[0] <= self.t0 or self.times[-1] >= self.t_end
        ):
            raise ValueError("event times must lie strictly inside the window")

    @property
    def n_events(self) -> int:
        return self.times.size

    def counts_after_events(self) -> np.ndarray:
        """(K+1, n) counts at t0 and after each event; never negative."""
        n = self.model.n_states
        delta = np.zeros((self.n_events + 1, n), dtype=np.int64)
        delta[0] = self.initial_counts
        for k, ch in enumerate(self.channels):
            tr = self.model.transitions[ch]
            delta[k + 1, tr.src] -= 1
            delta[k + 1, tr.dst] += 1
        counts = np.cumsum(delta, axis=0)
        if np.any(counts < 0):
            raise ValueError("count path goes negative: corrupt event sequence")
        return counts


@dataclass(frozen=True)
class EpochSchedule:
    """Piecewise-constant rate parameters over consecutive epochs.

    boundaries has one more entry than thetas; epoch e runs over
    [boundaries[e], boundaries[e+1]) and uses thetas[e].
    """

    boundaries: np.ndarray
    thetas: tuple

    def __post_init__(self):
        object.__setattr__(
            self, "boundaries", np.asarray(self.boundaries, dtype=np.float64)
        )
        object.__setattr__(self, "thetas", tuple(self.thetas))
        if len(self.thetas) == 0:
            raise ValueError("schedule needs at least one epoch")
        if self.boundaries.size != len(self.thetas) + 1:
            raise ValueError("need exactly one more boundary than epochs")
        if np.any(np.diff(self.boundaries) <= 0):
            raise ValueError("epoch boundaries must be strictly increasing")

    @classmethod
    def single(cls, theta: ParameterVector, t0: float, t_end: float) -> "EpochSchedule":
        return cls(np.array([t0, t_end]), (theta,))

    @property
    def t0(self) -> float:
        return float(self.boundaries[0])

    @property
    def t_end(self) -> float:
        return float(self.boundaries[-1])

    def theta_at(self, t: float) -> ParameterVector:
        e = int(np.searchsorted(self.boundaries, t, side="right") - 1)
        return self.thetas[min(max(e, 0), len(self.thetas) - 1)]


def _transition_arrays(model: ModelSpec):
    src = np.array([t.src for t in model.transitions], dtype=np.int64)
    dst = np.array([t.dst for t in model.transitions], dtype=np.int64)
    infective = np.array([t.param == "beta" for t in model.transitions])
    return src, dst, infective


def _rate_row(model: ModelSpec, theta: ParameterVector) -> np.ndarray:
    return np.array([theta.rate(t.param) for t in model.transitions])


def gillespie_simulate(
    model: ModelSpec,
    theta,
    initial_counts,
    rng,
    t0: float | None = None,
    t_end: float | None = None,
    max_events: int = 0,
) -> LumpedPath:
    """Exact count-chain sample over the window.

    theta is a ParameterVector with a fixed window (t0, t_end), or an
    EpochSchedule whose boundaries define the window; at each epoch boundary
    the clock rates switch to the next epoch's values with counts carried
    over unchanged.  The event buffer grows automatically, replaying the
    same random stream, so the returned path never depends on the initial
    buffer size.
    """
    initial_counts = np.asarray(initial_counts, dtype=np.int64)
    if initial_counts.size != model.n_states or np.any(initial_counts < 0):
        raise ValueError("initial counts must be a nonnegative vector, one per compartment")

    if isinstance(theta, EpochSchedule):
        schedule = theta
        if t0 is not None or t_end is not None:
            raise ValueError("window is defined by the schedule boundaries")
    else:
        if t0 is None or t_end is None:
            raise ValueError("t0 and t_end are required with a single ParameterVector")
        schedule = EpochSchedule.single(theta, t0, t_end)

    src, dst, infective = _transition_arrays(model)
    rate_consts = np.stack([_rate_row(model, th) for th in schedule.thetas])
    epoch_ends = schedule.boundaries[1:]
    seed = int(rng.integers(0, 2**31 - 1))
    if max_events <= 0:
        max_events = max(1024, 8 * int(initial_counts.sum()))
    while True:
        times, channels, k, _ = _kernels.gillespie_counts(
            initial_counts,
            schedule.t0,
            schedule.t_end,
            epoch_ends,
            rate_consts,
            src,
            dst,
            infective,
            model.infectious,
            max_events,
            seed,
        )
        if k >= 0:
            break
        max_events *= 2  # same seed: identical stream, larger buffer
    return LumpedPath(
        model, initial_counts, times[:k].copy(), channels[:k].copy(),
        schedule.t0, schedule.t_end,
    )


def lump(history: PopulationHistory) -> LumpedPath:
    """Forget subject labels, keeping the count-chain event sequence."""
    model = history.model
    channel_of = {(t.src, t.dst): c for c, t in enumerate(model.transitions)}
    channels = np.array(
        [channel_of[(int(f), int(t))] for f, t in zip(history.ev_from, history.ev_to)],
        dtype=np.int64,
    )
    counts0 = np.bincount(history.initial_states, minlength=model.n_states)
    return LumpedPath(model, counts0, history.ev_times.copy(), channels, history.t0, history.t_end)


def disaggregate(path: LumpedPath, rng) -> PopulationHistory:
    """Assign each lumped event to a subject uniformly among those eligible.

    Subjects are labeled in compartment blocks at t0; by lumpability the
    labeling is immaterial.  The result lumps back to the input exactly.
    """
    model = path.model
    init_states = np.repeat(np.arange(model.n_states), path.initial_counts)
    members: list[list[int]] = [[] for _ in range(model.n_states)]
    for j, s in enumerate(init_states):
        members[s].append(j)

    n_ev = path.n_events
    ev_subject = np.empty(n_ev, dtype=np.int64)
    ev_from = np.empty(n_ev, dtype=np.int8)
    ev_to = np.empty(n_ev, dtype=np.int8)
    for k in range(n_ev):
        tr = model.transitions[path.channels[k]]
        pool = members[tr.src]
        if not pool:
            raise ValueError(
                f"event {k}: no subject in compartment {model.compartments[tr.src]}"
            )
        idx = int(rng.integers(len(pool)))
        subject = pool[idx]
        pool[idx] = pool[-1]
        pool.pop()
        members[tr.dst].append(subject)
        ev_subject[k] = subject
        ev_from[k] = tr.src
        ev_to[k] = tr.dst

    return PopulationHistory(
        model, init_states, path.times.copy(), ev_subject, ev_from, ev_to,
        path.t0, path.t_end,
    )


def draw_observed_counts(
    prevalence: np.ndarray, emission: EmissionSpec, theta: ParameterVector, rng
) -> np.ndarray:
    """Draw one observed count per prevalence value from the emission law."""
    if emission.kind == "binomial":
        y = rng.binomial(prevalence, theta.rho)
    else:
        if theta.phi is None or theta.phi <= 0:
            raise ValueError("negbinomial emission requires phi > 0")
        m = theta.rho * np.asarray(prevalence)
        p = theta.phi / (theta.phi + m)
        y = rng.negative_binomial(theta.phi, p)
    return np.asarray(y, dtype=np.int64)


def sample_observations(
    history: PopulationHistory,
    times: np.ndarray,
    emission: EmissionSpec,
    theta: ParameterVector,
    rng,
) -> Dataset:
    """Draw one observation per time from the emission law given prevalence."""
    times = np.asarray(times, dtype=np.float64)
    prevalence = history.prevalence_at(times)
    y = draw_observed_counts(prevalence, emission, theta, rng)
    return Dataset(times, y, population=history.n_subjects)


# -- multinomial tau-leaping ---------------------------------------------------


def _leap_step(model: ModelSpec, rates: np.ndarray, counts: np.ndarray, dt: float, rng):
    """One leap over dt for an (..., n_states) batch of count vectors.

    Per source compartment, the number leaving is Binomial with exit
    probability 1 - exp(-total_rate * dt), then split across that
    compartment's channels in proportion to their rates; counts can never
    go negative and the total is conserved exactly.
    """
    i_col = counts[..., model.infectious]
    new = counts.copy()
    for s in range(model.n_states):
        channels = [(c, tr) for c, tr in enumerate(model.transitions) if tr.src == s]
        if not channels:
            continue
        ch_rates = []
        for c, tr in channels:
            r = rates[c] * (i_col if tr.param == "beta" else 1.0)
            ch_rates.append(np.broadcast_to(np.asarray(r, dtype=np.float64), i_col.shape))
        total = np.sum(ch_rates, axis=0)
        p_exit = -np.expm1(-total * dt)
        out = rng.binomial(counts[..., s], p_exit)
        new[..., s] -= out

        remaining = out
        rem_rate = total.copy()
        for (c, tr), r in zip(channels[:-1], ch_rates[:-1]):
            frac = np.divide(r, rem_rate, out=np.zeros_like(rem_rate), where=rem_rate > 0)
            take = rng.binomial(remaining, frac)
            new[..., tr.dst] += take
            remaining = remaining - take
            rem_rate = rem_rate - r
        new[..., channels[-1][1].dst] += remaining
    return new


def _leap_grid(t0: float, t_end: float, step: float) -> np.ndarray:
    if step <= 0:
        raise ValueError("step must be positive")
    n_full = int(np.floor((t_end - t0) / step))
    grid = t0 + step * np.arange(n_full + 1)
    if grid[-1] < t_end - 1e-12 * max(1.0, abs(t_end)):
        grid = np.append(grid, t_end)
    else:
        grid[-1] = t_end
    return grid


def tau_leap_simulate(
    model: ModelSpec,
    theta: ParameterVector,
    initial_counts,
    step: float,
    t0: float,
    t_end: float,
    rng,
) -> tuple[np.ndarray, np.ndarray]:
    """Approximate count path on a regular grid (last step may be shorter)."""
    counts = np.asarray(initial_counts, dtype=np.int64)
    if counts.size != model.n_states or np.any(counts < 0):
        raise ValueError("initial counts must be a nonnegative vector, one per compartment")
    rates = _rate_row(model, theta)
    grid = _leap_grid(t0, t_end, step)
    out = np.empty((grid.size, model.n_states), dtype=np.int64)
    out[0] = counts
    for g in range(1, grid.size):
        out[g] = _leap_step(model, rates, out[g - 1], grid[g] - grid[g - 1], rng)
    return grid, out


def propagate_tau_leap(
    model: ModelSpec,
    theta: ParameterVector,
    counts: np.ndarray,
    t0: float,
    t_end: float,
    step: float,
    rng,
) -> np.ndarray:
    """Advance a (P, n_states) particle batch from t0 to t_end by leaps."""
    rates = _rate_row(model, theta)
    grid = _leap_grid(t0, t_end, step)
    for g in range(1, grid.size):
        counts = _leap_step(model, rates, counts, grid[g] - grid[g - 1], rng)
    return counts


def write_count_csv(file, times: np.ndarray, counts: np.ndarray, model: ModelSpec) -> None:
    """Write a count path as CSV with header time,<compartments>."""
    writer = csv.writer(file)
    writer.writerow(["time"] + list(model.compartments))
    for t, row in zip(times, counts):
        writer.writerow([repr(float(t))] + [int(v) for v in row])
