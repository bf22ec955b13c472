"""Endpoint-conditioned sampling of a subject's path on one interval.

Given a homogeneous rate matrix Q, an interval length T, and fixed states
a at 0 and b at T, draw the subject's path conditional on those endpoints.
Two samplers are provided:

* modified rejection sampling: when a != b the first jump is drawn from its
  distribution conditional on at least one jump before T, the rest of the
  interval is forward simulated, and the path is accepted when it lands on
  b.  When a == b plain forward simulation is used.  Cheap when T is short
  relative to the rates, which is the common case inside a proposal sweep.

* uniformization: the jump count N (including virtual self-jumps) is drawn
  from its exact conditional pmf under the uniformized chain with rate
  mu* = max exit rate, jump times are placed as sorted uniforms, states are
  filled in by a backward-looking product rule, and virtual jumps are
  dropped.  Never rejects; preferred when rejection would thrash.

Paths are returned as (times, states): jump offsets strictly inside (0, T)
and the state entered at each jump.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .ctmc import transition_matrix_series, validate_rate_matrix

__all__ = [
    "BridgeProblem",
    "BridgeRetryExceeded",
    "forward_simulate_subject",
    "sample_first_jump_conditional",
    "modified_rejection_bridge",
    "uniformization_bridge",
    "uniformization_jump_pmf",
]

MAX_REJECTION_TRIES = 1_000_000
PMF_TAIL = 1e-10


class BridgeRetryExceeded(RuntimeError):
    """Modified rejection sampling ran out of its retry budget."""


@dataclass(frozen=True)
class BridgeProblem:
    """One endpoint-conditioned interval: rate matrix, length, endpoints.

    tpm optionally carries a precomputed transition matrix over the full
    interval (uniformization needs P_ab(T); passing it avoids recomputing).
    """

    q: np.ndarray
    duration: float
    start: int
    end: int
    tpm: np.ndarray | None = None

    def __post_init__(self):
        validate_rate_matrix(self.q)
        if self.duration <= 0:
            raise ValueError("bridge duration must be positive")

    def endpoint_probability(self) -> float:
        p = self.tpm
        if p is None:
            p = transition_matrix_series(self.q, self.duration)
        return float(p[self.start, self.end])


def forward_simulate_subject(q, start: int, duration: float, rng) -> tuple[np.ndarray, np.ndarray]:
    """Unconditional CTMC path from `start` over [0, duration).

    Returns (times, states): jump offsets in (0, duration) and the state
    entered at each jump.  Stops early in absorbing states.
    """
    times, states = [], []
    s = int(start)
    t = 0.0
    while True:
        exit_rate = -q[s, s]
        if exit_rate <= 0.0:
            break
        t += rng.exponential(1.0 / exit_rate)
        if t >= duration:
            break
        u = rng.random() * exit_rate
        acc = 0.0
        for dst in range(q.shape[0]):
            if dst == s:
                continue
            acc += q[s, dst]
            if u < acc:
                break
        times.append(t)
        states.append(dst)
        s = dst
    return np.array(times), np.array(states, dtype=np.int64)


def sample_first_jump_conditional(exit_rate: float, duration: float, u: float) -> float:
    """Invert the cdf of the first jump time given at least one jump by T.

    tau = -log(1 - u * (1 - exp(-T * rate))) / rate, which maps u in (0,1)
    onto (0, T).
    """
    if exit_rate <= 0.0:
        raise ValueError("conditioning on a jump requires a positive exit rate")
    return -np.log1p(-u * -np.expm1(-duration * exit_rate)) / exit_rate


def modified_rejection_bridge(
    problem: BridgeProblem, rng, max_tries: int = MAX_REJECTION_TRIES
) -> tuple[np.ndarray, np.ndarray]:
    """Rejection-sample a path conditioned on both endpoints.

    Raises BridgeRetryExceeded when no accepted path appears within the
    budget; callers are expected to fall back to uniformization.
    """
    q, T, a, b = problem.q, problem.duration, problem.start, problem.end
    if a == b:
        for _ in range(max_tries):
            times, states = forward_simulate_subject(q, a, T, rng)
            last = states[-1] if states.size else a
            if last == b:
                return times, states
        raise BridgeRetryExceeded(f"no return path to {b} in {max_tries} tries")

    exit_rate = -q[a, a]
    if exit_rate <= 0.0:
        raise ValueError("start state is absorbing but endpoints differ")
    n = q.shape[0]
    dests = np.array([d for d in range(n) if d != a and q[a, d] > 0.0])
    dest_p = np.array([q[a, d] for d in dests])
    dest_p = dest_p / dest_p.sum()
    for _ in range(max_tries):
        while True:
            tau = sample_first_jump_conditional(exit_rate, T, rng.random())
            if 0.0 < tau < T:
                break
        first = int(dests[0]) if dests.size == 1 else int(rng.choice(dests, p=dest_p))
        times, states = forward_simulate_subject(q, first, T - tau, rng)
        last = states[-1] if states.size else first
        if last == b:
            return (
                np.concatenate([[tau], tau + times]),
                np.concatenate([[first], states]),
            )
    raise BridgeRetryExceeded(f"no path {a}->{b} accepted in {max_tries} tries")


def uniformization_jump_pmf(problem: BridgeProblem) -> tuple[np.ndarray, list[np.ndarray]]:
    """Conditional pmf of the uniformized jump count, plus the powers of R.

    Truncates once the accumulated mass reaches 1 - 1e-10 of the endpoint
    probability (hard cap 10*mu*T + 50) and renormalizes, so the returned
    pmf sums to one exactly.
    """
    q, T, a, b = problem.q, problem.duration, problem.start, problem.end
    mu = float(np.max(-np.diag(q)))
    if mu <= 0.0:
        if a != b:
            raise ValueError("all states absorbing but endpoints differ")
        return np.array([1.0]), [np.eye(q.shape[0])]

    p_ab = problem.endpoint_probability()
    if p_ab <= 0.0:
        raise ValueError("endpoint pair has zero probability")
    r = np.eye(q.shape[0]) + q / mu
    n_cap = int(np.ceil(10.0 * mu * T)) + 50
    powers = [np.eye(q.shape[0])]
    log_terms = []
    total = 0.0
    log_rate = np.log(mu * T)
    for n in range(n_cap + 1):
        if n > 0:
            powers.append(powers[-1] @ r)
        r_ab = powers[n][a, b]
        if r_ab > 0.0:
            lt = -mu * T + n * log_rate - gammaln(n + 1) + np.log(r_ab)
            log_terms.append((n, lt))
            total += np.exp(lt)
            if total >= (1.0 - PMF_TAIL) * p_ab:
                break
    if not log_terms:
        raise ValueError("endpoint pair unreachable under uniformized chain")
    pmf = np.zeros(log_terms[-1][0] + 1)
    for n, lt in log_terms:
        pmf[n] = np.exp(lt)
    pmf /= pmf.sum()
    return pmf, powers


def uniformization_bridge(problem: BridgeProblem, rng) -> tuple[np.ndarray, np.ndarray]:
    """Exact endpoint-conditioned path via the uniformized chain."""
    q, T, a, b = problem.q, problem.duration, problem.start, problem.end
    pmf, powers = uniformization_jump_pmf(problem)
    n = int(rng.choice(pmf.size, p=pmf))
    if n == 0 or (n == 1 and a == b):
        # no transitions, or a single virtual one
        return np.array([]), np.array([], dtype=np.int64)

    while True:
        times = np.sort(rng.random(n)) * T
        if times[0] > 0.0 and times[-1] < T and np.all(np.diff(times) > 0.0):
            break

    states = np.empty(n, dtype=np.int64)
    prev = a
    for i in range(1, n):
        mass = powers[1][prev, :] * powers[n - i][:, b]
        mass_sum = mass.sum()
        u = rng.random() * mass_sum
        acc = 0.0
        for s in range(mass.size):
            acc += mass[s]
            if u < acc:
                break
        states[i - 1] = s
        prev = s
    states[n - 1] = b

    real = np.empty(n, dtype=bool)
    prev = a
    for i in range(n):
        real[i] = states[i] != prev
        prev = states[i]
    return times[real], states[real]
