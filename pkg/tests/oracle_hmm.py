"""Exact marginal likelihood for partially observed count chains (test oracle).

Enumerates the full lumped state space (all occupancy vectors of the
population over the model compartments), builds the exact generator, and
runs a forward pass with matrix-exponential transition kernels.  Complexity
is quadratic in the number of occupancy vectors, so this is only usable for
tiny populations; it exists to validate Monte Carlo likelihood estimators.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import expm
from scipy.special import logsumexp
from scipy.stats import multinomial

from epiaug.models import emission_loglik


def occupancy_vectors(n_states: int, total: int) -> np.ndarray:
    """All nonnegative integer vectors of length n_states summing to total."""
    if n_states == 1:
        return np.array([[total]], dtype=np.int64)
    rows = []
    for c in range(total + 1):
        rest = occupancy_vectors(n_states - 1, total - c)
        rows.append(np.column_stack([np.full(len(rest), c, dtype=np.int64), rest]))
    return np.concatenate(rows, axis=0)


def lumped_generator(model, theta, states: np.ndarray) -> np.ndarray:
    """Exact generator of the count chain on the enumerated state space."""
    index = {tuple(s): i for i, s in enumerate(states)}
    q = np.zeros((len(states), len(states)))
    for i, s in enumerate(states):
        for tr in model.transitions:
            rate = theta.rate(tr.param) * s[tr.src]
            if tr.param == "beta":
                rate *= s[model.infectious]
            if rate > 0.0:
                target = list(s)
                target[tr.src] -= 1
                target[tr.dst] += 1
                j = index[tuple(target)]
                q[i, j] += rate
                q[i, i] -= rate
    return q


def exact_marginal_loglik(model, dataset, theta, emission) -> float:
    """log p(y_1..y_L) under the count-chain HMM, computed exactly.

    Matches the generative convention of the particle filter: the chain
    starts from a Multinomial(N, p0) draw at the first observation time and
    every observation (including the first) contributes an emission factor.
    """
    states = occupancy_vectors(model.n_states, dataset.population)
    logw = multinomial.logpmf(states, n=dataset.population, p=theta.p0)
    q = lumped_generator(model, theta, states)
    times = dataset.times
    for ell in range(times.size):
        if ell > 0:
            kernel = expm(q * (times[ell] - times[ell - 1]))
            shift = np.max(logw)
            lin = np.exp(logw - shift) @ kernel
            with np.errstate(divide="ignore"):
                logw = shift + np.log(np.clip(lin, 0.0, None))
        logw = logw + emission_loglik(
            np.int64(dataset.counts[ell]),
            states[:, model.infectious],
            emission,
            theta,
        )
    return float(logsumexp(logw))
