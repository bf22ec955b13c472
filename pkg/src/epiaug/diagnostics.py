"""Convergence diagnostics and latent-path summaries for MCMC output.

Provides an effective-sample-size estimator based on the initial positive
sequence of pairwise autocorrelation sums (Geyer truncation) and pointwise
posterior quantiles of the latent compartment counts.
"""

from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np

__all__ = ["EssResult", "effective_sample_size", "summarize_latent"]


class EssResult(NamedTuple):
    """Effective sample size plus a degeneracy indicator.

    ``degenerate`` is True when the trace is constant, in which case the
    autocorrelation estimator is undefined and ``ess`` is reported as the
    trace length by convention.
    """

    ess: float
    degenerate: bool

    def __float__(self) -> float:
        return float(self.ess)


def _autocovariance(x: np.ndarray) -> np.ndarray:
    """Biased sample autocovariances gamma_0..gamma_{n-1} via FFT."""
    n = x.size
    centered = x - x.mean()
    nfft = 1 << (2 * n - 1).bit_length()
    spec = np.fft.rfft(centered, nfft)
    acov = np.fft.irfft(spec * np.conj(spec), nfft)[:n]
    return acov / n


def effective_sample_size(trace: np.ndarray) -> EssResult:
    """Effective sample size of a scalar MCMC trace.

    Uses the initial-positive-sequence estimator: autocorrelations are
    summed in consecutive pairs ``rho_{2m} + rho_{2m+1}``, and the sum is
    truncated at the first non-positive pair. The integrated
    autocorrelation time is ``tau = -1 + 2 * sum(pairs)`` and
    ``ess = n / tau``.

    A constant trace returns ``EssResult(n, degenerate=True)``; otherwise
    ``degenerate`` is False. Requires at least 10 samples.
    """
    x = np.asarray(trace, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("trace must be one-dimensional")
    n = x.size
    if n < 10:
        raise ValueError("need at least 10 samples to estimate ESS")
    if not np.all(np.isfinite(x)):
        raise ValueError("trace contains non-finite values")
    if np.all(x == x[0]):
        return EssResult(float(n), True)

    acov = _autocovariance(x)
    rho = acov / acov[0]

    # Pair sums of autocorrelations are positive for the true ACF of a
    # reversible chain; truncate the empirical sequence at the first
    # non-positive pair.
    n_pairs = n // 2
    pair_sums = rho[0 : 2 * n_pairs : 2] + rho[1 : 2 * n_pairs : 2]
    nonpos = np.nonzero(pair_sums <= 0.0)[0]
    m_stop = int(nonpos[0]) if nonpos.size else n_pairs
    tau = -1.0 + 2.0 * float(pair_sums[:m_stop].sum())
    # A strongly antithetic trace can push tau to zero or below; floor it
    # so the estimate stays finite.
    tau = max(tau, 1.0 / n)
    return EssResult(n / tau, False)


def summarize_latent(
    snapshots: Sequence,
    times: np.ndarray,
    quantiles: Sequence[float] = (0.025, 0.5, 0.975),
) -> np.ndarray:
    """Pointwise quantiles of compartment counts across sampled paths.

    ``snapshots`` is a sequence of population histories (thinned MCMC
    draws of the latent epidemic); counts are evaluated just before each
    requested time, matching the left-limit convention used everywhere
    else. Quantiles are computed with numpy's default linear interpolation
    between order statistics, so a single snapshot reproduces its own path
    exactly and the median of two snapshots is their pointwise midpoint.

    Returns an array of shape ``(n_times, n_states, n_quantiles)``.
    """
    if len(snapshots) == 0:
        raise ValueError("need at least one latent snapshot")
    times = np.asarray(times, dtype=np.float64)
    q = np.asarray(quantiles, dtype=np.float64)
    if q.ndim != 1 or q.size == 0 or np.any(q < 0.0) or np.any(q > 1.0):
        raise ValueError("quantiles must lie in [0, 1]")
    stack = np.stack([h.counts_at(times) for h in snapshots], axis=0)
    # (n_q, n_times, n_states) -> (n_times, n_states, n_q)
    out = np.quantile(stack, q, axis=0, method="linear")
    return np.moveaxis(out, 0, -1)
