"""Compiled inner loops.

Sequential passes that numpy cannot vectorize live here: running products
of per-interval transition matrices, skeleton-state sampling along a
partition, lumped-count Gillespie simulation, and particle propagation for
the particle-filter benchmark.  All randomness is either passed in as
pre-drawn uniforms (skeleton) or generated from an explicit seed handed to
the kernel (simulation kernels), so chain-level reproducibility is owned
by the caller's Generator.
"""

from __future__ import annotations

import numpy as np
from numba import njit

__all__ = [
    "segment_products",
    "suffix_stack",
    "skeleton_segment",
    "gillespie_counts",
    "propagate_gillespie",
]


@njit(cache=True)
def segment_products(tpms, seg_bounds):
    """Product of interval TPMs within each inter-observation segment.

    tpms: (M, n, n) stack, interval order.  seg_bounds: (L,) breakpoint
    indices of the observation times; segment s covers intervals
    seg_bounds[s] .. seg_bounds[s+1]-1.  Returns (L-1, n, n).
    """
    n_seg = seg_bounds.size - 1
    n = tpms.shape[1]
    out = np.empty((n_seg, n, n))
    for s in range(n_seg):
        acc = np.eye(n)
        for m in range(seg_bounds[s], seg_bounds[s + 1]):
            acc = acc @ tpms[m]
        out[s] = acc
    return out


@njit(cache=True)
def suffix_stack(tpms, lo, hi):
    """Suffix products over intervals [lo, hi): entry i is P_{lo+i} ... P_{hi-1}."""
    n = tpms.shape[1]
    m = hi - lo
    out = np.empty((m, n, n))
    out[m - 1] = tpms[hi - 1]
    for i in range(m - 2, -1, -1):
        out[i] = tpms[lo + i] @ out[i + 1]
    return out


@njit(cache=True)
def skeleton_segment(tpms, suffix, lo, hi, x_start, x_end, uniforms, u_off, out_states):
    """Sample subject states at the interior breakpoints of one segment.

    Breakpoint i in (lo, hi) is drawn conditional on the state at i-1 and
    on x_end at breakpoint hi, with mass proportional to
    tpms[i-1][x_{i-1}, s] * suffix[i-lo][s, x_end].  States land in
    out_states[lo+1 .. hi-1]; uniforms are consumed sequentially starting
    at u_off.  Returns (uniforms consumed, ok flag); ok is False when a
    conditioning denominator vanishes.
    """
    n = tpms.shape[1]
    used = 0
    x_prev = x_start
    for i in range(lo + 1, hi):
        total = 0.0
        for s in range(n):
            total += tpms[i - 1][x_prev, s] * suffix[i - lo][s, x_end]
        if total <= 0.0:
            return used, False
        u = uniforms[u_off + used] * total
        used += 1
        acc = 0.0
        pick = n - 1
        for s in range(n):
            acc += tpms[i - 1][x_prev, s] * suffix[i - lo][s, x_end]
            if u < acc:
                pick = s
                break
        out_states[i] = pick
        x_prev = pick
    return used, True


@njit(cache=True)
def gillespie_counts(
    init_counts,
    t0,
    t_end,
    epoch_ends,
    rate_consts,
    src_idx,
    dst_idx,
    is_infective,
    inf_idx,
    max_events,
    seed,
):
    """Exact simulation of the lumped count chain, recording every event.

    rate_consts is (n_epochs, n_trans): per-capita rates per epoch, with
    epoch e active until epoch_ends[e] (the last entry must be >= t_end).
    Infective transitions have propensity rate * count[src] * count[inf_idx],
    others rate * count[src].  Returns (times, channels, n_recorded,
    final_counts); n_recorded == -1 signals the event buffer overflowed.
    """
    np.random.seed(seed)
    counts = init_counts.copy()
    n_trans = src_idx.size
    times = np.empty(max_events)
    channels = np.empty(max_events, dtype=np.int64)
    k = 0
    t = t0
    epoch = 0
    while epoch_ends[epoch] <= t:
        epoch += 1
    while True:
        total = 0.0
        for c in range(n_trans):
            r = rate_consts[epoch, c] * counts[src_idx[c]]
            if is_infective[c]:
                r *= counts[inf_idx]
            total += r
        if total <= 0.0:
            # nothing can fire this epoch; hop to the next boundary
            if epoch_ends[epoch] >= t_end:
                break
            t = epoch_ends[epoch]
            epoch += 1
            continue
        t_next = t + np.random.exponential(1.0 / total)
        if t_next >= epoch_ends[epoch]:
            if epoch_ends[epoch] >= t_end:
                break
            t = epoch_ends[epoch]
            epoch += 1
            continue
        t = t_next
        if t >= t_end:
            break
        u = np.random.random() * total
        acc = 0.0
        pick = n_trans - 1
        for c in range(n_trans):
            r = rate_consts[epoch, c] * counts[src_idx[c]]
            if is_infective[c]:
                r *= counts[inf_idx]
            acc += r
            if u < acc:
                pick = c
                break
        if k >= max_events:
            return times, channels, -1, counts
        times[k] = t
        channels[k] = pick
        k += 1
        counts[src_idx[pick]] -= 1
        counts[dst_idx[pick]] += 1
    return times, channels, k, counts


@njit(cache=True)
def propagate_gillespie(
    counts,
    t0,
    t_end,
    rate_consts,
    src_idx,
    dst_idx,
    is_infective,
    inf_idx,
    seed,
):
    """Advance a batch of count vectors from t0 to t_end, in place.

    counts is (n_particles, n_states).  Single-epoch rates (n_trans,).
    """
    np.random.seed(seed)
    n_part = counts.shape[0]
    n_trans = src_idx.size
    for p in range(n_part):
        t = t0
        while True:
            total = 0.0
            for c in range(n_trans):
                r = rate_consts[c] * counts[p, src_idx[c]]
                if is_infective[c]:
                    r *= counts[p, inf_idx]
                total += r
            if total <= 0.0:
                break
            t += np.random.exponential(1.0 / total)
            if t >= t_end:
                break
            u = np.random.random() * total
            acc = 0.0
            pick = n_trans - 1
            for c in range(n_trans):
                r = rate_consts[c] * counts[p, src_idx[c]]
                if is_infective[c]:
                    r *= counts[p, inf_idx]
                acc += r
                if u < acc:
                    pick = c
                    break
            counts[p, src_idx[pick]] -= 1
            counts[p, dst_idx[pick]] += 1
