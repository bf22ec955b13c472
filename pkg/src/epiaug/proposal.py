"""One-subject path proposals and their Metropolis-Hastings correction.

A subject's path is redrawn in three stages, conditioning on everyone
else's paths (which fix the subject's inhomogeneous rate environment) and
on the observed counts:

1. HMM step: forward-filter the subject's state over the observation
   times, where the emission seen from one subject is Binomial(
   1{state infectious} + I_excluded, rho) (or the negative-binomial
   analogue); backward-sample the states at the observation times.
2. Skeleton step: between consecutive observations, sample the state at
   every breakpoint of the rate environment, conditionally on the two
   endpoint states, using suffix products of the per-interval TPMs.
3. Bridge step: fill each constant-rate interval with an endpoint-
   conditioned path (rejection or uniformization sampler).

The resulting draw is exactly the subject's conditional law given data and
environment, except that the environment ignores the subject's own effect
on others' infection rates; a Metropolis-Hastings ratio repairs this.  The
ratio only involves configuration-path densities because the emission
terms of target and proposal cancel identically.

Randomness order per update: L uniforms for the backward pass, one block
of uniforms for the skeleton (active segments in time order), the bridge
samplers' draws (intervals in time order), then one accept/reject uniform.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .bridges import (
    BridgeProblem,
    BridgeRetryExceeded,
    modified_rejection_bridge,
    uniformization_bridge,
)
from .ctmc import DecompositionCache
from .models import (
    Dataset,
    EmissionSpec,
    EventTimeCollision,
    ModelSpec,
    ParameterVector,
    PopulationHistory,
    ctmc_population_loglik,
    emission_loglik,
)

__all__ = [
    "IntervalPartition",
    "ForwardMatrices",
    "SubjectProposal",
    "PathUpdateResult",
    "build_partition",
    "hmm_forward",
    "hmm_sample_observation_states",
    "skeleton_sample",
    "bridge_fill",
    "proposal_logdensity",
    "mh_accept",
    "update_subject_path",
]


@dataclass(frozen=True)
class IntervalPartition:
    """Breakpoints of subject j's rate environment over the window.

    times: (B+1,) sorted breakpoints; the other subjects' event times plus
    the observation times (the window endpoints are observation times).
    i_excl: (B,) infectious count excluding subject j on each interval.
    obs_idx: (L,) positions of the observation times within `times`.
    subject: the excluded subject.
    """

    times: np.ndarray
    i_excl: np.ndarray
    obs_idx: np.ndarray
    subject: int

    @property
    def n_intervals(self) -> int:
        return self.i_excl.size

    def dts(self) -> np.ndarray:
        return np.diff(self.times)

    def i_excl_at_obs(self) -> np.ndarray:
        """Excluded prevalence at each observation time (left limits)."""
        if self.n_intervals == 0:
            raise ValueError("degenerate single-time partition")
        first = self.i_excl[0]  # no events before the first observation
        return np.concatenate([[first], self.i_excl[self.obs_idx[1:] - 1]])


@dataclass(frozen=True)
class ForwardMatrices:
    """Forward-filter output: the normalized two-time marginals.

    init: (n,) filtered state distribution at the first observation.
    q: (L-1, n, n); q[l][r, s] is proportional to the joint mass of state r
    at observation l and state s at observation l+1 given data up to l+1.
    """

    init: np.ndarray
    q: np.ndarray


@dataclass(frozen=True)
class SubjectProposal:
    initial_state: int
    jump_times: np.ndarray
    jump_to: np.ndarray


@dataclass(frozen=True)
class PathUpdateResult:
    accepted: bool
    history: PopulationHistory
    ctmc_loglik: float
    reason: str  # accepted | rejected | hmm_zero_mass | time_collision


def build_partition(history: PopulationHistory, j: int, dataset: Dataset) -> IntervalPartition:
    """Merge the other subjects' event times with the observation grid."""
    breaks, values = history.excluded_prevalence(j)
    times = np.unique(np.concatenate([breaks, dataset.times]))
    ev_times = breaks[1:-1]
    i_excl = values[np.searchsorted(ev_times, times[:-1], side="right")]
    obs_idx = np.searchsorted(times, dataset.times)
    return IntervalPartition(times, i_excl, obs_idx, j)


def _emission_table(
    partition: IntervalPartition,
    dataset: Dataset,
    theta: ParameterVector,
    emission: EmissionSpec,
    model: ModelSpec,
) -> np.ndarray:
    """(L, n) emission pmf values, each row rescaled by its maximum.

    Row l holds f(Y_l | subject state s), where the infectious count is
    I_excluded at t_l plus one when s is the infectious compartment.  The
    per-row scaling cancels in the normalized forward recursion.
    """
    i_ex = partition.i_excl_at_obs()
    n = model.n_states
    i_mat = np.tile(i_ex[:, None], (1, n))
    i_mat[:, model.infectious] += 1
    ll = emission_loglik(dataset.counts[:, None], i_mat, emission, theta)
    peak = ll.max(axis=1, keepdims=True)
    with np.errstate(invalid="ignore"):
        out = np.exp(ll - peak)
    out[np.isnan(out)] = 0.0  # rows where everything is impossible
    return out


def hmm_forward(
    seg_tpms: np.ndarray, emis: np.ndarray, p0: np.ndarray
) -> ForwardMatrices | None:
    """Normalized forward pass; None when the data have zero mass."""
    pi = p0 * emis[0]
    z = pi.sum()
    if z <= 0.0:
        return None
    pi = pi / z
    n_seg = seg_tpms.shape[0]
    q = np.empty_like(seg_tpms)
    for s in range(n_seg):
        qs = pi[:, None] * seg_tpms[s] * emis[s + 1][None, :]
        z = qs.sum()
        if z <= 0.0:
            return None
        q[s] = qs / z
        pi = q[s].sum(axis=0)
    return ForwardMatrices(init=p0 * emis[0] / (p0 * emis[0]).sum(), q=q)


def _draw(masses: np.ndarray, u: float) -> int:
    total = masses.sum()
    acc = 0.0
    target = u * total
    for s in range(masses.size - 1):
        acc += masses[s]
        if target < acc:
            return s
    return masses.size - 1


def hmm_sample_observation_states(fm: ForwardMatrices, uniforms: np.ndarray) -> np.ndarray:
    """Backward-sample subject states at the observation times."""
    n_seg = fm.q.shape[0]
    states = np.empty(n_seg + 1, dtype=np.int64)
    if n_seg == 0:
        states[0] = _draw(fm.init, uniforms[0])
        return states
    states[-1] = _draw(fm.q[-1].sum(axis=0), uniforms[-1])
    for s in range(n_seg - 1, -1, -1):
        states[s] = _draw(fm.q[s][:, states[s + 1]], uniforms[s])
    return states


def skeleton_sample(
    partition: IntervalPartition,
    tpms: np.ndarray,
    obs_states: np.ndarray,
    model: ModelSpec,
    rng,
) -> np.ndarray:
    """States at every breakpoint given the states at the observation times.

    Monotone models skip segments whose endpoint states are equal (all
    interior states must match).  A zero conditioning denominator means the
    TPMs and the sampled endpoints disagree, which is a bug, not a
    rejection; it raises RuntimeError.
    """
    times = partition.times
    obs_idx = partition.obs_idx
    states = np.full(times.size, -1, dtype=np.int64)
    states[obs_idx] = obs_states

    active = []
    n_u = 0
    for s in range(obs_idx.size - 1):
        lo, hi = int(obs_idx[s]), int(obs_idx[s + 1])
        if hi - lo <= 1:
            continue
        if model.monotone and obs_states[s] == obs_states[s + 1]:
            states[lo:hi] = obs_states[s]
            continue
        active.append((lo, hi))
        n_u += hi - lo - 1
    uniforms = rng.random(n_u) if n_u else np.empty(0)

    off = 0
    for lo, hi in active:
        suffix = _kernels.suffix_stack(tpms, lo, hi)
        used, ok = _kernels.skeleton_segment(
            tpms, suffix, lo, hi, states[lo], states[hi], uniforms, off, states
        )
        if not ok:
            raise RuntimeError("skeleton conditioning mass vanished")
        off += used
    assert np.all(states >= 0)
    return states


def bridge_fill(
    partition: IntervalPartition,
    tpms: np.ndarray,
    states: np.ndarray,
    cache: DecompositionCache,
    model: ModelSpec,
    rng,
    sampler: str = "rejection",
    max_tries: int = 10_000,
) -> SubjectProposal:
    """Fill every interval with an endpoint-conditioned path.

    Monotone models skip equal-endpoint intervals outright.  The rejection
    sampler escalates to uniformization when its retry budget runs out.
    """
    dts = partition.dts()
    all_times: list[np.ndarray] = []
    all_states: list[np.ndarray] = []
    if model.monotone:
        active = np.nonzero(states[:-1] != states[1:])[0]
    else:
        active = range(partition.n_intervals)
    for m in active:
        a, b = int(states[m]), int(states[m + 1])
        problem = BridgeProblem(
            cache.rate_matrix(int(partition.i_excl[m])),
            float(dts[m]),
            a,
            b,
            tpm=tpms[m],
        )
        if sampler == "rejection":
            try:
                jt, js = modified_rejection_bridge(problem, rng, max_tries=max_tries)
            except BridgeRetryExceeded:
                jt, js = uniformization_bridge(problem, rng)
        elif sampler == "uniformization":
            jt, js = uniformization_bridge(problem, rng)
        else:
            raise ValueError(f"unknown bridge sampler {sampler!r}")
        if jt.size:
            all_times.append(partition.times[m] + jt)
            all_states.append(js)
    if all_times:
        jump_times = np.concatenate(all_times)
        jump_to = np.concatenate(all_states)
    else:
        jump_times = np.empty(0)
        jump_to = np.empty(0, dtype=np.int64)
    return SubjectProposal(int(states[0]), jump_times, jump_to)


def _exit_rate_table(partition: IntervalPartition, model: ModelSpec, theta: ParameterVector) -> np.ndarray:
    """(B, n) total exit rate of each subject state on each interval."""
    table = np.zeros((partition.n_intervals, model.n_states))
    for t in model.transitions:
        if t.param == "beta":
            table[:, t.src] += theta.beta * partition.i_excl
        else:
            table[:, t.src] += theta.rate(t.param)
    return table


def proposal_logdensity(
    partition: IntervalPartition,
    model: ModelSpec,
    theta: ParameterVector,
    proposal: SubjectProposal,
    exit_table: np.ndarray | None = None,
) -> float:
    """Log density of a subject path under its inhomogeneous environment law.

    The initial state probability, plus each interval's homogeneous CTMC
    path density (log jump rates minus exposure).  Independent of the data:
    this is the unconditional environment law, which is what the MH ratio
    needs.
    """
    if theta.p0[proposal.initial_state] <= 0.0:
        return -np.inf
    if exit_table is None:
        exit_table = _exit_rate_table(partition, model, theta)
    times = partition.times
    jt, jto = proposal.jump_times, proposal.jump_to

    ll = float(np.log(theta.p0[proposal.initial_state]))
    # piecewise-constant exposure over the merged grid
    bounds = np.concatenate([times, jt])
    bounds.sort(kind="mergesort")
    starts = bounds[:-1]
    lens = np.diff(bounds)
    path_states = np.concatenate([[proposal.initial_state], jto]).astype(np.int64)
    state_of = path_states[np.searchsorted(jt, starts, side="right")]
    interval_of = np.clip(np.searchsorted(times, starts, side="right") - 1, 0, partition.n_intervals - 1)
    ll -= float(np.sum(lens * exit_table[interval_of, state_of]))

    if jt.size:
        m = np.searchsorted(times, jt, side="right") - 1
        frm = path_states[:-1]
        rates = np.empty(jt.size)
        for k in range(jt.size):
            tr = model.transition_from(int(frm[k]), int(jto[k]))
            rates[k] = (
                theta.beta * partition.i_excl[m[k]]
                if tr.param == "beta"
                else theta.rate(tr.param)
            )
        if np.any(rates <= 0.0):
            return -np.inf
        ll += float(np.sum(np.log(rates)))
    return ll


def mh_accept(
    history: PopulationHistory,
    partition: IntervalPartition,
    proposal: SubjectProposal,
    theta: ParameterVector,
    model: ModelSpec,
    rng,
    cur_ctmc_loglik: float | None = None,
    protected_times: np.ndarray | None = None,
) -> PathUpdateResult:
    """Accept or reject a proposed subject path.

    The ratio is (new config density / current config density) times
    (current proposal density / new proposal density); emission terms
    cancel exactly because the proposal conditions on the same data.
    """
    j = partition.subject
    if cur_ctmc_loglik is None:
        cur_ctmc_loglik = ctmc_population_loglik(history, theta)

    exit_table = _exit_rate_table(partition, model, theta)
    init_cur, jt_cur, jto_cur = history.subject_path(j)
    q_cur = proposal_logdensity(
        partition, model, theta, SubjectProposal(init_cur, jt_cur, jto_cur), exit_table
    )
    q_new = proposal_logdensity(partition, model, theta, proposal, exit_table)

    try:
        candidate = history.with_subject_path(
            j, proposal.initial_state, proposal.jump_times, proposal.jump_to,
            forbidden_times=protected_times,
        )
    except EventTimeCollision:
        return PathUpdateResult(False, history, cur_ctmc_loglik, "time_collision")

    new_ctmc = ctmc_population_loglik(candidate, theta)
    log_ratio = (new_ctmc - cur_ctmc_loglik) + (q_cur - q_new)
    if np.log(rng.random()) < log_ratio:
        return PathUpdateResult(True, candidate, new_ctmc, "accepted")
    return PathUpdateResult(False, history, cur_ctmc_loglik, "rejected")


def update_subject_path(
    history: PopulationHistory,
    j: int,
    dataset: Dataset,
    theta: ParameterVector,
    emission: EmissionSpec,
    cache: DecompositionCache,
    rng,
    sampler: str = "rejection",
    cur_ctmc_loglik: float | None = None,
) -> PathUpdateResult:
    """Run the full three-stage proposal and MH step for one subject."""
    model = history.model
    partition = build_partition(history, j, dataset)
    if partition.n_intervals == 0:
        raise ValueError("observation window has zero length")

    tpms = cache.tpms(partition.i_excl, partition.dts())
    seg_tpms = _kernels.segment_products(tpms, partition.obs_idx)
    emis = _emission_table(partition, dataset, theta, emission, model)
    fm = hmm_forward(seg_tpms, emis, theta.p0)
    if fm is None:
        if cur_ctmc_loglik is None:
            cur_ctmc_loglik = ctmc_population_loglik(history, theta)
        return PathUpdateResult(False, history, cur_ctmc_loglik, "hmm_zero_mass")

    obs_states = hmm_sample_observation_states(fm, rng.random(partition.obs_idx.size))
    states = skeleton_sample(partition, tpms, obs_states, model, rng)
    proposal = bridge_fill(partition, tpms, states, cache, model, rng, sampler=sampler)
    return mh_accept(
        history, partition, proposal, theta, model, rng,
        cur_ctmc_loglik=cur_ctmc_loglik, protected_times=dataset.times,
    )
