"""Chain orchestration: initialization, iteration loop, output handling.

One chain alternates between a block of subject-path updates (three-stage
proposal plus Metropolis-Hastings correction, applied to subjects chosen
uniformly at random without replacement) and one full sweep of parameter
updates.  Each chain owns an isolated random generator spawned from the run
seed, and consumes it in a fixed documented order: initial parameter draw
(when not supplied), path initialization, then per iteration the subject
selection, the per-subject proposals, and the parameter updates.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from .ctmc import DecompositionCache
from .diagnostics import summarize_latent
from .gibbs import (
    PriorSet,
    RhoPhiAdapter,
    update_p_t1,
    update_rate_params,
    update_rho_binomial,
)
from .models import (
    Dataset,
    EmissionSpec,
    ModelSpec,
    ParameterVector,
    PopulationHistory,
    complete_data_loglik,
    emission_loglik,
    sufficient_statistics,
)
from .pmmh import PmmhConfig, adaptive_rwmh_chain
from .proposal import update_subject_path
from .simulate import disaggregate, gillespie_simulate

__all__ = [
    "RunConfig",
    "ChainOutput",
    "SAMPLE_HEADER",
    "draw_initial_theta",
    "initialize_paths",
    "run_chain",
    "run_chains",
    "write_samples_csv",
    "read_samples_csv",
    "write_latent_csv",
]

REJECT_REASONS = ("rejected", "hmm_zero_mass", "time_collision")


@dataclass
class RunConfig:
    """Everything one inference run needs.

    ``subjects_per_iter`` defaults to 10% of the population (at least one).
    ``thin`` controls how often a latent-path snapshot is retained after
    burn-in.  ``method`` selects the data-augmentation sampler ("bda") or
    the particle-filter benchmark ("pmmh").
    """

    model: ModelSpec
    emission: EmissionSpec
    dataset: Dataset
    priors: PriorSet
    iterations: int
    burn_in: int = 0
    thin: int = 250
    subjects_per_iter: int | None = None
    bridge_sampler: str = "rejection"
    seed: int = 0
    chains: int = 1
    method: str = "bda"
    init_theta: ParameterVector | None = None
    pmmh: PmmhConfig = field(default_factory=PmmhConfig)
    init_budget: int = 100_000

    def validate(self) -> None:
        if self.iterations < 0 or self.burn_in < 0:
            raise ValueError("iterations and burn_in must be nonnegative")
        if self.iterations > 0 and self.iterations <= self.burn_in:
            raise ValueError("iterations must exceed burn_in")
        if self.thin < 1:
            raise ValueError("thin must be at least 1")
        k = self.resolved_subjects_per_iter()
        if not 1 <= k <= self.dataset.population:
            raise ValueError(
                f"subjects_per_iter must lie in [1, {self.dataset.population}], got {k}"
            )
        if self.bridge_sampler not in ("rejection", "uniformization"):
            raise ValueError(f"unknown bridge sampler {self.bridge_sampler!r}")
        if self.method not in ("bda", "pmmh"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.chains < 1:
            raise ValueError("chains must be at least 1")
        self.priors.check_model(self.model)
        if self.emission.kind == "negbinomial" and self.priors.phi is None:
            raise ValueError("negative-binomial emission needs a phi prior")

    def resolved_subjects_per_iter(self) -> int:
        if self.subjects_per_iter is not None:
            return self.subjects_per_iter
        return max(1, round(0.1 * self.dataset.population))


@dataclass
class ChainOutput:
    """Draws and diagnostics from a single chain."""

    model: ModelSpec
    emission: EmissionSpec
    method: str
    beta: np.ndarray
    mu: np.ndarray
    gamma: np.ndarray | None
    rho: np.ndarray
    phi: np.ndarray | None
    p0: np.ndarray  # (n_recorded, n_states)
    logpost: np.ndarray
    accept_rate: np.ndarray  # per-iteration fraction of accepted proposals
    counters: dict  # proposal outcomes keyed by reason
    latent_iterations: np.ndarray  # 1-based iteration numbers of snapshots
    latent_snapshots: list
    runtime_seconds: float

    @property
    def n_iterations(self) -> int:
        return self.beta.size

    @property
    def total_proposals(self) -> int:
        return int(sum(self.counters.values()))

    @property
    def overall_acceptance(self) -> float:
        total = self.total_proposals
        return self.counters.get("accepted", 0) / total if total else 0.0


def draw_initial_theta(
    priors: PriorSet, model: ModelSpec, emission: EmissionSpec, rng
) -> ParameterVector:
    """Sample a starting parameter vector from the priors."""
    draws = {p: priors.rate_prior(p).sample(rng) for p in model.params}
    phi = None
    if emission.kind == "negbinomial":
        if priors.phi is None:
            raise ValueError("negative-binomial emission needs a phi prior")
        phi = priors.phi.sample(rng)
    return ParameterVector(
        beta=draws["beta"],
        mu=draws["mu"],
        gamma=draws.get("gamma"),
        rho=priors.rho.sample(rng),
        phi=phi,
        p0=rng.dirichlet(priors.p0_alpha),
    )


def initialize_paths(
    model: ModelSpec,
    theta: ParameterVector,
    dataset: Dataset,
    emission: EmissionSpec,
    rng,
    budget: int = 100_000,
) -> PopulationHistory:
    """Simulate forward until the data have positive likelihood.

    Draws initial counts from p0, runs the exact count-chain simulator over
    the observation window, disaggregates to subjects, and accepts the first
    history whose emission log-likelihood is finite (under binomial sampling
    that means the latent prevalence covers every observed count; under
    negative-binomial sampling the first draw always qualifies).
    """
    times = dataset.times
    t0, t_end = float(times[0]), float(times[-1])
    for _ in range(budget):
        counts0 = rng.multinomial(dataset.population, theta.p0)
        path = gillespie_simulate(model, theta, counts0, rng, t0=t0, t_end=t_end)
        history = disaggregate(path, rng)
        ll = emission_loglik(
            dataset.counts, history.prevalence_at(times), emission, theta
        )
        if np.all(np.isfinite(ll)):
            return history
    raise RuntimeError(
        f"no latent path compatible with the data after {budget} attempts; "
        "check that the priors, initial parameters, and data are mutually consistent"
    )


def _dirichlet_logpdf(p: np.ndarray, alpha: np.ndarray) -> float:
    if np.any(p <= 0.0):
        return -np.inf
    return float(
        gammaln(alpha.sum()) - gammaln(alpha).sum() + np.sum((alpha - 1.0) * np.log(p))
    )


def theta_log_prior(
    theta: ParameterVector, priors: PriorSet, model: ModelSpec, emission: EmissionSpec
) -> float:
    """Joint log prior density of all parameters of the given model."""
    out = sum(priors.rate_prior(p).logpdf(theta.rate(p)) for p in model.params)
    out += priors.rho.logpdf(theta.rho)
    if emission.kind == "negbinomial":
        out += priors.phi.logpdf(theta.phi)
    out += _dirichlet_logpdf(theta.p0, np.asarray(priors.p0_alpha, dtype=np.float64))
    return float(out)


def _empty_output(config: RunConfig) -> ChainOutput:
    model = config.model
    has_gamma = "gamma" in model.params
    has_phi = config.emission.kind == "negbinomial"
    empty = np.empty(0)
    return ChainOutput(
        model=model,
        emission=config.emission,
        method=config.method,
        beta=empty,
        mu=empty.copy(),
        gamma=empty.copy() if has_gamma else None,
        rho=empty.copy(),
        phi=empty.copy() if has_phi else None,
        p0=np.empty((0, model.n_states)),
        logpost=empty.copy(),
        accept_rate=empty.copy(),
        counters={"accepted": 0, **{r: 0 for r in REJECT_REASONS}},
        latent_iterations=np.empty(0, dtype=np.int64),
        latent_snapshots=[],
        runtime_seconds=0.0,
    )


def _chain_rng(config: RunConfig, chain_index: int):
    if not 0 <= chain_index < config.chains:
        raise ValueError("chain_index out of range")
    child = np.random.SeedSequence(config.seed).spawn(config.chains)[chain_index]
    return np.random.default_rng(child)


def run_chain(config: RunConfig, chain_index: int = 0) -> ChainOutput:
    """Run one chain of the configured sampler and return its output."""
    config.validate()
    if config.iterations == 0:
        return _empty_output(config)
    if config.method == "pmmh":
        return _run_pmmh_chain(config, chain_index)
    return _run_bda_chain(config, chain_index)


def run_chains(config: RunConfig) -> list:
    """Run all configured chains sequentially, each on an isolated stream."""
    return [run_chain(config, k) for k in range(config.chains)]


def _run_bda_chain(config: RunConfig, chain_index: int) -> ChainOutput:
    start = time.perf_counter()
    rng = _chain_rng(config, chain_index)
    model, emission, dataset, priors = (
        config.model,
        config.emission,
        config.dataset,
        config.priors,
    )
    theta = config.init_theta
    if theta is None:
        theta = draw_initial_theta(priors, model, emission, rng)
    theta.validate(model, emission)

    history = initialize_paths(
        model, theta, dataset, emission, rng, budget=config.init_budget
    )
    cache = DecompositionCache(model, theta, max_excluded=dataset.population)
    adapter = RhoPhiAdapter() if emission.kind == "negbinomial" else None

    n_iter = config.iterations
    k_subjects = config.resolved_subjects_per_iter()
    has_gamma = "gamma" in model.params
    betas = np.empty(n_iter)
    mus = np.empty(n_iter)
    gammas = np.empty(n_iter) if has_gamma else None
    rhos = np.empty(n_iter)
    phis = np.empty(n_iter) if adapter is not None else None
    p0s = np.empty((n_iter, model.n_states))
    logposts = np.empty(n_iter)
    accept_rates = np.empty(n_iter)
    counters = {"accepted": 0, **{r: 0 for r in REJECT_REASONS}}
    latent_iterations: list[int] = []
    latent_snapshots: list[PopulationHistory] = []

    for it in range(n_iter):
        chosen = rng.choice(dataset.population, size=k_subjects, replace=False)
        cur_ll = None
        n_acc = 0
        for j in chosen:
            res = update_subject_path(
                history,
                int(j),
                dataset,
                theta,
                emission,
                cache,
                rng,
                sampler=config.bridge_sampler,
                cur_ctmc_loglik=cur_ll,
            )
            history, cur_ll = res.history, res.ctmc_loglik
            counters[res.reason] += 1
            n_acc += res.accepted
        accept_rates[it] = n_acc / k_subjects

        stats = sufficient_statistics(history, model)
        theta = update_rate_params(stats, priors, theta, rng)
        if adapter is None:
            theta = update_rho_binomial(history, dataset, priors, theta, rng)
        else:
            theta, _ = adapter.step(history, dataset, theta, priors, rng)
        theta = update_p_t1(history, priors, theta, rng)
        cache.set_theta(theta)

        betas[it] = theta.beta
        mus[it] = theta.mu
        if gammas is not None:
            gammas[it] = theta.gamma
        rhos[it] = theta.rho
        if phis is not None:
            phis[it] = theta.phi
        p0s[it] = theta.p0
        logposts[it] = complete_data_loglik(
            history, dataset, theta, model, emission
        ) + theta_log_prior(theta, priors, model, emission)

        if it >= config.burn_in and (it - config.burn_in) % config.thin == 0:
            latent_iterations.append(it + 1)
            latent_snapshots.append(history)

    return ChainOutput(
        model=model,
        emission=emission,
        method="bda",
        beta=betas,
        mu=mus,
        gamma=gammas,
        rho=rhos,
        phi=phis,
        p0=p0s,
        logpost=logposts,
        accept_rate=accept_rates,
        counters=counters,
        latent_iterations=np.array(latent_iterations, dtype=np.int64),
        latent_snapshots=latent_snapshots,
        runtime_seconds=time.perf_counter() - start,
    )


def _run_pmmh_chain(config: RunConfig, chain_index: int) -> ChainOutput:
    start = time.perf_counter()
    rng = _chain_rng(config, chain_index)
    model, emission = config.model, config.emission
    theta = config.init_theta
    if theta is None:
        theta = draw_initial_theta(config.priors, model, emission, rng)
    theta.validate(model, emission)

    res = adaptive_rwmh_chain(
        model,
        config.dataset,
        emission,
        config.priors,
        config.pmmh,
        config.iterations,
        theta,
        rng,
    )
    logpost = np.array(
        [
            ll + theta_log_prior(th, config.priors, model, emission)
            for ll, th in zip(
                res.loglik,
                (
                    ParameterVector(
                        beta=res.beta[i],
                        mu=res.mu[i],
                        gamma=None if res.gamma is None else res.gamma[i],
                        rho=res.rho[i],
                        phi=None if res.phi is None else res.phi[i],
                        p0=res.p0[i],
                    )
                    for i in range(config.iterations)
                ),
            )
        ]
    )
    n_acc = int(res.accepted.sum())
    counters = {
        "accepted": n_acc,
        "rejected": int(res.accepted.size - n_acc),
        "hmm_zero_mass": 0,
        "time_collision": 0,
    }
    return ChainOutput(
        model=model,
        emission=emission,
        method="pmmh",
        beta=res.beta,
        mu=res.mu,
        gamma=res.gamma,
        rho=res.rho,
        phi=res.phi,
        p0=res.p0,
        logpost=logpost,
        accept_rate=res.accepted.astype(np.float64),
        counters=counters,
        latent_iterations=np.empty(0, dtype=np.int64),
        latent_snapshots=[],
        runtime_seconds=time.perf_counter() - start,
    )


# -- file output ----------------------------------------------------------

SAMPLE_HEADER = "iteration,logpost,beta,gamma,mu,rho,phi,p_S,p_E,p_I,p_R,accept_rate"
_P_COLUMNS = ("p_S", "p_E", "p_I", "p_R")
LATENT_HEADER = "time,state,q025,q50,q975"


def _fmt(x: float) -> str:
    return repr(float(x))


def write_samples_csv(f, output: ChainOutput) -> None:
    """Write one chain's draws with the fixed column layout.

    Columns for parameters absent from the model (gamma, phi, initial
    probabilities of missing compartments) are left blank.  Values are
    written with shortest round-trip formatting, so full double precision
    survives a read back.
    """
    compartments = output.model.compartments
    p_index = {
        col: (compartments.index(col[2:]) if col[2:] in compartments else None)
        for col in _P_COLUMNS
    }
    f.write(SAMPLE_HEADER + "\n")
    for i in range(output.n_iterations):
        row = [
            str(i + 1),
            _fmt(output.logpost[i]),
            _fmt(output.beta[i]),
            _fmt(output.gamma[i]) if output.gamma is not None else "",
            _fmt(output.mu[i]),
            _fmt(output.rho[i]),
            _fmt(output.phi[i]) if output.phi is not None else "",
        ]
        for col in _P_COLUMNS:
            idx = p_index[col]
            row.append(_fmt(output.p0[i, idx]) if idx is not None else "")
        row.append(_fmt(output.accept_rate[i]))
        f.write(",".join(row) + "\n")


def read_samples_csv(path) -> dict:
    """Read a samples CSV back into {column: array}, dropping blank columns."""
    with open(path) as f:
        header = f.readline().strip().split(",")
        rows = [line.rstrip("\n").split(",") for line in f if line.strip()]
    out = {}
    for j, name in enumerate(header):
        vals = [r[j] for r in rows]
        if all(v == "" for v in vals):
            continue
        arr = np.array([float(v) for v in vals])
        out[name] = arr.astype(np.int64) if name == "iteration" else arr
    return out


def write_latent_csv(f, snapshots, times, model: ModelSpec) -> None:
    """Write pointwise 2.5/50/97.5% quantiles of compartment counts."""
    qs = summarize_latent(snapshots, times, quantiles=(0.025, 0.5, 0.975))
    f.write(LATENT_HEADER + "\n")
    for ti, t in enumerate(np.asarray(times, dtype=np.float64)):
        for si, name in enumerate(model.compartments):
            f.write(
                ",".join(
                    [_fmt(t), name] + [_fmt(qs[ti, si, k]) for k in range(3)]
                )
                + "\n"
            )
