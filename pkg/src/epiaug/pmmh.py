"""Particle-filter benchmark sampler.

A bootstrap particle filter over the lumped count chain supplies unbiased
log-likelihood estimates; an adaptive random-walk Metropolis-Hastings chain
on transformed parameters (log rates, logit rho, log phi, generalized-logit
initial probabilities) consumes them.  The proposal covariance adapts toward
a 23.4% acceptance rate during a pilot phase and is frozen afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logit, logsumexp

from . import _kernels
from .gibbs import PriorSet
from .models import (
    Dataset,
    EmissionSpec,
    ModelSpec,
    ParameterVector,
    emission_loglik,
)
from .simulate import _rate_row, _transition_arrays, propagate_tau_leap

__all__ = [
    "ParamTransform",
    "PmmhConfig",
    "PmmhResult",
    "bootstrap_loglik",
    "adaptive_rwmh_chain",
]


class ParamTransform:
    """Bijection between a ParameterVector and an unconstrained vector.

    Coordinates, in order: log of each rate parameter (model order), logit
    of rho, log of phi (negative-binomial emission only), then the
    generalized logit of p0 with the last compartment as reference
    (log p_i/p_last for i < n_states).
    """

    def __init__(self, model: ModelSpec, emission: EmissionSpec):
        self.model = model
        self.emission = emission
        self.rate_names = list(model.params)
        self.has_phi = emission.kind == "negbinomial"
        self.n_states = model.n_states
        self.dim = len(self.rate_names) + 1 + int(self.has_phi) + (self.n_states - 1)
        self.names = (
            [f"log_{p}" for p in self.rate_names]
            + ["logit_rho"]
            + (["log_phi"] if self.has_phi else [])
            + [f"glogit_p_{model.compartments[i]}" for i in range(self.n_states - 1)]
        )

    def to_z(self, theta: ParameterVector) -> np.ndarray:
        for p in self.rate_names:
            if not theta.rate(p) > 0.0:
                raise ValueError(f"{p} must be strictly positive")
        if not 0.0 < theta.rho < 1.0:
            raise ValueError("rho must lie strictly inside (0, 1)")
        if self.has_phi and not (theta.phi is not None and theta.phi > 0.0):
            raise ValueError("phi must be strictly positive")
        if np.any(theta.p0 <= 0.0):
            raise ValueError("initial probabilities must be strictly positive")
        z = [np.log(theta.rate(p)) for p in self.rate_names]
        z.append(logit(theta.rho))
        if self.has_phi:
            z.append(np.log(theta.phi))
        z.extend(np.log(theta.p0[:-1] / theta.p0[-1]))
        return np.array(z, dtype=np.float64)

    def from_z(self, z: np.ndarray) -> ParameterVector:
        k = len(self.rate_names)
        rates = {p: float(np.exp(z[i])) for i, p in enumerate(self.rate_names)}
        rho = float(expit(z[k]))
        k += 1
        phi = None
        if self.has_phi:
            phi = float(np.exp(z[k]))
            k += 1
        zp = np.append(z[k:], 0.0)
        expz = np.exp(zp - zp.max())  # stable softmax; extremes underflow to 0
        p0 = expz / expz.sum()
        return ParameterVector(
            beta=rates["beta"],
            mu=rates["mu"],
            gamma=rates.get("gamma"),
            rho=rho,
            phi=phi,
            p0=p0,
        )

    def log_jacobian(self, theta: ParameterVector) -> float:
        """log |d theta / d z|: sum of per-block Jacobian terms.

        Returns -inf (or nan for overflowed rates) on the boundary of the
        parameter domain, which the sampler treats as an automatic reject.
        """
        with np.errstate(divide="ignore"):
            out = sum(np.log(theta.rate(p)) for p in self.rate_names)
            out += np.log(theta.rho) + np.log1p(-theta.rho)
            if self.has_phi:
                out += np.log(theta.phi)
            out += float(np.sum(np.log(theta.p0)))
        return float(out)


@dataclass(frozen=True)
class PmmhConfig:
    n_particles: int = 100
    path_sim: str = "gillespie"  # or "tau_leap"
    tau_step: float = 1.0 / 12.0
    pilot: int = 5_000
    initial_step: float = 0.1
    target_accept: float = 0.234
    init_retries: int = 100


@dataclass
class PmmhResult:
    """Per-iteration parameter draws plus chain-level diagnostics."""

    names: list
    z_samples: np.ndarray  # (n_iter, d) transformed-scale states (diagnostic)
    beta: np.ndarray
    mu: np.ndarray
    gamma: np.ndarray | None
    rho: np.ndarray
    phi: np.ndarray | None
    p0: np.ndarray  # (n_iter, n_states)
    loglik: np.ndarray
    accepted: np.ndarray
    degenerate_fraction: float
    proposal_cov: np.ndarray

    @property
    def acceptance_rate(self) -> float:
        return float(self.accepted.mean()) if self.accepted.size else 0.0


def _emission_logweights(y: int, prevalence: np.ndarray, emission, theta) -> np.ndarray:
    return emission_loglik(np.int64(y), prevalence, emission, theta)


def bootstrap_loglik(
    model: ModelSpec,
    dataset: Dataset,
    theta: ParameterVector,
    emission: EmissionSpec,
    n_particles: int,
    rng,
    path_sim: str = "gillespie",
    tau_step: float = 1.0 / 12.0,
) -> float:
    """Unbiased log-likelihood estimate from a bootstrap particle filter.

    Particles start as multinomial draws from p0 at the first observation
    time and are weighted by every observation including the first;
    multinomial resampling follows each weighting.  Returns -inf as soon as
    every particle has zero weight.
    """
    if n_particles < 1:
        raise ValueError("need at least one particle")
    if path_sim not in ("gillespie", "tau_leap"):
        raise ValueError(f"unknown path simulator {path_sim!r}")
    times = dataset.times
    counts = rng.multinomial(dataset.population, theta.p0, size=n_particles)
    counts = np.ascontiguousarray(counts, dtype=np.int64)
    src, dst, infective = _transition_arrays(model)
    rates = _rate_row(model, theta)

    total = 0.0
    for ell in range(times.size):
        if ell > 0:
            if path_sim == "gillespie":
                seed = int(rng.integers(0, 2**31 - 1))
                _kernels.propagate_gillespie(
                    counts, times[ell - 1], times[ell], rates, src, dst,
                    infective, model.infectious, seed,
                )
            else:
                counts = propagate_tau_leap(
                    model, theta, counts, times[ell - 1], times[ell], tau_step, rng
                )
        logw = _emission_logweights(
            dataset.counts[ell], counts[:, model.infectious], emission, theta
        )
        norm = logsumexp(logw)
        if not np.isfinite(norm):
            return -np.inf
        total += norm - np.log(n_particles)
        w = np.exp(logw - norm)
        w = w / w.sum()
        reps = rng.multinomial(n_particles, w)
        counts = np.ascontiguousarray(np.repeat(counts, reps, axis=0))
    return float(total)


def _log_prior(theta: ParameterVector, priors: PriorSet, transform: ParamTransform) -> float:
    out = 0.0
    for p in transform.rate_names:
        out += priors.rate_prior(p).logpdf(theta.rate(p))
    out += priors.rho.logpdf(theta.rho)
    if transform.has_phi:
        if priors.phi is None:
            raise ValueError("phi prior required for negative-binomial emission")
        out += priors.phi.logpdf(theta.phi)
    alpha = priors.p0_alpha
    out += float(np.sum((alpha - 1.0) * np.log(theta.p0)))  # Dirichlet kernel
    return out


class _AdaptiveProposal:
    """Haario-style covariance adaptation with acceptance-rate scaling.

    During the pilot the empirical covariance of the visited states is
    tracked recursively and the global scale follows a Robbins-Monro
    recursion toward the target acceptance rate; afterwards the proposal is
    frozen.
    """

    def __init__(self, dim: int, initial_step: float, target: float, pilot: int):
        self.dim = dim
        self.target = target
        self.pilot = pilot
        self.log_scale = 2.0 * np.log(2.38 / np.sqrt(dim))
        self.base = np.eye(dim) * initial_step**2
        self.mean = np.zeros(dim)
        self.cov = np.zeros((dim, dim))
        self.count = 0
        self.frozen_cov = None

    def current_cov(self) -> np.ndarray:
        if self.frozen_cov is not None:
            return self.frozen_cov
        if self.count <= 2 * self.dim:
            return np.exp(self.log_scale) * self.base
        return np.exp(self.log_scale) * (self.cov + 1e-10 * np.eye(self.dim))

    def update(self, z: np.ndarray, alpha: float):
        if self.frozen_cov is not None:
            return
        self.count += 1
        k = self.count
        delta = z - self.mean
        self.mean = self.mean + delta / k
        self.cov = self.cov * (k - 1) / k + np.outer(delta, z - self.mean) / k
        self.log_scale += (alpha - self.target) / k**0.6
        if k >= self.pilot:
            self.frozen_cov = self.current_cov()


def adaptive_rwmh_chain(
    model: ModelSpec,
    dataset: Dataset,
    emission: EmissionSpec,
    priors: PriorSet,
    config: PmmhConfig,
    n_iter: int,
    init_theta: ParameterVector,
    rng,
    loglik_fn=None,
) -> PmmhResult:
    """Run one PMMH chain and return its draws.

    Each iteration consumes, in order: one standard-normal vector of
    dimension d for the proposal, whatever the likelihood estimator draws,
    and one uniform for the accept decision.  The likelihood estimate for
    the current point is carried, never recomputed.  loglik_fn replaces the
    particle filter when supplied (exact-likelihood and prior-only runs).
    """
    transform = ParamTransform(model, emission)
    priors.check_model(model)
    if loglik_fn is None:
        def loglik_fn(theta):
            return bootstrap_loglik(
                model, dataset, theta, emission, config.n_particles, rng,
                path_sim=config.path_sim, tau_step=config.tau_step,
            )

    z = transform.to_z(init_theta)
    theta = init_theta
    cur_ll = -np.inf
    n_degenerate = 0
    n_filter_runs = 0
    for _ in range(config.init_retries):
        cur_ll = loglik_fn(theta)
        n_filter_runs += 1
        if np.isfinite(cur_ll):
            break
        n_degenerate += 1
    else:
        raise RuntimeError(
            "likelihood estimate stayed non-finite at the initial point"
        )
    cur_post = cur_ll + _log_prior(theta, priors, transform) + transform.log_jacobian(theta)

    proposal = _AdaptiveProposal(
        transform.dim, config.initial_step, config.target_accept, config.pilot
    )

    d = transform.dim
    z_samples = np.empty((n_iter, d))
    betas = np.empty(n_iter)
    mus = np.empty(n_iter)
    gammas = np.empty(n_iter) if "gamma" in model.params else None
    rhos = np.empty(n_iter)
    phis = np.empty(n_iter) if transform.has_phi else None
    p0s = np.empty((n_iter, model.n_states))
    logliks = np.empty(n_iter)
    accepts = np.zeros(n_iter, dtype=bool)

    for it in range(n_iter):
        cov = proposal.current_cov()
        step = np.linalg.cholesky(cov) if np.any(cov) else None
        noise = rng.standard_normal(d)
        z_new = z + (step @ noise if step is not None else 0.0)
        theta_new = transform.from_z(z_new)

        # Proposals whose back-transform hits the domain boundary (underflowed
        # probabilities, overflowed rates) are rejected without running the
        # likelihood estimator.
        log_jac = transform.log_jacobian(theta_new)
        if not np.isfinite(log_jac):
            new_ll = -np.inf
            new_post = -np.inf
        else:
            new_ll = loglik_fn(theta_new)
            n_filter_runs += 1
            if not np.isfinite(new_ll):
                n_degenerate += 1
                new_post = -np.inf
            else:
                new_post = new_ll + _log_prior(theta_new, priors, transform) + log_jac

        log_ratio = new_post - cur_post
        alpha = min(1.0, np.exp(min(log_ratio, 0.0)))
        if np.log(rng.random()) < log_ratio:
            z, theta, cur_ll, cur_post = z_new, theta_new, new_ll, new_post
            accepts[it] = True
        proposal.update(z, alpha)

        z_samples[it] = z
        betas[it] = theta.beta
        mus[it] = theta.mu
        if gammas is not None:
            gammas[it] = theta.gamma
        rhos[it] = theta.rho
        if phis is not None:
            phis[it] = theta.phi
        p0s[it] = theta.p0
        logliks[it] = cur_ll

    return PmmhResult(
        names=transform.names,
        z_samples=z_samples,
        beta=betas,
        mu=mus,
        gamma=gammas,
        rho=rhos,
        phi=phis,
        p0=p0s,
        loglik=logliks,
        accepted=accepts,
        degenerate_fraction=n_degenerate / max(n_filter_runs, 1),
        proposal_cov=proposal.current_cov(),
    )
