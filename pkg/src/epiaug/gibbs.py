"""Parameter updates: conjugate Gibbs draws and the (rho, phi) random walk.

Rate parameters (beta, gamma, mu) carry Gamma priors in the rate
parameterization (mean shape/rate), the detection probability rho a Beta
prior, and the initial-state probabilities a Dirichlet prior; each has a
closed-form full conditional given the complete event history.  Under the
negative-binomial emission, rho and the overdispersion phi are updated
jointly by a Gaussian random walk on (logit rho, log phi).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logit
from scipy.stats import beta as beta_dist
from scipy.stats import gamma as gamma_dist

from .models import (
    Dataset,
    EmissionSpec,
    ModelSpec,
    ParameterVector,
    PopulationHistory,
    SufficientStats,
    emission_loglik,
)

__all__ = [
    "GammaPrior",
    "BetaPrior",
    "PriorSet",
    "rate_posterior",
    "rho_posterior",
    "update_rate_params",
    "update_rho_binomial",
    "update_p_t1",
    "rho_phi_log_posterior",
    "update_rho_phi_rwmh",
    "RhoPhiAdapter",
]


@dataclass(frozen=True)
class GammaPrior:
    """Gamma(shape, rate) with mean shape/rate."""

    shape: float
    rate: float

    def __post_init__(self):
        if not (self.shape > 0 and self.rate > 0):
            raise ValueError("Gamma hyperparameters must be positive")

    def logpdf(self, x: float) -> float:
        return float(gamma_dist.logpdf(x, self.shape, scale=1.0 / self.rate))

    def sample(self, rng) -> float:
        return float(rng.gamma(self.shape, 1.0 / self.rate))


@dataclass(frozen=True)
class BetaPrior:
    a: float
    b: float

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0):
            raise ValueError("Beta hyperparameters must be positive")

    def logpdf(self, x: float) -> float:
        return float(beta_dist.logpdf(x, self.a, self.b))

    def sample(self, rng) -> float:
        return float(rng.beta(self.a, self.b))


@dataclass(frozen=True)
class PriorSet:
    """Hyperparameters for every parameter a model may carry.

    gamma may be None for models without a gamma transition; phi may be
    None under the binomial emission.  p0_alpha must have one entry per
    compartment.
    """

    beta: GammaPrior
    mu: GammaPrior
    p0_alpha: np.ndarray
    gamma: GammaPrior | None = None
    rho: BetaPrior = field(default_factory=lambda: BetaPrior(1.0, 1.0))
    phi: GammaPrior | None = None

    def __post_init__(self):
        alpha = np.asarray(self.p0_alpha, dtype=np.float64)
        object.__setattr__(self, "p0_alpha", alpha)
        if alpha.ndim != 1 or np.any(alpha <= 0):
            raise ValueError("Dirichlet weights must be a positive vector")

    def rate_prior(self, param: str) -> GammaPrior:
        prior = getattr(self, param)
        if prior is None:
            raise ValueError(f"no prior supplied for rate parameter {param!r}")
        return prior

    def check_model(self, model: ModelSpec) -> None:
        if self.p0_alpha.size != model.n_states:
            raise ValueError(
                f"p0_alpha has {self.p0_alpha.size} entries; "
                f"model {model.name} has {model.n_states} compartments"
            )
        for p in model.params:
            self.rate_prior(p)


# -- conjugate full conditionals ----------------------------------------------


def rate_posterior(prior: GammaPrior, n_events: int, exposure: float) -> GammaPrior:
    """Gamma posterior for one rate: shape + event count, rate + exposure."""
    return GammaPrior(prior.shape + n_events, prior.rate + exposure)


def update_rate_params(
    stats: SufficientStats, priors: PriorSet, theta: ParameterVector, rng
) -> ParameterVector:
    """Draw every rate parameter from its Gamma full conditional."""
    draws = {}
    for param, n in stats.n_events.items():
        post = rate_posterior(priors.rate_prior(param), n, stats.exposure[param])
        draws[param] = post.sample(rng)
    return theta.replaced(**draws)


def rho_posterior(prior: BetaPrior, counts: np.ndarray, prevalence: np.ndarray) -> BetaPrior:
    """Beta posterior for the detection probability under binomial sampling."""
    counts = np.asarray(counts)
    prevalence = np.asarray(prevalence)
    if np.any(prevalence < counts):
        raise ValueError(
            "latent prevalence below an observed count: augmented state is invalid"
        )
    return BetaPrior(prior.a + float(counts.sum()), prior.b + float((prevalence - counts).sum()))


def update_rho_binomial(
    history: PopulationHistory, dataset: Dataset, priors: PriorSet, theta: ParameterVector, rng
) -> ParameterVector:
    prevalence = history.prevalence_at(dataset.times)
    post = rho_posterior(priors.rho, dataset.counts, prevalence)
    return theta.replaced(rho=post.sample(rng))


def update_p_t1(
    history: PopulationHistory, priors: PriorSet, theta: ParameterVector, rng
) -> ParameterVector:
    counts = np.bincount(history.initial_states, minlength=history.model.n_states)
    p0 = rng.dirichlet(priors.p0_alpha + counts)
    return theta.replaced(p0=p0)


# -- joint random walk for (rho, phi) under negative-binomial emission --------

_NEGBIN = EmissionSpec("negbinomial")


def rho_phi_log_posterior(
    rho: float,
    phi: float,
    prevalence: np.ndarray,
    counts: np.ndarray,
    priors: PriorSet,
) -> float:
    """Unnormalized log full conditional of (rho, phi), original scale."""
    if priors.phi is None:
        raise ValueError("phi prior is required for the negative-binomial emission")
    probe = ParameterVector(beta=1.0, mu=1.0, p0=np.array([1.0]), rho=rho, phi=phi)
    ll = float(np.sum(emission_loglik(counts, prevalence, _NEGBIN, probe)))
    return ll + priors.rho.logpdf(rho) + priors.phi.logpdf(phi)


def _z_log_target(z: np.ndarray, prevalence, counts, priors) -> float:
    """Log target on the working scale z = (logit rho, log phi)."""
    rho = float(expit(z[0]))
    phi = float(np.exp(z[1]))
    if rho <= 0.0 or rho >= 1.0 or phi <= 0.0 or not np.isfinite(phi):
        return -np.inf
    jac = np.log(rho) + np.log1p(-rho) + z[1]
    return rho_phi_log_posterior(rho, phi, prevalence, counts, priors) + jac


def update_rho_phi_rwmh(
    history: PopulationHistory,
    dataset: Dataset,
    theta: ParameterVector,
    cov: np.ndarray,
    priors: PriorSet,
    rng,
) -> tuple[ParameterVector, bool]:
    """One Gaussian random-walk step on (logit rho, log phi).

    Returns the (possibly unchanged) parameter vector and the accept flag.
    """
    cov = np.asarray(cov, dtype=np.float64)
    if cov.shape != (2, 2):
        raise ValueError("proposal covariance must be 2x2")
    z = np.array([logit(theta.rho), np.log(theta.phi)])
    if np.all(cov == 0.0):
        return theta, True  # degenerate walk proposes the current point
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as err:
        raise ValueError("proposal covariance must be positive definite") from err

    prevalence = history.prevalence_at(dataset.times)
    z_new = z + chol @ rng.standard_normal(2)
    log_ratio = _z_log_target(z_new, prevalence, dataset.counts, priors) - _z_log_target(
        z, prevalence, dataset.counts, priors
    )
    if np.log(rng.random()) < log_ratio:
        return theta.replaced(rho=float(expit(z_new[0])), phi=float(np.exp(z_new[1]))), True
    return theta, False


class RhoPhiAdapter:
    """Pilot-then-frozen proposal manager for the (rho, phi) walk.

    The first ``pilot`` steps use a fixed diagonal proposal while the
    transformed-scale samples are recorded.  Their empirical covariance then
    becomes the proposal shape, and its scale doubles or halves after each
    ``block`` of steps until the block acceptance rate falls inside
    [0.15, 0.50] (or the tuning-block budget runs out), after which the
    proposal is frozen.
    """

    def __init__(
        self,
        pilot: int = 10_000,
        initial_step: float = 0.1,
        block: int = 500,
        max_tuning_blocks: int = 40,
    ):
        if pilot < 2:
            raise ValueError("pilot length must be at least 2")
        self.pilot = int(pilot)
        self.block = int(block)
        self.max_tuning_blocks = int(max_tuning_blocks)
        self._initial_cov = np.eye(2) * initial_step**2
        self.phase = "pilot"
        self._pilot_z = np.empty((self.pilot, 2))
        self._shape = None  # empirical covariance after the pilot
        self._scale = 2.38**2 / 2.0
        self._steps = 0
        self._block_steps = 0
        self._block_accepts = 0
        self._blocks_done = 0
        self.n_steps = 0
        self.n_accepts = 0

    @property
    def cov(self) -> np.ndarray:
        if self.phase == "pilot":
            return self._initial_cov
        return self._scale * self._shape

    @property
    def acceptance_rate(self) -> float:
        return self.n_accepts / self.n_steps if self.n_steps else 0.0

    def _finish_pilot(self):
        z = self._pilot_z
        shape = np.cov(z.T)
        # a walk that never moved leaves nothing to estimate; keep the
        # initial proposal rather than handing cholesky a singular matrix
        if not np.all(np.isfinite(shape)) or np.linalg.det(shape) <= 1e-300:
            shape = self._initial_cov.copy()
        self._shape = shape
        self.phase = "tuning"
        self._block_steps = 0
        self._block_accepts = 0

    def _finish_block(self):
        rate = self._block_accepts / self.block
        self._blocks_done += 1
        if 0.15 <= rate <= 0.50 or self._blocks_done >= self.max_tuning_blocks:
            self.phase = "frozen"
        elif rate < 0.15:
            self._scale *= 0.5
        else:
            self._scale *= 2.0
        self._block_steps = 0
        self._block_accepts = 0

    def step(
        self,
        history: PopulationHistory,
        dataset: Dataset,
        theta: ParameterVector,
        priors: PriorSet,
        rng,
    ) -> tuple[ParameterVector, bool]:
        theta, accepted = update_rho_phi_rwmh(history, dataset, theta, self.cov, priors, rng)
        self.n_steps += 1
        self.n_accepts += accepted
        if self.phase == "pilot":
            self._pilot_z[self._steps] = (logit(theta.rho), np.log(theta.phi))
            self._steps += 1
            if self._steps == self.pilot:
                self._finish_pilot()
        elif self.phase == "tuning":
            self._block_steps += 1
            self._block_accepts += accepted
            if self._block_steps == self.block:
                self._finish_block()
        return theta, accepted
