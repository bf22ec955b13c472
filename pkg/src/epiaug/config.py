"""Plain-text key/value configuration files.

Format: one ``key = value`` pair per line; ``#`` starts a comment; blank
lines are ignored.  List values are whitespace- or comma-separated.  Keys
are namespaced with dots (``prior.beta.shape``, ``pmmh.particles``,
``sim.p0``).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .gibbs import BetaPrior, GammaPrior, PriorSet
from .models import Dataset, EmissionSpec, ModelSpec, ParameterVector, get_model
from .pmmh import PmmhConfig

__all__ = [
    "parse_config_text",
    "load_config",
    "load_builtin_dataset",
    "build_priors",
    "build_run_config",
    "SimSettings",
    "build_sim_settings",
]

_PATH_SIM_NAMES = {"exact": "gillespie", "tauleap": "tau_leap"}


def load_builtin_dataset(name: str, population: int) -> Dataset:
    """Load a dataset shipped with the package (``data = builtin:<name>``)."""
    from importlib import resources

    ref = resources.files("epiaug") / "data" / f"{name}.csv"
    if not ref.is_file():
        raise FileNotFoundError(f"no shipped dataset named {name!r}")
    with resources.as_file(ref) as path:
        return Dataset.from_csv(path, population=population)


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines into a flat string-to-string mapping."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key, value = key.strip(), value.strip()
        if not key or not value:
            raise ValueError(f"line {lineno}: empty key or value in {raw!r}")
        if key in out:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def load_config(path) -> dict:
    return parse_config_text(Path(path).read_text())


def _get(cfg: dict, key: str, default=None, required: bool = False) -> str | None:
    if key in cfg:
        return cfg[key]
    if required:
        raise KeyError(f"config key {key!r} is required")
    return default


def _get_float(cfg, key, default=None, required=False) -> float | None:
    raw = _get(cfg, key, required=required)
    return float(raw) if raw is not None else default


def _get_int(cfg, key, default=None, required=False) -> int | None:
    raw = _get(cfg, key, required=required)
    return int(raw) if raw is not None else default


def _get_list(cfg, key, required=False) -> np.ndarray | None:
    raw = _get(cfg, key, required=required)
    if raw is None:
        return None
    return np.array([float(tok) for tok in raw.replace(",", " ").split()])


def build_priors(cfg: dict, model: ModelSpec, emission: EmissionSpec) -> PriorSet:
    """Assemble the prior set from ``prior.*`` keys."""

    def gamma_prior(name, required):
        shape = _get_float(cfg, f"prior.{name}.shape", required=required)
        rate = _get_float(cfg, f"prior.{name}.rate", required=required)
        if shape is None and rate is None:
            return None
        if shape is None or rate is None:
            raise KeyError(f"prior.{name} needs both shape and rate")
        return GammaPrior(shape, rate)

    alpha = _get_list(cfg, "prior.p0.alpha", required=True)
    if alpha.size != model.n_states:
        raise ValueError(
            f"prior.p0.alpha must list {model.n_states} values for {model.name}"
        )
    rho_a = _get_float(cfg, "prior.rho.a", required=True)
    rho_b = _get_float(cfg, "prior.rho.b", required=True)
    return PriorSet(
        beta=gamma_prior("beta", required=True),
        mu=gamma_prior("mu", required=True),
        gamma=gamma_prior("gamma", required="gamma" in model.params),
        rho=BetaPrior(rho_a, rho_b),
        phi=gamma_prior("phi", required=emission.kind == "negbinomial"),
        p0_alpha=alpha,
    )


def _initial_theta(cfg: dict, model: ModelSpec, emission: EmissionSpec):
    keys = [k for k in cfg if k.startswith("init.")]
    if not keys:
        return None
    beta = _get_float(cfg, "init.beta", required=True)
    mu = _get_float(cfg, "init.mu", required=True)
    gamma = _get_float(cfg, "init.gamma", required="gamma" in model.params)
    rho = _get_float(cfg, "init.rho", required=True)
    phi = _get_float(cfg, "init.phi", required=emission.kind == "negbinomial")
    p0 = _get_list(cfg, "init.p0", required=True)
    theta = ParameterVector(beta=beta, mu=mu, gamma=gamma, rho=rho, phi=phi, p0=p0)
    theta.validate(model, emission)
    return theta


def build_run_config(
    cfg: dict,
    seed: int | None = None,
    chains: int | None = None,
    data_root=None,
):
    """Build a RunConfig from parsed keys plus command-line overrides.

    ``data_root`` resolves a relative ``data`` path (defaults to the
    current directory).  ``seed`` and ``chains`` arguments win over the
    corresponding config keys.
    """
    from .engine import RunConfig

    model = get_model(_get(cfg, "model", required=True))
    emission = EmissionSpec(_get(cfg, "emission", default="binomial"))
    population = _get_int(cfg, "population", required=True)
    data_raw = _get(cfg, "data", required=True)
    if data_raw.startswith("builtin:"):
        dataset = load_builtin_dataset(data_raw[len("builtin:") :], population)
    else:
        data_path = Path(data_raw)
        if data_root is not None and not data_path.is_absolute():
            data_path = Path(data_root) / data_path
        dataset = Dataset.from_csv(data_path, population=population)
    priors = build_priors(cfg, model, emission)

    path_sim_raw = _get(cfg, "pmmh.path_sim", default="exact")
    if path_sim_raw not in _PATH_SIM_NAMES:
        raise ValueError("pmmh.path_sim must be 'exact' or 'tauleap'")
    pmmh = PmmhConfig(
        n_particles=_get_int(cfg, "pmmh.particles", default=100),
        path_sim=_PATH_SIM_NAMES[path_sim_raw],
        tau_step=_get_float(cfg, "pmmh.step", default=1.0 / 12.0),
        pilot=_get_int(cfg, "pmmh.pilot", default=5_000),
    )

    config = RunConfig(
        model=model,
        emission=emission,
        dataset=dataset,
        priors=priors,
        iterations=_get_int(cfg, "iterations", required=True),
        burn_in=_get_int(cfg, "burn_in", default=0),
        thin=_get_int(cfg, "thin", default=250),
        subjects_per_iter=_get_int(cfg, "subjects_per_iter"),
        bridge_sampler=_get(cfg, "bridge_sampler", default="rejection"),
        seed=seed if seed is not None else _get_int(cfg, "seed", default=0),
        chains=chains if chains is not None else _get_int(cfg, "chains", default=1),
        method=_get(cfg, "method", default="bda"),
        init_theta=_initial_theta(cfg, model, emission),
        pmmh=pmmh,
    )
    config.validate()
    return config


class SimSettings:
    """Settings for the forward-simulation subcommand (``sim.*`` keys)."""

    def __init__(self, cfg: dict):
        self.model = get_model(_get(cfg, "model", required=True))
        self.emission = EmissionSpec(_get(cfg, "emission", default="binomial"))
        self.population = _get_int(cfg, "population", required=True)
        gamma = _get_float(
            cfg, "sim.gamma", required="gamma" in self.model.params
        )
        p0 = _get_list(cfg, "sim.p0", required=True)
        self.theta = ParameterVector(
            beta=_get_float(cfg, "sim.beta", required=True),
            mu=_get_float(cfg, "sim.mu", required=True),
            gamma=gamma,
            rho=_get_float(cfg, "sim.rho", default=1.0),
            phi=_get_float(
                cfg, "sim.phi", required=self.emission.kind == "negbinomial"
            ),
            p0=p0,
        )
        self.theta.validate(self.model, self.emission)
        obs_times = _get_list(cfg, "sim.obs_times")
        if obs_times is None:
            t0 = _get_float(cfg, "sim.t0", default=0.0)
            t_end = _get_float(cfg, "sim.t_end", required=True)
            step = _get_float(cfg, "sim.obs_step", required=True)
            if step <= 0 or t_end <= t0:
                raise ValueError("sim window needs t_end > t0 and obs_step > 0")
            n = int(np.floor((t_end - t0) / step + 1e-9))
            obs_times = t0 + step * np.arange(n + 1)
        elif obs_times.size < 1 or np.any(np.diff(obs_times) <= 0):
            raise ValueError("sim.obs_times must be strictly increasing")
        self.obs_times = obs_times
        method = _get(cfg, "sim.method", default="exact")
        if method not in _PATH_SIM_NAMES:
            raise ValueError("sim.method must be 'exact' or 'tauleap'")
        self.method = _PATH_SIM_NAMES[method]
        self.tau_step = _get_float(cfg, "sim.step", default=1.0 / 12.0)


def build_sim_settings(cfg: dict) -> SimSettings:
    return SimSettings(cfg)
