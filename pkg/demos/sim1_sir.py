"""Simulate an SIR epidemic, subsample it, and recover the parameters.

Desk-scale version of the workflow in configs/sim1_sir.conf: a population of
300 instead of 750 (with the per-contact rate rescaled to keep R0 at 1.8) and
a short single chain.  Simulates weekly binomial prevalence counts over four
months, fits the SIR model, and reports whether the true values landed inside
the 95% credible intervals.

Usage: python3 demos/sim1_sir.py [--iterations N] [--seed S]
"""

import argparse

import numpy as np

from epiaug.engine import RunConfig, run_chain
from epiaug.gibbs import BetaPrior, GammaPrior, PriorSet
from epiaug.models import EmissionSpec, ParameterVector, get_model
from epiaug.simulate import disaggregate, gillespie_simulate, sample_observations


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--iterations", type=int, default=2000)
    ap.add_argument("--burn-in", type=int, default=400)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()

    model = get_model("sir")
    emission = EmissionSpec("binomial")
    n = 300
    truth = ParameterVector(
        beta=1.8 * 0.142857 / n,  # R0 = beta * N / mu = 1.8
        mu=0.142857,              # mean infectious period 7 days
        rho=0.2,
        p0=np.array([0.9, 0.03, 0.07]),
    )
    times = np.arange(0.0, 113.0, 7.0)

    rng = np.random.default_rng(args.seed)
    counts0 = rng.multinomial(n, truth.p0)
    path = gillespie_simulate(model, truth, counts0, rng, t0=0.0, t_end=112.0)
    history = disaggregate(path, rng)
    dataset = sample_observations(history, times, emission, truth, rng)
    print("observed counts:", dataset.counts.tolist())

    config = RunConfig(
        model=model,
        emission=emission,
        dataset=dataset,
        priors=PriorSet(
            beta=GammaPrior(0.3, 300.0),  # rate rescaled with beta (full-scale config uses 1000)
            mu=GammaPrior(1.0, 8.0),
            p0_alpha=np.array([90.0, 2.0, 5.0]),
            rho=BetaPrior(2.0, 7.0),
        ),
        iterations=args.iterations,
        burn_in=args.burn_in,
        seed=args.seed,
        # The diffuse beta prior is mostly subcritical mass, so a prior draw
        # rarely yields a forward simulation covering the observed counts.
        # Start from a clearly supercritical guess instead.
        init_theta=ParameterVector(
            beta=0.001, mu=0.15, rho=0.25, p0=np.array([0.9, 0.05, 0.05])
        ),
    )
    out = run_chain(config)
    keep = slice(args.burn_in, None)

    print(f"runtime {out.runtime_seconds:.1f}s, "
          f"subject-path acceptance {out.overall_acceptance:.3f}")
    draws = {
        "beta": (out.beta[keep], truth.beta),
        "mu": (out.mu[keep], truth.mu),
        "rho": (out.rho[keep], truth.rho),
        "p_S": (out.p0[keep, 0], truth.p0[0]),
        "p_I": (out.p0[keep, 1], truth.p0[1]),
        "p_R": (out.p0[keep, 2], truth.p0[2]),
    }
    for name, (trace, value) in draws.items():
        lo, hi = np.quantile(trace, [0.025, 0.975])
        inside = "inside " if lo <= value <= hi else "OUTSIDE"
        print(f"{name:>4}: truth {value:.5g}  median {np.median(trace):.5g}  "
              f"95% CI [{lo:.5g}, {hi:.5g}]  {inside}")
    print(
        "note: prevalence counts identify the product of detection and "
        "prevalence,\nso (mu, rho) mix slowly along a ridge of epidemics that "
        "fit equally well;\ntheir intervals often miss the truth on a run "
        "this short.  The full-scale\nsettings in configs/sim1_sir.conf run "
        "100,000 iterations across three chains\nto integrate over that ridge."
    )


if __name__ == "__main__":
    main()
