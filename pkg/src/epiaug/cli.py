"""Command-line interface.

Subcommands:
  simulate   draw an epidemic and an observed dataset from a config
  fit        run MCMC chains (data augmentation or particle benchmark)
  summarize  pool sample CSVs into posterior summaries
  diag       effective sample sizes and acceptance diagnostics

Every numeric output is written in shortest round-trip (full double
precision) form.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .config import build_run_config, build_sim_settings, load_config
from .diagnostics import effective_sample_size
from .engine import (
    read_samples_csv,
    run_chain,
    write_latent_csv,
    write_samples_csv,
)
from .simulate import (
    draw_observed_counts,
    gillespie_simulate,
    propagate_tau_leap,
    write_count_csv,
)

_PARAM_COLUMNS = ("beta", "gamma", "mu", "rho", "phi", "p_S", "p_E", "p_I", "p_R")


def _fmt(x: float) -> str:
    return repr(float(x))


def _counts_at_obs_times(sim, rng) -> np.ndarray:
    """Latent compartment counts at the observation grid (left limits)."""
    counts0 = rng.multinomial(sim.population, sim.theta.p0)
    times = sim.obs_times
    if sim.method == "gillespie":
        path = gillespie_simulate(
            sim.model, sim.theta, counts0, rng, t0=times[0], t_end=times[-1]
        )
        after = path.counts_after_events()
        idx = np.searchsorted(path.times, times, side="left")
        return after[idx]
    out = np.empty((times.size, sim.model.n_states), dtype=np.int64)
    counts = counts0[None, :].astype(np.int64)
    out[0] = counts[0]
    for ell in range(1, times.size):
        counts = propagate_tau_leap(
            sim.model, sim.theta, counts, times[ell - 1], times[ell], sim.tau_step, rng
        )
        out[ell] = counts[0]
    return out


def _cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    sim = build_sim_settings(cfg)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)

    counts = _counts_at_obs_times(sim, rng)
    prevalence = counts[:, sim.model.infectious]
    observed = draw_observed_counts(prevalence, sim.emission, sim.theta, rng)

    counts_path = out_dir / "counts.csv"
    with open(counts_path, "w") as f:
        write_count_csv(f, sim.obs_times, counts, sim.model)
    data_path = out_dir / "dataset.csv"
    with open(data_path, "w") as f:
        f.write("time,count\n")
        for t, y in zip(sim.obs_times, observed):
            f.write(f"{_fmt(t)},{int(y)}\n")
    print(f"wrote {counts_path} (latent counts) and {data_path} (observations)")
    return 0


def _cmd_fit(args) -> int:
    cfg = load_config(args.config)
    config = build_run_config(cfg, seed=args.seed, chains=args.chains)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    pooled_snapshots = []
    for k in range(config.chains):
        output = run_chain(config, k)
        sample_path = out_dir / f"chain_{k + 1}.csv"
        with open(sample_path, "w") as f:
            write_samples_csv(f, output)
        msg = (
            f"chain {k + 1}: {output.n_iterations} iterations in "
            f"{output.runtime_seconds:.1f}s -> {sample_path}"
        )
        if output.method == "bda":
            msg += f" (path acceptance {output.overall_acceptance:.3f})"
        else:
            msg += f" (parameter acceptance {output.overall_acceptance:.3f})"
        print(msg)
        if output.latent_snapshots:
            latent_path = out_dir / f"chain_{k + 1}_latent.csv"
            with open(latent_path, "w") as f:
                write_latent_csv(
                    f, output.latent_snapshots, config.dataset.times, config.model
                )
            print(f"chain {k + 1}: latent summary -> {latent_path}")
            pooled_snapshots.extend(output.latent_snapshots)
    if pooled_snapshots and config.chains > 1:
        pooled_path = out_dir / "latent.csv"
        with open(pooled_path, "w") as f:
            write_latent_csv(
                f, pooled_snapshots, config.dataset.times, config.model
            )
        print(f"pooled latent summary -> {pooled_path}")
    return 0


def _load_traces(paths, burn_in: int):
    """Per-file post-burn-in parameter traces keyed by column."""
    traces = []
    for path in paths:
        cols = read_samples_csv(path)
        keep = cols["iteration"] > burn_in
        if not keep.any():
            raise SystemExit(f"{path}: no rows left after burn-in {burn_in}")
        traces.append(
            {name: arr[keep] for name, arr in cols.items() if name != "iteration"}
        )
    return traces


def _cmd_summarize(args) -> int:
    traces = _load_traces(args.samples, args.burn_in)
    names = [n for n in _PARAM_COLUMNS if all(n in t for t in traces)]
    rows = []
    for name in names:
        pooled = np.concatenate([t[name] for t in traces])
        q025, med, q975 = np.quantile(pooled, [0.025, 0.5, 0.975])
        rows.append((name, pooled.mean(), med, q025, q975))
    header = f"{'param':<6} {'mean':>12} {'median':>12} {'q025':>12} {'q975':>12}"
    print(header)
    for name, mean, med, lo, hi in rows:
        print(f"{name:<6} {mean:>12.6g} {med:>12.6g} {lo:>12.6g} {hi:>12.6g}")
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "summary.csv"
        with open(path, "w") as f:
            f.write("param,mean,median,q025,q975\n")
            for name, mean, med, lo, hi in rows:
                f.write(
                    ",".join([name, _fmt(mean), _fmt(med), _fmt(lo), _fmt(hi)]) + "\n"
                )
        print(f"wrote {path}")
    return 0


def _cmd_diag(args) -> int:
    traces = _load_traces(args.samples, args.burn_in)
    names = [n for n in _PARAM_COLUMNS if all(n in t for t in traces)]
    rows = []
    for name in names + ["logpost"]:
        per_file = [effective_sample_size(t[name]) for t in traces]
        total = sum(r.ess for r in per_file)
        flag = "degenerate" if any(r.degenerate for r in per_file) else ""
        rows.append((name, total, flag))
    print(f"{'param':<8} {'ess':>12}  note")
    for name, total, flag in rows:
        print(f"{name:<8} {total:>12.1f}  {flag}")
    acc = np.concatenate([t["accept_rate"] for t in traces])
    print(f"mean acceptance rate: {acc.mean():.4f}")
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "diagnostics.csv"
        with open(path, "w") as f:
            f.write("param,ess,degenerate\n")
            for name, total, flag in rows:
                f.write(f"{name},{_fmt(total)},{int(bool(flag))}\n")
        print(f"wrote {path}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="epiaug",
        description="Bayesian inference for partially observed epidemics",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="draw an epidemic and observations")
    sim.add_argument("--config", required=True, help="key=value config file")
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--out", required=True, help="output directory")
    sim.set_defaults(func=_cmd_simulate)

    fit = sub.add_parser("fit", help="run MCMC chains")
    fit.add_argument("--config", required=True, help="key=value config file")
    fit.add_argument("--seed", type=int, default=None, help="override config seed")
    fit.add_argument(
        "--chains", type=int, default=None, help="override number of chains"
    )
    fit.add_argument("--out", required=True, help="output directory")
    fit.set_defaults(func=_cmd_fit)

    summ = sub.add_parser("summarize", help="posterior summaries from sample CSVs")
    summ.add_argument("samples", nargs="+", help="chain CSV files")
    summ.add_argument("--burn-in", type=int, default=0, dest="burn_in")
    summ.add_argument("--out", default=None, help="directory for summary.csv")
    summ.set_defaults(func=_cmd_summarize)

    diag = sub.add_parser("diag", help="ESS and acceptance diagnostics")
    diag.add_argument("samples", nargs="+", help="chain CSV files")
    diag.add_argument("--burn-in", type=int, default=0, dest="burn_in")
    diag.add_argument("--out", default=None, help="directory for diagnostics.csv")
    diag.set_defaults(func=_cmd_diag)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
