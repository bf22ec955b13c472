"""Chain orchestration: config validation, initialization, loops, CSV I/O."""

import io

import numpy as np
import pytest
from scipy import stats

from epiaug.engine import (
    LATENT_HEADER,
    SAMPLE_HEADER,
    ChainOutput,
    RunConfig,
    draw_initial_theta,
    initialize_paths,
    read_samples_csv,
    run_chain,
    run_chains,
    theta_log_prior,
    write_latent_csv,
    write_samples_csv,
)
from epiaug.gibbs import BetaPrior, GammaPrior, PriorSet
from epiaug.models import (
    Dataset,
    EmissionSpec,
    ParameterVector,
    PopulationHistory,
    complete_data_loglik,
    get_model,
)
from epiaug.pmmh import PmmhConfig
from epiaug.simulate import disaggregate, gillespie_simulate

SIR = get_model("sir")
SEIR = get_model("seir")
BINOM = EmissionSpec("binomial")
NEGBIN = EmissionSpec("negbinomial")


def sir_priors(**kw):
    defaults = dict(
        beta=GammaPrior(2.0, 20.0),
        mu=GammaPrior(2.0, 4.0),
        p0_alpha=np.array([6.0, 2.0, 2.0]),
        rho=BetaPrior(3.0, 2.0),
    )
    defaults.update(kw)
    return PriorSet(**defaults)


def sir_theta(**kw):
    defaults = dict(
        beta=0.08, mu=0.5, p0=np.array([0.7, 0.2, 0.1]), rho=0.6
    )
    defaults.update(kw)
    return ParameterVector(**defaults)


def sir_dataset():
    return Dataset(
        np.array([0.0, 1.0, 2.0, 3.0]), np.array([2, 3, 2, 1]), population=20
    )


def sir_config(**kw):
    defaults = dict(
        model=SIR,
        emission=BINOM,
        dataset=sir_dataset(),
        priors=sir_priors(),
        iterations=12,
        burn_in=2,
        thin=1,
        subjects_per_iter=4,
        seed=11,
        init_theta=sir_theta(),
    )
    defaults.update(kw)
    return RunConfig(**defaults)


class TestRunConfigValidation:
    def test_valid_config_passes(self):
        sir_config().validate()

    def test_iterations_must_exceed_burn_in(self):
        with pytest.raises(ValueError, match="exceed burn_in"):
            sir_config(iterations=5, burn_in=5).validate()
        with pytest.raises(ValueError, match="nonnegative"):
            sir_config(iterations=-1).validate()

    def test_zero_iterations_allowed(self):
        sir_config(iterations=0, burn_in=0).validate()

    def test_thin_at_least_one(self):
        with pytest.raises(ValueError, match="thin"):
            sir_config(thin=0).validate()

    def test_subjects_per_iter_bounds(self):
        with pytest.raises(ValueError, match="subjects_per_iter"):
            sir_config(subjects_per_iter=0).validate()
        with pytest.raises(ValueError, match="subjects_per_iter"):
            sir_config(subjects_per_iter=21).validate()
        sir_config(subjects_per_iter=20).validate()

    def test_default_subjects_per_iter_is_tenth_of_population(self):
        assert sir_config(subjects_per_iter=None).resolved_subjects_per_iter() == 2
        big = Dataset(np.array([0.0, 1.0]), np.array([0, 0]), population=750)
        cfg = sir_config(dataset=big, subjects_per_iter=None)
        assert cfg.resolved_subjects_per_iter() == 75
        tiny = Dataset(np.array([0.0, 1.0]), np.array([0, 0]), population=3)
        assert (
            sir_config(dataset=tiny, subjects_per_iter=None).resolved_subjects_per_iter()
            == 1
        )

    def test_unknown_bridge_sampler_and_method(self):
        with pytest.raises(ValueError, match="bridge sampler"):
            sir_config(bridge_sampler="exact").validate()
        with pytest.raises(ValueError, match="method"):
            sir_config(method="abc").validate()

    def test_chains_positive(self):
        with pytest.raises(ValueError, match="chains"):
            sir_config(chains=0).validate()

    def test_negbinomial_requires_phi_prior(self):
        with pytest.raises(ValueError, match="phi"):
            sir_config(emission=NEGBIN).validate()
        sir_config(
            emission=NEGBIN,
            priors=sir_priors(phi=GammaPrior(2.0, 1.0)),
            init_theta=sir_theta(phi=4.0),
        ).validate()

    def test_priors_must_cover_model_rates(self):
        seir_data = Dataset(np.array([0.0, 1.0]), np.array([1, 1]), population=20)
        cfg = sir_config(model=SEIR, dataset=seir_data)  # no gamma prior
        with pytest.raises(ValueError):
            cfg.validate()


class TestDrawInitialTheta:
    def test_draw_is_valid_and_deterministic(self):
        priors = sir_priors()
        theta = draw_initial_theta(priors, SIR, BINOM, np.random.default_rng(3))
        theta.validate(SIR, BINOM)
        again = draw_initial_theta(priors, SIR, BINOM, np.random.default_rng(3))
        assert theta.beta == again.beta
        assert np.array_equal(theta.p0, again.p0)
        assert theta.phi is None

    def test_negbinomial_draw_includes_phi(self):
        priors = sir_priors(phi=GammaPrior(2.0, 1.0))
        theta = draw_initial_theta(priors, SIR, NEGBIN, np.random.default_rng(3))
        assert theta.phi is not None and theta.phi > 0

    def test_missing_phi_prior_raises(self):
        with pytest.raises(ValueError, match="phi"):
            draw_initial_theta(sir_priors(), SIR, NEGBIN, np.random.default_rng(3))


def _first_forward_draw(theta, dataset, seed):
    """Replay the generator stream initialize_paths would consume first."""
    rng = np.random.default_rng(seed)
    counts0 = rng.multinomial(dataset.population, theta.p0)
    path = gillespie_simulate(
        SIR, theta, counts0, rng, t0=dataset.times[0], t_end=dataset.times[-1]
    )
    return disaggregate(path, rng)


class TestInitializePaths:
    def test_all_zero_counts_accept_first_simulation(self):
        dataset = Dataset(
            np.array([0.0, 1.0, 2.0]), np.array([0, 0, 0]), population=20
        )
        theta = sir_theta()
        history = initialize_paths(
            SIR, theta, dataset, BINOM, np.random.default_rng(5)
        )
        expected = _first_forward_draw(theta, dataset, 5)
        assert np.array_equal(history.ev_times, expected.ev_times)
        assert np.array_equal(history.initial_states, expected.initial_states)

    def test_negative_binomial_accepts_first_simulation(self):
        dataset = Dataset(
            np.array([0.0, 1.0, 2.0]), np.array([3, 4, 1]), population=20
        )
        theta = sir_theta(phi=5.0)
        history = initialize_paths(
            SIR, theta, dataset, NEGBIN, np.random.default_rng(7)
        )
        expected = _first_forward_draw(theta, dataset, 7)
        assert np.array_equal(history.ev_times, expected.ev_times)
        assert np.array_equal(history.ev_subject, expected.ev_subject)

    def test_budget_exhaustion_raises(self):
        impossible = Dataset(np.array([0.0, 1.0]), np.array([25, 0]), population=20)
        with pytest.raises(RuntimeError, match="after 50 attempts"):
            initialize_paths(
                SIR,
                sir_theta(),
                impossible,
                BINOM,
                np.random.default_rng(0),
                budget=50,
            )

    def test_prevalence_dominates_counts_under_near_perfect_reporting(self):
        # ambitious counts relative to the population force conditioning work
        dataset = Dataset(np.array([0.0, 2.0]), np.array([8, 5]), population=30)
        theta = ParameterVector(
            beta=0.15, mu=0.4, p0=np.array([0.6, 0.35, 0.05]), rho=0.97
        )
        for seed in range(100):
            history = initialize_paths(
                SIR, theta, dataset, BINOM, np.random.default_rng(seed)
            )
            prev = history.prevalence_at(dataset.times)
            assert np.all(prev >= dataset.counts)


def _as_theta(out: ChainOutput, i: int) -> ParameterVector:
    return ParameterVector(
        beta=out.beta[i],
        mu=out.mu[i],
        gamma=None if out.gamma is None else out.gamma[i],
        rho=out.rho[i],
        phi=None if out.phi is None else out.phi[i],
        p0=out.p0[i],
    )


class TestRunChainBda:
    def test_same_seed_bitwise_identical(self):
        a = run_chain(sir_config())
        b = run_chain(sir_config())
        for name in ("beta", "mu", "rho", "logpost", "accept_rate"):
            assert np.array_equal(getattr(a, name), getattr(b, name)), name
        assert np.array_equal(a.p0, b.p0)
        assert a.counters == b.counters
        assert np.array_equal(a.latent_iterations, b.latent_iterations)
        for ha, hb in zip(a.latent_snapshots, b.latent_snapshots):
            assert np.array_equal(ha.ev_times, hb.ev_times)
            assert np.array_equal(ha.ev_subject, hb.ev_subject)

    def test_different_seeds_differ(self):
        a = run_chain(sir_config(seed=1))
        b = run_chain(sir_config(seed=2))
        assert not np.array_equal(a.beta, b.beta)

    def test_zero_iterations_empty_output(self):
        out = run_chain(sir_config(iterations=0, burn_in=0))
        assert out.n_iterations == 0
        assert out.beta.size == out.logpost.size == out.accept_rate.size == 0
        assert out.p0.shape == (0, 3)
        assert out.total_proposals == 0
        assert out.latent_snapshots == []

    def test_output_shapes_and_ranges(self):
        cfg = sir_config(iterations=15, burn_in=3)
        out = run_chain(cfg)
        assert out.method == "bda"
        assert out.n_iterations == 15
        assert out.gamma is None and out.phi is None
        assert np.all((out.accept_rate >= 0) & (out.accept_rate <= 1))
        assert np.allclose(out.p0.sum(axis=1), 1.0)
        assert np.all(np.isfinite(out.logpost))
        assert out.runtime_seconds > 0

    def test_counter_invariant_matches_total_proposals(self):
        cfg = sir_config(iterations=15, burn_in=3, subjects_per_iter=5)
        out = run_chain(cfg)
        assert out.total_proposals == 15 * 5
        assert sum(out.counters.values()) == 15 * 5
        assert set(out.counters) == {
            "accepted",
            "rejected",
            "hmm_zero_mass",
            "time_collision",
        }
        # per-iteration rates must aggregate to the accepted counter
        assert int(round(out.accept_rate.sum() * 5)) == out.counters["accepted"]

    def test_latent_thinning_schedule(self):
        out = run_chain(sir_config(iterations=10, burn_in=3, thin=2))
        assert np.array_equal(out.latent_iterations, [4, 6, 8, 10])
        assert len(out.latent_snapshots) == 4
        out = run_chain(sir_config(iterations=10, burn_in=0, thin=250))
        assert np.array_equal(out.latent_iterations, [1])

    def test_logpost_is_complete_data_loglik_plus_prior(self):
        cfg = sir_config(iterations=6, burn_in=0, thin=1)
        out = run_chain(cfg)
        for i in (0, 3, 5):
            theta = _as_theta(out, i)
            expected = complete_data_loglik(
                out.latent_snapshots[i], cfg.dataset, theta, SIR, BINOM
            ) + theta_log_prior(theta, cfg.priors, SIR, BINOM)
            assert out.logpost[i] == pytest.approx(expected, abs=1e-9)

    def test_init_theta_changes_trajectory(self):
        a = run_chain(sir_config(init_theta=sir_theta(rho=0.9)))
        b = run_chain(sir_config(init_theta=sir_theta(rho=0.2)))
        assert not np.array_equal(a.rho, b.rho)

    def test_prior_draw_start_when_no_init_theta(self):
        out = run_chain(sir_config(init_theta=None, iterations=5, burn_in=0))
        assert out.n_iterations == 5

    def test_negative_binomial_records_phi(self):
        cfg = sir_config(
            emission=NEGBIN,
            priors=sir_priors(phi=GammaPrior(2.0, 1.0)),
            init_theta=sir_theta(phi=4.0),
            iterations=8,
            burn_in=1,
        )
        out = run_chain(cfg)
        assert out.phi is not None and out.phi.size == 8
        assert np.all(out.phi > 0)

    def test_seir_records_gamma(self):
        dataset = Dataset(np.array([0.0, 1.0, 2.0]), np.array([1, 2, 1]), population=20)
        cfg = RunConfig(
            model=SEIR,
            emission=BINOM,
            dataset=dataset,
            priors=PriorSet(
                beta=GammaPrior(2.0, 20.0),
                mu=GammaPrior(2.0, 4.0),
                gamma=GammaPrior(2.0, 3.0),
                p0_alpha=np.array([6.0, 1.0, 2.0, 1.0]),
                rho=BetaPrior(3.0, 2.0),
            ),
            iterations=8,
            burn_in=1,
            subjects_per_iter=4,
            seed=4,
            init_theta=ParameterVector(
                beta=0.08,
                mu=0.5,
                gamma=0.7,
                rho=0.6,
                p0=np.array([0.65, 0.1, 0.15, 0.1]),
            ),
        )
        out = run_chain(cfg)
        assert out.gamma is not None and np.all(out.gamma > 0)
        assert out.p0.shape == (8, 4)

    def test_run_chains_matches_individual_chains(self):
        cfg = sir_config(chains=2, iterations=6, burn_in=1)
        outs = run_chains(cfg)
        assert len(outs) == 2
        assert np.array_equal(outs[0].beta, run_chain(sir_config(chains=2, iterations=6, burn_in=1), 0).beta)
        assert np.array_equal(outs[1].beta, run_chain(sir_config(chains=2, iterations=6, burn_in=1), 1).beta)
        assert not np.array_equal(outs[0].beta, outs[1].beta)

    def test_chain_index_out_of_range(self):
        with pytest.raises(ValueError, match="chain_index"):
            run_chain(sir_config(chains=2), 2)


class TestRunChainPmmh:
    def test_dispatch_and_output_shape(self):
        cfg = sir_config(
            method="pmmh",
            iterations=40,
            burn_in=5,
            pmmh=PmmhConfig(n_particles=8, pilot=15, initial_step=0.15),
        )
        out = run_chain(cfg)
        assert out.method == "pmmh"
        assert out.n_iterations == 40
        assert set(np.unique(out.accept_rate)) <= {0.0, 1.0}
        assert out.counters["accepted"] + out.counters["rejected"] == 40
        assert out.counters["hmm_zero_mass"] == 0
        assert out.latent_snapshots == [] and out.latent_iterations.size == 0
        assert np.all(np.isfinite(out.logpost))

    def test_pmmh_deterministic(self):
        def make():
            return sir_config(
                method="pmmh",
                iterations=25,
                burn_in=5,
                pmmh=PmmhConfig(n_particles=8, pilot=10),
            )

        a, b = run_chain(make()), run_chain(make())
        assert np.array_equal(a.beta, b.beta)
        assert np.array_equal(a.logpost, b.logpost)


class TestThetaLogPrior:
    def test_matches_scipy_reference(self):
        priors = sir_priors(phi=GammaPrior(2.5, 0.8))
        theta = sir_theta(phi=3.0)
        got = theta_log_prior(theta, priors, SIR, NEGBIN)
        want = (
            stats.gamma.logpdf(theta.beta, 2.0, scale=1 / 20.0)
            + stats.gamma.logpdf(theta.mu, 2.0, scale=1 / 4.0)
            + stats.beta.logpdf(theta.rho, 3.0, 2.0)
            + stats.gamma.logpdf(theta.phi, 2.5, scale=1 / 0.8)
            + stats.dirichlet.logpdf(theta.p0, [6.0, 2.0, 2.0])
        )
        assert got == pytest.approx(want, abs=1e-10)

    def test_boundary_p0_gives_minus_inf(self):
        theta = sir_theta(p0=np.array([0.8, 0.2, 0.0]))
        assert theta_log_prior(theta, sir_priors(), SIR, BINOM) == -np.inf


class TestSamplesCsv:
    def _output(self, **kw):
        return run_chain(sir_config(iterations=6, burn_in=1, **kw))

    def test_header_and_round_trip_full_precision(self, tmp_path):
        out = self._output()
        path = tmp_path / "chain.csv"
        with open(path, "w") as f:
            write_samples_csv(f, out)
        text = path.read_text().splitlines()
        assert text[0] == SAMPLE_HEADER
        back = read_samples_csv(path)
        assert np.array_equal(back["iteration"], np.arange(1, 7))
        assert np.array_equal(back["beta"], out.beta)
        assert np.array_equal(back["logpost"], out.logpost)
        assert np.array_equal(back["rho"], out.rho)
        assert np.array_equal(back["p_S"], out.p0[:, 0])
        assert np.array_equal(back["accept_rate"], out.accept_rate)

    def test_absent_parameters_written_blank_and_dropped(self, tmp_path):
        out = self._output()
        buf = io.StringIO()
        write_samples_csv(buf, out)
        lines = buf.getvalue().splitlines()
        cols = SAMPLE_HEADER.split(",")
        first = lines[1].split(",")
        assert first[cols.index("gamma")] == ""
        assert first[cols.index("phi")] == ""
        assert first[cols.index("p_E")] == ""
        path = tmp_path / "chain.csv"
        path.write_text(buf.getvalue())
        back = read_samples_csv(path)
        assert set(back) == {
            "iteration",
            "logpost",
            "beta",
            "mu",
            "rho",
            "p_S",
            "p_I",
            "p_R",
            "accept_rate",
        }

    def test_negbin_includes_phi_column(self, tmp_path):
        out = self._output(
            emission=NEGBIN,
            priors=sir_priors(phi=GammaPrior(2.0, 1.0)),
            init_theta=sir_theta(phi=4.0),
        )
        path = tmp_path / "chain.csv"
        with open(path, "w") as f:
            write_samples_csv(f, out)
        back = read_samples_csv(path)
        assert np.array_equal(back["phi"], out.phi)

    def test_zero_iteration_output_writes_header_only(self):
        out = run_chain(sir_config(iterations=0, burn_in=0))
        buf = io.StringIO()
        write_samples_csv(buf, out)
        assert buf.getvalue() == SAMPLE_HEADER + "\n"


class TestLatentCsv:
    def _history(self):
        return PopulationHistory(
            SIR,
            np.array([1, 0], dtype=np.int64),
            np.array([2.0]),
            np.array([0], dtype=np.int64),
            np.array([1], dtype=np.int64),
            np.array([2], dtype=np.int64),
            t0=0.0,
            t_end=4.0,
        )

    def test_rows_ordering_and_quantile_monotonicity(self):
        h = self._history()
        buf = io.StringIO()
        times = np.array([0.0, 2.5, 4.0])
        write_latent_csv(buf, [h, h], times, SIR)
        lines = buf.getvalue().splitlines()
        assert lines[0] == LATENT_HEADER
        assert len(lines) == 1 + 3 * 3
        rows = [ln.split(",") for ln in lines[1:]]
        assert [r[1] for r in rows[:3]] == ["S", "I", "R"]
        assert float(rows[0][0]) == 0.0 and float(rows[-1][0]) == 4.0
        for r in rows:
            q025, q50, q975 = map(float, r[2:])
            assert q025 <= q50 <= q975
        # identical snapshots: all quantiles equal the single path
        i_at_0 = [r for r in rows if float(r[0]) == 0.0 and r[1] == "I"][0]
        assert [float(v) for v in i_at_0[2:]] == [1.0, 1.0, 1.0]

    def test_left_limit_convention_at_event_time(self):
        h = self._history()
        buf = io.StringIO()
        write_latent_csv(buf, [h], np.array([2.0]), SIR)
        rows = [ln.split(",") for ln in buf.getvalue().splitlines()[1:]]
        by_state = {r[1]: float(r[3]) for r in rows}
        assert by_state == {"S": 1.0, "I": 1.0, "R": 0.0}
