"""Config-file parsing, run assembly, and the command-line workflow."""

import subprocess
import sys
import textwrap

import numpy as np
import pytest

from epiaug.config import (
    SimSettings,
    build_priors,
    build_run_config,
    build_sim_settings,
    load_builtin_dataset,
    load_config,
    parse_config_text,
)
from epiaug.cli import main
from epiaug.engine import SAMPLE_HEADER, read_samples_csv
from epiaug.gibbs import BetaPrior, GammaPrior
from epiaug.models import EmissionSpec, get_model

SIR = get_model("sir")
SEIR = get_model("seir")
BINOM = EmissionSpec("binomial")
NEGBIN = EmissionSpec("negbinomial")


class TestParseConfigText:
    def test_basic_pairs_comments_and_blanks(self):
        text = textwrap.dedent(
            """
            # full-line comment
            model = sir

            iterations = 100  # trailing comment
            prior.p0.alpha = 6, 2, 2
            """
        )
        cfg = parse_config_text(text)
        assert cfg == {
            "model": "sir",
            "iterations": "100",
            "prior.p0.alpha": "6, 2, 2",
        }

    def test_value_may_contain_equals(self):
        assert parse_config_text("note = a=b")["note"] == "a=b"

    def test_missing_equals_reports_line_number(self):
        with pytest.raises(ValueError, match="line 2"):
            parse_config_text("model = sir\niterations 100\n")

    def test_empty_key_or_value_rejected(self):
        with pytest.raises(ValueError, match="empty key or value"):
            parse_config_text("= 3\n")
        with pytest.raises(ValueError, match="empty key or value"):
            parse_config_text("model = # comment only\n")

    def test_duplicate_key_rejected(self):
        with pytest.raises(ValueError, match="duplicate key 'model'"):
            parse_config_text("model = sir\nmodel = seir\n")


class TestBuiltinDatasets:
    def test_boarding_school_counts(self):
        ds = load_builtin_dataset("boarding_school", 763)
        assert ds.population == 763
        assert np.array_equal(ds.times, np.arange(14.0))
        assert np.array_equal(
            ds.counts,
            [1, 6, 26, 73, 222, 293, 258, 236, 191, 124, 69, 26, 11, 4],
        )

    def test_unknown_name_raises(self):
        with pytest.raises(FileNotFoundError, match="nonexistent"):
            load_builtin_dataset("nonexistent", 100)


PRIOR_KEYS = {
    "prior.beta.shape": "2",
    "prior.beta.rate": "20",
    "prior.mu.shape": "2",
    "prior.mu.rate": "4",
    "prior.rho.a": "3",
    "prior.rho.b": "2",
    "prior.p0.alpha": "6 2 2",
}


class TestBuildPriors:
    def test_full_sir_set(self):
        priors = build_priors(dict(PRIOR_KEYS), SIR, BINOM)
        assert priors.beta == GammaPrior(2.0, 20.0)
        assert priors.mu == GammaPrior(2.0, 4.0)
        assert priors.rho == BetaPrior(3.0, 2.0)
        assert priors.gamma is None and priors.phi is None
        assert np.array_equal(priors.p0_alpha, [6.0, 2.0, 2.0])

    def test_missing_required_key(self):
        cfg = dict(PRIOR_KEYS)
        del cfg["prior.rho.a"]
        with pytest.raises(KeyError, match="prior.rho.a"):
            build_priors(cfg, SIR, BINOM)

    def test_shape_without_rate(self):
        cfg = dict(PRIOR_KEYS)
        del cfg["prior.mu.rate"]
        with pytest.raises(KeyError, match="prior.mu.rate"):
            build_priors(cfg, SIR, BINOM)
        # an optional prior given only half its keys is a config mistake
        half = dict(PRIOR_KEYS, **{"prior.phi.shape": "1"})
        with pytest.raises(KeyError, match="both shape and rate"):
            build_priors(half, SIR, BINOM)

    def test_alpha_length_must_match_model(self):
        with pytest.raises(ValueError, match="4 values"):
            build_priors(dict(PRIOR_KEYS), SEIR, BINOM)

    def test_gamma_required_for_seir(self):
        cfg = dict(PRIOR_KEYS, **{"prior.p0.alpha": "6 1 2 1"})
        with pytest.raises(KeyError, match="prior.gamma"):
            build_priors(cfg, SEIR, BINOM)
        cfg.update({"prior.gamma.shape": "2", "prior.gamma.rate": "3"})
        assert build_priors(cfg, SEIR, BINOM).gamma == GammaPrior(2.0, 3.0)

    def test_phi_required_only_for_negative_binomial(self):
        with pytest.raises(KeyError, match="prior.phi"):
            build_priors(dict(PRIOR_KEYS), SIR, NEGBIN)
        cfg = dict(PRIOR_KEYS, **{"prior.phi.shape": "1", "prior.phi.rate": "0.1"})
        assert build_priors(cfg, SIR, NEGBIN).phi == GammaPrior(1.0, 0.1)


def _data_csv(tmp_path, name="obs.csv"):
    path = tmp_path / name
    path.write_text("time,count\n0.0,2\n1.0,3\n2.0,2\n3.0,1\n")
    return path


def _fit_keys(data_path, **extra):
    cfg = {
        "model": "sir",
        "population": "20",
        "data": str(data_path),
        "iterations": "12",
        **PRIOR_KEYS,
    }
    cfg.update({k: str(v) for k, v in extra.items()})
    return cfg


class TestBuildRunConfig:
    def test_defaults(self, tmp_path):
        config = build_run_config(_fit_keys(_data_csv(tmp_path)))
        assert config.model.name == "sir"
        assert config.emission.kind == "binomial"
        assert config.iterations == 12
        assert config.burn_in == 0
        assert config.thin == 250
        assert config.subjects_per_iter is None
        assert config.bridge_sampler == "rejection"
        assert config.seed == 0 and config.chains == 1
        assert config.method == "bda"
        assert config.init_theta is None
        assert config.pmmh.n_particles == 100
        assert config.pmmh.path_sim == "gillespie"
        assert config.pmmh.tau_step == pytest.approx(1 / 12)
        assert config.pmmh.pilot == 5000
        assert config.dataset.population == 20
        assert np.array_equal(config.dataset.counts, [2, 3, 2, 1])

    def test_explicit_keys_and_overrides(self, tmp_path):
        keys = _fit_keys(
            _data_csv(tmp_path),
            burn_in=2,
            thin=5,
            subjects_per_iter=7,
            bridge_sampler="uniformization",
            seed=9,
            chains=3,
            method="pmmh",
            **{
                "pmmh.particles": 25,
                "pmmh.path_sim": "tauleap",
                "pmmh.step": 0.25,
                "pmmh.pilot": 123,
            },
        )
        config = build_run_config(keys, seed=42, chains=2)
        assert config.burn_in == 2 and config.thin == 5
        assert config.subjects_per_iter == 7
        assert config.bridge_sampler == "uniformization"
        assert config.seed == 42  # argument beats config key
        assert config.chains == 2
        assert config.method == "pmmh"
        assert config.pmmh.n_particles == 25
        assert config.pmmh.path_sim == "tau_leap"
        assert config.pmmh.tau_step == 0.25
        assert config.pmmh.pilot == 123

    def test_bad_path_sim_name(self, tmp_path):
        keys = _fit_keys(_data_csv(tmp_path), **{"pmmh.path_sim": "euler"})
        with pytest.raises(ValueError, match="exact.*tauleap"):
            build_run_config(keys)

    def test_init_theta_assembled_and_validated(self, tmp_path):
        keys = _fit_keys(
            _data_csv(tmp_path),
            **{
                "init.beta": "0.08",
                "init.mu": "0.5",
                "init.rho": "0.6",
                "init.p0": "0.7 0.2 0.1",
            },
        )
        theta = build_run_config(keys).init_theta
        assert theta.beta == 0.08 and theta.mu == 0.5 and theta.rho == 0.6
        assert np.array_equal(theta.p0, [0.7, 0.2, 0.1])
        assert theta.gamma is None and theta.phi is None

    def test_partial_init_keys_rejected(self, tmp_path):
        keys = _fit_keys(_data_csv(tmp_path), **{"init.beta": "0.08"})
        with pytest.raises(KeyError, match="init.mu"):
            build_run_config(keys)

    def test_relative_data_path_resolved_against_root(self, tmp_path):
        _data_csv(tmp_path)
        keys = _fit_keys("obs.csv")
        config = build_run_config(keys, data_root=tmp_path)
        assert np.array_equal(config.dataset.counts, [2, 3, 2, 1])
        with pytest.raises(FileNotFoundError):
            build_run_config(keys, data_root=tmp_path / "elsewhere")

    def test_builtin_data_reference(self, tmp_path):
        keys = _fit_keys("builtin:boarding_school")
        keys["population"] = "763"
        config = build_run_config(keys)
        assert config.dataset.counts[5] == 293

    def test_validation_failures_propagate(self, tmp_path):
        with pytest.raises(ValueError, match="exceed burn_in"):
            build_run_config(_fit_keys(_data_csv(tmp_path), burn_in=12))
        bad = _fit_keys(_data_csv(tmp_path))
        del bad["iterations"]
        with pytest.raises(KeyError, match="iterations"):
            build_run_config(bad)


SIM_KEYS = {
    "model": "sir",
    "population": "30",
    "sim.beta": "0.1",
    "sim.mu": "0.5",
    "sim.rho": "0.7",
    "sim.p0": "0.8 0.15 0.05",
    "sim.t_end": "3",
    "sim.obs_step": "1",
}


class TestBuildSimSettings:
    def test_grid_construction(self):
        sim = build_sim_settings(dict(SIM_KEYS))
        assert np.array_equal(sim.obs_times, [0.0, 1.0, 2.0, 3.0])
        assert sim.method == "gillespie"
        assert sim.theta.rho == 0.7
        sim = build_sim_settings(dict(SIM_KEYS, **{"sim.t_end": "3.5"}))
        assert np.array_equal(sim.obs_times, [0.0, 1.0, 2.0, 3.0])
        sim = build_sim_settings(dict(SIM_KEYS, **{"sim.t0": "1"}))
        assert np.array_equal(sim.obs_times, [1.0, 2.0, 3.0])

    def test_explicit_observation_times(self):
        cfg = dict(SIM_KEYS, **{"sim.obs_times": "0, 0.5, 2.5"})
        sim = build_sim_settings(cfg)
        assert np.array_equal(sim.obs_times, [0.0, 0.5, 2.5])
        cfg["sim.obs_times"] = "0, 2, 2"
        with pytest.raises(ValueError, match="strictly increasing"):
            build_sim_settings(cfg)

    def test_tau_leap_settings(self):
        cfg = dict(SIM_KEYS, **{"sim.method": "tauleap", "sim.step": "0.05"})
        sim = build_sim_settings(cfg)
        assert sim.method == "tau_leap" and sim.tau_step == 0.05
        with pytest.raises(ValueError, match="sim.method"):
            build_sim_settings(dict(SIM_KEYS, **{"sim.method": "ode"}))

    def test_default_rho_is_full_reporting(self):
        cfg = dict(SIM_KEYS)
        del cfg["sim.rho"]
        assert build_sim_settings(cfg).theta.rho == 1.0

    def test_window_and_required_keys(self):
        with pytest.raises(ValueError, match="t_end > t0"):
            build_sim_settings(dict(SIM_KEYS, **{"sim.t0": "5"}))
        cfg = dict(SIM_KEYS)
        del cfg["sim.t_end"]
        with pytest.raises(KeyError, match="sim.t_end"):
            build_sim_settings(cfg)

    def test_negative_binomial_needs_phi(self):
        cfg = dict(SIM_KEYS, emission="negbinomial")
        with pytest.raises(KeyError, match="sim.phi"):
            build_sim_settings(cfg)
        cfg["sim.phi"] = "5"
        assert build_sim_settings(cfg).theta.phi == 5.0


def _write(path, lines: dict) -> str:
    path.write_text("".join(f"{k} = {v}\n" for k, v in lines.items()))
    return str(path)


@pytest.fixture()
def sim_outputs(tmp_path):
    conf = _write(tmp_path / "sim.conf", SIM_KEYS)
    out = tmp_path / "simulated"
    assert main(["simulate", "--config", conf, "--seed", "3", "--out", str(out)]) == 0
    return out


FIT_EXTRA = {
    "burn_in": "4",
    "thin": "2",
    "subjects_per_iter": "3",
    "seed": "5",
    "iterations": "20",
}


class TestCliWorkflow:
    def test_simulate_outputs(self, sim_outputs):
        counts = (sim_outputs / "counts.csv").read_text().splitlines()
        data = (sim_outputs / "dataset.csv").read_text().splitlines()
        assert counts[0].startswith("time,")
        assert data[0] == "time,count"
        assert len(data) == 1 + 4
        times = [float(r.split(",")[0]) for r in data[1:]]
        ys = [int(r.split(",")[1]) for r in data[1:]]
        assert times == [0.0, 1.0, 2.0, 3.0]
        assert all(0 <= y <= 30 for y in ys)

    def test_fit_summarize_diag_round_trip(self, sim_outputs, tmp_path, capsys):
        data = sim_outputs / "dataset.csv"
        conf = _write(
            tmp_path / "fit.conf",
            {"model": "sir", "population": "30", "data": str(data), **PRIOR_KEYS, **FIT_EXTRA},
        )
        out = tmp_path / "fit"
        assert main(["fit", "--config", conf, "--chains", "2", "--out", str(out)]) == 0
        printed = capsys.readouterr().out
        assert "path acceptance" in printed

        for k in (1, 2):
            text = (out / f"chain_{k}.csv").read_text().splitlines()
            assert text[0] == SAMPLE_HEADER
            assert len(text) == 1 + 20
            assert (out / f"chain_{k}_latent.csv").exists()
        assert (out / "latent.csv").exists()

        chains = [str(out / "chain_1.csv"), str(out / "chain_2.csv")]
        assert main(["summarize", *chains, "--burn-in", "4", "--out", str(out)]) == 0
        table = capsys.readouterr().out
        assert "median" in table and "beta" in table
        summary = (out / "summary.csv").read_text().splitlines()
        assert summary[0] == "param,mean,median,q025,q975"
        by_param = {r.split(",")[0]: [float(v) for v in r.split(",")[1:]] for r in summary[1:]}
        assert set(by_param) == {"beta", "mu", "rho", "p_S", "p_I", "p_R"}
        for _, (mean, med, lo, hi) in by_param.items():
            assert lo <= med <= hi
            assert np.isfinite(mean)

        assert main(["diag", *chains, "--burn-in", "4", "--out", str(out)]) == 0
        diag_out = capsys.readouterr().out
        assert "mean acceptance rate" in diag_out
        diag = (out / "diagnostics.csv").read_text().splitlines()
        assert diag[0] == "param,ess,degenerate"
        rows = {r.split(",")[0]: r.split(",")[1:] for r in diag[1:]}
        assert "logpost" in rows
        assert all(float(v[0]) > 0 for v in rows.values())

    def test_fit_is_deterministic_given_seed(self, sim_outputs, tmp_path):
        data = sim_outputs / "dataset.csv"
        conf = _write(
            tmp_path / "fit.conf",
            {"model": "sir", "population": "30", "data": str(data), **PRIOR_KEYS, **FIT_EXTRA},
        )
        out_a, out_b, out_c = (tmp_path / n for n in ("a", "b", "c"))
        main(["fit", "--config", conf, "--out", str(out_a)])
        main(["fit", "--config", conf, "--out", str(out_b)])
        main(["fit", "--config", conf, "--seed", "77", "--out", str(out_c)])
        text_a = (out_a / "chain_1.csv").read_text()
        assert text_a == (out_b / "chain_1.csv").read_text()
        assert text_a != (out_c / "chain_1.csv").read_text()

    def test_fit_pmmh_method(self, sim_outputs, tmp_path, capsys):
        data = sim_outputs / "dataset.csv"
        conf = _write(
            tmp_path / "pmmh.conf",
            {
                "model": "sir",
                "population": "30",
                "data": str(data),
                "method": "pmmh",
                "iterations": "30",
                "burn_in": "5",
                "seed": "2",
                "pmmh.particles": "8",
                "pmmh.pilot": "10",
                **PRIOR_KEYS,
                "init.beta": "0.1",
                "init.mu": "0.5",
                "init.rho": "0.7",
                "init.p0": "0.8 0.15 0.05",
            },
        )
        out = tmp_path / "pmmh"
        assert main(["fit", "--config", conf, "--out", str(out)]) == 0
        assert "parameter acceptance" in capsys.readouterr().out
        back = read_samples_csv(out / "chain_1.csv")
        assert back["beta"].size == 30
        assert not (out / "chain_1_latent.csv").exists()

    def test_summarize_rejects_overlong_burn_in(self, sim_outputs, tmp_path):
        data = sim_outputs / "dataset.csv"
        conf = _write(
            tmp_path / "fit.conf",
            {"model": "sir", "population": "30", "data": str(data), **PRIOR_KEYS, **FIT_EXTRA},
        )
        out = tmp_path / "fit"
        main(["fit", "--config", conf, "--out", str(out)])
        with pytest.raises(SystemExit, match="no rows left"):
            main(["summarize", str(out / "chain_1.csv"), "--burn-in", "20"])

    def test_module_entry_point(self, tmp_path):
        conf = _write(tmp_path / "sim.conf", SIM_KEYS)
        out = tmp_path / "entry"
        proc = subprocess.run(
            [
                sys.executable,
                "-m",
                "epiaug.cli",
                "simulate",
                "--config",
                conf,
                "--seed",
                "1",
                "--out",
                str(out),
            ],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 0, proc.stderr
        assert (out / "dataset.csv").exists()
