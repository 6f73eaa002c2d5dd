import json

import numpy as np
import pytest

from tvpcopula import cli, pipeline
from tvpcopula import equation as eqmod
from tvpcopula.copula import GmcmParams
from tvpcopula.forecast import read_score_csv
from tvpcopula.synthetic import equicorrelation, simulate_tvp_system, write_panel_csv

BASE = """
{seed}
output = "{output}"
[data]
path = "panel.csv"
demean = false
[equations]
variant = "{variant}"
p = {p}
sv = [true, false]
compression_candidates = 2
burn_in = 20
retained = 30
warm_burn_in = 5
warm_retained = 30
[copula]
G = [1, 2]
representation = "S1"
burn_in = 10
iterations = 20
refit_every = 2
n_starts = 1
[forecast]
first_origin = "1962Q1"
h_max = 2
n_draws = 100
"""


@pytest.fixture
def workdir(tmp_path):
    sim = simulate_tvp_system(52, 2, np.random.default_rng(3), GmcmParams.gaussian(equicorrelation(2, 0.5)))
    write_panel_csv(tmp_path / "panel.csv", sim.values, sim.names)
    return tmp_path


def write_config(d, name="run.toml", seed="seed = 11", output="out", variant="own-lags", p=1, extra=""):
    path = d / name
    path.write_text(BASE.format(seed=seed, output=output, variant=variant, p=p) + extra)
    return path


# --- configuration ------------------------------------------------------------

def test_h_max_zero_names_field(workdir):
    path = write_config(workdir, extra="")
    path.write_text(path.read_text().replace("h_max = 2", "h_max = 0"))
    with pytest.raises(pipeline.ConfigError) as exc:
        pipeline.validate_config(path)
    assert [e["field"] for e in exc.value.errors] == ["forecast.h_max"]


def test_every_violation_reported(workdir):
    path = write_config(workdir)
    text = path.read_text().replace("h_max = 2", "h_max = 0").replace("n_draws = 100", "n_draws = 10")
    path.write_text(text.replace("p = 1", "p = 0") + "\n[extra]\nx = 1\n")
    with pytest.raises(pipeline.ConfigError) as exc:
        pipeline.validate_config(path)
    fields = {e["field"] for e in exc.value.errors}
    assert {"forecast.h_max", "forecast.n_draws", "equations.p", "extra"} <= fields


def test_parse_error_has_position(workdir):
    path = workdir / "bad.toml"
    path.write_text("[data]\npath = \n")
    with pytest.raises(pipeline.ConfigError) as exc:
        pipeline.validate_config(path)
    err = exc.value.errors[0]
    assert err["line"] == 2 and err["column"] >= 1


def test_missing_seed_defaulted_and_echoed(workdir):
    cfg = pipeline.validate_config(write_config(workdir, seed=""))
    assert cfg.seed == pipeline.DEFAULT_SEED and cfg.seed_defaulted
    m = pipeline.run(cfg, threads=1, stop_after="data")
    saved = json.loads((cfg.out / "manifest.json").read_text())
    assert saved["master_seed"] == pipeline.DEFAULT_SEED and saved["seed_defaulted"] is True
    assert m.complete("data") and not m.complete("equations")


def test_structured_representation_with_single_component_candidate(workdir):
    path = write_config(workdir)
    path.write_text(path.read_text().replace("G = [1, 2]", "G = [1, 4]"))
    cfg = pipeline.validate_config(path)
    assert cfg.copula["G"] == (1, 4) and cfg.copula["representation"] == "S1"
    assert pipeline._representation(cfg, 1) == "full"
    assert pipeline._representation(cfg, 4) == "S1"


def test_equation_prior_keys(workdir):
    cfg = pipeline.validate_config(write_config(workdir))
    default = pipeline.equation_prior(cfg, 2)
    assert default.sigma_df == 0.0 and default.sigma_scale is None and default.coef_var == 10.0
    proper = write_config(workdir, name="iw.toml", extra="")
    proper.write_text(proper.read_text().replace("p = 1", "p = 1\nsigma_df = 4.0\nsigma_scale = 0.01"))
    prior = pipeline.equation_prior(pipeline.validate_config(proper), 2)
    assert prior.sigma_df == 4.0 and np.array_equal(prior.sigma_scale, 0.01 * np.eye(2))
    bad = write_config(workdir, name="bad.toml")
    bad.write_text(bad.read_text().replace("p = 1", "p = 1\nsigma_df = 4.0"))
    with pytest.raises(pipeline.ConfigError) as exc:
        pipeline.validate_config(bad)
    assert [e["field"] for e in exc.value.errors] == ["equations.sigma_scale"]


def test_derived_seeds_deterministic(workdir):
    cfg = pipeline.validate_config(write_config(workdir, variant="compressed", p=2))
    a = pipeline.equation_spec(cfg, 2, "sv", 1, 0).compression.Phi
    b = pipeline.equation_spec(cfg, 2, "sv", 1, 0).compression.Phi
    c = pipeline.equation_spec(cfg, 2, "sv", 1, 1).compression.Phi
    assert np.array_equal(a, b) and not (a.shape == c.shape and np.array_equal(a, c))


def test_thread_env_validation(monkeypatch):
    monkeypatch.setenv(pipeline.THREADS_ENV, "3")
    assert pipeline.thread_count() == 3
    monkeypatch.setenv(pipeline.THREADS_ENV, "zero")
    with pytest.raises(pipeline.ConfigError):
        pipeline.thread_count()


# --- staged run -------------------------------------------------------------------

def test_full_run_outputs_and_order(workdir):
    cfg = pipeline.validate_config(write_config(workdir))
    m = pipeline.run(cfg, threads=1)
    m.check_order()
    assert all(m.complete(s) for s in pipeline.STAGES)
    for rec in m.stages.values():
        for rel, digest in rec.artifacts.items():
            assert pipeline.file_hash(cfg.out / rel) == digest
    rel = read_score_csv(cfg.out / "scores" / "relative_msfe.csv")
    assert [t.variant for t in rel] == ["tvp-sv-own-lags-S1", "tvp-homoskedastic-own-lags-S1"]
    assert np.all(rel[0].msfe > 0)
    msfe = {t.variant: t.msfe for t in read_score_csv(cfg.out / "scores" / "msfe.csv")}
    np.testing.assert_allclose(rel[0].msfe, msfe["tvp-sv-own-lags-S1"] / msfe["random-walk"], rtol=1e-15)


def test_manifest_order_check():
    m = pipeline.RunManifest("h", 1, False)
    m.stages["copula"].status = "complete"
    with pytest.raises(RuntimeError):
        m.check_order()


def test_interrupted_equations_resume_without_recompute(workdir, monkeypatch):
    cfg = pipeline.validate_config(write_config(workdir))
    real = eqmod.estimate_equation
    calls = {"n": 0}

    def flaky(*a, **k):
        calls["n"] += 1
        if calls["n"] == 7:
            raise RuntimeError("forced interruption")
        return real(*a, **k)

    monkeypatch.setattr(pipeline, "estimate_equation", flaky)
    with pytest.raises(pipeline.StageFailed) as exc:
        pipeline.run(cfg, threads=1)
    assert exc.value.stage == "equations"
    m = pipeline.RunManifest.load(cfg.out)
    assert m.stages["equations"].status == "failed"
    assert "forced interruption" in m.stages["equations"].error["message"]
    assert not (cfg.out / "copula").exists()
    done = sorted((cfg.out / "equations").rglob("*.npz"))
    assert len(done) == 6
    before = {p: p.read_bytes() for p in done}

    calls["n"] = 100
    pipeline.run(cfg, threads=1)
    total = len(list((cfg.out / "equations").rglob("*.npz")))
    assert calls["n"] - 100 == total - 6
    assert all(p.read_bytes() == b for p, b in before.items())


def test_same_seed_byte_identical_scores(workdir):
    a = pipeline.run(pipeline.validate_config(write_config(workdir, "a.toml", output="out_a")), threads=1)
    b = pipeline.run(pipeline.validate_config(write_config(workdir, "b.toml", output="out_b")), threads=1)
    assert a.config_hash != b.config_hash  # output paths differ
    for name in ("relative_msfe.csv", "msfe.csv", "log_predictive_likelihood.csv", "summary.json"):
        assert (workdir / "out_a" / "scores" / name).read_bytes() == (workdir / "out_b" / "scores" / name).read_bytes()


def test_parallel_equation_stage_matches_serial(workdir):
    serial = pipeline.validate_config(write_config(workdir, "s.toml", output="out_s"))
    par = pipeline.validate_config(write_config(workdir, "p.toml", output="out_p"))
    pipeline.run(serial, threads=1, stop_after="equations")
    pipeline.run(par, threads=2, stop_after="equations")
    files = sorted(p.relative_to(serial.out) for p in (serial.out / "equations").rglob("*.npz"))
    assert files
    for rel in files:
        with np.load(serial.out / rel) as x, np.load(par.out / rel) as y:
            for key in x.files:
                assert np.array_equal(x[key], y[key])


def test_changed_config_refuses_existing_output(workdir):
    pipeline.run(pipeline.validate_config(write_config(workdir)), threads=1, stop_after="data")
    other = write_config(workdir, "other.toml", seed="seed = 12")
    with pytest.raises(pipeline.ConfigError, match="different configuration"):
        pipeline.run(pipeline.validate_config(other), threads=1)


def test_compressed_variant_runs(workdir):
    cfg = pipeline.validate_config(write_config(workdir, variant="compressed", p=2))
    m = pipeline.run(cfg, threads=1)
    assert m.complete("scores")
    assert len(list((cfg.out / "equations" / "sv" / "eq0").glob("cand1_*.npz"))) > 0


def test_extend_state_mean_propagation():
    s = eqmod.TvpState(np.array([[1.0], [2.0]]), np.array([0.0]), np.array([[0.5]]), np.eye(1),
                       eqmod.SvParams(0.1, 0.5, 0.2), np.array([0.0, 1.0]))
    e = eqmod.extend_state(s, 4)
    np.testing.assert_allclose(e.beta_path[:, 0], [1, 2, 1, 0.5])
    np.testing.assert_allclose(e.h, [0, 1, 0.6, 0.4])
    with pytest.raises(ValueError):
        eqmod.extend_state(s, 1)


# --- scores against a supplied benchmark and sensitivity ---------------------------

def test_rescore_with_benchmark_csv(workdir):
    cfg = pipeline.validate_config(write_config(workdir))
    pipeline.run(cfg, threads=1)
    bench = workdir / "bench.csv"
    bench.write_text("variant,variable,h1,h2\ndma,y2,2.0,4.0\ndma,y1,1.0,2.0\n")
    pipeline.rescore(cfg, bench)
    model = {t.variant: t for t in read_score_csv(cfg.out / "scores" / "msfe.csv")}["tvp-sv-own-lags-S1"]
    rel = read_score_csv(cfg.out / "scores" / "relative_msfe.csv")[0]
    np.testing.assert_allclose(rel.msfe, model.msfe / np.array([[1.0, 2.0], [2.0, 4.0]]), rtol=1e-15)
    bench.write_text("variant,variable,h1,h2\ndma,gdp,1.0,1.0\n")
    with pytest.raises(ValueError, match="must cover"):
        pipeline.rescore(cfg, bench)


def test_sensitivity_benchmark_prior_is_degenerate(workdir):
    cfg = pipeline.validate_config(write_config(workdir))
    pipeline.run(cfg, threads=1, stop_after="copula")
    with pytest.raises(RuntimeError, match="warm start"):
        pipeline.run_sensitivity(cfg, 1, 5, threads=1)
    pipeline.run(cfg, threads=1)
    pipeline.run_sensitivity(cfg, 2, 5, threads=1, benchmark_only=True)
    rows = (cfg.out / "sensitivity" / "ratios.csv").read_text().splitlines()[1:]
    rel = read_score_csv(cfg.out / "scores" / "relative_msfe.csv")[0]
    for r in rows:
        _, var, *vals = r.split(",")
        np.testing.assert_array_equal([float(v) for v in vals], rel.msfe[rel.variables.index(var)])


def test_sensitivity_sampled_priors(workdir):
    cfg = pipeline.validate_config(write_config(workdir))
    pipeline.run(cfg, threads=1)
    arts = pipeline.run_sensitivity(cfg, 2, 10, bins=4, threads=1)
    assert "sensitivity/histogram_y1_h1.csv" in arts
    rows = (cfg.out / "sensitivity" / "ratios.csv").read_text().splitlines()
    assert len(rows) == 1 + 2 * 2
    vals = np.array([[float(x) for x in r.split(",")[2:]] for r in rows[1:]])
    assert np.all(np.isfinite(vals)) and np.all(vals > 0)
    m = pipeline.RunManifest.load(cfg.out)
    assert m.extra["sensitivity"]["n_priors"] == 2


# --- CLI ------------------------------------------------------------------------------

def run_cli(args, capsys):
    code = cli.main([str(a) for a in args])
    return code, json.loads(capsys.readouterr().out)


def test_cli_validate_and_errors(workdir, capsys):
    path = write_config(workdir)
    code, out = run_cli(["validate", path], capsys)
    assert code == 0 and out["config"]["seed"] == 11
    path.write_text(path.read_text().replace("h_max = 2", "h_max = 0"))
    code, out = run_cli(["validate", path], capsys)
    assert code == 2 and out["error"]["details"][0]["field"] == "forecast.h_max"
    code, out = run_cli(["nonsense"], capsys)
    assert code == 2 and out["status"] == "error"
    code, out = run_cli(["resume", write_config(workdir, "r.toml", output="never")], capsys)
    assert code == 2 and "no run to resume" in out["error"]["message"]


def test_cli_run_then_score(workdir, capsys, monkeypatch):
    monkeypatch.setenv(pipeline.THREADS_ENV, "1")
    path = write_config(workdir)
    code, out = run_cli(["run", path], capsys)
    assert code == 0 and out["stages"]["scores"]["status"] == "complete"
    code, out = run_cli(["score", path, "--benchmark", workdir / "missing.csv"], capsys)
    assert code == 1 and out["error"]["type"] == "FileNotFoundError"


def test_cli_stage_failure_reports_stage(workdir, capsys, monkeypatch):
    monkeypatch.setenv(pipeline.THREADS_ENV, "1")
    path = write_config(workdir)
    path.write_text(path.read_text().replace('first_origin = "1962Q1"', 'first_origin = "2090Q1"'))
    code, out = run_cli(["run", path], capsys)
    assert code == 1 and out["error"]["stage"] == "data"
