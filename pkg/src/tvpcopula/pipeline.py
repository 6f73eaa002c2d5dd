"""Run configuration and the staged pipeline

    data -> equations -> copula -> forecasts -> scores

Each stage writes checkpoint files under the run's output directory and
records them, with content hashes, in ``manifest.json``. Rerunning a config
resumes after the last completed stage; inside the equation stage every
(variant, equation, candidate, origin) chain file is a checkpoint of its own.

All randomness flows from ``rng.stream(master_seed, *task_key)``, so results do
not depend on the number of worker processes or their scheduling.
"""

from __future__ import annotations

import functools
import hashlib
import json
import logging
import math
import os
import re
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import rng as rngmod
from .copula import (
    CopulaFitConfig,
    GmcmParams,
    PitPanel,
    fit_copula,
    pit_from_draws,
    select_G,
)
from .data import SeriesPanel, TransformSpec, expanding_windows, load_panel, parse_date, transform
from .equation import (
    EquationData,
    EquationPosterior,
    EquationPrior,
    EquationSpec,
    McmcConfig,
    TvpState,
    build_regressors,
    draw_compression,
    estimate_equation,
    extend_state,
    model_average_compressions,
)
from .forecast import (
    ForecastSet,
    ScoreTable,
    interval_coverage,
    prior_sensitivity,
    random_walk_forecast,
    read_score_csv,
    relative_msfe,
    score_forecasts,
    simulate_forecast,
    write_histogram_csv,
    write_score_csv,
)
from .sv import SvParams

logger = logging.getLogger(__name__)

STAGES = ("data", "equations", "copula", "forecasts", "scores")
THREADS_ENV = "TVPCOPULA_THREADS"
DEFAULT_SEED = 20240917
BENCHMARK_VARIANT = "random-walk"


# ---------------------------------------------------------------------------
# configuration

class ConfigError(ValueError):
    """Invalid configuration; ``errors`` lists every problem found."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(f"{e['field']}: {e['message']}" for e in self.errors))


_REQUIRED = object()


def _int(lo=None):
    def check(v):
        if isinstance(v, bool) or not isinstance(v, int):
            return None, "must be an integer"
        if lo is not None and v < lo:
            return None, f"must be >= {lo}"
        return v, None
    return check


def _float(lo=None, hi=None, open_lo=False):
    def check(v):
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            return None, "must be a finite number"
        v = float(v)
        if lo is not None and (v <= lo if open_lo else v < lo):
            return None, f"must be {'>' if open_lo else '>='} {lo}"
        if hi is not None and v >= hi:
            return None, f"must be < {hi}"
        return v, None
    return check


def _bool(v):
    return (v, None) if isinstance(v, bool) else (None, "must be true or false")


def _str(v):
    return (v, None) if isinstance(v, str) and v else (None, "must be a non-empty string")


def _choice(*options):
    def check(v):
        return (v, None) if v in options else (None, f"must be one of {list(options)}")
    return check


def _list_of(item, min_len=1):
    def check(v):
        vals = v if isinstance(v, list) else [v]
        if len(vals) < min_len:
            return None, f"needs at least {min_len} entries"
        out = []
        for x in vals:
            y, err = item(x)
            if err:
                return None, f"entry {x!r} {err}"
            out.append(y)
        return tuple(out), None
    return check


def _date(v):
    if not isinstance(v, str):
        return None, "must be a date string such as '1990Q1' or '1990-03-31'"
    try:
        parse_date(v)
    except ValueError as exc:
        return None, str(exc)
    return v, None


def _window(v):
    if not isinstance(v, list) or len(v) != 2:
        return None, "must be a [start, end] pair of dates"
    for x in v:
        if _date(x)[1]:
            return None, _date(x)[1]
    return tuple(v), None


_SCHEMA = {
    "": {"seed": (_int(0), None), "output": (_str, "output")},
    "data": {
        "path": (_str, _REQUIRED), "date_column": (_str, None), "columns": (_list_of(_str), None),
        "transform": (_list_of(_choice("level", "diff", "log-diff", "double-log-diff")), ("level",)),
        "demean": (_bool, True), "standardize_window": (_window, None), "demean_window": (_window, None),
    },
    "equations": {
        "variant": (_choice("own-lags", "compressed"), "own-lags"), "p": (_int(1), 1),
        "sv": (_list_of(_bool), (True,)), "compression_candidates": (_int(1), 5),
        "burn_in": (_int(0), 5000), "retained": (_int(1), 10_000), "thin": (_int(1), 1),
        "warm_burn_in": (_int(0), 200), "warm_retained": (_int(1), 1000),
        "coef_mean": (_float(), 0.0), "coef_var": (_float(0, open_lo=True), 10.0),
        "sigma_df": (_float(0), 0.0), "sigma_scale": (_float(0), 0.0),
    },
    "copula": {
        "G": (_list_of(_int(1)), (1,)), "representation": (_choice("full", "S1", "S2"), "full"),
        "burn_in": (_int(0), 500), "iterations": (_int(1), 1000), "lam": (_float(0, open_lo=True), 0.05),
        "n_starts": (_int(1), 4), "s2_candidates": (_int(1), 10_000), "k": (_int(1), None),
        "refit_every": (_int(1), 4),
    },
    "forecast": {
        "first_origin": (_date, _REQUIRED), "h_max": (_int(1), 8), "n_draws": (_int(100), 1000),
        "point": (_choice("mean", "median"), "mean"), "overflow": (_float(0, open_lo=True), 1e6),
        "interval_level": (_float(0, 1, open_lo=True), 0.9),
    },
    "benchmark": {"path": (_str, None), "variant": (_str, None)},
}


@dataclass(frozen=True)
class RunConfig:
    """Normalised configuration. Paths are absolute; ``seed_defaulted`` records
    whether the master seed came from the file or from :data:`DEFAULT_SEED`."""

    data: dict
    equations: dict
    copula: dict
    forecast: dict
    benchmark: dict
    seed: int
    output: str
    seed_defaulted: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("seed_defaulted")
        return d

    def hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, default=list)
        return hashlib.sha256(text.encode()).hexdigest()

    @property
    def out(self) -> Path:
        return Path(self.output)

    @property
    def variants(self) -> tuple:
        return tuple("sv" if s else "homoskedastic" for s in self.equations["sv"])


def normalize_config(raw: dict, base_dir=".") -> RunConfig:
    """Check a parsed config mapping against the schema; every violation is reported."""
    errors = []
    sections = {}
    base = Path(base_dir)
    for section, fields in _SCHEMA.items():
        src = raw if section == "" else raw.get(section, {})
        if not isinstance(src, dict):
            errors.append({"field": section, "message": "must be a table"})
            src = {}
        out = {}
        for key in src:
            if key not in fields and (section != "" or key not in _SCHEMA):
                errors.append({"field": f"{section}.{key}" if section else key, "message": "unknown key"})
        for key, (check, default) in fields.items():
            path = f"{section}.{key}" if section else key
            if key not in src:
                if default is _REQUIRED:
                    errors.append({"field": path, "message": "is required"})
                out[key] = None if default is _REQUIRED else default
                continue
            val, err = check(src[key])
            if err:
                errors.append({"field": path, "message": err})
            out[key] = val
        sections[section] = out
    top = sections.pop("")
    data = sections["data"]
    if data.get("path"):
        p = Path(data["path"])
        data["path"] = str(p if p.is_absolute() else (base / p).resolve())
        if not Path(data["path"]).is_file():
            errors.append({"field": "data.path", "message": f"file not found: {data['path']}"})
    bench = sections["benchmark"]
    if bench.get("path"):
        p = Path(bench["path"])
        bench["path"] = str(p if p.is_absolute() else (base / p).resolve())
    out_dir = Path(top["output"] or "output")
    eq = sections["equations"]
    if eq.get("sv") and len(set(eq["sv"])) != len(eq["sv"]):
        errors.append({"field": "equations.sv", "message": "duplicate variants"})
    if eq.get("sigma_df") and not eq.get("sigma_scale"):
        errors.append({"field": "equations.sigma_scale", "message": "must be > 0 when sigma_df > 0"})
    cop = sections["copula"]
    if cop.get("G"):
        cop["G"] = tuple(sorted(set(cop["G"])))
    if errors:
        raise ConfigError(errors)
    seed = top["seed"]
    return RunConfig(
        data=data, equations=eq, copula=cop, forecast=sections["forecast"], benchmark=bench,
        seed=DEFAULT_SEED if seed is None else seed,
        output=str(out_dir if out_dir.is_absolute() else (base / out_dir).resolve()),
        seed_defaulted=seed is None,
    )


_POS = re.compile(r"line (\d+), column (\d+)")


def validate_config(path) -> RunConfig:
    """Parse and validate a TOML run configuration.

    Raises:
        ConfigError: listing each invalid field (parse errors carry line/column).
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError([{"field": "<file>", "message": f"config file not found: {path}"}])
    try:
        raw = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        err = {"field": "<syntax>", "message": str(exc)}
        m = _POS.search(str(exc))
        if m:
            err["line"], err["column"] = int(m.group(1)), int(m.group(2))
        raise ConfigError([err]) from None
    return normalize_config(raw, path.parent)


# ---------------------------------------------------------------------------
# manifest

def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class StageRecord:
    status: str = "pending"  # pending | running | complete | failed
    wall_clock: float | None = None
    artifacts: dict = field(default_factory=dict)  # relative path -> sha256
    error: dict | None = None


@dataclass
class RunManifest:
    config_hash: str
    master_seed: int
    seed_defaulted: bool
    stages: dict = field(default_factory=lambda: {s: StageRecord() for s in STAGES})
    extra: dict = field(default_factory=dict)

    def save(self, out: Path) -> None:
        d = {"config_hash": self.config_hash, "master_seed": self.master_seed,
             "seed_defaulted": self.seed_defaulted, "stage_order": list(STAGES),
             "stages": {k: asdict(v) for k, v in self.stages.items()}, "extra": self.extra}
        tmp = out / "manifest.json.tmp"
        tmp.write_text(json.dumps(d, indent=2, sort_keys=True))
        os.replace(tmp, out / "manifest.json")

    @classmethod
    def load(cls, out: Path) -> "RunManifest":
        d = json.loads((out / "manifest.json").read_text())
        stages = {k: StageRecord(**v) for k, v in d["stages"].items()}
        return cls(d["config_hash"], d["master_seed"], d["seed_defaulted"], stages, d.get("extra", {}))

    def complete(self, stage: str) -> bool:
        return self.stages[stage].status == "complete"

    def check_order(self) -> None:
        """Stage k may only be complete if every earlier stage is."""
        seen_incomplete = None
        for s in STAGES:
            if not self.complete(s):
                seen_incomplete = seen_incomplete or s
            elif seen_incomplete:
                raise RuntimeError(f"stage {s} complete before {seen_incomplete}")


class StageFailed(RuntimeError):
    def __init__(self, stage, exc):
        super().__init__(f"stage {stage} failed: {exc}")
        self.stage = stage
        self.cause = exc


# ---------------------------------------------------------------------------
# executor

def thread_count() -> int:
    """Worker processes: ``$TVPCOPULA_THREADS`` if set, else the CPU count."""
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError([{"field": THREADS_ENV, "message": f"must be an integer, got {raw!r}"}]) from None
    if n < 1:
        raise ConfigError([{"field": THREADS_ENV, "message": "must be at least 1"}])
    return n


def _map(fn, jobs, threads):
    if threads <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(threads, len(jobs))) as pool:
        return list(pool.map(fn, jobs))


# ---------------------------------------------------------------------------
# stage helpers

def _rel(out: Path, path: Path) -> str:
    return str(path.relative_to(out))


def _atomic_savez(path: Path, **arrays) -> None:
    tmp = path.with_suffix(".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def load_transformed_panel(cfg: RunConfig) -> SeriesPanel:
    d = cfg.data
    panel = load_panel(d["path"], d["date_column"], d["columns"])
    ops = d["transform"]
    if len(ops) == 1:
        ops = ops * panel.n
    spec = TransformSpec(ops, d["demean"], d["standardize_window"], d["demean_window"])
    return transform(panel, spec)


def origins(cfg: RunConfig, panel: SeriesPanel) -> list[int]:
    return [w.origin_index for w in expanding_windows(panel, cfg.forecast["first_origin"], cfg.forecast["h_max"])]


def copula_origins(cfg: RunConfig, all_origins) -> list[int]:
    return list(all_origins[::cfg.copula["refit_every"]])


def n_candidates(cfg: RunConfig) -> int:
    return cfg.equations["compression_candidates"] if cfg.equations["variant"] == "compressed" else 1


def equation_spec(cfg: RunConfig, n: int, variant: str, i: int, c: int) -> EquationSpec:
    eq = cfg.equations
    sv = variant == "sv"
    if eq["variant"] == "own-lags":
        return EquationSpec("own-lags", eq["p"], None, sv)
    seed = rngmod.derive_seed(cfg.seed, "compression", i, c)
    comp = draw_compression(rngmod.stream(cfg.seed, "compression", i, c), eq["p"], n * eq["p"], seed=seed)
    return EquationSpec("compressed", eq["p"], comp, sv)


def equation_prior(cfg: RunConfig, k: int) -> EquationPrior:
    """Coefficient and law-of-motion prior of every equation.

    ``sigma_df = 0`` with ``sigma_scale = 0`` is the |Sigma|^-(k+1)/2 kernel;
    otherwise Sigma ~ IW(sigma_df, sigma_scale * I).
    """
    eq = cfg.equations
    scale = eq["sigma_scale"] * np.eye(k) if eq["sigma_scale"] > 0 else None
    return EquationPrior(coef_mean=eq["coef_mean"], coef_var=eq["coef_var"], beta0_mean=eq["coef_mean"],
                         beta0_var=eq["coef_var"], sigma_df=eq["sigma_df"], sigma_scale=scale)


def chain_path(out: Path, variant: str, i: int, c: int, origin: int) -> Path:
    return out / "equations" / variant / f"eq{i}" / f"cand{c}_origin{origin}.npz"


def save_chain(path: Path, post: EquationPosterior, pit: np.ndarray, last: TvpState) -> None:
    """Chain file: retained draws with paths cut to the final period, PITs and the last state."""
    path.parent.mkdir(parents=True, exist_ok=True)
    _atomic_savez(
        path, draw_index=np.arange(post.draws), beta_T=post.beta_path[:, -1], beta0=post.beta0,
        A_beta=post.A_beta, Sigma=post.Sigma, h_T=post.h[:, -1], sv=post.sv, loglik=post.loglik,
        log_ml=np.array(post.log_marginal_likelihood), pit=pit,
        last_beta_path=last.beta_path, last_beta0=last.beta0, last_A=last.A_beta, last_Sigma=last.Sigma,
        last_h=last.h, last_sv=np.array([last.sv.alpha, last.sv.gamma, last.sv.delta]),
    )


@dataclass
class ChainRecord:
    posterior: EquationPosterior  # beta_path / h hold only the final period
    pit: np.ndarray
    last: TvpState


def load_chain(path: Path, spec: EquationSpec) -> ChainRecord:
    with np.load(path, allow_pickle=False) as f:
        post = EquationPosterior(f["beta_T"][:, None], f["beta0"], f["A_beta"], f["Sigma"], f["h_T"][:, None],
                                 f["sv"], f["loglik"], float(f["log_ml"]), spec)
        last = TvpState(f["last_beta_path"], f["last_beta0"], f["last_A"], f["last_Sigma"],
                        SvParams(*f["last_sv"]), f["last_h"])
        return ChainRecord(post, f["pit"], last)


def moment_state(rec: ChainRecord) -> TvpState:
    """Last retained state with static parameters replaced by posterior means."""
    p = rec.posterior
    s = rec.last.copy()
    s.A_beta = p.A_beta.mean(0)
    s.Sigma = p.Sigma.mean(0)
    a, g, d = p.sv.mean(0)
    s.sv = SvParams(a, g, d)
    return s


def _mcmc(cfg: RunConfig, warm: bool) -> McmcConfig:
    eq = cfg.equations
    if warm:
        return McmcConfig(eq["warm_burn_in"], eq["warm_retained"], eq["thin"])
    return McmcConfig(eq["burn_in"], eq["retained"], eq["thin"])


def _equation_task(job):
    """Estimate one (variant, equation, candidate) at every origin, warm-starting later origins."""
    cfg, values, variant, i, c, origin_list = job
    out = cfg.out
    spec = equation_spec(cfg, values.shape[1], variant, i, c)
    prev = None
    artifacts = {}
    for o in origin_list:
        path = chain_path(out, variant, i, c, o)
        if path.exists():
            try:
                prev = load_chain(path, spec).last
                artifacts[_rel(out, path)] = file_hash(path)
                continue
            except (OSError, ValueError, KeyError):
                logger.warning("unreadable checkpoint %s; recomputing", path)
        data = EquationData(*build_regressors(values[:o + 1], spec, i))
        rng = rngmod.stream(cfg.seed, "equation", variant, i, c, o)
        init = None if prev is None else extend_state(prev, data.T)
        post = estimate_equation(data, spec, _mcmc(cfg, prev is not None), rng,
                                 equation_prior(cfg, data.k), init)
        pit = pit_from_draws(data.y, data.Z, post.beta_path, post.h)
        prev = post.state(post.draws - 1)
        save_chain(path, post, pit, prev)
        artifacts[_rel(out, path)] = file_hash(path)
    return artifacts


def _load_system(cfg: RunConfig, n: int, variant: str, origin: int):
    """Per-equation chain records at an origin: list over equations of [(weight, ChainRecord)]."""
    system = []
    for i in range(n):
        recs = [load_chain(chain_path(cfg.out, variant, i, c, origin), equation_spec(cfg, n, variant, i, c))
                for c in range(n_candidates(cfg))]
        w = model_average_compressions([r.posterior.log_marginal_likelihood for r in recs])
        system.append(list(zip(w, recs)))
    return system


def system_pits(system) -> PitPanel:
    cols = [sum(w * r.pit for w, r in eq) for eq in system]
    T = min(len(col) for col in cols)
    return PitPanel(np.column_stack([col[len(col) - T:] for col in cols]))


def copula_path(out: Path, variant: str, origin: int) -> Path:
    return out / "copula" / variant / f"origin{origin}.json"


def _fit_config(cfg: RunConfig, burn_in=None, iterations=None) -> CopulaFitConfig:
    c = cfg.copula
    return CopulaFitConfig(burn_in=c["burn_in"] if burn_in is None else burn_in,
                           iterations=c["iterations"] if iterations is None else iterations, lam=c["lam"],
                           n_starts=c["n_starts"], s2_candidates=c["s2_candidates"], k=c["k"])


def _representation(cfg: RunConfig, G: int) -> str:
    return cfg.copula["representation"] if G > 1 else "full"


def _copula_task(job):
    cfg, n, variant, o = job
    pits = system_pits(_load_system(cfg, n, variant, o))
    rep = cfg.copula["representation"]
    Gs = cfg.copula["G"]
    scores = None
    if len(Gs) > 1:
        G, scores = select_G(pits, Gs, rep, rngmod.stream(cfg.seed, "copula-select", variant, o),
                             cfg.copula["n_starts"], cfg.copula["k"], cfg.copula["s2_candidates"])
    else:
        G = Gs[0]
    fit = fit_copula(pits, G, _representation(cfg, G), rngmod.stream(cfg.seed, "copula", variant, o),
                     _fit_config(cfg))
    path = copula_path(cfg.out, variant, o)
    path.parent.mkdir(parents=True, exist_ok=True)
    record = {"G": G, "representation": _representation(cfg, G), "selection": scores,
              "log_marginal_likelihood": fit.log_marginal_likelihood, "max_loglik": fit.max_loglik,
              "acceptance_rate": None if fit.chain is None else fit.chain.acceptance_rate,
              "params": json.loads(fit.params.to_json())}
    _atomic_write(path, json.dumps(record, indent=1, sort_keys=True, default=str))
    arts = {_rel(cfg.out, path): file_hash(path)}
    if fit.chain is not None:
        diag = path.with_name(f"origin{o}_mala.csv")
        fit.chain.write_diagnostics(diag)
        arts[_rel(cfg.out, diag)] = file_hash(diag)
    return arts


def load_copula(out: Path, variant: str, origin: int) -> GmcmParams:
    rec = json.loads(copula_path(out, variant, origin).read_text())
    return GmcmParams.from_json(json.dumps(rec["params"]))


def _copula_for(cfg: RunConfig, origin_list, o) -> int:
    fits = [x for x in copula_origins(cfg, origin_list) if x <= o]
    return fits[-1]


def forecast_path(out: Path, variant: str, origin: int) -> Path:
    return out / "forecasts" / variant / f"origin{origin}.npz"


def _realized(values, o, h_max):
    fut = np.full((h_max, values.shape[1]), np.nan)
    avail = values[o + 1:o + 1 + h_max]
    fut[:len(avail)] = avail
    return fut


def _forecast_task(job):
    cfg, values, names, dates, variant, o, origin_list, copula_override, system_override = job
    fc = cfg.forecast
    label = str(dates[o])
    rng = rngmod.stream(cfg.seed, "forecast", variant, o)
    realized = _realized(values, o, fc["h_max"])
    if variant == BENCHMARK_VARIANT:
        fs = random_walk_forecast(values[:o + 1], fc["h_max"], fc["n_draws"], rng, label, realized, names)
    else:
        system = system_override if system_override is not None else _load_system(cfg, values.shape[1], variant, o)
        cop = copula_override if copula_override is not None else \
            load_copula(cfg.out, variant, _copula_for(cfg, origin_list, o))
        posts = [[(w, r.posterior) for w, r in eq] for eq in system]
        fs = simulate_forecast(posts, cop, values[:o + 1], fc["h_max"], fc["n_draws"], rng, label, realized,
                               names, fc["overflow"])
    if system_override is not None:
        return fs
    path = forecast_path(cfg.out, variant, o)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    fs.save(tmp)
    os.replace(tmp, path)
    return {_rel(cfg.out, path): file_hash(path)}


def variant_label(cfg: RunConfig, variant: str) -> str:
    if variant == BENCHMARK_VARIANT:
        return variant
    return f"tvp-{variant}-{cfg.equations['variant']}-{cfg.copula['representation']}"


def benchmark_table(cfg: RunConfig, names, forecasts_rw, benchmark_path=None, benchmark_variant=None):
    """Benchmark MSFE table: from a CSV if given, else the random-walk forecasts."""
    path = benchmark_path or cfg.benchmark["path"]
    H = tuple(range(1, cfg.forecast["h_max"] + 1))
    if path is None:
        return score_forecasts(forecasts_rw, BENCHMARK_VARIANT, cfg.forecast["h_max"], cfg.forecast["point"],
                               with_log_pl=False)
    tables = read_score_csv(path)
    want = benchmark_variant or cfg.benchmark["variant"]
    pick = [t for t in tables if want is None or t.variant == want]
    if not pick:
        raise ValueError(f"benchmark CSV {path} has no variant {want!r}")
    t = pick[0]
    if set(t.variables) != set(names) or tuple(t.horizons[:len(H)]) != H:
        raise ValueError(f"benchmark CSV {path} must cover variables {list(names)} and horizons h1..h{len(H)}")
    order = [t.variables.index(v) for v in names]
    return ScoreTable(t.variant, tuple(names), H, np.asarray(t.msfe)[order][:, :len(H)])


def _score(cfg: RunConfig, panel: SeriesPanel, origin_list, benchmark_path=None, benchmark_variant=None):
    out = cfg.out / "scores"
    out.mkdir(parents=True, exist_ok=True)
    fc = cfg.forecast
    loaded = {v: [ForecastSet.load(forecast_path(cfg.out, v, o)) for o in origin_list]
              for v in cfg.variants + (BENCHMARK_VARIANT,)}
    bench = benchmark_table(cfg, panel.names, loaded[BENCHMARK_VARIANT], benchmark_path, benchmark_variant)
    tables = {v: score_forecasts(loaded[v], variant_label(cfg, v), fc["h_max"], fc["point"])
              for v in loaded}
    rel = [relative_msfe(tables[v], bench) for v in cfg.variants]
    write_score_csv(out / "relative_msfe.csv", rel, "ratio")
    write_score_csv(out / "msfe.csv", [tables[v] for v in loaded], "msfe")
    write_score_csv(out / "log_predictive_likelihood.csv", [tables[v] for v in loaded], "log_pl")
    summary = {
        "benchmark": bench.variant,
        "origins": [str(panel.dates[o]) for o in origin_list],
        "coverage": {variant_label(cfg, v): {f"h{h}": repr(interval_coverage(loaded[v], h, fc["interval_level"]))
                                             for h in range(1, fc["h_max"] + 1)} for v in loaded},
        "interval_level": fc["interval_level"],
        "excluded_paths": {variant_label(cfg, v): int(sum(f.excluded for f in loaded[v])) for v in loaded},
    }
    _atomic_write(out / "summary.json", json.dumps(summary, indent=1, sort_keys=True))
    return {_rel(cfg.out, p): file_hash(p) for p in sorted(out.glob("*")) if p.suffix in (".csv", ".json")}


# ---------------------------------------------------------------------------
# run

def _verify(out: Path, rec: StageRecord) -> bool:
    for rel, digest in rec.artifacts.items():
        p = out / rel
        if not p.exists() or file_hash(p) != digest:
            return False
    return True


def _open_manifest(cfg: RunConfig, must_exist: bool) -> RunManifest:
    out = cfg.out
    if (out / "manifest.json").exists():
        m = RunManifest.load(out)
        if m.config_hash != cfg.hash():
            raise ConfigError([{"field": "output",
                                "message": f"{out} holds a run with a different configuration"}])
        return m
    if must_exist:
        raise ConfigError([{"field": "output", "message": f"no run to resume in {out}"}])
    out.mkdir(parents=True, exist_ok=True)
    return RunManifest(cfg.hash(), cfg.seed, cfg.seed_defaulted)


def run(cfg: RunConfig, threads: int | None = None, resume_only: bool = False,
        stop_after: str | None = None) -> RunManifest:
    """Execute (or resume) the staged pipeline and return the manifest.

    ``stop_after`` ends the run after the named stage.
    """
    threads = thread_count() if threads is None else threads
    m = _open_manifest(cfg, resume_only)
    out = cfg.out
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True, default=list))
    panel = None
    invalidate = False
    for stage in STAGES:
        rec = m.stages[stage]
        if not invalidate and rec.status == "complete" and _verify(out, rec):
            if stage == stop_after:
                break
            continue
        invalidate = True
        for later in STAGES[STAGES.index(stage) + 1:]:
            m.stages[later] = StageRecord()
        rec.status, rec.error = "running", None
        m.save(out)
        t0 = time.perf_counter()
        try:
            if panel is None:
                panel = load_transformed_panel(cfg)
            rec.artifacts = _STAGE_FNS[stage](cfg, panel, threads)
        except Exception as exc:
            rec.status = "failed"
            rec.wall_clock = time.perf_counter() - t0
            rec.error = {"type": type(exc).__name__, "message": str(exc),
                         "traceback": traceback.format_exc(limit=-3)}
            m.save(out)
            raise StageFailed(stage, exc) from exc
        rec.status, rec.wall_clock = "complete", time.perf_counter() - t0
        m.save(out)
        if stage == stop_after:
            break
    m.check_order()
    return m


def _stage_data(cfg, panel, threads):
    d = cfg.out / "data"
    d.mkdir(parents=True, exist_ok=True)
    lines = ["date," + ",".join(panel.names)]
    lines += [str(t) + "," + ",".join(repr(float(x)) for x in row) for t, row in zip(panel.dates, panel.values)]
    _atomic_write(d / "panel.csv", "\n".join(lines) + "\n")
    _atomic_write(d / "transform_log.json", panel.transform_log_json())
    origins(cfg, panel)  # validates the forecast grid against the data
    return {_rel(cfg.out, p): file_hash(p) for p in (d / "panel.csv", d / "transform_log.json")}


def _stage_equations(cfg, panel, threads):
    olist = origins(cfg, panel)
    jobs = [(cfg, np.asarray(panel.values), v, i, c, olist)
            for v in cfg.variants for i in range(panel.n) for c in range(n_candidates(cfg))]
    arts = {}
    for a in _map(_equation_task, jobs, threads):
        arts.update(a)
    return arts


def _stage_copula(cfg, panel, threads):
    olist = origins(cfg, panel)
    jobs = [(cfg, panel.n, v, o) for v in cfg.variants for o in copula_origins(cfg, olist)]
    arts = {}
    for a in _map(_copula_task, jobs, threads):
        arts.update(a)
    return arts


def _stage_forecasts(cfg, panel, threads):
    olist = origins(cfg, panel)
    values = np.asarray(panel.values)
    dates = [str(d) for d in panel.dates]
    jobs = [(cfg, values, panel.names, dates, v, o, olist, None, None)
            for v in cfg.variants + (BENCHMARK_VARIANT,) for o in olist]
    arts = {}
    for a in _map(_forecast_task, jobs, threads):
        arts.update(a)
    return arts


def _stage_scores(cfg, panel, threads):
    return _score(cfg, panel, origins(cfg, panel))


_STAGE_FNS = {"data": _stage_data, "equations": _stage_equations, "copula": _stage_copula,
              "forecasts": _stage_forecasts, "scores": _stage_scores}


def rescore(cfg: RunConfig, benchmark_path, benchmark_variant=None) -> dict:
    """Recompute score tables from stored forecasts against a benchmark CSV."""
    m = _open_manifest(cfg, must_exist=True)
    if not m.complete("forecasts"):
        raise RuntimeError("forecasts stage has not completed; run the pipeline first")
    panel = load_transformed_panel(cfg)
    arts = _score(cfg, panel, origins(cfg, panel), benchmark_path, benchmark_variant)
    m.stages["scores"] = StageRecord("complete", None, arts)
    m.extra["scores_benchmark"] = str(benchmark_path)
    m.save(cfg.out)
    return arts


# ---------------------------------------------------------------------------
# prior sensitivity

@dataclass(frozen=True)
class _SensitivityContext:
    cfg: RunConfig
    values: np.ndarray
    names: tuple
    dates: list
    variant: str
    origins: list
    iterations: int
    bench_msfe: np.ndarray
    model_msfe: np.ndarray


def _prior_key(prior) -> str:
    """Stream key derived from the prior's contents, so replicates need no index."""
    parts = [np.concatenate([np.ravel(e.coef_mean), np.ravel(e.beta0_mean)]) for e in prior.equations]
    parts += [np.concatenate([np.ravel(c.log_weight_center), np.ravel(c.mean_center), np.ravel(c.chol_center)])
              for _, c in sorted(prior.copula.items())]
    return hashlib.sha256(np.concatenate(parts).tobytes()).hexdigest()[:16]


def _sensitivity_eval(ctx: _SensitivityContext, prior):
    """Relative MSFE table (variables x horizons) under one sampled prior; None = benchmark prior."""
    if prior is None:
        return ctx.model_msfe / ctx.bench_msfe
    cfg, values, names, dates = ctx.cfg, ctx.values, ctx.names, ctx.dates
    variant, olist, iterations = ctx.variant, ctx.origins, ctx.iterations
    n = values.shape[1]
    ncand = n_candidates(cfg)
    fc = cfg.forecast
    cop_fits = {}
    forecasts = []
    key = _prior_key(prior)
    for o in olist:
        system = []
        for i in range(n):
            cands = []
            for c in range(ncand):
                spec = equation_spec(cfg, n, variant, i, c)
                base = load_chain(chain_path(cfg.out, variant, i, c, o), spec)
                data = EquationData(*build_regressors(values[:o + 1], spec, i))
                rng = rngmod.stream(cfg.seed, "sensitivity", key, i, c, o)
                eq_prior = replace(prior.equations[i * ncand + c], sigma_df=cfg.equations["sigma_df"],
                                   sigma_scale=equation_prior(cfg, data.k).sigma_scale)
                post = estimate_equation(data, spec, McmcConfig(0, iterations), rng, eq_prior,
                                         moment_state(base))
                pit = pit_from_draws(data.y, data.Z, post.beta_path, post.h)
                cands.append(ChainRecord(post, pit, post.state(post.draws - 1)))
            w = model_average_compressions([r.posterior.log_marginal_likelihood for r in cands])
            system.append(list(zip(w, cands)))
        if o in copula_origins(cfg, olist):
            bench = load_copula(cfg.out, variant, o)
            fit = fit_copula(system_pits(system), bench.G, _representation(cfg, bench.G),
                             rngmod.stream(cfg.seed, "sensitivity-copula", key, o),
                             _fit_config(cfg, 0, iterations), init=bench, prior=prior.copula[bench.G])
            cop_fits[o] = fit.params
        cop = cop_fits[_copula_for(cfg, olist, o)]
        fs = _forecast_task((cfg, values, names, dates, variant, o, olist, cop, system))
        forecasts.append(fs)
    table = score_forecasts(forecasts, variant_label(cfg, variant), fc["h_max"], fc["point"], with_log_pl=False)
    return table.msfe / ctx.bench_msfe


def run_sensitivity(cfg: RunConfig, n_priors: int, iterations: int, bins: int = 20,
                    threads: int | None = None, benchmark_only: bool = False) -> dict:
    """Prior-sensitivity replicates for the first model variant, warm-started from the
    benchmark run's posterior moments. Writes ``sensitivity/ratios.csv`` and one
    histogram CSV per variable at h=1."""
    threads = thread_count() if threads is None else threads
    m = _open_manifest(cfg, must_exist=True)
    if not m.complete("scores"):
        raise RuntimeError("benchmark run incomplete: warm start unavailable")
    panel = load_transformed_panel(cfg)
    olist = origins(cfg, panel)
    variant = cfg.variants[0]
    tabs = {t.variant: t for t in read_score_csv(cfg.out / "scores" / "msfe.csv")}
    bench = tabs[BENCHMARK_VARIANT] if not cfg.benchmark["path"] else benchmark_table(cfg, panel.names, [])
    ctx = _SensitivityContext(cfg, np.asarray(panel.values), panel.names, [str(d) for d in panel.dates], variant,
                              olist, iterations, bench.msfe, tabs[variant_label(cfg, variant)].msfe)
    ks = [equation_spec(cfg, panel.n, variant, i, c).k(panel.n) for i in range(panel.n)
          for c in range(n_candidates(cfg))]
    rng = rngmod.stream(cfg.seed, "sensitivity-priors")
    evaluate = functools.partial(_sensitivity_eval, ctx)
    if threads > 1 and n_priors > 1 and not benchmark_only:
        with ProcessPoolExecutor(max_workers=min(threads, n_priors)) as pool:
            ratios = prior_sensitivity(evaluate, n_priors, rng, ks, cfg.copula["G"], panel.n, executor=pool)
    else:
        ratios = prior_sensitivity(evaluate, n_priors, rng, ks, cfg.copula["G"], panel.n,
                                   benchmark_only=benchmark_only)
    out = cfg.out / "sensitivity"
    out.mkdir(parents=True, exist_ok=True)
    H = cfg.forecast["h_max"]
    lines = ["prior,variable," + ",".join(f"h{h}" for h in range(1, H + 1))]
    for r, tab in enumerate(ratios):
        for name, row in zip(panel.names, tab):
            lines.append(f"{r},{name}," + ",".join(repr(float(x)) for x in row))
    _atomic_write(out / "ratios.csv", "\n".join(lines) + "\n")
    arts = {"sensitivity/ratios.csv": file_hash(out / "ratios.csv")}
    for j, name in enumerate(panel.names):
        p = out / f"histogram_{name}_h1.csv"
        write_histogram_csv(p, ratios[:, j, 0], bins)
        arts[_rel(cfg.out, p)] = file_hash(p)
    m.extra["sensitivity"] = {"n_priors": n_priors, "iterations": iterations, "variant": variant,
                              "artifacts": arts}
    m.save(cfg.out)
    return arts
