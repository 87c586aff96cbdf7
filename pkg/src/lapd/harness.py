"""Experiment runner behind the ``lapd`` command line.

Each experiment reads a flat key/value configuration, writes one CSV whose
first line is a ``#`` comment with the resolved configuration, prints one
summary line per configuration point and reports named pass/fail checks.
"""

from __future__ import annotations

import configparser
import io
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .data import load_csv_dataset, synthetic_ridge_data
from .diagnostics import (
    NEVER,
    iterations_to_epsilon,
    minibatch_variance,
    pooled_weighted_samples,
    theorem_bound,
    theorem_horizon,
    weighted_chain_estimates,
)
from .model import PriorSpec, build_ridge_separable, find_mode, norm_likelihood, sg_variance_at_mode
from .oracle import empirical_w2_1d, posterior_moments, quadrature_posterior_1d, run_moment_recursion
from .sampler import Recorder, run_ensemble, run_lapd, run_sgld
from .schedule import StepSchedule

__all__ = ["EXPERIMENTS", "ExperimentResult", "resolve_config", "run_experiment", "emit_config_template", "write_csv"]


@dataclass(frozen=True)
class Key:
    default: object
    kind: type
    help: str


def _ints(s):
    return tuple(int(x) for x in str(s).split(",") if x.strip())


_COMMON = {
    "seed": Key(0, int, "base seed; data and every chain block derive their streams from it"),
    "m": Key(1.0, float, "strong convexity of the Gaussian prior g(w) = m/2 ||w||^2"),
    "beta": Key(1.0, float, "temperature"),
    "tau": Key(2.0, float, "schedule exponent; eta_tilde_t = tau / (tau/eta_tilde_0 + m t)"),
    "eta_tilde_0": Key("auto", str, "initial step; auto = 1/m (lipschitz) or min(1/(4L), 1/m) (smooth)"),
}

_RIDGE = {
    "d": Key(8, int, "parameter dimension"),
    "n": Key(16, int, "number of data"),
    "R_z": Key(1.0, float, "squared norm of every synthetic datum"),
    "noise": Key(0.5, float, "observation noise of the linear target model"),
    "targets": Key("linear", str, "synthetic target model: linear | noise"),
    "data": Key("", str, "optional CSV dataset (row = datum, last column = target); overrides synthetic data"),
}

SCHEMAS = {
    "gaussian-rate": {
        **_COMMON,
        **_RIDGE,
        "mode": Key("smooth", str, "schedule mode: smooth | lipschitz"),
        "T": Key(10000, int, "horizon of the exact moment recursion"),
        "early": Key(250, int, "horizon compared against 'late' for the 1/T decay check"),
        "late": Key(4000, int, "later horizon of the decay check"),
    },
    "dim-sweep": {
        **_COMMON,
        **{k: v for k, v in _RIDGE.items() if k not in ("d", "data")},
        "targets": Key("noise", str, "synthetic target model: linear | noise"),
        "mode": Key("smooth", str, "schedule mode: smooth | lipschitz"),
        "dims": Key("4,64,256", _ints, "comma-separated dimensions"),
        "epsilon": Key(0.01, float, "target weighted KL"),
        "T": Key(20000, int, "horizon searched for the first T with weighted KL <= epsilon"),
    },
    "lipschitz-1d": {
        **_COMMON,
        "G": Key(1.0, float, "slope of f(w) = G |w - c|"),
        "c": Key(1.0, float, "kink location of f"),
        "mode": Key("lipschitz", str, "schedule mode"),
        "T": Key(4000, int, "horizon of the sampler run"),
        "horizons": Key("250,1000,4000", _ints, "horizons at which W2 to the posterior is estimated"),
        "chains": Key(2000, int, "independent chains (samples are stored)"),
        "pool": Key(100000, int, "pooled draws from the weighted-average law"),
        "grid_points": Key(20001, int, "quadrature grid points for the posterior"),
    },
    "sgld-batch": {
        **_COMMON,
        **_RIDGE,
        "d": Key(32, int, "parameter dimension"),
        "n": Key(256, int, "number of data"),
        "beta": Key("auto", str, "temperature; auto = 1/n"),
        "mode": Key("smooth", str, "schedule mode"),
        "batch_sizes": Key("1,8,64", _ints, "comma-separated minibatch sizes"),
        "T": Key(5000, int, "horizon"),
        "chains": Key(1000, int, "independent chains per batch size"),
        "variance_draws": Key(20000, int, "minibatches drawn to measure the gradient variance at the mode"),
    },
    "oracle-vs-sampler": {
        **_COMMON,
        **_RIDGE,
        "d": Key(2, int, "parameter dimension"),
        "mode": Key("smooth", str, "schedule mode"),
        "times": Key("1,10,100", _ints, "iterations at which moments are compared"),
        "chains": Key(100000, int, "independent chains"),
        "bootstrap": Key(200, int, "bootstrap resamples for covariance standard errors"),
    },
}

COLUMNS = {
    "gaussian-rate": ("t", "eta_tilde", "kl_oracle", "weighted_kl_cum"),
    "dim-sweep": ("d", "T_star", "bound_T"),
    "lipschitz-1d": ("T", "w2_sq", "kl_bound"),
    "sgld-batch": ("batch_size", "max_abs_z_mean", "sg_var", "sg_var_pred", "sg_var_ratio"),
    "oracle-vs-sampler": ("t", "stat", "i", "j", "empirical", "oracle", "se", "z"),
}


@dataclass
class ExperimentResult:
    name: str
    config: dict
    columns: tuple
    rows: list = field(default_factory=list)
    summaries: list = field(default_factory=list)
    checks: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(ok for _, ok, _ in self.checks)


def _parse(value, key: Key):
    if isinstance(value, str) and key.kind is not str:
        value = value.strip()
    if key.kind is _ints:
        return _ints(value)
    if key.kind is int:
        return int(float(value)) if isinstance(value, str) and "e" in value.lower() else int(value)
    return key.kind(value)


def resolve_config(name: str, config_path=None, overrides=()) -> dict:
    """Defaults, then the config file, then ``KEY=VALUE`` overrides."""
    if name is None and config_path is None:
        raise ValueError("need an experiment name or a config file")
    raw = {}
    if config_path is not None:
        parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
        parser.optionxform = str
        try:
            parser.read_string(Path(config_path).read_text())
        except configparser.Error as exc:
            raise ValueError(f"malformed config {config_path}: {exc}") from exc
        sections = parser.sections()
        if len(sections) != 1:
            raise ValueError(f"config must contain exactly one [experiment] header, found {sections}")
        section = sections[0]
        if name is not None and name != section:
            raise ValueError(f"--experiment {name} conflicts with config header [{section}]")
        name = section
        raw.update(parser[section])
    if name not in SCHEMAS:
        raise ValueError(f"unknown experiment {name!r}; valid: {', '.join(SCHEMAS)}")
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not KEY=VALUE")
        k, v = item.split("=", 1)
        raw[k.strip()] = v.strip()
    schema = SCHEMAS[name]
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise ValueError(f"unknown keys for {name}: {unknown}")
    cfg = {"experiment": name}
    for k, key in schema.items():
        try:
            cfg[k] = _parse(raw.get(k, key.default), key)
        except (TypeError, ValueError) as exc:
            raise ValueError(f"bad value for {k}: {raw.get(k)!r}") from exc
    return cfg


def emit_config_template(name: str) -> str:
    """Commented ``key = value`` template with every tunable and the CSV schema."""
    if name not in SCHEMAS:
        raise ValueError(f"unknown experiment {name!r}; valid: {', '.join(SCHEMAS)}")
    out = io.StringIO()
    out.write(f"# lapd {__version__} configuration template\n")
    out.write(f"# CSV columns: {','.join(COLUMNS[name])}\n")
    out.write(f"[{name}]\n")
    for k, key in SCHEMAS[name].items():
        out.write(f"# {key.help}\n{k} = {key.default}\n")
    return out.getvalue()


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return repr(x)
    return str(x)


def write_csv(result: ExperimentResult, path: Path) -> None:
    cfg = " ".join(f"{k}={_fmt(v) if not isinstance(v, tuple) else ','.join(map(str, v))}" for k, v in result.config.items())
    lines = [f"# lapd {__version__} {cfg}", ",".join(result.columns)]
    lines += [",".join(_fmt(v) for v in row) for row in result.rows]
    path.write_text("\n".join(lines) + "\n")


def _ridge_problem(cfg, rng, d=None):
    d = cfg["d"] if d is None else d
    if cfg.get("data"):
        Z, y = load_csv_dataset(cfg["data"])
    else:
        Z, y = synthetic_ridge_data(d, cfg["n"], cfg["R_z"], rng, noise=cfg["noise"], targets=cfg["targets"])
    return build_ridge_separable(Z, "half_squared", y)


def _schedule(cfg, L):
    e0 = cfg["eta_tilde_0"]
    e0 = None if str(e0) == "auto" else float(e0)
    if cfg["mode"] == "smooth":
        return StepSchedule(m=cfg["m"], tau=cfg["tau"], eta_tilde_0=e0, mode="smooth", L=L)
    return StepSchedule(m=cfg["m"], tau=cfg["tau"], eta_tilde_0=e0, mode="lipschitz")


def _data_rng(cfg):
    return np.random.default_rng(np.random.SeedSequence(cfg["seed"], spawn_key=(2**31,)))


def exp_gaussian_rate(cfg) -> ExperimentResult:
    res = ExperimentResult("gaussian-rate", cfg, COLUMNS["gaussian-rate"])
    lik, model = _ridge_problem(cfg, _data_rng(cfg))
    A, b = model.quadratic_form()
    L = model.L_ell
    sched = _schedule(cfg, L)
    trace = run_moment_recursion(A, b, cfg["m"], cfg["beta"], sched, cfg["T"])
    U0 = float(lik.value(np.zeros(lik.dim))) / cfg["beta"]
    for t in range(1, cfg["T"] + 1):
        res.rows.append((t, trace.eta_tilde[t - 1], trace.kl[t - 1], trace.weighted_kl[t - 1]))

    T_all = np.arange(1, cfg["T"] + 1)
    K = 8.0 * model.trace_H2 / cfg["m"] ** 2 + 2.0 * U0
    bound = (64.0 * L**2 / (cfg["m"] ** 2 * T_all * (T_all + 1)) + 16.0 / (T_all + 1)) * K
    violations = int(np.sum(trace.weighted_kl > bound))
    early, late = cfg["early"], cfg["late"]
    if late <= cfg["T"] and early <= cfg["T"]:
        ratio = trace.weighted_kl[late - 1] / trace.weighted_kl[early - 1]
        res.checks.append((f"weighted KL at T={late} <= 1/4 of T={early} (25% slack)", ratio <= 1.25 * 0.25, f"ratio={ratio:.4g}"))
    if cfg["mode"] == "smooth" and cfg["tau"] == 2 and str(cfg["eta_tilde_0"]) == "auto":
        res.checks.append(("smooth-case bound never violated", violations == 0, f"violations={violations}"))
    res.summaries.append(
        f"gaussian-rate d={lik.dim} T={cfg['T']} weighted_kl={trace.weighted_kl[-1]:.4g} "
        f"bound={bound[-1]:.4g} violations={violations}"
    )
    return res


def exp_dim_sweep(cfg) -> ExperimentResult:
    res = ExperimentResult("dim-sweep", cfg, COLUMNS["dim-sweep"])
    t_stars = []
    for d in cfg["dims"]:
        rng = np.random.default_rng(np.random.SeedSequence(cfg["seed"], spawn_key=(2**31, d)))
        lik, model = _ridge_problem(cfg, rng, d=d)
        A, b = model.quadratic_form()
        sched = _schedule(cfg, model.L_ell)
        trace = run_moment_recursion(A, b, cfg["m"], cfg["beta"], sched, cfg["T"])
        U0 = float(lik.value(np.zeros(d))) / cfg["beta"]
        t_star = iterations_to_epsilon(trace.weighted_kl, cfg["epsilon"])
        bound_T = theorem_horizon("smooth", cfg["epsilon"], trace_H2=model.trace_H2, U0=U0, m=cfg["m"])
        t_stars.append(t_star)
        res.rows.append((d, t_star, bound_T))
        res.summaries.append(f"dim-sweep d={d} T_star={t_star} bound_T={bound_T:.6g} trace_H2={model.trace_H2:.4g}")
    finite = [t for t in t_stars if t is not NEVER]
    spread = max(finite) / min(finite) if len(finite) == len(t_stars) else math.inf
    res.checks.append(("iterations-to-epsilon varies by a factor < 2 across d", spread < 2.0, f"spread={spread:.4g}"))
    return res


def exp_lipschitz_1d(cfg) -> ExperimentResult:
    res = ExperimentResult("lipschitz-1d", cfg, COLUMNS["lipschitz-1d"])
    G, c, m, beta = cfg["G"], cfg["c"], cfg["m"], cfg["beta"]
    lik = norm_likelihood([c], G)
    prior = PriorSpec.gaussian(m)
    sched = _schedule(cfg, None)
    T = cfg["T"]
    traj = run_ensemble(
        run_lapd, cfg["seed"], cfg["chains"], recorder=Recorder(store="full"),
        lik=lik, prior=prior, schedule=sched, T=T, beta=beta,
    )
    post = quadrature_posterior_1d(
        lambda x: G * np.abs(x - c), lambda x: 0.5 * m * x * x, beta, m=m, points=cfg["grid_points"]
    )
    pool_rng = np.random.default_rng(np.random.SeedSequence(cfg["seed"], spawn_key=(2**31 + 1,)))
    w2 = {}
    for h in cfg["horizons"]:
        if h > T:
            raise ValueError(f"horizon {h} exceeds T={T}")
        pool = pooled_weighted_samples(traj, sched.weights(h), cfg["pool"], pool_rng)
        w2[h] = empirical_w2_1d(pool[:, 0], post)
        kl_bound = theorem_bound("lipschitz", h, G=G, beta=beta, m=m)
        res.rows.append((h, w2[h], kl_bound))
        res.summaries.append(f"lipschitz-1d T={h} w2_sq={w2[h]:.4g} kl_bound={kl_bound:.4g}")
    hs = sorted(cfg["horizons"])
    if len(hs) >= 2:
        lo, hi = hs[0], hs[-1]
        limit = max(0.02, 0.25 * w2[lo] * 1.5)
        res.checks.append((f"W2^2 at T={hi} <= max(0.02, 1.5/4 x W2^2 at T={lo})", w2[hi] <= limit, f"w2={w2[hi]:.4g} limit={limit:.4g}"))
    return res


def exp_sgld_batch(cfg) -> ExperimentResult:
    res = ExperimentResult("sgld-batch", cfg, COLUMNS["sgld-batch"])
    lik, model = _ridge_problem(cfg, _data_rng(cfg))
    beta = 1.0 / lik.n if str(cfg["beta"]) == "auto" else float(cfg["beta"])
    m = cfg["m"]
    prior = PriorSpec.gaussian(m)
    sched = _schedule(cfg, model.L_ell)
    T = cfg["T"]
    A, b = model.quadratic_form()
    post = posterior_moments(A, b, m, beta)
    w_star = find_mode(lik, prior)
    b2 = sg_variance_at_mode(model, w_star).b2
    weights = sched.weights(T)
    var_rng = np.random.default_rng(np.random.SeedSequence(cfg["seed"], spawn_key=(2**31 + 2,)))
    ratios = []
    for k, S in enumerate(cfg["batch_sizes"]):
        traj = run_ensemble(
            run_sgld, cfg["seed"] + k, cfg["chains"], recorder=Recorder(store="moments", weights=weights),
            lik=lik, prior=prior, schedule=sched, T=T, beta=beta, batch_size=S,
        )
        est = weighted_chain_estimates(traj)
        mean = est.mean(axis=0)
        se = est.std(axis=0, ddof=1) / math.sqrt(traj.chains)
        z = float(np.max(np.abs(mean - post.mean) / se))
        var, _ = minibatch_variance(lik, w_star, S, cfg["variance_draws"], var_rng)
        pred = b2 / S
        ratios.append(var / pred)
        res.rows.append((S, z, var, pred, var / pred))
        res.summaries.append(f"sgld-batch S={S} max|z|={z:.3g} sg_var={var:.4g} pred={pred:.4g}")
        res.checks.append((f"batch {S}: weighted mean within 5 SE of posterior mean", z <= 5.0, f"max|z|={z:.3g}"))
    res.checks.append(
        ("stochastic-gradient variance scales as b^2/|S| within 10%", all(abs(r - 1.0) <= 0.10 for r in ratios),
         "ratios=" + ",".join(f"{r:.4g}" for r in ratios))
    )
    return res


def _bootstrap_cov_se(x, reps, rng):
    n = x.shape[0]
    stats = np.empty((reps, x.shape[1], x.shape[1]))
    for r in range(reps):
        xb = x[rng.integers(0, n, size=n)]
        stats[r] = np.cov(xb, rowvar=False)
    return stats.std(axis=0, ddof=1)


def exp_oracle_vs_sampler(cfg) -> ExperimentResult:
    res = ExperimentResult("oracle-vs-sampler", cfg, COLUMNS["oracle-vs-sampler"])
    lik, model = _ridge_problem(cfg, _data_rng(cfg))
    m, beta = cfg["m"], cfg["beta"]
    prior = PriorSpec.gaussian(m)
    sched = _schedule(cfg, model.L_ell)
    times = tuple(sorted(cfg["times"]))
    T = times[-1]
    A, b = model.quadratic_form()
    trace = run_moment_recursion(A, b, m, beta, sched, T)
    traj = run_ensemble(
        run_lapd, cfg["seed"], cfg["chains"], recorder=Recorder(store="moments", keep_times=times),
        lik=lik, prior=prior, schedule=sched, T=T, beta=beta,
    )
    boot_rng = np.random.default_rng(np.random.SeedSequence(cfg["seed"], spawn_key=(2**31 + 3,)))
    worst = 0.0
    for t in times:
        x = traj.at(t)
        exact = trace.moments(t)
        mean = x.mean(axis=0)
        se = x.std(axis=0, ddof=1) / math.sqrt(x.shape[0])
        for i in range(lik.dim):
            z = (mean[i] - exact.mean[i]) / se[i]
            worst = max(worst, abs(z))
            res.rows.append((t, "mean", i, "", mean[i], exact.mean[i], se[i], z))
        cov = np.cov(x, rowvar=False).reshape(lik.dim, lik.dim)
        cse = _bootstrap_cov_se(x, cfg["bootstrap"], boot_rng).reshape(lik.dim, lik.dim)
        oc = exact.cov_matrix()
        for i in range(lik.dim):
            for j in range(i, lik.dim):
                z = (cov[i, j] - oc[i, j]) / cse[i, j]
                worst = max(worst, abs(z))
                res.rows.append((t, "cov", i, j, cov[i, j], oc[i, j], cse[i, j], z))
        res.summaries.append(f"oracle-vs-sampler t={t} chains={traj.chains} max|z| so far={worst:.3g}")
    res.checks.append(("sampler moments within 5 SE of the exact recursion", worst <= 5.0, f"max|z|={worst:.3g}"))
    return res


EXPERIMENTS: dict[str, Callable[[dict], ExperimentResult]] = {
    "gaussian-rate": exp_gaussian_rate,
    "dim-sweep": exp_dim_sweep,
    "lipschitz-1d": exp_lipschitz_1d,
    "sgld-batch": exp_sgld_batch,
    "oracle-vs-sampler": exp_oracle_vs_sampler,
}


def run_experiment(name=None, config_path=None, overrides=(), out_dir=".", echo=print, chains=None) -> ExperimentResult:
    """Resolve the configuration, run the experiment and write ``<out>/<name>.csv``.

    ``chains`` overrides the chain count of sampling experiments and is
    ignored by the purely analytic ones.
    """
    cfg = resolve_config(name, config_path, overrides)
    if chains is not None and "chains" in cfg:
        if chains < 1:
            raise ValueError("--chains must be >= 1")
        cfg["chains"] = int(chains)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ValueError(f"cannot create output directory {out}: {exc}") from exc
    t0 = time.perf_counter()
    result = EXPERIMENTS[cfg["experiment"]](cfg)
    path = out / f"{cfg['experiment']}.csv"
    try:
        write_csv(result, path)
    except OSError as exc:
        raise ValueError(f"cannot write {path}: {exc}") from exc
    for line in result.summaries:
        echo(line)
    for label, ok, detail in result.checks:
        echo(f"{'PASS' if ok else 'FAIL'} {label} ({detail})")
    echo(f"wrote {path} in {time.perf_counter() - t0:.1f}s")
    return result
