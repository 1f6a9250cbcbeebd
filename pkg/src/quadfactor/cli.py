"""Command line front end.

Verbs: `fit` (estimate on a data file), `simulate` (synthetic benchmark
replicates), `select-k` (factor-count rule of thumb), `check` (fast
self-verification).  Options come from flags, a JSON config file, or both;
flags win.  Exit codes: 0 success, 2 configuration error, 3 data format
error, 4 sampler failure, 1 anything else (including failed checks).
"""

import argparse
import json
import os
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import report
from .checks import run_checks
from .dataio import ConfigError, DataFormatError, load_dataset
from .diagnostics import ess_info
from .distributions import PositiveDefiniteError
from .model import select_k
from .sampler import (
    OBSERVED,
    ChainDivergenceError,
    Dataset,
    Hyperparams,
    run_chain,
)
from .simulation import ScenarioSpec, generate_scenario, metrics, posterior_to_point

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DATA, EXIT_SAMPLER = 0, 1, 2, 3, 4

_HYPER_KEYS = ("dl_a", "prior_var_coef", "inv_gamma_shape", "inv_gamma_rate",
               "psi_ig_shape", "psi_ig_rate",
               "mala_step", "mala_target_accept", "n_iter", "n_burn",
               "inner_rounds", "psi_prop_sd", "covariate_interactions",
               "dl_step6_literal", "debug_validate")


@dataclass
class RunConfig:
    data_csv: str = None
    covariate_csv: str = None
    lod_csv: str = None
    output_dir: str = "quadfactor_out"
    response: str = None
    exposures: list = None
    covariates: list = None
    log10_columns: object = "all"   # "all", None, or a list of column names
    standardize: bool = True
    k: object = "auto"
    n_chains: int = 2
    level: float = 0.95
    higher_order: int = 2
    seed: int = 0
    workers: int = 1
    save_loadings: bool = False
    hyper: dict = field(default_factory=dict)

    def validate(self):
        if self.data_csv is None:
            raise ConfigError("no data file given (data_csv)")
        if self.response is None:
            raise ConfigError("no response column given (response)")
        if not 0 < self.level < 1:
            raise ConfigError(f"summary level must be in (0,1), got {self.level}")
        if self.higher_order not in (2, 3, 4):
            raise ConfigError(f"higher_order must be 2, 3 or 4, got {self.higher_order}")
        if self.k != "auto":
            try:
                self.k = int(self.k)
            except (TypeError, ValueError):
                raise ConfigError(f"k must be 'auto' or an integer, got {self.k!r}") from None
            if self.k < 1:
                raise ConfigError(f"k must be positive, got {self.k}")
        if self.n_chains < 1:
            raise ConfigError(f"n_chains must be at least 1, got {self.n_chains}")
        unknown = set(self.hyper) - set(_HYPER_KEYS)
        if unknown:
            raise ConfigError(f"unknown sampler settings {sorted(unknown)}")


@dataclass
class SimConfig:
    scenario: str = "factor"
    p: int = 10
    n_train: int = 500
    n_test: int = 100
    density: float = 0.05
    k_true: int = None
    noise_sd: float = 1.0
    replicates: int = 10
    output_dir: str = "quadfactor_sim"
    # "auto" applies the 90%-explained covariance rule per replicate; "p"
    # forces a factor per predictor
    k: object = "auto"
    level: float = 0.95
    seed: int = 0
    workers: int = 1
    hyper: dict = field(default_factory=dict)

    def validate(self):
        if self.replicates < 1:
            raise ConfigError(f"replicates must be at least 1, got {self.replicates}")
        if not 0 < self.level < 1:
            raise ConfigError(f"summary level must be in (0,1), got {self.level}")
        if self.k not in ("p", "auto"):
            try:
                self.k = int(self.k)
            except (TypeError, ValueError):
                raise ConfigError(f"k must be 'p', 'auto' or an integer, got {self.k!r}") from None
            if self.k < 1:
                raise ConfigError(f"k must be positive, got {self.k}")
        unknown = set(self.hyper) - set(_HYPER_KEYS)
        if unknown:
            raise ConfigError(f"unknown sampler settings {sorted(unknown)}")


@dataclass
class KSelection:
    k: int
    explained: float
    singular_values: np.ndarray


def pairwise_complete_correlation(dataset, names=None):
    """Correlation matrix over pairs of columns using rows where both are
    observed; a column with no spread among its observed values is an error."""
    X = np.where(dataset.status == OBSERVED, dataset.X_obs, np.nan)
    p = X.shape[1]
    names = names or [f"column {j}" for j in range(p)]
    finite = np.isfinite(X)
    for j in range(p):
        vals = X[finite[:, j], j]
        if vals.size < 2 or np.ptp(vals) == 0.0:
            raise DataFormatError(f"{names[j]} has zero observed variance")
    C = np.eye(p)
    for j in range(p):
        for l in range(j + 1, p):
            both = finite[:, j] & finite[:, l]
            if both.sum() < 3:
                warnings.warn(f"fewer than 3 complete pairs for ({names[j]}, {names[l]}); "
                              "treating correlation as 0")
                continue
            a, b = X[both, j], X[both, l]
            sa, sb = a.std(), b.std()
            if sa == 0.0 or sb == 0.0:
                continue
            r = float(np.mean((a - a.mean()) * (b - b.mean())) / (sa * sb))
            C[j, l] = C[l, j] = min(1.0, max(-1.0, r))
    return C


def auto_select_k(dataset, names=None):
    """Rule-of-thumb factor count: smallest k whose leading singular values
    of the exposure correlation matrix explain more than 90% of the total."""
    if dataset.p < 2:
        raise ConfigError("automatic factor selection needs at least 2 exposures")
    C = pairwise_complete_correlation(dataset, names)
    sv = np.linalg.svd(C, compute_uv=False)
    k = select_k(sv)
    explained = float(sv[:k].sum() / sv.sum())
    return KSelection(k=k, explained=explained, singular_values=sv)


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

def _chain_task(args):
    dataset, hyper, seed = args
    return run_chain(dataset, hyper, seed)


def _run_chains(dataset, hyper, seeds, workers):
    tasks = [(dataset, hyper, s) for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_chain_task, tasks))
    return [_chain_task(t) for t in tasks]


def _pooled_terms(chains, exposures, covariates):
    """(names, pooled draw matrix) for every summarized term: main effects,
    monomial interaction coefficients, covariate interactions."""
    p = len(exposures)
    q = len(covariates)
    pairs = report.interaction_pairs(p)
    beta = np.vstack([ch.beta for ch in chains])
    names = [f"main:{c}" for c in exposures]
    cols = [beta]
    omega_x = np.concatenate([ch.omega_x for ch in chains], axis=0)
    mono = np.empty((omega_x.shape[0], len(pairs)))
    for t, (j, l) in enumerate(pairs):
        mono[:, t] = omega_x[:, j, l] * (1.0 if j == l else 2.0)
    names += [f"int:{exposures[j]}:{exposures[l]}" for j, l in pairs]
    cols.append(mono)
    if q:
        covint = np.concatenate([ch.covint for ch in chains], axis=0).reshape(-1, p * q)
        names += [f"covint:{c}:{z}" for c in exposures for z in covariates]
        cols.append(covint)
    return names, np.hstack(cols)


def cmd_fit(cfg):
    cfg.validate()
    dataset, meta = load_dataset(
        cfg.data_csv, cfg.response, exposures=cfg.exposures,
        covariates=cfg.covariates, covariate_csv=cfg.covariate_csv,
        lod_csv=cfg.lod_csv, log10_columns=cfg.log10_columns,
        standardize=cfg.standardize)
    if cfg.k == "auto":
        sel = auto_select_k(dataset, meta.exposures)
        k = sel.k
        print(f"selected k={k} ({100 * sel.explained:.1f}% of singular value mass)")
    else:
        k = cfg.k
        if k > dataset.p:
            warnings.warn(f"k={k} exceeds the number of exposures p={dataset.p}")
    hyper = Hyperparams(k=k, **cfg.hyper)
    seeds = [cfg.seed + c for c in range(cfg.n_chains)]
    chains = _run_chains(dataset, hyper, seeds, cfg.workers)

    outdir = report.ensure_outdir(cfg.output_dir)
    report.write_draws(os.path.join(outdir, "draws.csv"), chains,
                       meta.exposures, meta.covariates)
    names, pooled = _pooled_terms(chains, meta.exposures, meta.covariates)
    rows = report.summarize(pooled, names, cfg.level)
    report.write_summary(os.path.join(outdir, "summary.csv"), rows, cfg.level)
    report.write_diagnostics(os.path.join(outdir, "diagnostics.csv"), chains,
                             meta.exposures)
    if cfg.save_loadings:
        report.write_loadings(os.path.join(outdir, "loadings_rotation_ambiguous.csv"),
                              chains, meta.exposures)
    report.figure_main_effects(rows, os.path.join(outdir, "main_effects.png"))
    report.figure_interactions(rows, meta.exposures,
                               os.path.join(outdir, "interactions.png"))
    echo = {"config": asdict(cfg), "resolved_k": k, "chain_seeds": seeds,
            "transforms": [asdict(t) for t in meta.transforms],
            "n_missing": meta.n_missing, "n_below_lod": meta.n_below_lod}
    with open(os.path.join(outdir, "config.json"), "w") as fh:
        json.dump(echo, fh, indent=2, sort_keys=True)
        fh.write("\n")

    kept = sum(ch.n_kept for ch in chains)
    selected = sum(1 for r in rows if r["point"] != 0.0)
    acc = np.mean([ch.accept_rate_eta for ch in chains])
    print(f"{len(chains)} chain(s), {kept} kept draws, score acceptance {acc:.2f}")
    print(f"{selected} of {len(rows)} terms selected at level {cfg.level}")
    print(f"results in {outdir}/")
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

# The response is standardized before fitting, so its noise variance can
# sit far below 1: soften the noise-variance prior rate (an IG(1/2, 1/2)
# rate term would otherwise dominate the posterior mean and widen every
# predictive interval) and start the score step small.  The constant
# covariate supplies the intercept, so its factor-interaction block is
# off.  The heavy inner cycling buys effective sample size for the
# induced main effects within the fixed 2000-iteration budget.
_SIM_HYPER_DEFAULTS = {"n_iter": 2000, "n_burn": 1000, "inner_rounds": 40,
                       "inv_gamma_rate": 0.05, "mala_step": 0.02,
                       "covariate_interactions": False}


def _replicate_task(args):
    """One benchmark replicate.

    The fit standardizes X and y by the training moments and supplies a
    constant covariate: centering y does not remove the quadratic's
    population mean, and the latent model has no free intercept of its own
    (the induced one vanishes as the predictor noise shrinks).  All reported
    quantities are transformed back to the generated scale, including the
    main-effect draws the ESS is computed from.
    """
    cfg, r = args
    spec = ScenarioSpec(p=cfg.p, n_train=cfg.n_train, n_test=cfg.n_test,
                        scenario=cfg.scenario, density=cfg.density,
                        seed=cfg.seed + 1000 * r, k_true=cfg.k_true,
                        noise_sd=cfg.noise_sd)
    X_train, y_train, X_test, y_test, truth = generate_scenario(spec)
    mx, sx = X_train.mean(axis=0), X_train.std(axis=0)
    my, sy = float(y_train.mean()), float(y_train.std())
    dataset = Dataset(y=(y_train - my) / sy, X_obs=(X_train - mx) / sx,
                      Z=np.ones((spec.n_train, 1)))
    if cfg.k == "p":
        k = cfg.p
    elif cfg.k == "auto":
        k = auto_select_k(dataset).k
    else:
        k = int(cfg.k)
    hyper = Hyperparams(k=k, **{**_SIM_HYPER_DEFAULTS, **cfg.hyper})
    chain = run_chain(dataset, hyper, seed=spec.seed + 7,
                      X_test=(X_test - mx) / sx,
                      Z_test=np.ones((spec.n_test, 1)))

    omega_x = sy * chain.omega_x / (sx[None, :, None] * sx[None, None, :])
    beta_lin = chain.beta + chain.covint[:, :, 0]
    beta = sy * beta_lin / sx - 2.0 * np.einsum("mjl,l->mj", omega_x, mx)
    predictive = my + sy * chain.predictive_draws

    beta_hat, omega_hat = posterior_to_point((beta, omega_x), cfg.level)
    rep = metrics((beta_hat, omega_hat, predictive.mean(axis=1)), truth, y_test)
    tail = 0.5 * (1.0 - cfg.level)
    lo = np.quantile(predictive, tail, axis=1)
    hi = np.quantile(predictive, 1.0 - tail, axis=1)
    coverage = float(np.mean((y_test >= lo) & (y_test <= hi)))
    min_ess = min(ess_info(beta[:, j])[0] for j in range(cfg.p))
    return rep, coverage, float(min_ess), k


def cmd_simulate(cfg):
    cfg.validate()
    tasks = [(cfg, r) for r in range(cfg.replicates)]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_replicate_task, tasks))
    else:
        results = [_replicate_task(t) for t in tasks]
    reports = [r[0] for r in results]
    coverage = [r[1] for r in results]
    min_ess = [r[2] for r in results]
    ks = [r[3] for r in results]

    outdir = report.ensure_outdir(cfg.output_dir)
    extra = {"replicate": list(range(cfg.replicates)),
             "k": ks,
             "coverage": [repr(float(c)) for c in coverage],
             "min_ess_main": [repr(float(e)) for e in min_ess]}
    report.write_metrics(os.path.join(outdir, "metrics.csv"), reports, extra)
    report.figure_metrics_box(reports, os.path.join(outdir, "metrics_boxplot.png"))
    with open(os.path.join(outdir, "config.json"), "w") as fh:
        json.dump({"config": asdict(cfg)}, fh, indent=2, sort_keys=True)
        fh.write("\n")

    agg = {k: float(np.mean([r.as_dict()[k] for r in reports]))
           for k in reports[0].as_dict()}
    print(f"{cfg.replicates} replicate(s), scenario={cfg.scenario}, p={cfg.p}")
    for k, v in agg.items():
        print(f"  mean {k}: {v:.4f}")
    print(f"  mean coverage at {cfg.level}: {float(np.mean(coverage)):.3f}")
    print(f"results in {outdir}/")
    return EXIT_OK


# ---------------------------------------------------------------------------
# select-k and check
# ---------------------------------------------------------------------------

def cmd_select_k(cfg, out_png=None):
    cfg.validate()
    dataset, meta = load_dataset(
        cfg.data_csv, cfg.response, exposures=cfg.exposures,
        covariates=cfg.covariates, covariate_csv=cfg.covariate_csv,
        lod_csv=cfg.lod_csv, log10_columns=cfg.log10_columns,
        standardize=cfg.standardize)
    sel = auto_select_k(dataset, meta.exposures)
    print(f"k = {sel.k} (leading {sel.k} singular values carry "
          f"{100 * sel.explained:.1f}% of the total)")
    frac = np.cumsum(sel.singular_values) / sel.singular_values.sum()
    for j, (v, f) in enumerate(zip(sel.singular_values, frac), start=1):
        marker = " <-- chosen" if j == sel.k else ""
        print(f"  {j:3d}  {v:10.4f}  {100 * f:6.2f}%{marker}")
    if out_png:
        report.figure_scree(sel.singular_values, sel.k, out_png)
        print(f"scree figure written to {out_png}")
    return EXIT_OK


def cmd_check():
    ok = run_checks()
    return EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------------------
# argument plumbing
# ---------------------------------------------------------------------------

def _csv_list(text):
    return [t.strip() for t in text.split(",") if t.strip()]


def _load_config_file(path, cls):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
    if isinstance(raw, dict) and "config" in raw and isinstance(raw["config"], dict):
        raw = raw["config"]
    known = set(cls.__dataclass_fields__)
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    return raw


def _build_run_config(args):
    base = _load_config_file(args.config, RunConfig) if args.config else {}
    cfg = RunConfig(**base)
    if args.data is not None:
        cfg.data_csv = args.data
    if args.response is not None:
        cfg.response = args.response
    if args.out is not None:
        cfg.output_dir = args.out
    if args.exposures is not None:
        cfg.exposures = _csv_list(args.exposures)
    if args.covariates is not None:
        cfg.covariates = _csv_list(args.covariates)
    if args.covariate_csv is not None:
        cfg.covariate_csv = args.covariate_csv
    if args.lod is not None:
        cfg.lod_csv = args.lod
    if args.k is not None:
        cfg.k = args.k
    if getattr(args, "chains", None) is not None:
        cfg.n_chains = args.chains
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "level", None) is not None:
        cfg.level = args.level
    if getattr(args, "workers", None) is not None:
        cfg.workers = args.workers
    if args.no_standardize:
        cfg.standardize = False
    if args.no_log10:
        cfg.log10_columns = None
    elif args.log10 is not None:
        cfg.log10_columns = _csv_list(args.log10)
    if getattr(args, "save_loadings", False):
        cfg.save_loadings = True
    for key, flag in (("n_iter", "iters"), ("n_burn", "burn")):
        v = getattr(args, flag, None)
        if v is not None:
            cfg.hyper[key] = v
    return cfg


def _add_data_flags(sp):
    sp.add_argument("--config", help="JSON config file; flags override it")
    sp.add_argument("--data", help="data CSV with a header row")
    sp.add_argument("--response", help="response column name")
    sp.add_argument("--exposures", help="comma-separated exposure columns (default: all others)")
    sp.add_argument("--covariates", help="comma-separated covariate columns in the data file")
    sp.add_argument("--covariate-csv", help="separate covariate CSV, aligned by row")
    sp.add_argument("--lod", help="CSV of (column, detection limit) pairs")
    sp.add_argument("--log10", help="columns to log10-transform (default all exposures)")
    sp.add_argument("--no-log10", action="store_true", help="disable the log10 transform")
    sp.add_argument("--no-standardize", action="store_true",
                    help="skip centering/scaling of exposures")
    sp.add_argument("--k", help="number of factors, or 'auto'")
    sp.add_argument("--seed", type=int, help="overrides the config seed")
    sp.add_argument("--out", help="output directory")


def build_parser():
    ap = argparse.ArgumentParser(
        prog="quadfactor",
        description="Bayesian quadratic regression on latent factors: main effects "
                    "and interactions among correlated exposures.")
    sub = ap.add_subparsers(dest="verb", required=True)

    fit = sub.add_parser("fit", help="fit the model to a data file")
    _add_data_flags(fit)
    fit.add_argument("--chains", type=int, help="number of chains (default 2)")
    fit.add_argument("--iters", type=int, help="iterations per chain")
    fit.add_argument("--burn", type=int, help="burn-in iterations")
    fit.add_argument("--level", type=float, help="credible level for summaries")
    fit.add_argument("--workers", type=int, help="parallel chain processes")
    fit.add_argument("--save-loadings", action="store_true",
                     help="persist posterior-mean loadings (rotation-ambiguous)")

    sim = sub.add_parser("simulate", help="run synthetic benchmark replicates")
    sim.add_argument("--config", help="JSON config file; flags override it")
    sim.add_argument("--scenario", choices=("factor", "linear", "independent"))
    sim.add_argument("--p", type=int)
    sim.add_argument("--n-train", type=int)
    sim.add_argument("--n-test", type=int)
    sim.add_argument("--density", type=float, help="0.05 (sparse) or 0.20 (dense)")
    sim.add_argument("--k-true", type=int)
    sim.add_argument("--noise-sd", type=float)
    sim.add_argument("--replicates", type=int)
    sim.add_argument("--k", help="number of factors for the fit, or 'auto'")
    sim.add_argument("--iters", type=int)
    sim.add_argument("--burn", type=int)
    sim.add_argument("--level", type=float)
    sim.add_argument("--seed", type=int, help="overrides the config seed")
    sim.add_argument("--workers", type=int)
    sim.add_argument("--out", help="output directory")

    sel = sub.add_parser("select-k", help="report the factor-count rule of thumb")
    _add_data_flags(sel)
    sel.add_argument("--scree", help="write a scree plot to this PNG path")

    sub.add_parser("check", help="run the fast self-verification suite")
    return ap


def _build_sim_config(args):
    base = _load_config_file(args.config, SimConfig) if args.config else {}
    cfg = SimConfig(**base)
    for attr, key in (("scenario", "scenario"), ("p", "p"), ("n_train", "n_train"),
                      ("n_test", "n_test"), ("density", "density"),
                      ("k_true", "k_true"), ("noise_sd", "noise_sd"),
                      ("replicates", "replicates"), ("k", "k"),
                      ("level", "level"), ("seed", "seed"),
                      ("workers", "workers")):
        v = getattr(args, attr, None)
        if v is not None:
            setattr(cfg, key, v)
    if args.out is not None:
        cfg.output_dir = args.out
    for key, flag in (("n_iter", "iters"), ("n_burn", "burn")):
        v = getattr(args, flag, None)
        if v is not None:
            cfg.hyper[key] = v
    return cfg


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.verb == "fit":
            return cmd_fit(_build_run_config(args))
        if args.verb == "simulate":
            return cmd_simulate(_build_sim_config(args))
        if args.verb == "select-k":
            return cmd_select_k(_build_run_config(args), out_png=args.scree)
        if args.verb == "check":
            return cmd_check()
        raise AssertionError(f"unhandled verb {args.verb}")
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataFormatError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (ChainDivergenceError, PositiveDefiniteError) as e:
        print(f"sampler error: {e}", file=sys.stderr)
        return EXIT_SAMPLER
    except ValueError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
