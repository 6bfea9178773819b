"""``somnus`` command line: simulate, fit, diagnose, cluster and analyse.

Every artifact-writing subcommand also writes a run manifest holding the
resolved configuration, SHA-256 digests of inputs and outputs, seeds and
timings. ``somnus --from-manifest FILE`` replays a run from its manifest.

Exit codes: 0 success, 2 bad usage, 3 invalid input, 4 numerical failure.
Failures print a JSON object with an ``error`` key to stderr.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import __version__

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


class NumericalFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# -- helpers ------------------------------------------------------------------------

def _threads(args) -> int:
    t = args.threads if getattr(args, "threads", None) else os.environ.get("SOMNUS_THREADS")
    try:
        t = int(t) if t else 1
    except ValueError:
        raise UsageError(f"SOMNUS_THREADS must be an integer, got {t!r}") from None
    if t < 1:
        raise UsageError("--threads must be at least 1")
    return t


def _require_seed(seed, what="--seed"):
    if seed is None:
        raise UsageError(f"{what} is required (runs are never seeded from the clock)")
    return int(seed)


def _load_json(path):
    with open(path) as fh:
        return json.load(fh)


def _ints(text: str) -> list[int]:
    out = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    return out


def _names(text):
    return [s.strip() for s in text.split(",") if s.strip()] if text else []


def _read_records(args, exclusions=None):
    from .data import read_records

    return read_records(args.epochs, args.events, exclusions)


def _stats_from_args(args):
    """Sufficient statistics from --stats or from --epochs/--events."""
    from .data import ExclusionError, SufficientStats, derive_sufficient_stats

    if getattr(args, "stats", None):
        obj = _load_json(args.stats)
        return SufficientStats.from_json(obj.get("stats", obj)), [args.stats]
    if not getattr(args, "epochs", None):
        raise UsageError("give --stats or --epochs (with --events)")
    excl: list[ExclusionError] = []
    records = _read_records(args, excl)
    for e in excl:
        print(f"excluded {e.patient_id}: {e.reason}", file=sys.stderr)
    return derive_sufficient_stats(records), [p for p in (args.epochs, args.events) if p]


def _sampler_config(args, seed):
    from .sampler import SamplerConfig

    base = _load_json(args.sampler) if getattr(args, "sampler", None) else {}
    over = {"n_chains": args.chains, "n_warmup": args.warmup, "n_samples": args.samples,
            "max_tree_depth": args.max_depth, "target_accept": args.target_accept}
    base.update({k: v for k, v in over.items() if v is not None})
    if seed is None:
        seed = base.get("rng_seed")
    base["rng_seed"] = _require_seed(seed)
    base["n_workers"] = min(_threads(args), int(base.get("n_chains", 4)))
    return SamplerConfig.from_json(base)


def _priors(args):
    from .model import PriorSpec

    return PriorSpec.load(args.priors) if getattr(args, "priors", None) else PriorSpec()


def _add_sampler_flags(p):
    p.add_argument("--priors", help="prior specification JSON")
    p.add_argument("--sampler", help="sampler configuration JSON (flags override its values)")
    p.add_argument("--seed", type=int, help="sampler RNG seed (required unless set in --sampler)")
    p.add_argument("--chains", type=int, help="number of chains")
    p.add_argument("--warmup", type=int, help="warmup iterations per chain")
    p.add_argument("--samples", type=int, help="retained draws per chain")
    p.add_argument("--max-depth", type=int, dest="max_depth", help="maximum tree depth")
    p.add_argument("--target-accept", type=float, dest="target_accept", help="dual-averaging target")


def _add_data_flags(p, stats=True):
    p.add_argument("--epochs", help="epochs.csv")
    p.add_argument("--events", help="events.csv")
    if stats:
        p.add_argument("--stats", help="sufficient statistics JSON from `somnus stats`")


def _sibling(path, suffix) -> Path:
    p = Path(path)
    return p.with_name(p.stem + suffix)


# -- subcommands -------------------------------------------------------------------------
# Each returns (inputs, outputs, seeds, exit_code).

def cmd_simulate(args):
    from .data import write_records
    from .io import write_csv, write_json
    from .simulate import ScenarioConfig, generate_outcomes, generate_scenario

    base = _load_json(args.config) if args.config else {}
    over = {"scenario": args.scenario, "n_patients": args.n, "n_epochs": args.epochs,
            "n_factors": args.factors, "rng_seed": args.seed}
    base.update({k: v for k, v in over.items() if v is not None})
    _require_seed(base.get("rng_seed"))
    cfg = ScenarioConfig.from_json(base)
    records, truth = generate_scenario(cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = [out / "epochs.csv", out / "events.csv", out / "truth.json"]
    write_records(records, files[0], files[1])
    tj = truth.to_json()
    tj["config"] = cfg.to_json()
    write_json(files[2], tj)
    if truth.assignments is not None:
        rows = [{"patient_id": pid, "outcome=numeric": repr(float(y))} for pid, y in generate_outcomes(truth, cfg)]
        files.append(out / "outcomes.csv")
        write_csv(files[-1], rows, ["patient_id", "outcome=numeric"])
    inputs = [args.config] if args.config else []
    return inputs, files, {"scenario": cfg.rng_seed}, EXIT_OK


def cmd_stats(args):
    from .data import ExclusionError, derive_sufficient_stats
    from .io import write_json

    if not args.epochs:
        raise UsageError("--epochs is required")
    excl: list[ExclusionError] = []
    records = _read_records(args, excl)
    stats = derive_sufficient_stats(records)
    obj = {"stats": stats.to_json(),
           "excluded": [{"patient_id": e.patient_id, "reason": e.reason} for e in excl]}
    write_json(args.out, obj)
    return [p for p in (args.epochs, args.events) if p], [args.out], {}, EXIT_OK


def cmd_fit(args):
    from .io import save_draws
    from .sampler import sample

    stats, inputs = _stats_from_args(args)
    cfg = _sampler_config(args, args.seed)
    priors = _priors(args)
    if args.priors:
        inputs.append(args.priors)
    if args.sampler:
        inputs.append(args.sampler)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        draws = sample(stats, priors, cfg, n_factors=args.factors)
    files = save_draws(draws, args.out, fmt=args.format,
                       extra={"priors": priors.to_json(), "sampler": cfg.__dict__ | {"n_workers": 1}})
    code = EXIT_OK
    if draws.warnings and not args.allow_divergences:
        print(json.dumps({"error": {"type": "FitWarning", "message": "; ".join(draws.warnings),
                                    "exit_code": EXIT_NUMERIC}}), file=sys.stderr)
        code = EXIT_NUMERIC
    return inputs, files, {"sampler": cfg.rng_seed}, code


def _load_draws(args):
    from .io import draws_files, load_draws

    return load_draws(args.draws), [str(p) for p in draws_files(args.draws)]


def cmd_diagnose(args):
    from .diagnostics import summarize
    from .io import write_csv, write_json
    from .model import THETA_NAMES

    draws, inputs = _load_draws(args)
    names = list(draws.fixed_effects()) + [f"omega2[{c}]" for c in THETA_NAMES]
    names += [f"Sigma[{c},{c}]" for c in THETA_NAMES]
    if args.all:
        names += [f"theta[{p},{c}]" for p in draws.patient_ids for c in THETA_NAMES]
    if draws.n_samples < 4:
        raise ValueError("diagnostics need at least 4 draws per chain")
    table = summarize(draws, names)
    div = draws.sample_stats.get("divergent")
    acc = draws.sample_stats.get("accept_stat")
    report = {
        "n_chains": draws.n_chains,
        "n_samples": draws.n_samples,
        "divergences": {
            "per_chain": [int(x) for x in np.sum(div, axis=1)] if div is not None else None,
            "total": int(np.sum(div)) if div is not None else None,
            "rate": draws.divergence_rate(),
        },
        "mean_accept_stat": [float(x) for x in np.mean(acc, axis=1)] if acc is not None else None,
        "step_size": None if draws.step_size is None else [float(x) for x in np.ravel(draws.step_size)],
        "max_rhat": max((v["rhat"] for v in table.values() if v["rhat"] is not None), default=None),
        "min_ess": min((v["ess"] for v in table.values()), default=None),
        "parameters": table,
    }
    write_json(args.out, report)
    csv_path = _sibling(args.out, ".csv")
    write_csv(csv_path, [{"parameter": k} | v for k, v in table.items()],
              ["parameter", "mean", "sd", "ess", "rhat", "degenerate"])
    return inputs, [args.out, csv_path], {}, EXIT_OK


def cmd_cluster(args):
    from .clustering import (concatenated_kmeans, kmeans_sweep, per_sample_kmeans_coclustering,
                             posterior_mean_kmeans)
    from .io import write_csv, write_json
    from .model import THETA_NAMES

    seed = _require_seed(args.seed)
    draws, inputs = _load_draws(args)
    if args.method == "posterior_mean":
        sol = posterior_mean_kmeans(draws, args.k, args.restarts, seed)
    else:
        sol = concatenated_kmeans(draws, args.k, args.restarts, seed, cap=args.concat_cap,
                                  override=args.override_cap)
    obj = sol.to_json(THETA_NAMES, draws.patient_ids)
    obj["restarts"] = args.restarts
    obj["seed"] = seed
    n = len(draws.patient_ids)
    sweep_k = [k for k in _ints(args.sweep) if 1 <= k <= n] if args.sweep else []
    obj["k_sweep"] = kmeans_sweep(draws, sweep_k, args.restarts, seed)
    outputs = [Path(args.out)]
    if args.coclustering:
        co = per_sample_kmeans_coclustering(draws, args.k, seed, reference=sol.assignments,
                                            restarts=args.coclustering_restarts)
        obj["coclustering"] = {"mean_ari_to_point_estimate": co.mean_ari,
                               "ari_quantiles": dict(zip(("q025", "q50", "q975"),
                                                         np.quantile(co.ari_to_reference, [0.025, 0.5, 0.975])))}
        cpath = _sibling(args.out, "_coclustering.csv")
        rows = [{"patient_a": a, "patient_b": b, "probability": float(co.matrix[i, j])}
                for i, a in enumerate(draws.patient_ids) for j, b in enumerate(draws.patient_ids) if j > i]
        write_csv(cpath, rows, ["patient_a", "patient_b", "probability"])
        outputs.append(cpath)
    write_json(args.out, obj)
    tidy = _sibling(args.out, ".csv")
    write_csv(tidy, [{"patient_id": p["patient_id"], "cluster": p["cluster"], "boundary": p["boundary"],
                      **{f"p{k + 1}": v for k, v in enumerate(p["assign_probs"])}} for p in obj["patients"]])
    outputs.append(tidy)
    return inputs, outputs, {"cluster": seed}, EXIT_OK


def cmd_ppc(args):
    from .io import write_csv, write_json
    from .ppc import posterior_predictive

    seed = _require_seed(args.seed)
    draws, inputs = _load_draws(args)
    if not args.epochs:
        raise UsageError("--epochs is required")
    records = _read_records(args)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rep = posterior_predictive(draws, records, args.sims_per_draw, args.max_draws, seed)
    write_json(args.out, rep.to_json())
    tidy = _sibling(args.out, ".csv")
    write_csv(tidy, rep.rows())
    inputs += [p for p in (args.epochs, args.events) if p]
    return inputs, [args.out, tidy], {"ppc": seed}, EXIT_OK


def cmd_scree(args):
    from .factors import diagonal_prefit_scree, scree_spectrum
    from .io import write_csv, write_json

    seeds = {}
    if args.draws:
        draws, inputs = _load_draws(args)
        scree = scree_spectrum(draws.theta_draws().mean(axis=0))
        source = "existing fit"
    else:
        stats, inputs = _stats_from_args(args)
        cfg = _sampler_config(args, args.seed)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            scree = diagonal_prefit_scree(stats, _priors(args), cfg)
        seeds["sampler"] = cfg.rng_seed
        source = "diagonal-covariance pre-fit"
    write_json(args.out, {"source": source, "eigenvalues": scree.eigenvalues, "components": scree.rows()})
    tidy = _sibling(args.out, ".csv")
    write_csv(tidy, scree.rows())
    return inputs, [args.out, tidy], seeds, EXIT_OK


def cmd_align(args):
    from .factors import align_factors
    from .io import write_csv, write_json

    draws, inputs = _load_draws(args)
    if draws.layout.n_factors < 1:
        raise ValueError("the fit has no factor loadings to align")
    al = align_factors(draws)
    write_json(args.out, al.to_json())
    tidy = _sibling(args.out, ".csv")
    write_csv(tidy, al.rows())
    return inputs, [args.out, tidy], {}, EXIT_OK


def cmd_analyze(args):
    from .clustering import ClusterSolution
    from .data import sleep_summaries
    from .io import write_csv, write_json
    from .summaries import (AnalysisError, Covariates, cluster_weighted_summary, ols_regress,
                            pca_projection, regress_on_clusters)

    cl = _load_json(args.clusters)
    inputs = [args.clusters]
    pids = [p["patient_id"] for p in cl["patients"]]
    labels = np.array([p["cluster"] - 1 for p in cl["patients"]])
    probs = np.array([p["assign_probs"] for p in cl["patients"]], float)
    sol = ClusterSolution(cl["K"], np.array([[c[k] for k in cl["columns"]] for c in cl["centers"]]),
                          labels, probs, cl.get("expected_loss", math.nan))
    cov = Covariates([], {})
    if args.covariates:
        cov = Covariates.read(args.covariates)
        inputs.append(args.covariates)
    if args.epochs:
        records = {r.patient_id: r for r in _read_records(args)}
        inputs += [p for p in (args.epochs, args.events) if p]
        names = ("ahi", "ahi_rem", "ahi_nrem", "hours_rem", "hours_nrem")
        derived = {k: [] for k in names}
        for p in pids:
            s = sleep_summaries(records[p]) if p in records else None
            for k in names:
                derived[k].append(repr(float(s[k])) if s is not None and math.isfinite(s[k]) else "")
        base_ids = cov.patient_ids or pids
        for k in names:
            if k in cov.columns:
                continue
            lookup = dict(zip(pids, derived[k]))
            cov.columns[k] = ("numeric", [lookup.get(p, "") for p in base_ids])
        cov.patient_ids = list(base_ids)
    weights = probs if args.mode == "probability" else np.eye(sol.K)[labels]
    summarize = _names(args.summarize) or [n for n, (kind, _) in cov.columns.items() if kind == "numeric"]
    summaries, sum_rows = {}, []
    for name in summarize:
        table = cluster_weighted_summary(cov.values(name, pids), weights)
        summaries[name] = table
        sum_rows += [{"variable": name} | r for r in table]
    report = {"K": sol.K, "weight_mode": args.mode, "reference_cluster": args.reference,
              "summaries": summaries}
    outputs = []
    if args.outcome:
        y = cov.values(args.outcome, pids)
        adjust = _names(args.adjust)
        Xc, cnames = cov.design(adjust, pids) if adjust else (None, [])
        if args.regress_on == "clusters":
            fit = regress_on_clusters(y, sol, Xc, cnames, args.reference, args.mode)
        else:
            x = cov.values(args.regress_on, pids)[:, None]
            X = np.hstack([np.ones((len(pids), 1)), x] + ([Xc] if Xc is not None else []))
            names = ["intercept", args.regress_on] + cnames
            ok = np.isfinite(y) & np.all(np.isfinite(X), axis=1)
            if not ok.any():
                raise AnalysisError("no complete cases for the regression")
            fit = ols_regress(y[ok], X[ok], names, weight_mode="none")
        report["regression"] = {"outcome": args.outcome, "predictor": args.regress_on} | fit.to_json()
        rpath = _sibling(args.out, "_regression.csv")
        write_csv(rpath, fit.rows())
        outputs.append(rpath)
    if args.draws:
        draws, dfiles = _load_draws(args)
        inputs += dfiles
        idx = [draws.patient_ids.index(p) for p in pids]
        pca = pca_projection(draws.theta_draws().mean(axis=0)[idx])
        report["pca"] = {"columns": pca.columns, "loading": pca.loading, "explained": pca.explained}
        ppath = _sibling(args.out, "_pca.csv")
        write_csv(ppath, [{"patient_id": p, "cluster": int(c) + 1, "pc1": float(s)}
                          for p, c, s in zip(pids, labels, pca.scores)])
        outputs.append(ppath)
    write_json(args.out, report)
    spath = _sibling(args.out, "_summaries.csv")
    write_csv(spath, sum_rows, ["variable", "cluster", "present", "weight", "mean", "sd", "n"])
    return inputs, [args.out, spath] + outputs, {}, EXIT_OK


def _eval_sampler(args):
    from .sampler import SamplerConfig

    return SamplerConfig(n_chains=args.chains, n_warmup=args.warmup, n_samples=args.samples,
                         n_workers=min(_threads(args), args.chains))


def cmd_eval_table1(args):
    from .evaluation import table1
    from .io import write_csv, write_json

    seed = _require_seed(args.seed)
    res = table1(args.scenario, args.reps, args.n, args.epochs, _eval_sampler(args), seed,
                 n_factors=args.factors)
    write_json(args.out, res)
    tidy = _sibling(args.out, ".csv")
    write_csv(tidy, [{k: v for k, v in r.items() if k != "seconds"} for r in res["rows"]])
    for r in res["rows"]:
        r.pop("seconds", None)
    write_json(args.out, res)
    return [], [args.out, tidy], {"base": seed}, EXIT_OK


def cmd_eval_table2(args):
    from .evaluation import table2
    from .io import write_csv, write_json

    seed = _require_seed(args.seed)
    res = table2(args.reps, args.n, args.epochs, _eval_sampler(args), seed, args.k, args.restarts,
                 n_factors=args.factors)
    for r in res["rows"]:
        r.pop("seconds", None)
    write_json(args.out, res)
    tidy = _sibling(args.out, ".csv")
    write_csv(tidy, res["rows"])
    return [], [args.out, tidy], {"base": seed}, EXIT_OK


# -- parser ----------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--threads", type=int, help="cap on worker processes (env SOMNUS_THREADS)")
    common.add_argument("--manifest", help="run manifest path (default: next to the main output)")

    parser = _Parser(prog="somnus", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"somnus {__version__}")
    parser.add_argument("--from-manifest", dest="from_manifest", metavar="FILE",
                        help="replay the run recorded in a manifest")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("simulate", parents=[common], help="simulate a synthetic scenario")
    p.add_argument("--config", help="scenario configuration JSON (flags override its values)")
    p.add_argument("--scenario", choices=("S1", "S2", "S3"), help="simulation scenario")
    p.add_argument("--n", type=int, help="number of patients")
    p.add_argument("--epochs", type=int, help="epochs per night")
    p.add_argument("--factors", type=int, help="number of latent factors")
    p.add_argument("--seed", type=int, help="RNG seed (required unless set in --config)")
    p.add_argument("--out-dir", "--out", dest="out_dir", default=".", help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("stats", parents=[common], help="derive sufficient statistics")
    _add_data_flags(p, stats=False)
    p.add_argument("--out", default="stats.json", help="output JSON")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("fit", parents=[common], help="sample the posterior with NUTS")
    _add_data_flags(p)
    _add_sampler_flags(p)
    p.add_argument("--factors", type=int, default=3, help="number of latent factors k")
    p.add_argument("--format", choices=("npy", "csv"), default="npy", help="draws file format")
    p.add_argument("--allow-divergences", action="store_true",
                   help="exit 0 even if the divergence rate exceeds the limit")
    p.add_argument("--out", default="draws", help="output directory for draws")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("diagnose", parents=[common], help="ESS, R-hat and divergences")
    p.add_argument("--draws", required=True, help="draws directory from `somnus fit`")
    p.add_argument("--all", action="store_true", help="include every random effect")
    p.add_argument("--out", default="diagnostics.json", help="output JSON")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("cluster", parents=[common], help="Bayes-optimal K-means clustering")
    p.add_argument("--draws", required=True, help="draws directory")
    p.add_argument("--k", type=int, default=4, help="number of clusters")
    p.add_argument("--restarts", type=int, default=100, help="k-means++ restarts")
    p.add_argument("--seed", type=int, help="RNG seed (required)")
    p.add_argument("--method", choices=("posterior_mean", "concatenated"), default="posterior_mean",
                   help="K-means on posterior means, or on concatenated draws")
    p.add_argument("--sweep", default="1-8", help="K values for the loss sweep, e.g. 1-8 or 2,4,6")
    p.add_argument("--coclustering", action="store_true", help="also run per-draw K-means")
    p.add_argument("--coclustering-restarts", type=int, default=10, dest="coclustering_restarts",
                   help="k-means++ restarts per draw for the co-clustering run")
    p.add_argument("--concat-cap", type=int, default=50_000_000, dest="concat_cap",
                   help="maximum entries of the concatenated matrix")
    p.add_argument("--override-cap", action="store_true", dest="override_cap",
                   help="run concatenated K-means even above --concat-cap")
    p.add_argument("--out", default="clusters.json", help="output JSON")
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("ppc", parents=[common], help="posterior predictive checks")
    p.add_argument("--draws", required=True, help="draws directory")
    _add_data_flags(p, stats=False)
    p.add_argument("--seed", type=int, help="RNG seed (required)")
    p.add_argument("--sims-per-draw", type=int, default=1, dest="sims_per_draw",
                   help="replicate nights per retained draw")
    p.add_argument("--max-draws", type=int, dest="max_draws", help="thin draws to at most this many")
    p.add_argument("--out", default="ppc.json", help="output JSON")
    p.set_defaults(func=cmd_ppc)

    p = sub.add_parser("scree", parents=[common], help="eigenvalues of posterior-mean effects")
    _add_data_flags(p)
    _add_sampler_flags(p)
    p.add_argument("--draws", help="use an existing fit instead of a diagonal pre-fit")
    p.add_argument("--out", default="scree.json", help="output JSON")
    p.set_defaults(func=cmd_scree)

    p = sub.add_parser("align", parents=[common], help="align factor loadings across draws")
    p.add_argument("--draws", required=True, help="draws directory")
    p.add_argument("--out", default="align.json", help="output JSON")
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("analyze", parents=[common], help="cluster summaries and regressions")
    p.add_argument("--clusters", required=True, help="clusters.json from `somnus cluster`")
    p.add_argument("--covariates", help="CSV with patient_id,<name>=<numeric|categorical> columns")
    _add_data_flags(p, stats=False)
    p.add_argument("--draws", help="draws directory, for the PCA projection")
    p.add_argument("--outcome", help="numeric covariate to regress")
    p.add_argument("--regress-on", default="clusters", dest="regress_on",
                   help="'clusters' or a numeric covariate such as ahi")
    p.add_argument("--adjust", help="comma-separated covariates to adjust for")
    p.add_argument("--summarize", help="comma-separated covariates to summarize (default: all numeric)")
    p.add_argument("--reference", type=int, default=1, help="reference cluster (1-based)")
    p.add_argument("--mode", choices=("hard", "probability"), default="hard",
                   help="cluster indicators from hard labels or assignment probabilities")
    p.add_argument("--out", default="analysis.json", help="output JSON")
    p.set_defaults(func=cmd_analyze)

    studies = (("eval-table1", cmd_eval_table1, "parameter-recovery study: MSE and interval coverage"),
               ("eval-table2", cmd_eval_table2, "clustering study: random effects vs summary statistics"))
    for name, func, blurb in studies:
        p = sub.add_parser(name, parents=[common], help=blurb)
        if name == "eval-table1":
            p.add_argument("--scenario", choices=("S1", "S2", "S3"), default="S1", help="simulation scenario")
        else:
            p.add_argument("--k", type=int, default=4, help="number of clusters")
            p.add_argument("--restarts", type=int, default=100, help="k-means++ restarts")
        p.add_argument("--reps", type=int, default=20, help="number of replications")
        p.add_argument("--n", type=int, default=150 if name == "eval-table1" else 200, help="patients per replication")
        p.add_argument("--epochs", type=int, default=400, help="epochs per night")
        p.add_argument("--chains", type=int, default=2, help="chains per fit")
        p.add_argument("--warmup", type=int, default=500, help="warmup iterations per chain")
        p.add_argument("--samples", type=int, default=500, help="retained draws per chain")
        p.add_argument("--factors", type=int, default=3, help="number of latent factors k")
        p.add_argument("--seed", type=int, help="base seed (required); replication r uses seed + r")
        p.add_argument("--out", default=f"{name.replace('-', '_')}.json", help="output JSON")
        p.set_defaults(func=func)
    return parser


def _manifest_path(args, outputs) -> Path:
    if args.manifest:
        return Path(args.manifest)
    first = Path(outputs[0]) if outputs else Path(".")
    where = first if first.is_dir() else first.parent
    return where / f"run_manifest_{args.command}.json"


def _error(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": {"type": kind, "message": message, "exit_code": code}}), file=sys.stderr)
    return code


def _classify(exc: BaseException) -> int:
    from .sampler import SamplerError

    if isinstance(exc, (SamplerError, FloatingPointError, NumericalFailure, np.linalg.LinAlgError)):
        return EXIT_NUMERIC
    return EXIT_INVALID


def run(argv=None) -> int:
    """Run one command; returns the exit code."""
    from .io import RunManifest, sha256_file

    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.from_manifest:
            man = RunManifest.read(args.from_manifest)
            for path, digest in man.inputs.items():
                if not Path(path).exists() or sha256_file(path) != digest:
                    return _error("ManifestMismatch", f"input {path} is missing or changed", EXIT_INVALID)
            return run(man.argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            raise UsageError("a subcommand is required")
    except UsageError as exc:
        return _error("UsageError", str(exc), EXIT_USAGE)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except Exception as exc:
        return _error(type(exc).__name__, str(exc), EXIT_INVALID)

    t0 = time.perf_counter()
    try:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=_threads(args)), np.errstate(all="ignore"):
            inputs, outputs, seeds, code = args.func(args)
    except UsageError as exc:
        return _error("UsageError", str(exc), EXIT_USAGE)
    except (KeyboardInterrupt, MemoryError):
        raise
    except Exception as exc:
        return _error(type(exc).__name__, str(exc), _classify(exc))
    outs = []
    for o in outputs:
        o = Path(o)
        outs.extend(sorted(q for q in o.iterdir() if q.is_file()) if o.is_dir() else [o])
    config = {k: v for k, v in vars(args).items() if k not in ("func", "from_manifest")}
    man = RunManifest(args.command, argv, config, seeds=seeds, version=__version__,
                      timings={"wall_seconds": round(time.perf_counter() - t0, 3)})
    man.add_inputs(dict.fromkeys(str(p) for p in inputs))
    mpath = _manifest_path(args, outputs)
    man.add_outputs(str(p) for p in outs if p.resolve() != mpath.resolve())
    mpath.parent.mkdir(parents=True, exist_ok=True)
    man.write(mpath)
    return code


def main(argv=None) -> int:
    return run(argv)


if __name__ == "__main__":
    sys.exit(main())
