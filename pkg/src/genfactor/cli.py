"""Command line interface: simulate, fit, summarize, evaluate.

The four subcommands compose a pipeline around one run directory:

    genfactor simulate --scenario a --seed 1 --out run/
    genfactor fit --phenotypes run/Y.csv --kinship run/A.csv --out run/
    genfactor summarize --out run/
    genfactor evaluate --out run/

Exit codes: 0 success, 2 configuration error, 3 data error,
4 numerical failure.
"""
from __future__ import annotations

import argparse
import glob
import json
import os
import sys

import numpy as np

from . import io as gio
from .errors import ConfigError, DataError, NumericalError, ParameterError
from .evaluate import (
    EvalReport,
    count_large_factors,
    frobenius_error,
    h2_rmse,
    krzanowski,
    match_factors,
    moments_G,
    summarize_reports,
)
from .model import Kinship, PhenotypeData, trait_heritabilities
from .pedigree import Pedigree, a_matrix_from_pedigree
from .rng import RngStream
from .sampler import run_chain
from .simulate import build_scenario, simulate
from .summarize import write_summary

WISHART_P_SUBSPACE = 19  # subspace dimension for P when R has no factor form


def _add_common(parser):
    parser.add_argument("--out", required=True, help="run directory")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--config", help="flat key=value config file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="genfactor",
        description="Genetic covariance estimation with a sparse factor animal model",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="generate a simulation scenario")
    p_sim.add_argument("--scenario", required=True, help="scenario id a-j")
    _add_common(p_sim)

    p_fit = sub.add_parser("fit", help="run the Gibbs sampler")
    _add_common(p_fit)
    p_fit.add_argument("--phenotypes", required=True, help="Y.csv (NA = missing)")
    p_fit.add_argument("--design", help="X.csv fixed-effect design (default: intercept)")
    p_fit.add_argument("--incidence", help="Z.csv genetic incidence (default: identity)")
    p_fit.add_argument("--kinship", help="A.csv relationship matrix")
    p_fit.add_argument("--pedigree", help="pedigree csv (id,sire,dam)")
    p_fit.add_argument("--iters", type=int, help="total iterations")
    p_fit.add_argument("--burnin", type=int, help="burn-in iterations")
    p_fit.add_argument("--thin", type=int, help="thinning interval")
    p_fit.add_argument("--chains", type=int, help="number of chains")
    p_fit.add_argument("--resume", action="store_true",
                       help="continue each chain from its checkpoint")

    p_sum = sub.add_parser("summarize", help="posterior means, HPDs, plot tables")
    _add_common(p_sum)
    p_sum.add_argument("--fitness-col", help="trait treated as fitness")

    p_eval = sub.add_parser("evaluate", help="compare summaries against truth")
    _add_common(p_eval)
    return parser


# ---- simulate -------------------------------------------------------------


def _trait_names(p):
    return [f"t{j + 1:03d}" for j in range(p)]


def cmd_simulate(args) -> int:
    spec = build_scenario(args.scenario, seed=args.seed)
    rng = RngStream(args.seed, stream=0)
    truth = simulate(spec, rng)
    outdir = args.out
    os.makedirs(outdir, exist_ok=True)
    n, p = truth.Y.shape
    traits = _trait_names(p)
    gio.write_matrix(os.path.join(outdir, "Y.csv"), truth.Y, traits)
    gio.write_matrix(os.path.join(outdir, "X.csv"), truth.X, ["intercept"])
    levels = [f"g{i + 1:04d}" for i in range(n)]
    gio.write_matrix(os.path.join(outdir, "Z.csv"), np.eye(n), levels)
    gio.write_matrix(os.path.join(outdir, "A.csv"), truth.A, levels)

    truth_dir = os.path.join(outdir, "truth")
    os.makedirs(truth_dir, exist_ok=True)
    k = truth.h2.size
    factor_names = [f"f{j + 1:02d}" for j in range(k)]
    gio.write_matrix(os.path.join(truth_dir, "lambda.csv"), truth.Lambda, factor_names)
    gio.write_matrix(os.path.join(truth_dir, "h2.csv"), truth.h2[None, :], factor_names)
    for name in ("G", "R", "P"):
        gio.write_matrix(os.path.join(truth_dir, f"{name}.csv"),
                         getattr(truth, name), traits)
    gio.write_matrix(os.path.join(truth_dir, "psi_a.csv"), truth.psi_a[None, :], traits)
    if truth.psi_e is not None:
        gio.write_matrix(os.path.join(truth_dir, "psi_e.csv"), truth.psi_e[None, :], traits)
    with open(os.path.join(truth_dir, "scenario.txt"), "w") as fh:
        for key in ("id", "p", "n_sires", "n_offspring", "residual_type",
                    "support_min", "support_max", "seed"):
            fh.write(f"{key}={getattr(spec, key)}\n")
        fh.write(f"n_factors={spec.n_factors}\n")
    print(f"simulated scenario {spec.id}: Y is {n}x{p}, truth in {truth_dir}/")
    return 0


# ---- fit ------------------------------------------------------------------


def _load_run_config(args) -> gio.RunConfig:
    config = gio.default_run_config()
    if args.config:
        gio.load_config_file(args.config, config)
    config.chain.seed = args.seed
    overrides = {
        "iters": "total_iters",
        "burnin": "burn_in",
        "thin": "thin",
    }
    for flag, attr in overrides.items():
        value = getattr(args, flag, None)
        if value is not None:
            setattr(config.chain, attr, value)
    if getattr(args, "chains", None) is not None:
        config.chains = args.chains
    if config.chains < 1:
        raise ConfigError("--chains must be at least 1")
    return config


def cmd_fit(args) -> int:
    if bool(args.kinship) == bool(args.pedigree):
        raise ConfigError("exactly one of --kinship or --pedigree is required")
    config = _load_run_config(args)
    config.chain.validate()

    y, traits = gio.read_matrix(args.phenotypes, allow_na=True)
    x = None
    if args.design:
        x, _ = gio.read_matrix(args.design)
    z = None
    if args.incidence:
        z, _ = gio.read_matrix(args.incidence)
    if args.kinship:
        a_matrix, _ = gio.read_matrix(args.kinship)
        kinship = Kinship(a_matrix)
    else:
        kinship = a_matrix_from_pedigree(Pedigree.from_csv(args.pedigree))
    data = PhenotypeData(y, X=x, Z=z, trait_names=traits, n_levels=kinship.r)
    if data.r != kinship.r:
        raise DataError(
            f"kinship order {kinship.r} does not match incidence levels {data.r}"
        )

    input_paths = {
        "phenotypes": args.phenotypes,
        "design": args.design,
        "incidence": args.incidence,
        "kinship": args.kinship,
        "pedigree": args.pedigree,
    }
    os.makedirs(args.out, exist_ok=True)
    for chain_idx in range(config.chains):
        chain_dir = os.path.join(args.out, f"chain_{chain_idx:02d}")
        os.makedirs(chain_dir, exist_ok=True)
        chain_cfg = gio.ChainConfig(**{**config.chain.__dict__, "stream": chain_idx})
        checkpoint = os.path.join(chain_dir, "checkpoint.pkl")
        resume_from = None
        if args.resume:
            if not os.path.exists(checkpoint):
                raise ConfigError(f"--resume: no checkpoint at {checkpoint}")
            resume_from = checkpoint
        provenance = gio.provenance_record(config, input_paths, stream=chain_idx)
        samples = run_chain(
            data, kinship, config.hyper, chain_cfg,
            checkpoint_path=checkpoint,
            resume_from=resume_from,
            provenance=provenance,
        )
        gio.write_posterior(chain_dir, samples)
        gio.write_config_file(os.path.join(chain_dir, "config.txt"), config)
        print(f"chain {chain_idx}: {samples.n_draws} draws, k*={samples.k_star} "
              f"-> {chain_dir}/")
    return 0


# ---- summarize ------------------------------------------------------------


def _chain_dirs(outdir):
    dirs = sorted(glob.glob(os.path.join(outdir, "chain_*")))
    dirs = [d for d in dirs if os.path.isdir(d)]
    if not dirs:
        raise DataError(f"no chain directories under {outdir}")
    return dirs


def cmd_summarize(args) -> int:
    chains = [gio.read_posterior(d) for d in _chain_dirs(args.out)]
    if any(c.n_draws == 0 for c in chains):
        raise DataError("empty posterior directory")
    pooled = gio.pool_posteriors(chains)
    summary_dir = os.path.join(args.out, "summary")
    write_summary(summary_dir, pooled, fitness_col=args.fitness_col)
    print(f"summarized {pooled.n_draws} draws (k*={pooled.k_star}) -> {summary_dir}/")
    return 0


# ---- evaluate -------------------------------------------------------------


def _read_scenario_meta(truth_dir) -> dict:
    meta = {}
    path = os.path.join(truth_dir, "scenario.txt")
    if not os.path.exists(path):
        raise DataError(f"missing scenario metadata {path}")
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line and "=" in line:
                key, value = line.split("=", 1)
                meta[key] = value
    return meta


def evaluate_run(run_dir) -> EvalReport:
    truth_dir = os.path.join(run_dir, "truth")
    summary_dir = os.path.join(run_dir, "summary")
    if not os.path.isdir(truth_dir):
        raise DataError(f"missing truth directory {truth_dir}")
    if not os.path.isdir(summary_dir):
        raise DataError(f"missing summary directory {summary_dir}; run summarize first")
    meta = _read_scenario_meta(truth_dir)
    true_G, _ = gio.read_matrix(os.path.join(truth_dir, "G.csv"))
    true_P, _ = gio.read_matrix(os.path.join(truth_dir, "P.csv"))
    true_lambda, _ = gio.read_matrix(os.path.join(truth_dir, "lambda.csv"))
    true_h2_row, _ = gio.read_matrix(os.path.join(truth_dir, "h2.csv"))
    est_G, _ = gio.read_matrix(os.path.join(summary_dir, "G_mean.csv"))
    est_P, _ = gio.read_matrix(os.path.join(summary_dir, "P_mean.csv"))
    est_lambda, _ = gio.read_matrix(os.path.join(summary_dir, "lambda_mean.csv"))

    y, _ = gio.read_matrix(os.path.join(run_dir, "Y.csv"), allow_na=True)
    n_sires = int(meta["n_sires"])
    n_off = int(meta["n_offspring"])
    sire_labels = np.repeat(np.arange(n_sires), n_off)
    y_complete = np.where(np.isnan(y), np.nanmean(y, axis=0), y)
    g_m = moments_G(y_complete, sire_labels)

    k_factors = int(meta["n_factors"])
    wishart = meta.get("residual_type") == "wishart"
    k_p = WISHART_P_SUBSPACE if wishart else k_factors
    matches = match_factors(true_lambda, est_lambda)
    report = EvalReport(
        frobenius_moments=frobenius_error(g_m, true_G),
        frobenius_posterior=frobenius_error(est_G, true_G),
        krzanowski_G=krzanowski(est_G, true_G, k_factors),
        krzanowski_P=krzanowski(est_P, true_P, k_p),
        k_G=k_factors,
        k_P=k_p,
        n_large_factors=count_large_factors(est_lambda, float(np.trace(est_P))),
        h2_rmse=h2_rmse(
            trait_heritabilities(est_G, est_P),
            trait_heritabilities(true_G, true_P),
        ),
        factor_match=matches,
    )
    return report


def cmd_evaluate(args) -> int:
    if os.path.isdir(os.path.join(args.out, "truth")):
        run_dirs = [args.out]
    else:
        run_dirs = sorted(
            os.path.dirname(t) for t in glob.glob(os.path.join(args.out, "*", "truth"))
        )
    if not run_dirs:
        raise DataError(f"no run directories with truth/ under {args.out}")
    reports = []
    eval_dir = os.path.join(args.out, "eval")
    os.makedirs(eval_dir, exist_ok=True)
    angle_rows = []
    for idx, run_dir in enumerate(run_dirs):
        report = evaluate_run(run_dir)
        reports.append(report)
        for t, e, angle in report.factor_match:
            angle_rows.append({
                "replicate": idx,
                "true_factor": t + 1,
                "matched_factor": e + 1,
                "angle_deg": angle,
            })
    columns = ["replicate"] + list(reports[0].to_row().keys())
    gio.write_table(
        os.path.join(eval_dir, "report.csv"),
        [{"replicate": i, **r.to_row()} for i, r in enumerate(reports)],
        columns,
    )
    gio.write_table(
        os.path.join(eval_dir, "factor_angles.csv"), angle_rows,
        ["replicate", "true_factor", "matched_factor", "angle_deg"],
    )
    with open(os.path.join(eval_dir, "summary.json"), "w") as fh:
        json.dump(summarize_reports(reports), fh, indent=2, sort_keys=True)
        fh.write("\n")
    for i, r in enumerate(reports):
        print(
            f"replicate {i}: frobenius posterior={r.frobenius_posterior:.3f} "
            f"moments={r.frobenius_moments:.3f} krzanowski_G={r.krzanowski_G:.2f}/{r.k_G} "
            f"large factors={r.n_large_factors}"
        )
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "summarize": cmd_summarize,
    "evaluate": cmd_evaluate,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ParameterError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
