"""Posterior summaries: mean covariance matrices, heritabilities, HPD
intervals, and plot-ready long-format tables."""
from __future__ import annotations

import json
import os

import numpy as np

from .errors import DataError
from .model import (
    fitness_variance_fraction,
    reconstruct_G,
    selection_response,
    trait_heritabilities,
)
from .rng import hpd_interval
from .sampler import PosteriorSamples
from . import io as gio

HPD_MASS = 0.95


def _hpd_or_na(draws: np.ndarray, mass: float = HPD_MASS):
    if draws.size < 10:
        return float("nan"), float("nan")
    return hpd_interval(draws, mass)


def summarize_posterior(samples: PosteriorSamples, fitness_col: str | None = None) -> dict:
    """All summary tables for one (possibly pooled) posterior."""
    mean_G = samples.mean_G()
    mean_R = samples.mean_R()
    mean_P = mean_G + mean_R
    traits = samples.trait_names
    k = samples.k_star
    out = {
        "G_mean": mean_G,
        "R_mean": mean_R,
        "P_mean": mean_P,
        "lambda_mean": samples.mean_lambda(),
        "B_mean": samples.mean_B(),
        "trait_h2": trait_heritabilities(mean_G, mean_P, traits),
        "factor_h2_mean": samples.factor_h2_mean(),
        "factor_h2_hpd": [
            _hpd_or_na(samples.h2_draws[:, j]) for j in range(k)
        ],
        "n_draws": samples.n_draws,
        "k_star": k,
        "digest": samples.digest(),
    }

    # long-format draw tables for boxplots
    norms = (samples.lambda_draws ** 2).sum(axis=1)  # (d, k)
    # trace(P) = sum of squared loadings + idiosyncratic variances
    p_trace_draws = (
        norms.sum(axis=1)
        + samples.psi_a_draws.sum(axis=1)
        + samples.sigma2_draws.sum(axis=1)
    )
    out["factor_h2_long"] = [
        {"draw": d + 1, "factor": f"f{j + 1:02d}", "h2": samples.h2_draws[d, j]}
        for d in range(samples.n_draws)
        for j in range(k)
    ]
    out["factor_magnitude_long"] = [
        {
            "draw": d + 1,
            "factor": f"f{j + 1:02d}",
            "norm2": norms[d, j],
            "share": norms[d, j] / p_trace_draws[d],
        }
        for d in range(samples.n_draws)
        for j in range(k)
    ]

    if fitness_col is not None:
        if fitness_col not in traits:
            raise DataError(f"fitness column '{fitness_col}' not among traits")
        fit = traits.index(fitness_col)
        d_count = samples.n_draws
        cor = np.zeros((d_count, len(traits)))
        factor_cor = np.zeros((d_count, k))
        response = np.zeros((d_count, len(traits) - 1))
        fraction = np.zeros(d_count)
        for d in range(d_count):
            state = samples.state_for_draw(d)
            G = reconstruct_G(state)
            denom = np.sqrt(np.outer(np.diag(G), np.diag(G)))
            cor[d] = G[:, fit] / denom[:, fit]
            g_ff = G[fit, fit]
            lam_fit = samples.lambda_draws[d, fit]
            with np.errstate(invalid="ignore", divide="ignore"):
                factor_cor[d] = np.where(
                    samples.h2_draws[d] > 0,
                    lam_fit * np.sqrt(samples.h2_draws[d]) / np.sqrt(g_ff),
                    0.0,
                )
            response[d] = selection_response(state, fit)
            fraction[d] = fitness_variance_fraction(state, fit)
        out["fitness_index"] = fit
        out["fitness_trait_cor"] = cor
        out["fitness_factor_cor"] = factor_cor
        out["selection_response"] = response
        out["fitness_variance_fraction"] = fraction
    return out


def write_summary(outdir, samples: PosteriorSamples, fitness_col: str | None = None) -> dict:
    summary = summarize_posterior(samples, fitness_col)
    os.makedirs(outdir, exist_ok=True)
    traits = samples.trait_names
    factor_names = [f"f{j + 1:02d}" for j in range(samples.k_star)]

    for name in ("G_mean", "R_mean", "P_mean"):
        gio.write_matrix(os.path.join(outdir, f"{name}.csv"), summary[name], traits)
    gio.write_matrix(os.path.join(outdir, "lambda_mean.csv"),
                     summary["lambda_mean"], factor_names)
    gio.write_table(
        os.path.join(outdir, "trait_h2.csv"),
        [{"trait": t, "h2": h} for t, h in zip(traits, summary["trait_h2"])],
        ["trait", "h2"],
    )
    gio.write_table(
        os.path.join(outdir, "factor_h2.csv"),
        [
            {"factor": f, "mean": m, "hpd_low": lo, "hpd_high": hi}
            for f, m, (lo, hi) in zip(
                factor_names, summary["factor_h2_mean"], summary["factor_h2_hpd"]
            )
        ],
        ["factor", "mean", "hpd_low", "hpd_high"],
    )
    gio.write_table(os.path.join(outdir, "factor_h2_draws.csv"),
                    summary["factor_h2_long"], ["draw", "factor", "h2"])
    gio.write_table(os.path.join(outdir, "factor_magnitude_draws.csv"),
                    summary["factor_magnitude_long"],
                    ["draw", "factor", "norm2", "share"])

    meta = {
        "n_draws": summary["n_draws"],
        "k_star": summary["k_star"],
        "digest": summary["digest"],
    }
    if fitness_col is not None:
        fit = summary["fitness_index"]
        rows = []
        for j, t in enumerate(traits):
            if j == fit:
                continue
            lo, hi = _hpd_or_na(summary["fitness_trait_cor"][:, j])
            rows.append({
                "trait": t,
                "mean": summary["fitness_trait_cor"][:, j].mean(),
                "hpd_low": lo,
                "hpd_high": hi,
            })
        gio.write_table(os.path.join(outdir, "fitness_cor.csv"), rows,
                        ["trait", "mean", "hpd_low", "hpd_high"])
        rows = []
        for j, f in enumerate(factor_names):
            lo, hi = _hpd_or_na(summary["fitness_factor_cor"][:, j])
            rows.append({
                "factor": f,
                "mean": summary["fitness_factor_cor"][:, j].mean(),
                "hpd_low": lo,
                "hpd_high": hi,
            })
        gio.write_table(os.path.join(outdir, "factor_fitness_cor.csv"), rows,
                        ["factor", "mean", "hpd_low", "hpd_high"])
        other = [t for j, t in enumerate(traits) if j != fit]
        gio.write_table(
            os.path.join(outdir, "selection_response.csv"),
            [
                {"trait": t, "mean_response": m}
                for t, m in zip(other, summary["selection_response"].mean(axis=0))
            ],
            ["trait", "mean_response"],
        )
        meta["fitness_col"] = fitness_col
        meta["fitness_variance_fraction_mean"] = float(
            summary["fitness_variance_fraction"].mean()
        )
    with open(os.path.join(outdir, "summary.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary
