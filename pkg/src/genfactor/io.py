"""File formats: headered CSV matrices, flat config files, provenance,
and the on-disk layout of posterior draws.

All numeric CSV output uses Python's shortest round-trip float
representation, so write-then-read reproduces every double bit-exactly.
Missing phenotypes are the literal token NA.
"""
from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import ConfigError, DataError
from .model import Hyperparameters
from .sampler import ChainConfig, PosteriorSamples

NA = "NA"


def _format(value) -> str:
    f = float(value)
    if f != f:
        return NA
    if f == int(f) and abs(f) < 1e16:
        return str(int(f))
    return repr(f)


def write_matrix(path, matrix: np.ndarray, header: list[str]) -> None:
    matrix = np.atleast_2d(np.asarray(matrix))
    if matrix.shape[1] != len(header):
        raise DataError(f"{path}: {len(header)} header fields for {matrix.shape[1]} columns")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in matrix:
            writer.writerow([_format(v) for v in row])


def read_matrix(path, allow_na: bool = False) -> tuple[np.ndarray, list[str]]:
    """Read a headered numeric CSV; NA maps to NaN when allowed."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        width = len(header)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise DataError(f"{path}:{lineno}: expected {width} fields, found {len(row)}")
            parsed = []
            for col, token in enumerate(row):
                token = token.strip()
                if token == NA or token == "":
                    if not allow_na:
                        raise DataError(
                            f"{path}:{lineno}: missing value in column '{header[col]}'"
                        )
                    parsed.append(np.nan)
                    continue
                try:
                    parsed.append(float(token))
                except ValueError:
                    raise DataError(
                        f"{path}:{lineno}: cannot parse '{token}' in column '{header[col]}'"
                    ) from None
            rows.append(parsed)
    if not rows:
        raise DataError(f"{path}: no data rows")
    return np.array(rows, dtype=float), header


def write_table(path, rows: list[dict], columns: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({c: _format(v) if isinstance(v, (int, float, np.floating)) else v
                             for c, v in row.items()})


def read_table(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---- flat key=value configuration ----------------------------------------

# config keys -> (section, attribute); sections are the two dataclasses
_HYPER_KEYS = {f.name: f for f in fields(Hyperparameters)}
_CHAIN_ALIASES = {
    "iters": "total_iters",
    "burnin": "burn_in",
    "thin": "thin",
    "seed": "seed",
    "checkpoint_interval": "checkpoint_interval",
    "adapt": "adapt",
}


@dataclass
class RunConfig:
    """Merged hyperparameters + chain schedule + pipeline settings."""

    hyper: Hyperparameters
    chain: ChainConfig
    chains: int = 1

    def flat(self) -> dict:
        out = {}
        for name, value in asdict(self.hyper).items():
            out[name] = value
        for alias, attr in _CHAIN_ALIASES.items():
            out[alias] = getattr(self.chain, attr)
        out["chains"] = self.chains
        return out


def default_run_config() -> RunConfig:
    return RunConfig(hyper=Hyperparameters(), chain=ChainConfig())


def _coerce(raw: str, like) -> object:
    if isinstance(like, bool):
        low = raw.lower()
        if low in ("1", "true", "yes"):
            return True
        if low in ("0", "false", "no"):
            return False
        raise ValueError(raw)
    if like is None or isinstance(like, int):
        return int(raw)
    return float(raw)


def apply_config_entry(config: RunConfig, key: str, raw: str) -> None:
    key = key.strip()
    raw = raw.strip()
    try:
        if key in _HYPER_KEYS:
            current = getattr(config.hyper, key)
            setattr(config.hyper, key, _coerce(raw, current))
        elif key in _CHAIN_ALIASES:
            attr = _CHAIN_ALIASES[key]
            setattr(config.chain, attr, _coerce(raw, getattr(config.chain, attr)))
        elif key == "chains":
            config.chains = int(raw)
        else:
            raise ConfigError(f"unknown config key '{key}'")
    except ValueError:
        raise ConfigError(f"cannot parse config value {key}={raw!r}") from None


def load_config_file(path, config: RunConfig | None = None) -> RunConfig:
    """Flat key=value text; '#' starts a comment."""
    config = config or default_run_config()
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got '{line}'")
            key, raw = line.split("=", 1)
            apply_config_entry(config, key, raw)
    return config


def write_config_file(path, config: RunConfig) -> None:
    with open(path, "w") as fh:
        for key, value in config.flat().items():
            fh.write(f"{key}={value}\n")


# ---- provenance -----------------------------------------------------------


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def provenance_record(config: RunConfig, input_paths: dict, stream: int) -> dict:
    """Config plus input digests; its own digest changes whenever any
    input byte or config field changes."""
    inputs = {
        name: {"path": os.path.basename(str(path)), "sha256": file_digest(path)}
        for name, path in sorted(input_paths.items())
        if path is not None
    }
    record = {
        "config": config.flat(),
        "inputs": inputs,
        "stream": stream,
    }
    canonical = json.dumps(record, sort_keys=True, separators=(",", ":"))
    record["digest"] = hashlib.sha256(canonical.encode()).hexdigest()
    return record


# ---- posterior directory layout -------------------------------------------


def write_posterior(outdir, samples: PosteriorSamples) -> None:
    """Per-draw loadings plus draw tables, provenance, and imputations."""
    os.makedirs(outdir, exist_ok=True)
    k = samples.k_star
    factor_names = [f"f{j + 1:02d}" for j in range(k)]
    for d in range(samples.n_draws):
        write_matrix(
            os.path.join(outdir, f"lambda_{d + 1:04d}.csv"),
            samples.lambda_draws[d], factor_names,
        )
    write_matrix(os.path.join(outdir, "h2.csv"), samples.h2_draws, factor_names)
    write_matrix(os.path.join(outdir, "delta.csv"), samples.delta_draws, factor_names)
    write_matrix(os.path.join(outdir, "psi.csv"), samples.psi_a_draws, samples.trait_names)
    write_matrix(os.path.join(outdir, "sigma2.csv"), samples.sigma2_draws, samples.trait_names)
    b = samples.B_draws.shape[1]
    b_header = [f"x{i + 1}:{t}" for i in range(b) for t in samples.trait_names]
    write_matrix(
        os.path.join(outdir, "B.csv"),
        samples.B_draws.reshape(samples.n_draws, b * len(samples.trait_names)),
        b_header,
    )
    write_matrix(os.path.join(outdir, "fa_mean.csv"), samples.fa_mean, factor_names)
    imputed_rows = [
        {"row": int(r), "trait": samples.trait_names[int(c)], "mean": m}
        for r, c, m in zip(samples.mask_rows, samples.mask_cols, samples.imputed_mean)
    ]
    write_table(os.path.join(outdir, "imputed.csv"), imputed_rows, ["row", "trait", "mean"])
    with open(os.path.join(outdir, "provenance.json"), "w") as fh:
        json.dump(samples.provenance, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_posterior(outdir, trait_names: list[str] | None = None) -> PosteriorSamples:
    h2, factor_names = read_matrix(os.path.join(outdir, "h2.csv"))
    psi, traits = read_matrix(os.path.join(outdir, "psi.csv"))
    sigma2, _ = read_matrix(os.path.join(outdir, "sigma2.csv"))
    delta, _ = read_matrix(os.path.join(outdir, "delta.csv"))
    b_flat, _ = read_matrix(os.path.join(outdir, "B.csv"))
    fa_mean, _ = read_matrix(os.path.join(outdir, "fa_mean.csv"))
    n_draws, k = h2.shape
    p = len(traits)
    lam = np.empty((n_draws, p, k))
    for d in range(n_draws):
        lam[d], _ = read_matrix(os.path.join(outdir, f"lambda_{d + 1:04d}.csv"))
    imputed = read_table(os.path.join(outdir, "imputed.csv"))
    trait_pos = {t: j for j, t in enumerate(traits)}
    mask_rows = np.array([int(row["row"]) for row in imputed], dtype=int)
    mask_cols = np.array([trait_pos[row["trait"]] for row in imputed], dtype=int)
    imputed_mean = np.array([float(row["mean"]) for row in imputed], dtype=float)
    prov_path = os.path.join(outdir, "provenance.json")
    provenance = {}
    if os.path.exists(prov_path):
        with open(prov_path) as fh:
            provenance = json.load(fh)
    return PosteriorSamples(
        lambda_draws=lam,
        h2_draws=h2,
        psi_a_draws=psi,
        sigma2_draws=sigma2,
        B_draws=b_flat.reshape(n_draws, -1, p),
        delta_draws=delta,
        fa_mean=fa_mean,
        imputed_mean=imputed_mean,
        mask_rows=mask_rows,
        mask_cols=mask_cols,
        trait_names=trait_names or traits,
        provenance=provenance,
    )


def pool_posteriors(samples_list: list[PosteriorSamples]) -> PosteriorSamples:
    """Concatenate draws from chains that share a truncation rank."""
    if not samples_list:
        raise DataError("no posterior samples to pool")
    if len(samples_list) == 1:
        return samples_list[0]
    ks = {s.k_star for s in samples_list}
    if len(ks) != 1:
        k_min = min(ks)
        samples_list = [_truncate(s, k_min) for s in samples_list]
    first = samples_list[0]
    n_total = sum(s.n_draws for s in samples_list)
    return PosteriorSamples(
        lambda_draws=np.concatenate([s.lambda_draws for s in samples_list]),
        h2_draws=np.concatenate([s.h2_draws for s in samples_list]),
        psi_a_draws=np.concatenate([s.psi_a_draws for s in samples_list]),
        sigma2_draws=np.concatenate([s.sigma2_draws for s in samples_list]),
        B_draws=np.concatenate([s.B_draws for s in samples_list]),
        delta_draws=np.concatenate([s.delta_draws for s in samples_list]),
        fa_mean=sum(s.fa_mean * s.n_draws for s in samples_list) / n_total,
        imputed_mean=sum(s.imputed_mean * s.n_draws for s in samples_list) / n_total,
        mask_rows=first.mask_rows,
        mask_cols=first.mask_cols,
        trait_names=first.trait_names,
        n_h=first.n_h,
        provenance={"pooled_from": [s.provenance.get("stream") for s in samples_list]},
    )


def _truncate(samples: PosteriorSamples, k: int) -> PosteriorSamples:
    # chains may freeze at different ranks; pool over the leading columns,
    # which carry the dominant factors under the shrinkage ordering
    return PosteriorSamples(
        lambda_draws=samples.lambda_draws[:, :, :k],
        h2_draws=samples.h2_draws[:, :k],
        psi_a_draws=samples.psi_a_draws,
        sigma2_draws=samples.sigma2_draws,
        B_draws=samples.B_draws,
        delta_draws=samples.delta_draws[:, :k],
        fa_mean=samples.fa_mean[:, :k],
        imputed_mean=samples.imputed_mean,
        mask_rows=samples.mask_rows,
        mask_cols=samples.mask_cols,
        trait_names=samples.trait_names,
        n_h=samples.n_h,
        provenance=samples.provenance,
    )
