"""Simulation scenarios: sparse-factor worlds on a half-sib breeding design.

Ten built-in scenarios (ids a-j) vary the number of factors, the residual
structure, the trait count, and the sample size. All use Z = I, B = 0, an
intercept-only X, idiosyncratic variances 0.2, and standard-normal loadings
on uniformly chosen sparse supports.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError
from .model import Kinship, PhenotypeData
from .pedigree import halfsib_A
from .rng import RngStream, cholesky_psd, sample_wishart

RESIDUAL_TYPES = ("sparse_factor", "factor", "wishart")

IDIO_VARIANCE = 0.2

_H2_LADDER = (0.9, 0.7, 0.5, 0.3, 0.1)


@dataclass(frozen=True)
class ScenarioSpec:
    """Definition of one simulation scenario."""

    id: str
    p: int
    n_sires: int
    n_offspring: int
    factor_h2: tuple
    residual_type: str = "sparse_factor"
    support_min: int = 3
    support_max: int = 25
    idio_variance: float = IDIO_VARIANCE
    seed: int = 0

    def validate(self) -> None:
        if self.residual_type not in RESIDUAL_TYPES:
            raise ParameterError(f"unknown residual type '{self.residual_type}'")
        if not 1 <= self.support_min <= self.support_max <= self.p:
            raise ParameterError(
                f"support range [{self.support_min}, {self.support_max}] invalid for p={self.p}"
            )
        if any(not 0.0 <= h <= 1.0 for h in self.factor_h2):
            raise ParameterError("factor heritabilities must lie in [0, 1]")
        if min(self.p, self.n_sires, self.n_offspring) < 1:
            raise ParameterError("p, n_sires and n_offspring must be positive")

    @property
    def n_factors(self) -> int:
        return len(self.factor_h2)

    @property
    def n_individuals(self) -> int:
        return self.n_sires * self.n_offspring


def build_scenario(scenario_id: str, seed: int = 0) -> ScenarioSpec:
    """Scenario specs a-j of the half-sib simulation study."""
    s = scenario_id.lower()
    common = dict(p=100, n_sires=100, n_offspring=10, support_min=3, support_max=25)
    if s == "a":
        return ScenarioSpec(id=s, factor_h2=(0.5,) * 5 + (0.0,) * 5, seed=seed, **common)
    if s == "b":
        return ScenarioSpec(id=s, factor_h2=(0.5,) * 15 + (0.0,) * 10, seed=seed, **common)
    if s == "c":
        return ScenarioSpec(id=s, factor_h2=(0.5,) * 30 + (0.0,) * 20, seed=seed, **common)
    if s == "d":
        return ScenarioSpec(
            id=s, factor_h2=(0.5,) * 5 + (0.0,) * 5, residual_type="factor",
            seed=seed, **common,
        )
    if s == "e":
        return ScenarioSpec(
            id=s, factor_h2=(1.0,) * 5, residual_type="wishart", seed=seed, **common,
        )
    if s == "f":
        return ScenarioSpec(
            id=s, p=20, n_sires=100, n_offspring=10,
            factor_h2=(0.5,) * 5 + (0.0,) * 5, support_min=3, support_max=5, seed=seed,
        )
    if s == "g":
        return ScenarioSpec(
            id=s, p=1000, n_sires=100, n_offspring=10,
            factor_h2=(0.5,) * 5 + (0.0,) * 5, support_min=30, support_max=250, seed=seed,
        )
    if s in ("h", "i", "j"):
        sires = {"h": 50, "i": 100, "j": 500}[s]
        offspring = 5 if s == "h" else 10
        return ScenarioSpec(
            id=s, p=100, n_sires=sires, n_offspring=offspring,
            factor_h2=_H2_LADDER + (0.0,) * 5, support_min=3, support_max=25, seed=seed,
        )
    raise ParameterError(f"unknown scenario id '{scenario_id}' (expected a-j)")


@dataclass
class GroundTruth:
    """Simulated world: generating parameters plus the realized data."""

    spec: ScenarioSpec
    Lambda: np.ndarray        # p x k true loadings
    h2: np.ndarray            # k factor heritabilities
    psi_a: np.ndarray         # p idiosyncratic genetic variances
    psi_e: np.ndarray | None  # p idiosyncratic residual variances (factor forms)
    R_dense: np.ndarray | None  # full residual covariance (wishart form)
    G: np.ndarray
    R: np.ndarray
    P: np.ndarray
    Y: np.ndarray
    X: np.ndarray
    A: np.ndarray
    sire_labels: np.ndarray = field(default=None)

    @property
    def kinship(self) -> Kinship:
        return Kinship(self.A)

    def to_phenotype_data(self) -> PhenotypeData:
        return PhenotypeData(self.Y, X=self.X)

    def trait_h2(self) -> np.ndarray:
        return np.diag(self.G) / np.diag(self.P)


def _sparse_loadings(spec: ScenarioSpec, rng: RngStream) -> np.ndarray:
    """Columns with standard-normal entries on uniform sparse supports.

    Factor-form residual scenarios make the zero-heritability columns
    dense instead (every trait loads).
    """
    gen = rng.gen
    lam = np.zeros((spec.p, spec.n_factors))
    for j, h2 in enumerate(spec.factor_h2):
        if spec.residual_type == "factor" and h2 == 0.0:
            lam[:, j] = gen.standard_normal(spec.p)
            continue
        size = int(gen.integers(spec.support_min, spec.support_max + 1))
        support = gen.choice(spec.p, size=size, replace=False)
        lam[support, j] = gen.standard_normal(size)
    return lam


def simulate(spec: ScenarioSpec, rng: RngStream) -> GroundTruth:
    """Draw parameters and trait values for one scenario replicate."""
    spec.validate()
    gen = rng.gen
    n = spec.n_individuals
    p, k = spec.p, spec.n_factors
    kin = halfsib_A(spec.n_sires, spec.n_offspring)
    chol_a = kin.chol

    lam = _sparse_loadings(spec, rng)
    h2 = np.array(spec.factor_h2, dtype=float)
    psi_a = np.full(p, spec.idio_variance)

    f_a = (chol_a @ gen.standard_normal((n, k))) * np.sqrt(h2)
    delta = (chol_a @ gen.standard_normal((n, p))) * np.sqrt(psi_a)
    genetic = f_a @ lam.T + delta

    G = (lam * h2) @ lam.T + np.diag(psi_a)
    if spec.residual_type == "wishart":
        r_dense = sample_wishart(p + 1, np.eye(p) / p, rng)
        residual = gen.standard_normal((n, p)) @ cholesky_psd(r_dense).T
        psi_e = None
        R = r_dense
    else:
        psi_e = np.full(p, spec.idio_variance)
        f_e = gen.standard_normal((n, k)) * np.sqrt(1.0 - h2)
        xi = gen.standard_normal((n, p)) * np.sqrt(psi_e)
        residual = f_e @ lam.T + xi
        r_dense = None
        R = (lam * (1.0 - h2)) @ lam.T + np.diag(psi_e)

    X = np.ones((n, 1))
    Y = genetic + residual  # B = 0, Z = I
    sire_labels = np.repeat(np.arange(spec.n_sires), spec.n_offspring)
    return GroundTruth(
        spec=spec, Lambda=lam, h2=h2, psi_a=psi_a, psi_e=psi_e, R_dense=r_dense,
        G=(G + G.T) / 2.0, R=(R + R.T) / 2.0, P=(G + G.T) / 2.0 + (R + R.T) / 2.0,
        Y=Y, X=X, A=kin.A, sire_labels=sire_labels,
    )


def mask_entries(truth: GroundTruth, fraction: float, rng: RngStream) -> PhenotypeData:
    """Mask a uniformly random fraction of cells; truth keeps the originals."""
    if not 0.0 <= fraction < 1.0:
        raise ParameterError(f"mask fraction must lie in [0, 1), got {fraction}")
    y = truth.Y.copy()
    if fraction > 0.0:
        mask = rng.gen.random(y.shape) < fraction
        y[mask] = np.nan
    return PhenotypeData(y, X=truth.X)
