"""Domain types for the mixed-effects sparse factor model.

The observed n x p trait matrix Y follows Y = X B + Z U + E, where U (genetic
effects, row covariance A) and E (residuals) share a sparse factor structure:
U = F_a Lambda^T + Delta and E = F_e Lambda^T + Xi. Column j of Lambda is a
latent trait whose variance splits into a genetic fraction h2[j] and a
residual fraction 1 - h2[j]; Diag(h2) + Diag(1 - h2) = I fixes the factor
scale. The trait-level covariances are then

    G = Lambda Diag(h2) Lambda^T + Psi_a        (genetic)
    R = Lambda Diag(1 - h2) Lambda^T + Psi_e    (residual)
    P = G + R = Lambda Lambda^T + Psi_a + Psi_e (phenotypic)

with Psi_a, Psi_e diagonal idiosyncratic variances. Psi_e is carried only
through the per-trait residual precisions sigma2_prec (Psi_e = 1/sigma2_prec)
so there is a single source of truth.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .errors import DataError, NumericalError, ParameterError
from .rng import cholesky_psd


@dataclass(frozen=True)
class ModelDims:
    """Problem dimensions: individuals, traits, genetic levels, covariates, rank."""

    n: int
    p: int
    r: int
    b: int
    k_star: int

    def validate(self, k_max: int | None = None) -> None:
        if min(self.n, self.p, self.r, self.k_star) < 1 or self.b < 0:
            raise DataError(f"invalid model dimensions: {self}")
        if k_max is not None and self.k_star > k_max:
            raise DataError(f"k_star={self.k_star} exceeds k_max={k_max}")


class PhenotypeData:
    """Observed traits with missing mask, fixed-effect design, and incidence.

    Y may contain NaN for missing cells. Z is kept as an index vector
    (one genetic level per individual); the dense 0/1 incidence matrix is
    materialized on demand.
    """

    def __init__(self, Y, X=None, Z=None, trait_names=None, n_levels=None):
        self.Y = np.array(Y, dtype=float)
        if self.Y.ndim != 2:
            raise DataError("Y must be a 2-d matrix of individuals x traits")
        n, p = self.Y.shape
        self.X = np.ones((n, 1)) if X is None else np.array(X, dtype=float)
        if self.X.ndim != 2 or self.X.shape[0] != n:
            raise DataError(f"X has shape {self.X.shape}, expected ({n}, b)")
        if not np.all(np.isfinite(self.X)):
            raise DataError("X contains missing or non-finite values")
        self.z_index = self._as_index(Z, n)
        self.r = int(n_levels) if n_levels is not None else int(self.z_index.max()) + 1
        if self.z_index.max() >= self.r:
            raise DataError("incidence refers to more genetic levels than declared")
        self.trait_names = list(trait_names) if trait_names is not None else [
            f"t{j + 1:03d}" for j in range(p)
        ]
        if len(self.trait_names) != p:
            raise DataError("trait_names length does not match trait count")

    @staticmethod
    def _as_index(Z, n) -> np.ndarray:
        if Z is None:
            return np.arange(n)
        Z = np.asarray(Z)
        if Z.ndim == 1:
            idx = Z.astype(int)
            if np.any(idx < 0):
                raise DataError("incidence indices must be non-negative")
            return idx
        if Z.shape[0] != n:
            raise DataError(f"Z has {Z.shape[0]} rows, expected {n}")
        if not np.all(np.isfinite(Z)):
            raise DataError("Z contains missing or non-finite values")
        ones = Z == 1
        if not (np.all((Z == 0) | ones) and np.all(ones.sum(axis=1) == 1)):
            raise DataError("each row of Z must contain exactly one 1")
        return np.argmax(ones, axis=1)

    @property
    def n(self) -> int:
        return self.Y.shape[0]

    @property
    def p(self) -> int:
        return self.Y.shape[1]

    @property
    def b(self) -> int:
        return self.X.shape[1]

    @property
    def mask(self) -> np.ndarray:
        """Boolean n x p mask of missing cells."""
        return np.isnan(self.Y)

    def incidence_matrix(self) -> np.ndarray:
        Z = np.zeros((self.n, self.r))
        Z[np.arange(self.n), self.z_index] = 1.0
        return Z


class Kinship:
    """Additive relationship matrix with cached Cholesky factor and inverse."""

    def __init__(self, A: np.ndarray):
        A = np.asarray(A, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise DataError("A must be square")
        if not np.array_equal(A, A.T):
            if np.allclose(A, A.T, rtol=0, atol=1e-12):
                A = (A + A.T) / 2.0
            else:
                raise DataError("A must be symmetric")
        self.A = A
        self._chol = None
        self._inv = None

    @property
    def r(self) -> int:
        return self.A.shape[0]

    @property
    def chol(self) -> np.ndarray:
        """Lower factor L with L L^T reproducing A."""
        if self._chol is None:
            self._chol = cholesky_psd(self.A)
        return self._chol

    @property
    def inverse(self) -> np.ndarray:
        if self._inv is None:
            identity = np.eye(self.r)
            l_inv = np.linalg.solve(self.chol, identity)
            self._inv = l_inv.T @ l_inv
        return self._inv


@dataclass
class Hyperparameters:
    """Prior and adaptation constants for the sampler.

    Loading element ij has prior N(0, 1/(phi_ij * tau_j)) with
    phi_ij ~ Ga(nu/2, nu/2) and tau_j the cumulative product of
    delta_1 ~ Ga(a1, b1), delta_l ~ Ga(a2, b2); a2 > b2 makes the tau
    sequence stochastically increasing so later factors shrink to zero.
    Factor heritabilities live on the grid {0, 1/n_h, ..., (n_h-1)/n_h}
    with half the prior mass on exactly zero.
    """

    nu: float = 3.0
    a1: float = 2.0
    b1: float = 1.0 / 20.0
    a2: float = 3.0
    b2: float = 1.0
    n_h: int = 100
    a_g: float = 1.0
    b_g: float = 1.0
    a_r: float = 1.0
    b_r: float = 1.0
    b_prec: float = 1e-6
    adapt_alpha0: float = -1.0
    adapt_alpha1: float = -5e-4
    adapt_epsilon: float = 1e-2
    k_init: int | None = None
    k_max: int | None = None
    # False reproduces the literal loading-precision rate (nu + lambda^2)/2,
    # which drops the tau factor required for prior-posterior consistency.
    phi_rate_includes_tau: bool = True

    def validate(self) -> None:
        for name in ("nu", "a1", "b1", "a2", "b2", "a_g", "b_g", "a_r", "b_r", "b_prec"):
            if getattr(self, name) <= 0:
                raise ParameterError(f"hyperparameter {name} must be positive")
        if self.a2 <= self.b2:
            raise ParameterError("a2 must exceed b2 (tau must be stochastically increasing)")
        if self.n_h < 2:
            raise ParameterError("n_h must be at least 2")
        if self.adapt_epsilon <= 0:
            raise ParameterError("adapt_epsilon must be positive")

    def resolved_ranks(self, p: int) -> tuple[int, int]:
        """(k_init, k_max) with defaults min(p, 20) and min(p, 150)."""
        k_max = self.k_max if self.k_max is not None else min(p, 150)
        k_init = self.k_init if self.k_init is not None else min(p, 20)
        k_init = max(1, min(k_init, k_max))
        return k_init, max(1, k_max)

    def h2_grid(self) -> np.ndarray:
        """Heritability support {0, 1/n_h, ..., (n_h-1)/n_h}; excludes 1."""
        return np.arange(self.n_h) / self.n_h

    def h2_log_prior(self) -> np.ndarray:
        log_prior = np.full(self.n_h, -np.log(2.0 * (self.n_h - 1)))
        log_prior[0] = np.log(0.5)
        return log_prior


@dataclass
class ChainState:
    """All sampled quantities of one Gibbs iteration.

    tau is maintained as the exact cumulative product of delta_shrink, and
    h2 entries always lie on the n_h grid.
    """

    B: np.ndarray            # b x p fixed-effect coefficients
    Lambda: np.ndarray       # p x k factor loadings
    F: np.ndarray            # n x k factor scores (genetic + residual)
    F_a: np.ndarray          # r x k genetic factor effects
    h2: np.ndarray           # k factor heritabilities on the grid
    Delta: np.ndarray        # r x p residual genetic effects
    Phi: np.ndarray          # p x k loading precisions
    delta_shrink: np.ndarray  # k shrinkage multipliers
    tau: np.ndarray          # k cumulative products of delta_shrink
    psi_a_prec: np.ndarray   # p idiosyncratic genetic precisions
    sigma2_prec: np.ndarray  # p residual precisions
    imputed: np.ndarray      # values at masked Y cells (row-major order)

    @property
    def k_star(self) -> int:
        return self.Lambda.shape[1]

    def copy(self) -> "ChainState":
        return ChainState(**{f.name: getattr(self, f.name).copy() for f in fields(self)})

    def psi_a_variances(self) -> np.ndarray:
        return 1.0 / self.psi_a_prec

    def sigma2_variances(self) -> np.ndarray:
        return 1.0 / self.sigma2_prec

    def validate(self, n_h: int | None = None) -> None:
        if not np.array_equal(self.tau, np.cumprod(self.delta_shrink)):
            raise NumericalError("tau is not the cumulative product of delta_shrink")
        if np.any(self.psi_a_prec <= 0) or np.any(self.sigma2_prec <= 0) or np.any(self.Phi <= 0):
            raise NumericalError("precisions must be strictly positive")
        if np.any(self.h2 < 0) or np.any(self.h2 >= 1):
            raise NumericalError("h2 outside [0, 1)")
        if n_h is not None and not np.array_equal(self.h2, np.round(self.h2 * n_h) / n_h):
            raise NumericalError("h2 values are off the prior grid")
        for name in ("B", "Lambda", "F", "F_a", "Delta", "imputed"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise NumericalError(f"non-finite values in {name}")


def reconstruct_G(state: ChainState) -> np.ndarray:
    """Genetic covariance Lambda Diag(h2) Lambda^T + Psi_a (symmetric PSD)."""
    lam = state.Lambda
    G = (lam * state.h2) @ lam.T + np.diag(state.psi_a_variances())
    return (G + G.T) / 2.0


def reconstruct_R(state: ChainState) -> np.ndarray:
    """Residual covariance Lambda Diag(1-h2) Lambda^T + Psi_e."""
    lam = state.Lambda
    R = (lam * (1.0 - state.h2)) @ lam.T + np.diag(state.sigma2_variances())
    return (R + R.T) / 2.0


def reconstruct_P(state: ChainState) -> np.ndarray:
    """Phenotypic covariance; equals reconstruct_G + reconstruct_R."""
    return reconstruct_G(state) + reconstruct_R(state)


def trait_heritabilities(G: np.ndarray, P: np.ndarray, trait_names=None) -> np.ndarray:
    """Per-trait heritabilities diag(G)/diag(P), clipped to [0, 1]."""
    g_diag = np.diag(np.asarray(G, dtype=float))
    p_diag = np.diag(np.asarray(P, dtype=float))
    bad = np.flatnonzero(p_diag <= 0)
    if bad.size:
        name = trait_names[bad[0]] if trait_names is not None else f"trait {bad[0]}"
        raise DataError(f"zero phenotypic variance for {name}")
    return np.clip(g_diag / p_diag, 0.0, 1.0)


def selection_response(state: ChainState, fitness_index: int) -> np.ndarray:
    """Predicted per-trait response to selection on the fitness trait.

    Equals the fitness column of the shared-factor part of G, i.e. the
    genetic covariance of each non-fitness trait with fitness through the
    latent factors (idiosyncratic variance carries no cross-trait response).
    """
    p = state.Lambda.shape[0]
    if not 0 <= fitness_index < p:
        raise ParameterError(f"fitness index {fitness_index} out of range for {p} traits")
    shared = (state.Lambda * state.h2) @ state.Lambda[fitness_index]
    return np.delete(shared, fitness_index)


def fitness_variance_fraction(state: ChainState, fitness_index: int) -> float:
    """Fraction of genetic variance in fitness explained by the factors."""
    p = state.Lambda.shape[0]
    if not 0 <= fitness_index < p:
        raise ParameterError(f"fitness index {fitness_index} out of range for {p} traits")
    g_ww = float((state.Lambda[fitness_index] ** 2 * state.h2).sum()) + float(
        state.psi_a_variances()[fitness_index]
    )
    if g_ww <= 0:
        raise DataError("fitness trait has zero genetic variance")
    return 1.0 - float(state.psi_a_variances()[fitness_index]) / g_ww


__all__ = [
    "ModelDims",
    "PhenotypeData",
    "Kinship",
    "Hyperparameters",
    "ChainState",
    "reconstruct_G",
    "reconstruct_R",
    "reconstruct_P",
    "trait_heritabilities",
    "selection_response",
    "fitness_variance_fraction",
]
