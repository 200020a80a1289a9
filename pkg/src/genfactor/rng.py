"""Seeded random streams and the distribution kernels used by the sampler.

All kernels are pure given an RngStream. A single stream must not be used
from two threads at once; distinct stream ids never share state.
"""
from __future__ import annotations

import math

import numpy as np

from .errors import InsufficientDataError, NumericalError, ParameterError

# Cholesky retry policy for numerically semi-definite matrices (pedigree A
# matrices routinely have eigenvalues at roundoff level).
JITTER_SCALE = 1e-10
JITTER_RETRIES = 3


class RngStream:
    """Reproducible random stream identified by (seed, stream).

    Same (seed, stream) yields bit-identical draw sequences; distinct
    stream ids are statistically independent (SeedSequence spawn keys).
    """

    def __init__(self, seed: int, stream: int = 0):
        if seed < 0 or stream < 0:
            raise ParameterError("seed and stream must be non-negative integers")
        self.seed = int(seed)
        self.stream = int(stream)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream,))
        self.gen = np.random.Generator(np.random.PCG64(ss))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream={self.stream})"

    def state(self) -> dict:
        """Serializable snapshot of the underlying bit generator."""
        return {
            "seed": self.seed,
            "stream": self.stream,
            "bit_generator": self.gen.bit_generator.state,
        }

    @classmethod
    def from_state(cls, state: dict) -> "RngStream":
        rng = cls(state["seed"], state["stream"])
        rng.gen.bit_generator.state = state["bit_generator"]
        return rng


def cholesky_psd(matrix: np.ndarray, jitter: bool = True) -> np.ndarray:
    """Lower Cholesky factor, retrying with diagonal jitter on failure.

    Each retry adds JITTER_SCALE * mean(diag) to the diagonal, up to
    JITTER_RETRIES times; a matrix that still fails raises NumericalError.
    """
    matrix = np.asarray(matrix, dtype=float)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ParameterError(f"expected a square matrix, got shape {matrix.shape}")
    bump = JITTER_SCALE * float(np.mean(np.diag(matrix))) if matrix.size else 0.0
    attempt = matrix
    retries = JITTER_RETRIES if jitter else 0
    for k in range(retries + 1):
        try:
            return np.linalg.cholesky(attempt)
        except np.linalg.LinAlgError:
            if k == retries:
                break
            attempt = attempt + bump * np.eye(matrix.shape[0])
    raise NumericalError(
        f"matrix of order {matrix.shape[0]} is not positive definite "
        f"(Cholesky failed after {retries} jitter retries)"
    )


def sample_gamma(shape: float, rate: float, rng: RngStream) -> float:
    """Draw from Gamma(shape, rate); mean is shape/rate."""
    if not (shape > 0 and rate > 0):
        raise ParameterError(f"gamma parameters must be positive, got shape={shape}, rate={rate}")
    return float(rng.gen.gamma(shape, 1.0 / rate))


def sample_matrix_normal(
    mean: np.ndarray,
    row_cov: np.ndarray,
    col_cov: np.ndarray,
    rng: RngStream,
) -> np.ndarray:
    """Draw X with vec(X) ~ N(vec(mean), col_cov kron row_cov).

    row_cov and col_cov must be positive semi-definite and conform to mean.
    """
    mean = np.atleast_2d(np.asarray(mean, dtype=float))
    n, p = mean.shape
    row_cov = np.atleast_2d(np.asarray(row_cov, dtype=float))
    col_cov = np.atleast_2d(np.asarray(col_cov, dtype=float))
    if row_cov.shape != (n, n) or col_cov.shape != (p, p):
        raise ParameterError(
            f"covariance shapes {row_cov.shape}/{col_cov.shape} do not conform to mean {mean.shape}"
        )
    l_row = cholesky_psd(row_cov)
    l_col = cholesky_psd(col_cov)
    noise = rng.gen.standard_normal((n, p))
    return mean + l_row @ noise @ l_col.T


def sample_categorical(weights: np.ndarray, rng: RngStream) -> int:
    """Return index i with probability weights[i] / sum(weights)."""
    weights = np.asarray(weights, dtype=float)
    if weights.ndim != 1 or weights.size == 0:
        raise ParameterError("weights must be a non-empty 1-d vector")
    if np.any(weights < 0) or not np.all(np.isfinite(weights)):
        raise ParameterError("weights must be finite and non-negative")
    total = weights.sum()
    if total <= 0:
        raise ParameterError("weights must have positive sum")
    with np.errstate(divide="ignore"):
        return sample_categorical_log(np.log(weights), rng)


def sample_categorical_log(log_weights: np.ndarray, rng: RngStream) -> int:
    """Categorical draw from unnormalized log weights.

    Normalizes by max-log subtraction so that densities over n ~ 1000
    observations do not underflow.
    """
    log_weights = np.asarray(log_weights, dtype=float)
    top = np.max(log_weights)
    if not np.isfinite(top):
        raise ParameterError("all log weights are -inf or non-finite")
    probs = np.exp(log_weights - top)
    cdf = np.cumsum(probs)
    u = rng.gen.random() * cdf[-1]
    return int(np.searchsorted(cdf, u, side="right").clip(0, len(cdf) - 1))


def sample_wishart(dof: float, scale: np.ndarray, rng: RngStream) -> np.ndarray:
    """Wishart draw with mean dof * scale, via the Bartlett decomposition."""
    scale = np.atleast_2d(np.asarray(scale, dtype=float))
    order = scale.shape[0]
    if dof < order:
        raise ParameterError(f"Wishart dof ({dof}) must be >= matrix order ({order})")
    l_scale = cholesky_psd(scale, jitter=False)
    bartlett = np.zeros((order, order))
    idx = np.tril_indices(order, k=-1)
    bartlett[idx] = rng.gen.standard_normal(len(idx[0]))
    # chi-square(dof - i) on the diagonal
    df = dof - np.arange(order)
    bartlett[np.diag_indices(order)] = np.sqrt(rng.gen.chisquare(df))
    factor = l_scale @ bartlett
    return factor @ factor.T


def hpd_interval(samples: np.ndarray, mass: float) -> tuple[float, float]:
    """Shortest contiguous interval containing ceil(mass * n) sorted samples.

    Ties in width are broken toward the smaller lower endpoint.
    """
    if not 0.0 < mass < 1.0:
        raise ParameterError(f"mass must lie in (0, 1), got {mass}")
    samples = np.sort(np.asarray(samples, dtype=float).ravel())
    n = samples.size
    count = math.ceil(mass * n)
    if n < 10 or count > n:
        raise InsufficientDataError(
            f"need at least 10 samples covering the requested mass, got {n}"
        )
    widths = samples[count - 1 :] - samples[: n - count + 1]
    start = int(np.argmin(widths))  # argmin returns the first minimum: lowest start
    return float(samples[start]), float(samples[start + count - 1])
