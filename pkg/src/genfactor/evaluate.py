"""Accuracy statistics comparing fitted posteriors to simulation truth."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, NumericalError, ParameterError


def moments_G(values: np.ndarray, sire_labels: np.ndarray) -> np.ndarray:
    """Method-of-moments genetic covariance for a balanced half-sib design.

    4 * (between-sire - within-sire mean cross-product matrices) divided by
    the family size. Unbiased but unstable; can be indefinite.
    """
    values = np.asarray(values, dtype=float)
    labels = np.asarray(sire_labels)
    if values.ndim != 2 or labels.shape[0] != values.shape[0]:
        raise DataError("values must be (individuals x traits) aligned with sire labels")
    sires, inverse, counts = np.unique(labels, return_inverse=True, return_counts=True)
    s = sires.size
    if s < 2:
        raise DataError("need at least two sire families")
    if np.unique(counts).size != 1:
        raise DataError("unbalanced half-sib design is not supported")
    n_off = int(counts[0])
    if n_off < 2:
        raise DataError("need at least two offspring per sire")
    total = values.shape[0]

    family_means = np.zeros((s, values.shape[1]))
    np.add.at(family_means, inverse, values)
    family_means /= n_off
    grand = values.mean(axis=0)

    dev_b = family_means - grand
    between = n_off * (dev_b.T @ dev_b) / (s - 1)
    dev_w = values - family_means[inverse]
    within = (dev_w.T @ dev_w) / (total - s)
    return 4.0 * (between - within) / n_off


def frobenius_error(estimate: np.ndarray, truth: np.ndarray) -> float:
    """Frobenius norm of the elementwise difference."""
    diff = np.asarray(estimate, dtype=float) - np.asarray(truth, dtype=float)
    return float(np.linalg.norm(diff, "fro"))


def _top_eigenvectors(matrix: np.ndarray, k: int) -> np.ndarray:
    matrix = np.asarray(matrix, dtype=float)
    if not np.allclose(matrix, matrix.T, rtol=0, atol=1e-8 * max(1.0, np.abs(matrix).max())):
        raise ParameterError("matrix must be symmetric")
    try:
        eigvals, eigvecs = np.linalg.eigh((matrix + matrix.T) / 2.0)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"eigendecomposition failed: {exc}") from exc
    order = np.argsort(eigvals)[::-1]
    return eigvecs[:, order[:k]]


def krzanowski(estimate: np.ndarray, truth: np.ndarray, k: int) -> float:
    """Overlap of the dominant k-dimensional eigen-subspaces, in [0, k].

    Sum of eigenvalues of E_k^T T_k T_k^T E_k where E_k, T_k hold the top-k
    eigenvectors: 0 for orthogonal subspaces, k for identical ones.
    """
    p = np.asarray(truth).shape[0]
    if not 1 <= k <= p:
        raise ParameterError(f"k={k} must lie in [1, {p}]")
    e_k = _top_eigenvectors(estimate, k)
    t_k = _top_eigenvectors(truth, k)
    svals = np.linalg.svd(t_k.T @ e_k, compute_uv=False)
    return float(np.clip((svals ** 2).sum(), 0.0, k))


def vector_angle_degrees(u: np.ndarray, v: np.ndarray) -> float:
    """Acute angle between two loading vectors (sign-invariant)."""
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ParameterError("angle undefined for zero-norm vectors")
    cos = abs(float(u @ v)) / (nu * nv)
    return float(np.degrees(np.arccos(np.clip(cos, 0.0, 1.0))))


def match_factors(true_lambda: np.ndarray, est_lambda: np.ndarray) -> list[tuple[int, int, float]]:
    """Greedily pair true factors with estimated factors by ascending angle.

    Zero-norm columns are skipped with a warning. Each estimated factor is
    used at most once; ties break toward the lower estimated index. Returns
    (true index, matched estimated index, angle in degrees) tuples.
    """
    true_lambda = np.atleast_2d(np.asarray(true_lambda, dtype=float))
    est_lambda = np.atleast_2d(np.asarray(est_lambda, dtype=float))
    true_ok = [j for j in range(true_lambda.shape[1]) if np.linalg.norm(true_lambda[:, j]) > 0]
    est_ok = [j for j in range(est_lambda.shape[1]) if np.linalg.norm(est_lambda[:, j]) > 0]
    if len(true_ok) < true_lambda.shape[1] or len(est_ok) < est_lambda.shape[1]:
        warnings.warn("zero-norm factor columns skipped in matching", stacklevel=2)
    pairs = []
    for t in true_ok:
        for e in est_ok:
            pairs.append((vector_angle_degrees(true_lambda[:, t], est_lambda[:, e]), e, t))
    pairs.sort()
    used_true, used_est, matches = set(), set(), []
    for angle, e, t in pairs:
        if t in used_true or e in used_est:
            continue
        used_true.add(t)
        used_est.add(e)
        matches.append((t, e, angle))
    matches.sort()
    return matches


def count_large_factors(est_lambda: np.ndarray, p_trace: float) -> int:
    """Factors whose squared loading norm exceeds 0.1% of total variance."""
    if p_trace <= 0:
        raise ParameterError("total phenotypic variance must be positive")
    norms = (np.asarray(est_lambda, dtype=float) ** 2).sum(axis=0)
    return int(np.sum(norms / p_trace > 1e-3))


def h2_rmse(est_h2: np.ndarray, true_h2: np.ndarray) -> float:
    est = np.asarray(est_h2, dtype=float)
    true = np.asarray(true_h2, dtype=float)
    if est.shape != true.shape:
        raise ParameterError("heritability vectors must have matching shape")
    return float(np.sqrt(np.mean((est - true) ** 2)))


@dataclass
class EvalReport:
    """Accuracy metrics of one fitted replicate against its ground truth."""

    frobenius_moments: float
    frobenius_posterior: float
    krzanowski_G: float
    krzanowski_P: float
    k_G: int
    k_P: int
    n_large_factors: int
    h2_rmse: float
    factor_match: list = field(default_factory=list)  # (true idx, est idx, degrees)

    def median_angle(self) -> float:
        if not self.factor_match:
            return float("nan")
        return float(np.median([angle for _, _, angle in self.factor_match]))

    def to_row(self) -> dict:
        return {
            "frobenius_moments": self.frobenius_moments,
            "frobenius_posterior": self.frobenius_posterior,
            "krzanowski_G": self.krzanowski_G,
            "krzanowski_P": self.krzanowski_P,
            "k_G": self.k_G,
            "k_P": self.k_P,
            "n_large_factors": self.n_large_factors,
            "h2_rmse": self.h2_rmse,
            "median_angle_deg": self.median_angle(),
        }

    @classmethod
    def from_row(cls, row: dict, factor_match=None) -> "EvalReport":
        return cls(
            frobenius_moments=float(row["frobenius_moments"]),
            frobenius_posterior=float(row["frobenius_posterior"]),
            krzanowski_G=float(row["krzanowski_G"]),
            krzanowski_P=float(row["krzanowski_P"]),
            k_G=int(float(row["k_G"])),
            k_P=int(float(row["k_P"])),
            n_large_factors=int(float(row["n_large_factors"])),
            h2_rmse=float(row["h2_rmse"]),
            factor_match=list(factor_match or []),
        )


def summarize_reports(reports: list[EvalReport]) -> dict:
    """Medians and ranges across replicates, for boxplot emission."""
    summary = {"n_replicates": len(reports)}
    rows = [r.to_row() for r in reports]
    for key in rows[0]:
        vals = np.array([row[key] for row in rows], dtype=float)
        summary[key] = {
            "median": float(np.median(vals)),
            "min": float(vals.min()),
            "max": float(vals.max()),
        }
    return summary
