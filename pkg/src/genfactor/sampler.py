"""Adaptive Gibbs sampler for the sparse factor animal model.

One iteration visits nine conditional updates in a fixed scan order:

  1. impute missing trait values
  2. joint draw of fixed effects, residual genetic effects, and loadings
     (per trait, the stacked vector (b_i, delta_i, lambda_i))
  3. factor scores F
  4. genetic factor effects F_a (columns with positive heritability)
  5. factor heritabilities on the discrete grid
  6. loading precisions phi
  7. shrinkage multipliers delta / tau
  8. idiosyncratic genetic precisions
  9. residual precisions

followed (during burn-in only) by adaptation of the truncation rank k*.

The expensive conditionals are drawn exactly through two precomputed
decompositions that depend only on the design (X, Z, A):

* eigenbasis Q diag(d) Q^T = Z A Z^T, which turns the n x n solves of the
  step-2 auxiliary-variable sampler into diagonal-plus-low-rank solves and
  makes the step-5 grid densities O(n) per grid point;
* a simultaneous diagonalization S with S^T A^{-1} S = I and
  S^T Z^T Z S = diag(mu), which makes the step-4 draws diagonal.

Both give draws from the exact conditional laws; no approximation is made.
"""
from __future__ import annotations

import hashlib
import json
import logging
import pickle
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from threadpoolctl import threadpool_limits

from .errors import ConfigError, DataError, NumericalError
from .model import (
    ChainState,
    Hyperparameters,
    Kinship,
    ModelDims,
    PhenotypeData,
    reconstruct_G,
    reconstruct_P,
    reconstruct_R,
)
from .rng import RngStream, cholesky_psd, sample_categorical_log

logger = logging.getLogger("genfactor")

CHECKPOINT_VERSION = 1

# trait-block size for the batched step-2 solves (bounds temporary memory)
_TRAIT_CHUNK_ELEMS = 4_000_000


@dataclass
class ChainConfig:
    """Iteration schedule and reproducibility settings for one chain."""

    total_iters: int = 12000
    burn_in: int = 10000
    thin: int = 2
    seed: int = 0
    stream: int = 0
    adapt: bool = True
    checkpoint_interval: int = 0  # 0 = checkpoint only at the end of a run

    def validate(self) -> None:
        if self.burn_in < 0 or self.burn_in >= self.total_iters:
            raise ConfigError("burn_in must satisfy 0 <= burn_in < total_iters")
        if self.thin < 1:
            raise ConfigError("thin must be >= 1")
        if (self.total_iters - self.burn_in) // self.thin < 1:
            raise ConfigError("schedule yields no posterior draws")

    @property
    def n_draws(self) -> int:
        return (self.total_iters - self.burn_in) // self.thin


def column_signs(lam: np.ndarray) -> np.ndarray:
    """Per-column sign making the largest-magnitude loading positive."""
    if lam.shape[1] == 0:
        return np.ones(0)
    idx = np.argmax(np.abs(lam), axis=0)
    signs = np.sign(lam[idx, np.arange(lam.shape[1])])
    signs[signs == 0] = 1.0
    return signs


@dataclass
class PosteriorSamples:
    """Thinned post-burn-in draws plus running summaries.

    Loadings are stored sign-aligned (largest-magnitude element of each
    column positive); the live chain state is never flipped. psi_a and
    sigma2 are stored as variances.
    """

    lambda_draws: np.ndarray   # (d, p, k)
    h2_draws: np.ndarray       # (d, k)
    psi_a_draws: np.ndarray    # (d, p) variances
    sigma2_draws: np.ndarray   # (d, p) variances
    B_draws: np.ndarray        # (d, b, p)
    delta_draws: np.ndarray    # (d, k)
    fa_mean: np.ndarray        # (r, k) sign-aligned posterior mean
    imputed_mean: np.ndarray   # (m,)
    mask_rows: np.ndarray      # (m,)
    mask_cols: np.ndarray      # (m,)
    trait_names: list = field(default_factory=list)
    n_h: int = 100
    provenance: dict = field(default_factory=dict)

    @property
    def n_draws(self) -> int:
        return self.lambda_draws.shape[0]

    @property
    def k_star(self) -> int:
        return self.lambda_draws.shape[2]

    def state_for_draw(self, d: int) -> ChainState:
        """Materialize draw d as a ChainState (for the reconstructions)."""
        p, k = self.lambda_draws.shape[1:]
        return ChainState(
            B=self.B_draws[d],
            Lambda=self.lambda_draws[d],
            F=np.zeros((0, k)),
            F_a=np.zeros((0, k)),
            h2=self.h2_draws[d],
            Delta=np.zeros((0, p)),
            Phi=np.ones((p, k)),
            delta_shrink=self.delta_draws[d],
            tau=np.cumprod(self.delta_draws[d]),
            psi_a_prec=1.0 / self.psi_a_draws[d],
            sigma2_prec=1.0 / self.sigma2_draws[d],
            imputed=np.zeros(0),
        )

    def _mean_matrix(self, reconstruct) -> np.ndarray:
        total = np.zeros((len(self.trait_names),) * 2)
        for d in range(self.n_draws):
            total += reconstruct(self.state_for_draw(d))
        return total / self.n_draws

    def mean_G(self) -> np.ndarray:
        return self._mean_matrix(reconstruct_G)

    def mean_R(self) -> np.ndarray:
        return self._mean_matrix(reconstruct_R)

    def mean_P(self) -> np.ndarray:
        return self._mean_matrix(reconstruct_P)

    def mean_lambda(self) -> np.ndarray:
        return self.lambda_draws.mean(axis=0)

    def mean_B(self) -> np.ndarray:
        return self.B_draws.mean(axis=0)

    def factor_h2_mean(self) -> np.ndarray:
        return self.h2_draws.mean(axis=0)

    def digest(self) -> str:
        """SHA-256 over all draw arrays; identical runs give identical digests."""
        h = hashlib.sha256()
        for name in (
            "lambda_draws", "h2_draws", "psi_a_draws", "sigma2_draws",
            "B_draws", "delta_draws", "fa_mean", "imputed_mean",
        ):
            arr = np.ascontiguousarray(getattr(self, name))
            h.update(name.encode())
            h.update(str(arr.shape).encode())
            h.update(arr.tobytes())
        return h.hexdigest()


class GibbsSampler:
    """Workspace and conditional updates for one chain.

    Precomputes every design-dependent decomposition once; the step_*
    methods then mutate self.state in place. All randomness flows through
    the RngStream passed to each call, so a fixed call sequence with a
    fixed stream is bit-reproducible.
    """

    def __init__(self, data: PhenotypeData, kinship: Kinship, hyper: Hyperparameters,
                 state: ChainState | None = None):
        hyper.validate()
        if kinship.r != data.r:
            raise DataError(
                f"kinship order {kinship.r} does not match genetic levels {data.r}"
            )
        self.data = data
        self.kinship = kinship
        self.hyper = hyper
        n, p, r = data.n, data.p, data.r
        self.X = data.X
        self.z_index = data.z_index
        self._z_identity = r == n and np.array_equal(self.z_index, np.arange(n))

        mask = data.mask
        self.mask_rows, self.mask_cols = np.nonzero(mask)
        self.Yw = data.Y.copy()
        if self.mask_rows.size:
            col_means = np.zeros(p)
            for j in range(p):
                obs = data.Y[~mask[:, j], j]
                col_means[j] = obs.mean() if obs.size else 0.0
            self.Yw[self.mask_rows, self.mask_cols] = col_means[self.mask_cols]

        # per-trait scale of the observed data; fixed threshold reference
        # for truncation adaptation
        self.sd_obs = np.ones(p)
        for j in range(p):
            obs = data.Y[~mask[:, j], j]
            if obs.size > 1:
                self.sd_obs[j] = max(float(obs.std(ddof=1)), 1e-12)

        A = kinship.A
        self.L_A = kinship.chol
        self.A_inv = kinship.inverse

        zazt = A if self._z_identity else A[self.z_index][:, self.z_index]
        d_A, Q = np.linalg.eigh(zazt)
        self.d_A = np.maximum(d_A, 0.0)
        self.Q = Q
        self.QtX = Q.T @ self.X
        self._sqrt_dA = np.sqrt(self.d_A)
        self._a_pd = bool(self.d_A.min() > 1e-10 * max(self.d_A.max(), 1.0))

        counts = np.bincount(self.z_index, minlength=r).astype(float)
        inner = self.L_A.T @ (counts[:, None] * self.L_A)
        mu, U = np.linalg.eigh((inner + inner.T) / 2.0)
        self.mu = np.maximum(mu, 0.0)
        self.S = self.L_A @ U

        # per-column masked row lists, for incremental Q^T Yw updates
        self._mask_by_col = []
        if self.mask_rows.size:
            for j in np.unique(self.mask_cols):
                where = np.flatnonzero(self.mask_cols == j)
                self._mask_by_col.append((int(j), self.mask_rows[where], where))

        self._QtYw = None     # lazy cache of Q^T Yw (identity-Z fast path)
        self._Delta_rot = None  # Q^T Delta, refreshed by step 2's fast path
        self.state = state
        self._QtF = None if state is None else Q.T @ state.F
        self._warned_cap = False

    # ---- bookkeeping ------------------------------------------------

    @property
    def dims(self) -> ModelDims:
        k = self.state.k_star if self.state is not None else 0
        return ModelDims(self.data.n, self.data.p, self.data.r, self.data.b, max(k, 1))

    def _gather(self, M: np.ndarray) -> np.ndarray:
        """Z @ M without materializing Z."""
        return M if self._z_identity else M[self.z_index]

    def _scatter_add(self, M: np.ndarray) -> np.ndarray:
        """Z^T @ M without materializing Z."""
        if self._z_identity:
            return M
        out = np.zeros((self.data.r, M.shape[1]))
        np.add.at(out, self.z_index, M)
        return out

    def set_state(self, state: ChainState) -> None:
        self.state = state
        self._QtF = self.Q.T @ state.F
        self._Delta_rot = None

    def _get_QtYw(self) -> np.ndarray:
        if self._QtYw is None:
            self._QtYw = self.Q.T @ self.Yw
        return self._QtYw

    # ---- state construction -----------------------------------------

    def draw_state_from_prior(self, rng: RngStream, k: int) -> ChainState:
        """Hierarchical draw of all sampled quantities from their priors."""
        hyper = self.hyper
        n, p, r, b = self.data.n, self.data.p, self.data.r, self.data.b
        gen = rng.gen
        delta = np.empty(k)
        delta[0] = gen.gamma(hyper.a1, 1.0 / hyper.b1)
        if k > 1:
            delta[1:] = gen.gamma(hyper.a2, 1.0 / hyper.b2, size=k - 1)
        tau = np.cumprod(delta)
        phi = gen.gamma(hyper.nu / 2.0, 2.0 / hyper.nu, size=(p, k))
        lam = gen.standard_normal((p, k)) / np.sqrt(phi * tau)
        grid = hyper.h2_grid()
        log_prior = hyper.h2_log_prior()
        h2 = grid[[sample_categorical_log(log_prior, rng) for _ in range(k)]]
        psi_a_prec = gen.gamma(hyper.a_g, 1.0 / hyper.b_g, size=p)
        sigma2_prec = gen.gamma(hyper.a_r, 1.0 / hyper.b_r, size=p)
        B = gen.standard_normal((b, p)) / np.sqrt(hyper.b_prec)
        F_a = (self.L_A @ gen.standard_normal((r, k))) * np.sqrt(h2)
        F = self._gather(F_a) + gen.standard_normal((n, k)) * np.sqrt(1.0 - h2)
        Delta = (self.L_A @ gen.standard_normal((r, p))) / np.sqrt(psi_a_prec)
        return ChainState(
            B=B, Lambda=lam, F=F, F_a=F_a, h2=h2, Delta=Delta, Phi=phi,
            delta_shrink=delta, tau=tau, psi_a_prec=psi_a_prec,
            sigma2_prec=sigma2_prec,
            imputed=self.Yw[self.mask_rows, self.mask_cols].copy(),
        )

    def initialize_state(self, rng: RngStream, k: int) -> ChainState:
        """Data-driven start: least-squares fixed effects + SVD loadings."""
        hyper = self.hyper
        n, p, r, b = self.data.n, self.data.p, self.data.r, self.data.b
        gen = rng.gen
        B = np.linalg.lstsq(self.X, self.Yw, rcond=None)[0]
        resid = self.Yw - self.X @ B
        u_svd, s_svd, vt_svd = np.linalg.svd(resid, full_matrices=False)
        k_use = min(k, int((s_svd > 1e-10).sum()))
        lam = gen.standard_normal((p, k)) * 0.01
        F = gen.standard_normal((n, k))
        if k_use:
            lam[:, :k_use] = vt_svd[:k_use].T * (s_svd[:k_use] / np.sqrt(n))
            F[:, :k_use] = u_svd[:, :k_use] * np.sqrt(n)
        signs = column_signs(lam)
        lam *= signs
        F *= signs
        grid = hyper.h2_grid()
        log_prior = hyper.h2_log_prior()
        h2 = grid[[sample_categorical_log(log_prior, rng) for _ in range(k)]]
        resid2 = resid - F @ lam.T
        sigma2 = np.maximum(resid2.var(axis=0), 1e-8)
        state = ChainState(
            B=B,
            Lambda=lam,
            F=F,
            F_a=np.zeros((r, k)),
            h2=h2,
            Delta=np.zeros((r, p)),
            Phi=np.ones((p, k)),
            delta_shrink=np.ones(k),
            tau=np.cumprod(np.ones(k)),
            psi_a_prec=np.full(p, hyper.a_g / hyper.b_g),
            sigma2_prec=1.0 / sigma2,
            imputed=self.Yw[self.mask_rows, self.mask_cols].copy(),
        )
        return state

    def resimulate_response(self, rng: RngStream) -> None:
        """Redraw Y from the observation model at the current state.

        Used by joint-distribution (prior-reproduction) checks and for
        posterior predictive simulation.
        """
        st = self.state
        mean = self.X @ st.B + st.F @ st.Lambda.T + self._gather(st.Delta)
        noise = rng.gen.standard_normal(mean.shape) / np.sqrt(st.sigma2_prec)
        self.Yw = mean + noise
        self._QtYw = None

    # ---- conditional updates (scan order) ----------------------------

    def step_impute_missing(self, rng: RngStream) -> None:
        """Draw masked cells from their univariate normal conditionals."""
        if self.mask_rows.size == 0:
            return
        st = self.state
        mean = self.X @ st.B + st.F @ st.Lambda.T + self._gather(st.Delta)
        sd = 1.0 / np.sqrt(st.sigma2_prec)
        vals = (
            mean[self.mask_rows, self.mask_cols]
            + rng.gen.standard_normal(self.mask_rows.size) * sd[self.mask_cols]
        )
        if self._QtYw is not None:
            diff = vals - self.Yw[self.mask_rows, self.mask_cols]
            for col, rows, flat in self._mask_by_col:
                self._QtYw[:, col] += self.Q.T[:, rows] @ diff[flat]
        self.Yw[self.mask_rows, self.mask_cols] = vals
        st.imputed = vals

    def step_joint_regression(self, rng: RngStream) -> None:
        """Stacked draw of (b_i, delta_i, lambda_i) for every trait.

        The conditional is N(C^{-1} W^T sigma_i^{-2} y_i, C^{-1}) with
        W = [X Z F] and C = prior precision + sigma_i^{-2} W^T W. Sampled
        exactly via the auxiliary scheme: u from the prior, then a
        correction solve of (W D^{-1} W^T / sigma_i^2 + I) in the
        Z A Z^T eigenbasis where it is diagonal plus rank (b + k*).
        """
        st = self.state
        hyper = self.hyper
        n, p, r, b = self.data.n, self.data.p, self.data.r, self.data.b
        k = st.k_star
        gen = rng.gen

        prec = st.sigma2_prec
        sp = np.sqrt(prec)
        psi_var = 1.0 / st.psi_a_prec
        phi_tau = st.Phi * st.tau

        u_b = gen.standard_normal((b, p)) / np.sqrt(hyper.b_prec)
        u_l = gen.standard_normal((p, k)) / np.sqrt(phi_tau)

        if self._z_identity:
            # draw the genetic-effect block and the solve noise directly in
            # the eigenbasis; both laws are unchanged by the rotation
            u_d_rot = (self._sqrt_dA[:, None] * gen.standard_normal((n, p))) \
                * np.sqrt(psi_var)
            wu_rot = self.QtX @ u_b + u_d_rot + self._QtF @ u_l.T
            rhs_rot = (self._get_QtYw() - wu_rot) * sp - gen.standard_normal((n, p))
        else:
            u_d = (self.L_A @ gen.standard_normal((r, p))) * np.sqrt(psi_var)
            w_u = self.X @ u_b + self._gather(u_d) + st.F @ u_l.T
            rhs = (self.Yw - w_u) * sp - gen.standard_normal((n, p))
            rhs_rot = self.Q.T @ rhs

        w_rot = self._diag_lowrank_solve(rhs_rot, prec, psi_var, phi_tau)

        xtw = self.QtX.T @ w_rot
        ftw = self._QtF.T @ w_rot
        st.B = u_b + xtw * (sp / hyper.b_prec)
        st.Lambda = u_l + ftw.T * sp[:, None] / phi_tau
        if self._z_identity:
            delta_rot = u_d_rot + (self.d_A[:, None] * w_rot) * (psi_var * sp)
            st.Delta = self.Q @ delta_rot
            self._Delta_rot = delta_rot
        else:
            w = self.Q @ w_rot
            ztw = self._scatter_add(w)
            st.Delta = u_d + (self.kinship.A @ ztw) * (psi_var * sp)
            self._Delta_rot = None

    def _diag_lowrank_solve(self, rhs_rot: np.ndarray, prec: np.ndarray,
                            psi_var: np.ndarray, phi_tau: np.ndarray) -> np.ndarray:
        """Solve (I + prec_i (W D^{-1} W^T)) w = rhs per trait, rotated.

        In the Q basis the system is diagonal plus rank b + k*; the
        low-rank correction is resolved trait-by-trait with small solves.
        """
        n, p, b = self.data.n, self.data.p, self.data.b
        basis = np.concatenate([self.QtX, self._QtF], axis=1)  # (n, b+k)
        q = basis.shape[1]
        prior_diag = np.concatenate(
            [np.full((p, b), self.hyper.b_prec), phi_tau], axis=1
        ) / prec[:, None]  # inverse of the low-rank core, per trait
        lam_diag = 1.0 + self.d_A[:, None] * (prec * psi_var)[None, :]  # (n, p)

        w_rot = np.empty((n, p))
        chunk = max(1, _TRAIT_CHUNK_ELEMS // (n * q))
        for lo in range(0, p, chunk):
            sel = slice(lo, min(lo + chunk, p))
            inv_lam = 1.0 / lam_diag[:, sel]                      # (n, pc)
            t0 = inv_lam * rhs_rot[:, sel]                        # (n, pc)
            scaled = inv_lam.T[:, :, None] * basis[None, :, :]    # (pc, n, q)
            small = basis.T[None] @ scaled                        # (pc, q, q)
            small[:, np.arange(q), np.arange(q)] += prior_diag[sel]
            rhs_small = np.einsum("nq,np->pq", basis, t0)
            sol = np.linalg.solve(small, rhs_small[:, :, None])[:, :, 0]
            w_rot[:, sel] = t0 - inv_lam * (basis @ sol.T)
        return w_rot

    def step_factor_scores(self, rng: RngStream) -> None:
        """Row-wise normal draw of F given loadings and genetic effects."""
        st = self.state
        n = self.data.n
        k = st.k_star
        prec = st.sigma2_prec
        prior_w = 1.0 / (1.0 - st.h2)
        y_tilde = self.Yw - self.X @ st.B - self._gather(st.Delta)
        cond_prec = (st.Lambda * prec[:, None]).T @ st.Lambda
        cond_prec[np.arange(k), np.arange(k)] += prior_w
        try:
            chol = cholesky_psd(cond_prec)
        except NumericalError as exc:
            raise NumericalError(f"factor-score precision not PD: {exc}") from exc
        rhs = (y_tilde * prec) @ st.Lambda + self._gather(st.F_a) * prior_w
        mean = cho_solve((chol, True), np.ascontiguousarray(rhs.T), check_finite=False).T
        noise = solve_triangular(
            chol.T, rng.gen.standard_normal((k, n)), lower=False, check_finite=False
        )
        st.F = mean + noise.T
        self._QtF = self.Q.T @ st.F

    def step_genetic_factor_effects(self, rng: RngStream) -> None:
        """Draw F_a columns with positive heritability; zero the rest.

        In the S basis the conditional precision is diagonal:
        mu / (1 - h2) + 1 / h2.
        """
        st = self.state
        active = np.flatnonzero(st.h2 > 0)
        st.F_a[:, st.h2 == 0] = 0.0
        if active.size == 0:
            return
        h2 = st.h2[active]
        ztf = self._scatter_add(st.F[:, active])
        lin = self.S.T @ (ztf / (1.0 - h2))
        prec_diag = self.mu[:, None] / (1.0 - h2) + 1.0 / h2
        g = lin / prec_diag + rng.gen.standard_normal(lin.shape) / np.sqrt(prec_diag)
        st.F_a[:, active] = self.S @ g

    def h2_log_weights(self) -> np.ndarray:
        """Unnormalized log posterior of h2 over the grid, per factor.

        Integrates out F_a: column j has marginal N(0, h2 Z A Z^T +
        (1 - h2) I), evaluated via the eigenvalues d of Z A Z^T.
        """
        st = self.state
        grid = self.hyper.h2_grid()
        denom = grid[:, None] * self.d_A[None, :] + (1.0 - grid)[:, None]  # (n_h, n)
        log_det = np.log(denom).sum(axis=1)
        quad = (1.0 / denom) @ (self._QtF ** 2)
        return -0.5 * (log_det[:, None] + quad) + self.hyper.h2_log_prior()[:, None]

    def step_heritabilities(self, rng: RngStream) -> None:
        st = self.state
        grid = self.hyper.h2_grid()
        log_w = self.h2_log_weights()
        for j in range(st.k_star):
            st.h2[j] = grid[sample_categorical_log(log_w[:, j], rng)]

    def step_refresh_genetic_factors(self, rng: RngStream) -> None:
        """Collapsed redraw of F_a (factor scores integrated out), then F.

        The conditional updates of F, F_a and h2 individually are correct
        but mix poorly: once h2 is large, F and F_a are pinned to each
        other and the trait data stop informing the genetic effects. This
        extra scan move draws F_a from its conditional given the data with
        F marginalized - rows of Y - XB - ZDelta are then independent
        N(z_i F_a Lambda^T, Sigma) with Sigma = Lambda Diag(1-h2) Lambda^T
        + Psi_e - and immediately refreshes F given the new F_a, which
        restores the joint law and breaks the degeneracy. The draw is
        exact: both Kronecker factors of the posterior precision
        (Lambda^T Sigma^{-1} Lambda (x) Z^T Z + Diag(h2)^{-1} (x) A^{-1})
        diagonalize in the precomputed S basis and a per-move k x k
        eigenbasis.
        """
        st = self.state
        active = np.flatnonzero(st.h2 > 0)
        if active.size == 0:
            return
        prec = st.sigma2_prec
        res_var = 1.0 - st.h2
        y_tilde = self.Yw - self.X @ st.B - self._gather(st.Delta)

        # Sigma^{-1} pieces by Woodbury with the k x k core
        psi_inv_lam = st.Lambda * prec[:, None]              # Psi_e^{-1} Lambda
        gram = st.Lambda.T @ psi_inv_lam                     # Lambda^T Psi^{-1} Lambda
        core = gram + np.diag(1.0 / res_var)
        core_chol = cholesky_psd(core)
        corr = cho_solve((core_chol, True), gram, check_finite=False)
        m_full = gram - gram @ corr                          # Lambda^T Sigma^{-1} Lambda
        y_lin = y_tilde @ psi_inv_lam
        y_lin = y_lin - y_lin @ corr                         # Ytil Sigma^{-1} Lambda

        h2_act = st.h2[active]
        m_act = m_full[np.ix_(active, active)]
        sqrt_h2 = np.sqrt(h2_act)
        sym = (sqrt_h2[:, None] * m_act) * sqrt_h2[None, :]
        omega, vecs = np.linalg.eigh((sym + sym.T) / 2.0)
        omega = np.maximum(omega, 0.0)
        t_basis = sqrt_h2[:, None] * vecs                    # T^T Diag(h2)^{-1} T = I
        lin = self.S.T @ self._scatter_add(y_lin[:, active]) @ t_basis
        g_prec = self.mu[:, None] * omega[None, :] + 1.0
        g_draw = lin / g_prec + rng.gen.standard_normal(lin.shape) / np.sqrt(g_prec)
        st.F_a[:, active] = self.S @ g_draw @ t_basis.T
        self.step_factor_scores(rng)

    def step_loading_precisions(self, rng: RngStream) -> None:
        """Gamma draw of each phi_ij given its loading."""
        st = self.state
        nu = self.hyper.nu
        lam_sq = st.Lambda ** 2
        if self.hyper.phi_rate_includes_tau:
            rate = 0.5 * (nu + st.tau * lam_sq)
        else:
            rate = 0.5 * (nu + lam_sq)
        st.Phi = rng.gen.gamma((nu + 1.0) / 2.0, 1.0 / rate)

    def step_shrinkage(self, rng: RngStream) -> None:
        """Sequential gamma draws of delta_h; tau rebuilt as cumulative product."""
        st = self.state
        hyper = self.hyper
        p = self.data.p
        k = st.k_star
        weighted = (st.Phi * st.Lambda ** 2).sum(axis=0)  # (k,)
        delta = st.delta_shrink.copy()
        for h in range(k):
            others = delta.copy()
            others[h] = 1.0
            partial = np.cumprod(others)
            if h == 0:
                shape = hyper.a1 + 0.5 * p * k
                rate = hyper.b1 + 0.5 * float(partial @ weighted)
            else:
                shape = hyper.a2 + 0.5 * p * (k - h)
                rate = hyper.b2 + 0.5 * float(partial[h:] @ weighted[h:])
            delta[h] = rng.gen.gamma(shape, 1.0 / rate)
        st.delta_shrink = delta
        st.tau = np.cumprod(delta)

    def step_idiosyncratic_genetic(self, rng: RngStream) -> None:
        """Gamma draw of the residual genetic precisions (A-weighted norms)."""
        st = self.state
        hyper = self.hyper
        r = self.data.r
        if self._Delta_rot is not None and self._a_pd:
            # delta^T A^{-1} delta via the cached eigenbasis representation
            quad = np.einsum(
                "rp,rp->p", self._Delta_rot, self._Delta_rot / self.d_A[:, None]
            )
        else:
            quad = np.einsum("rp,rp->p", st.Delta, self.A_inv @ st.Delta)
        quad = np.maximum(quad, 0.0)
        st.psi_a_prec = rng.gen.gamma(hyper.a_g + 0.5 * r, 1.0 / (hyper.b_g + 0.5 * quad))

    def step_residual_precisions(self, rng: RngStream) -> None:
        st = self.state
        hyper = self.hyper
        n = self.data.n
        resid = self.Yw - self.X @ st.B - st.F @ st.Lambda.T - self._gather(st.Delta)
        ss = np.einsum("np,np->p", resid, resid)
        st.sigma2_prec = rng.gen.gamma(hyper.a_r + 0.5 * n, 1.0 / (hyper.b_r + 0.5 * ss))

    def scan(self, rng: RngStream) -> None:
        """One full Gibbs scan: the nine conditional updates in order,
        plus the collapsed genetic-factor refresh after the h2 draw."""
        self.step_impute_missing(rng)
        self.step_joint_regression(rng)
        self.step_factor_scores(rng)
        self.step_genetic_factor_effects(rng)
        self.step_heritabilities(rng)
        self.step_refresh_genetic_factors(rng)
        self.step_loading_precisions(rng)
        self.step_shrinkage(rng)
        self.step_idiosyncratic_genetic(rng)
        self.step_residual_precisions(rng)

    # ---- truncation adaptation ---------------------------------------

    def adapt_truncation(self, iteration: int, rng: RngStream, k_max: int) -> bool:
        """Resize k* with probability exp(alpha0 + alpha1 * iteration).

        Columns whose loadings are all below adapt_epsilon * sd(trait) are
        dropped; if none qualify, one prior-initialized column is appended
        (bounded by k_max, floored at one column). Returns True if the
        state was resized.
        """
        hyper = self.hyper
        st = self.state
        prob = np.exp(hyper.adapt_alpha0 + hyper.adapt_alpha1 * iteration)
        if rng.gen.random() >= prob:
            return False
        k = st.k_star
        threshold = hyper.adapt_epsilon * self.sd_obs
        negligible = (np.abs(st.Lambda) < threshold[:, None]).all(axis=0)
        if negligible.any():
            drop = np.flatnonzero(negligible)
            if drop.size == k:
                keep_best = int(np.argmax((st.Lambda ** 2).sum(axis=0)))
                drop = drop[drop != keep_best]
            if drop.size == 0:
                return False
            keep = np.setdiff1d(np.arange(k), drop)
            self._resize_columns(keep)
            return True
        if k >= k_max:
            if not self._warned_cap:
                logger.warning("truncation rank capped at k_max=%d; not growing", k_max)
                self._warned_cap = True
            return False
        self._append_prior_column(rng)
        return True

    def _resize_columns(self, keep: np.ndarray) -> None:
        st = self.state
        st.Lambda = st.Lambda[:, keep]
        st.F = st.F[:, keep]
        st.F_a = st.F_a[:, keep]
        st.h2 = st.h2[keep]
        st.Phi = st.Phi[:, keep]
        st.delta_shrink = st.delta_shrink[keep]
        st.tau = np.cumprod(st.delta_shrink)
        self._QtF = self._QtF[:, keep]

    def _append_prior_column(self, rng: RngStream) -> None:
        st = self.state
        hyper = self.hyper
        n, p, r = self.data.n, self.data.p, self.data.r
        gen = rng.gen
        delta_new = gen.gamma(hyper.a2, 1.0 / hyper.b2)
        st.delta_shrink = np.append(st.delta_shrink, delta_new)
        st.tau = np.cumprod(st.delta_shrink)
        phi_new = gen.gamma(hyper.nu / 2.0, 2.0 / hyper.nu, size=p)
        lam_new = gen.standard_normal(p) / np.sqrt(phi_new * st.tau[-1])
        grid = hyper.h2_grid()
        h2_new = grid[sample_categorical_log(hyper.h2_log_prior(), rng)]
        if h2_new > 0:
            fa_new = (self.L_A @ gen.standard_normal(r)) * np.sqrt(h2_new)
        else:
            fa_new = np.zeros(r)
        f_new = (fa_new if self._z_identity else fa_new[self.z_index]) \
            + gen.standard_normal(n) * np.sqrt(1.0 - h2_new)
        st.Lambda = np.column_stack([st.Lambda, lam_new])
        st.Phi = np.column_stack([st.Phi, phi_new])
        st.h2 = np.append(st.h2, h2_new)
        st.F_a = np.column_stack([st.F_a, fa_new])
        st.F = np.column_stack([st.F, f_new])
        self._QtF = np.column_stack([self._QtF, self.Q.T @ f_new])


# ---- chain driver -----------------------------------------------------


def _record_draw(sampler: GibbsSampler, records: dict) -> None:
    st = sampler.state
    signs = column_signs(st.Lambda)
    records["lambda"].append(st.Lambda * signs)
    records["h2"].append(st.h2.copy())
    records["psi_a"].append(st.psi_a_variances())
    records["sigma2"].append(st.sigma2_variances())
    records["B"].append(st.B.copy())
    records["delta"].append(st.delta_shrink.copy())
    if records["fa_sum"] is None:  # k* is frozen once recording starts
        records["fa_sum"] = np.zeros_like(st.F_a)
    records["fa_sum"] += st.F_a * signs
    if st.imputed.size:
        records["imputed_sum"] += st.imputed


def _empty_records(sampler: GibbsSampler) -> dict:
    return {
        "lambda": [], "h2": [], "psi_a": [], "sigma2": [], "B": [], "delta": [],
        "fa_sum": None,
        "imputed_sum": np.zeros(sampler.mask_rows.size),
    }


def save_checkpoint(path, sampler: GibbsSampler, rng: RngStream,
                    config: ChainConfig, iteration: int, records: dict) -> None:
    """Serialize the full chain state; resuming reproduces the run bit-exactly."""
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(config),
        "hyper": asdict(sampler.hyper),
        "iteration": iteration,
        "state": {name: getattr(sampler.state, name) for name in (
            "B", "Lambda", "F", "F_a", "h2", "Delta", "Phi",
            "delta_shrink", "tau", "psi_a_prec", "sigma2_prec", "imputed",
        )},
        "Yw": sampler.Yw,
        "rng": rng.state(),
        "records": records,
    }
    with open(path, "wb") as fh:
        pickle.dump(payload, fh, protocol=4)


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        payload = pickle.load(fh)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version in {path}")
    return payload


def run_chain(
    data: PhenotypeData,
    kinship: Kinship,
    hyper: Hyperparameters,
    config: ChainConfig,
    checkpoint_path=None,
    resume_from=None,
    stop_after: int | None = None,
    provenance: dict | None = None,
) -> PosteriorSamples | None:
    """Run the adaptive Gibbs sampler and collect thinned posterior draws.

    Fully deterministic given (seed, stream). If stop_after is set, the
    chain halts after that iteration, writes a checkpoint, and returns
    None; running again with resume_from that checkpoint yields output
    bit-identical to an uninterrupted run.
    """
    config.validate()
    hyper.validate()
    k_init, k_max = hyper.resolved_ranks(data.p)

    sampler = GibbsSampler(data, kinship, hyper)
    if resume_from is not None:
        payload = resume_from if isinstance(resume_from, dict) else load_checkpoint(resume_from)
        saved = ChainConfig(**payload["config"])
        if (saved.total_iters, saved.burn_in, saved.thin, saved.seed, saved.stream) != (
            config.total_iters, config.burn_in, config.thin, config.seed, config.stream,
        ):
            raise ConfigError("checkpoint schedule does not match requested configuration")
        sampler.set_state(ChainState(**payload["state"]))
        sampler.Yw = payload["Yw"]
        rng = RngStream.from_state(payload["rng"])
        start = payload["iteration"]
        records = payload["records"]
    else:
        rng = RngStream(config.seed, config.stream)
        sampler.set_state(sampler.initialize_state(rng, k_init))
        start = 0
        records = _empty_records(sampler)

    # the scan mixes many small kernels with a few large products; a single
    # BLAS thread avoids spin-wait contention and is several times faster
    with threadpool_limits(limits=1, user_api="blas"):
        for iteration in range(start + 1, config.total_iters + 1):
            sampler.scan(rng)
            if config.adapt and iteration <= config.burn_in:
                sampler.adapt_truncation(iteration, rng, k_max)
            try:
                sampler.state.validate(hyper.n_h)
            except NumericalError as exc:
                raise NumericalError(f"iteration {iteration}: {exc}") from exc
            if iteration > config.burn_in and (iteration - config.burn_in) % config.thin == 0:
                _record_draw(sampler, records)
            at_checkpoint = (
                checkpoint_path is not None
                and config.checkpoint_interval > 0
                and iteration % config.checkpoint_interval == 0
            )
            if at_checkpoint or (stop_after is not None and iteration == stop_after):
                if checkpoint_path is None:
                    raise ConfigError("stop_after requires a checkpoint path")
                save_checkpoint(checkpoint_path, sampler, rng, config, iteration, records)
                if stop_after is not None and iteration == stop_after:
                    return None

    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, sampler, rng, config,
                        config.total_iters, records)

    n_draws = len(records["lambda"])
    meta = dict(provenance or {})
    meta.setdefault("seed", config.seed)
    meta.setdefault("stream", config.stream)
    meta["k_star"] = sampler.state.k_star
    meta["n_draws"] = n_draws
    samples = PosteriorSamples(
        lambda_draws=np.stack(records["lambda"]),
        h2_draws=np.stack(records["h2"]),
        psi_a_draws=np.stack(records["psi_a"]),
        sigma2_draws=np.stack(records["sigma2"]),
        B_draws=np.stack(records["B"]),
        delta_draws=np.stack(records["delta"]),
        fa_mean=records["fa_sum"] / max(n_draws, 1),
        imputed_mean=records["imputed_sum"] / max(n_draws, 1),
        mask_rows=sampler.mask_rows.copy(),
        mask_cols=sampler.mask_cols.copy(),
        trait_names=list(data.trait_names),
        n_h=hyper.n_h,
        provenance=meta,
    )
    return samples
