"""Implicit GP model of the trajectory-characterization function.

The model places a GP on the residual of the multi-step ARX relation applied
to nonlinearly transformed input/output windows; the transformed blocks carry
GP priors themselves, which induces the prior mean, cross-covariance and Gram
matrix assembled here.  Training observations are identically zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.linalg import cho_solve

from .gpcore import (
    GaussianPosterior,
    KernelSpec,
    gp_posterior,
    jittered_cholesky,
    kernel_block,
    se_kernel,
    symmetrize,
    zero_kernel,
)
from .hankel import DataEmbedding
from .linsys import identity

__all__ = [
    "HyperParams",
    "ImplicitGPModel",
    "assemble_eta",
    "noise_cov",
    "prior_mean_data",
    "prior_mean_query",
    "cross_cov",
    "gram",
    "prior_var_query",
    "posterior_f",
    "posterior_f_batch",
    "hat_kp",
]


@dataclass(frozen=True, eq=False)
class HyperParams:
    """Kernel length scales, noise variance, and the packed ARX vector."""

    l_u: float
    l_y: float
    sigma2: float
    gamma: np.ndarray
    L0: int
    Lp: int

    def __post_init__(self) -> None:
        if self.l_u <= 0 or self.l_y <= 0:
            raise ValueError("length scales must be positive")
        if self.sigma2 <= 0:
            raise ValueError("noise variance must be positive")
        object.__setattr__(self, "gamma", np.asarray(self.gamma, dtype=float).ravel())
        from . import hyperopt  # deferred: hyperopt imports this module

        g1, g2 = hyperopt.unpack(self.gamma, self.L0, self.Lp)
        object.__setattr__(self, "_gamma1", g1)
        object.__setattr__(self, "_gamma2", g2)

    @property
    def gamma1(self) -> np.ndarray:
        return self._gamma1

    @property
    def gamma2(self) -> np.ndarray:
        return self._gamma2

    def same_as(self, other: "HyperParams") -> bool:
        return (
            self.l_u == other.l_u
            and self.l_y == other.l_y
            and self.sigma2 == other.sigma2
            and self.L0 == other.L0
            and self.Lp == other.Lp
            and np.array_equal(self.gamma, other.gamma)
        )


def assemble_eta(u: np.ndarray, y_p: np.ndarray, y_f: np.ndarray) -> np.ndarray:
    """Stack a query trajectory vector: input window first, then outputs."""
    return np.concatenate([np.ravel(u), np.ravel(y_p), np.ravel(y_f)]).astype(float)


def noise_cov(Gamma2: np.ndarray, sigma2: float, M: int) -> np.ndarray:
    """Block-diagonal noise covariance sigma^2 (I_M kron (Gamma2 Gamma2^T + I))."""
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    G2 = np.atleast_2d(np.asarray(Gamma2, dtype=float))
    blk = sigma2 * (G2 @ G2.T + np.eye(G2.shape[0]))
    return np.kron(np.eye(M), blk)


def _sandwich_gram(Ku4, Ky4, G1, Gy, M: Optional[int] = None) -> np.ndarray:
    """Gram (M*Lp, M*Lp) from elementwise kernel tensors of shape (M, L, M, L)."""
    if M is None:
        M = Ku4.shape[0] if Ku4 is not None else Ky4.shape[0]
    Lp = G1.shape[0]
    K4 = np.zeros((M, Lp, M, Lp))
    if Ku4 is not None:
        K4 += np.einsum("ai,kilj,bj->kalb", G1, Ku4, G1, optimize=True)
    if Ky4 is not None:
        K4 += np.einsum("ai,kilj,bj->kalb", Gy, Ky4, Gy, optimize=True)
    return K4.reshape(M * Lp, M * Lp)


class ImplicitGPModel:
    """Assembled implicit GP model with cached training-side factorizations.

    The model is immutable after construction; build a new instance to change
    hyperparameters (caches are keyed on the hyperparameter values used at
    assembly).  Prior mean functions default to the identity.
    """

    def __init__(
        self,
        embedding: DataEmbedding,
        hyper: HyperParams,
        input_kernel: str = "se",
        output_kernel: str = "se",
        m_u: Optional[Callable] = None,
        m_y: Optional[Callable] = None,
    ) -> None:
        if embedding.n_u != 1 or embedding.n_y != 1:
            raise ValueError("the implicit GP model is implemented for SISO data")
        if embedding.L0 != hyper.L0 or embedding.Lp != hyper.Lp:
            raise ValueError("embedding and hyperparameter window lengths differ")
        self.embedding = embedding
        self.hyper = hyper
        self.m_u = m_u if m_u is not None else identity
        self.m_y = m_y if m_y is not None else identity
        self.k_u = self._resolve_kernel(input_kernel, hyper.l_u)
        self.k_y = self._resolve_kernel(output_kernel, hyper.l_y)

        L, Lp, M = embedding.L, embedding.Lp, embedding.M
        self.G1 = hyper.gamma1
        self.G2 = hyper.gamma2
        self.Gy = np.hstack([self.G2, -np.eye(Lp)])
        self.windows_u = embedding.H_u.T.copy()  # (M, L)
        self.windows_y = embedding.H_y.T.copy()
        self.mu_H = np.asarray(self.m_u(embedding.H_u), dtype=float)
        self.my_H = np.asarray(self.m_y(embedding.H_y), dtype=float)
        self.y_scale = max(float(np.std(embedding.H_y)), 1e-8)
        self.u_scale = max(float(np.std(embedding.H_u)), 1e-8)

        R = self.G1 @ self.mu_H + self.Gy @ self.my_H  # (Lp, M)
        self.m_d = R.ravel(order="F")

        Ku4 = self._window_tensor(self.k_u, self.windows_u)
        Ky4 = self._window_tensor(self.k_y, self.windows_y)
        self.K_dd = _sandwich_gram(Ku4, Ky4, self.G1, self.Gy, M=M)
        self.sigma2_gg = hyper.sigma2 * (self.G2 @ self.G2.T)
        noise_blk = self.sigma2_gg + hyper.sigma2 * np.eye(Lp)
        Lam4 = self.K_dd.reshape(M, Lp, M, Lp).copy()
        idx = np.arange(M)
        Lam4[idx, :, idx, :] += noise_blk
        self.Lambda = symmetrize(Lam4.reshape(M * Lp, M * Lp))
        self.chol, self.jitter = jittered_cholesky(self.Lambda)
        self.alpha = cho_solve((self.chol, True), self.m_d)
        self._lam_inv: Optional[np.ndarray] = None

    @staticmethod
    def _resolve_kernel(kind, length_scale: float) -> KernelSpec:
        if isinstance(kind, KernelSpec):
            return kind
        if kind == "se":
            return se_kernel(length_scale)
        if kind == "zero":
            return zero_kernel()
        raise ValueError(f"unknown kernel choice {kind!r}")

    # -- kernel tensor helpers -------------------------------------------------

    def _window_tensor(self, spec: KernelSpec, W: np.ndarray):
        """Elementwise kernel tensor (M, L, M, L) over window entries, or None."""
        if spec.family == "zero":
            return None
        d = W[:, :, None, None] - W[None, None, :, :]
        return np.exp(d**2 * (-0.5 / spec.length_scale**2))

    def _query_tensor(self, spec: KernelSpec, W: np.ndarray, Q: np.ndarray):
        """Kernel values (M, L, B, L) between window entries and query windows."""
        if spec.family == "zero":
            return None
        d = W[:, :, None, None] - Q[None, None, :, :]
        return np.exp(d**2 * (-0.5 / spec.length_scale**2))

    def _self_tensor(self, spec: KernelSpec, Q: np.ndarray):
        """Kernel values (B, L, L) within each query window."""
        if spec.family == "zero":
            return None
        d = Q[:, :, None] - Q[:, None, :]
        return np.exp(d**2 * (-0.5 / spec.length_scale**2))

    # -- cached solves ----------------------------------------------------------

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Apply Lambda^{-1} using the cached Cholesky factor."""
        return cho_solve((self.chol, True), rhs)

    @property
    def lam_inv(self) -> np.ndarray:
        if self._lam_inv is None:
            self._lam_inv = self.solve(np.eye(self.Lambda.shape[0]))
        return self._lam_inv

    def split_eta(self, eta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        eta = np.asarray(eta, dtype=float).ravel()
        L = self.embedding.L
        if eta.size != 2 * L:
            raise ValueError(f"expected query of length {2 * L}, got {eta.size}")
        return eta[:L], eta[L:]


def prior_mean_data(model: ImplicitGPModel) -> np.ndarray:
    """Prior mean of the training observations, stacked column-wise."""
    return model.m_d.copy()


def gram(model: ImplicitGPModel) -> np.ndarray:
    """Prior covariance of the training observations, (M*Lp, M*Lp)."""
    return model.K_dd.copy()


def prior_mean_query(model: ImplicitGPModel, eta: np.ndarray) -> np.ndarray:
    u, y = model.split_eta(eta)
    return model.G1 @ np.asarray(model.m_u(u), dtype=float) + model.Gy @ np.asarray(model.m_y(y), dtype=float)


def prior_var_query(model: ImplicitGPModel, eta: np.ndarray) -> np.ndarray:
    u, y = model.split_eta(eta)
    Kuu = kernel_block(model.k_u, u, u)
    Kyy = kernel_block(model.k_y, y, y)
    return symmetrize(model.G1 @ Kuu @ model.G1.T + model.Gy @ Kyy @ model.Gy.T)


def cross_cov(model: ImplicitGPModel, eta: np.ndarray) -> np.ndarray:
    """Covariance (M*Lp, Lp) between training observations and f at the query."""
    u, y = model.split_eta(eta)
    blocks = _cross_blocks(model, u[None, :], y[None, :])[0]
    return blocks


def _cross_blocks(model: ImplicitGPModel, U: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Batched cross-covariances, shape (B, M*Lp, Lp)."""
    M, Lp = model.embedding.M, model.embedding.Lp
    B = U.shape[0]
    out = np.zeros((B, M, Lp, Lp))
    KuQ = model._query_tensor(model.k_u, model.windows_u, U)
    if KuQ is not None:
        out += np.einsum("ai,kibj,cj->bkac", model.G1, KuQ, model.G1, optimize=True)
    KyQ = model._query_tensor(model.k_y, model.windows_y, Y)
    if KyQ is not None:
        out += np.einsum("ai,kibj,cj->bkac", model.Gy, KyQ, model.Gy, optimize=True)
    return out.reshape(B, M * Lp, Lp)


def posterior_f(model: ImplicitGPModel, eta: np.ndarray) -> GaussianPosterior:
    """Posterior of f at a query, conditioning on the zero training targets."""
    Sigma_bar = noise_cov(model.G2, model.hyper.sigma2, model.embedding.M)
    return gp_posterior(
        prior_mean_at_query=prior_mean_query(model, eta),
        prior_mean_at_data=model.m_d,
        k_qq=prior_var_query(model, eta),
        k_dq=cross_cov(model, eta),
        K_dd=model.K_dd,
        noise_cov=Sigma_bar,
        observations=np.zeros(model.m_d.size),
    )


def posterior_f_batch(model: ImplicitGPModel, Eta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Posterior means (B, Lp) and covariances (B, Lp, Lp) for a query batch.

    Equivalent to :func:`posterior_f` per row, but reuses the cached training
    factorization and evaluates kernels in batch.
    """
    Eta = np.atleast_2d(np.asarray(Eta, dtype=float))
    L = model.embedding.L
    if Eta.shape[1] != 2 * L:
        raise ValueError(f"expected queries of length {2 * L}")
    U, Y = Eta[:, :L], Eta[:, L:]
    B = Eta.shape[0]
    Lp = model.embedding.Lp

    m_eta = np.asarray(model.m_u(U), dtype=float) @ model.G1.T
    m_eta += np.asarray(model.m_y(Y), dtype=float) @ model.Gy.T

    k_qq = np.zeros((B, Lp, Lp))
    KuB = model._self_tensor(model.k_u, U)
    if KuB is not None:
        k_qq += np.einsum("ai,bij,cj->bac", model.G1, KuB, model.G1, optimize=True)
    KyB = model._self_tensor(model.k_y, Y)
    if KyB is not None:
        k_qq += np.einsum("ai,bij,cj->bac", model.Gy, KyB, model.Gy, optimize=True)

    k_dq = _cross_blocks(model, U, Y)  # (B, N, Lp)
    m_p = m_eta - np.einsum("bne,n->be", k_dq, model.alpha)
    W = np.matmul(model.lam_inv, k_dq)  # (B, N, Lp)
    quad = np.einsum("bne,bnf->bef", k_dq, W)
    k_p = k_qq - quad
    k_p = 0.5 * (k_p + np.transpose(k_p, (0, 2, 1)))
    return m_p, k_p


def hat_kp(model: ImplicitGPModel, posterior: GaussianPosterior, eta: Optional[np.ndarray] = None) -> np.ndarray:
    """Projected prediction-error covariance: posterior cov + sigma^2 G2 G2^T."""
    return symmetrize(posterior.cov + model.sigma2_gg)
