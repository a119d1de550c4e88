"""ARX-operator packing, stable-spline hyperprior, and JMAP-ML fitting.

The independent entries of the ARX operator are packed into a vector with a
Gaussian hyperprior whose covariance is block-diagonal in TC-kernel blocks
indexed by input-output lag; kernel length scales and the noise variance are
treated as deterministic and fitted jointly by minimizing the negative
log-likelihood plus the prior quadratic form.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import block_diag, cho_solve, cholesky

from .gpcore import NumericalError, jittered_cholesky, tc_kernel, kernel_block
from .hankel import DataEmbedding, build_embedding
from .implicitgp import HyperParams, ImplicitGPModel, _sandwich_gram
from .linpred import fit_subspace
from .linsys import Trajectory, identity

__all__ = [
    "PackedGamma",
    "HyperPrior",
    "pack",
    "unpack",
    "build_S_gamma",
    "jmapml_objective",
    "FitOptions",
    "fit_jmapml",
    "cross_validate_zeta",
]


@dataclass
class PackedGamma:
    """Packed ARX vector col(rows of Gamma11, rows of Gamma2, last row of Gamma12)."""

    gamma: np.ndarray
    L0: int
    Lp: int
    projected: bool = False


def gamma_length(L0: int, Lp: int) -> int:
    return 2 * L0 * Lp + Lp


def unpack(gamma: np.ndarray, L0: int, Lp: int) -> tuple[np.ndarray, np.ndarray]:
    """Rebuild (Gamma1, Gamma2) from the packed vector (SISO).

    Gamma12 is reconstructed as lower-triangular Toeplitz from its last row;
    entries above the diagonal are zero.
    """
    gamma = np.asarray(gamma, dtype=float).ravel()
    if gamma.size != gamma_length(L0, Lp):
        raise ValueError(f"expected packed vector of length {gamma_length(L0, Lp)}")
    g11 = gamma[: L0 * Lp].reshape(Lp, L0)
    g2 = gamma[L0 * Lp : 2 * L0 * Lp].reshape(Lp, L0)
    last_row = gamma[2 * L0 * Lp :]
    ii, jj = np.meshgrid(np.arange(Lp), np.arange(Lp), indexing="ij")
    idx = np.clip(Lp - 1 - (ii - jj), 0, Lp - 1)
    G12 = np.where(ii >= jj, last_row[idx], 0.0)
    return np.hstack([g11, G12]), g2


def pack(Gamma1: np.ndarray, Gamma2: np.ndarray, atol: float = 1e-9) -> PackedGamma:
    """Pack (Gamma1, Gamma2) into the hyperprior-ordered vector.

    Gamma12 must be lower-triangular Toeplitz within ``atol``; otherwise it is
    projected by averaging its diagonals and the result is flagged.
    """
    Gamma1 = np.atleast_2d(np.asarray(Gamma1, dtype=float))
    Gamma2 = np.atleast_2d(np.asarray(Gamma2, dtype=float))
    Lp = Gamma1.shape[0]
    L0 = Gamma2.shape[1]
    if Gamma1.shape[1] != L0 + Lp or Gamma2.shape[0] != Lp:
        raise ValueError("inconsistent ARX operator dimensions")
    G11 = Gamma1[:, :L0]
    G12 = Gamma1[:, L0:]
    diag_means = np.array([np.mean(np.diagonal(G12, offset=-d)) for d in range(Lp)])
    last_row = diag_means[::-1].copy()
    gamma = np.concatenate([G11.ravel(), Gamma2.ravel(), last_row])
    G12_rebuilt = unpack(gamma, L0, Lp)[0][:, L0:]
    projected = bool(np.max(np.abs(G12 - G12_rebuilt)) > atol)
    return PackedGamma(gamma=gamma, L0=L0, Lp=Lp, projected=projected)


def _tc_block(m: int, n: int, lam: float, alpha: float) -> np.ndarray:
    """Block S_{m:n}: element (i, j) is the TC kernel at lags (m-i+1, m-j+1)."""
    lags = np.arange(m, n - 1, -1)
    spec = tc_kernel(lam, alpha)
    return kernel_block(spec, lags, lags)


def build_S_gamma(L0: int, Lp: int, zeta: Sequence[float]) -> np.ndarray:
    """Hyperprior covariance: lag-indexed TC blocks for the packed vector."""
    lam, alpha = float(zeta[0]), float(zeta[1])
    if not (0 <= alpha < 1):
        raise ValueError("alpha must lie in [0, 1)")
    if lam < 0:
        raise ValueError("lam must be >= 0")
    row_blocks = [_tc_block(L0 + i - 1, i, lam, alpha) for i in range(1, Lp + 1)]
    blocks = row_blocks + row_blocks + [_tc_block(Lp - 1, 0, lam, alpha)]
    return block_diag(*blocks)


@dataclass
class HyperPrior:
    """TC hyper-hyperparameters and the induced packed-vector covariance."""

    zeta: tuple[float, float]
    S_gamma: np.ndarray

    @classmethod
    def build(cls, L0: int, Lp: int, zeta: Sequence[float]) -> "HyperPrior":
        return cls(zeta=(float(zeta[0]), float(zeta[1])), S_gamma=build_S_gamma(L0, Lp, zeta))


def _prior_inverse(S_gamma: np.ndarray, ridge: float = 1e-10) -> np.ndarray:
    S = np.atleast_2d(np.asarray(S_gamma, dtype=float))
    try:
        L = cholesky(S, lower=True)
        return cho_solve((L, True), np.eye(S.shape[0]))
    except np.linalg.LinAlgError:
        base = float(np.mean(np.diag(S)))
        if base <= 0:
            base = 1.0
        return np.linalg.inv(S + ridge * base * np.eye(S.shape[0]))


class _Workspace:
    """Cached tensors for repeated JMAP-ML objective evaluations."""

    def __init__(self, embedding: DataEmbedding, input_kernel: str, output_kernel: str, m_u, m_y):
        if embedding.n_u != 1 or embedding.n_y != 1:
            raise ValueError("the JMAP-ML objective is implemented for SISO data")
        self.embedding = embedding
        self.L0, self.Lp, self.M = embedding.L0, embedding.Lp, embedding.M
        self.use_ku = input_kernel == "se"
        self.use_ky = output_kernel == "se"
        if input_kernel not in ("se", "zero") or output_kernel not in ("se", "zero"):
            raise ValueError("kernels must be 'se' or 'zero'")
        Wu = embedding.H_u.T
        Wy = embedding.H_y.T
        self.Du2 = (Wu[:, :, None, None] - Wu[None, None, :, :]) ** 2 if self.use_ku else None
        self.Dy2 = (Wy[:, :, None, None] - Wy[None, None, :, :]) ** 2 if self.use_ky else None
        m_u = m_u if m_u is not None else identity
        m_y = m_y if m_y is not None else identity
        self.mu_H = np.asarray(m_u(embedding.H_u), dtype=float)
        self.my_H = np.asarray(m_y(embedding.H_y), dtype=float)
        self._ku_cache: dict[float, np.ndarray] = {}
        self._ky_cache: dict[float, np.ndarray] = {}

    def _kernel_tensor(self, D2, l: float, cache: dict):
        if D2 is None:
            return None
        if l not in cache:
            if len(cache) > 6:
                cache.pop(next(iter(cache)))
            cache[l] = np.exp(D2 * (-0.5 / l**2))
        return cache[l]

    def value(self, l_u: float, l_y: float, sigma2: float, gamma: np.ndarray, s_inv) -> float:
        G1, G2 = unpack(gamma, self.L0, self.Lp)
        Gy = np.hstack([G2, -np.eye(self.Lp)])
        Ku4 = self._kernel_tensor(self.Du2, l_u, self._ku_cache)
        Ky4 = self._kernel_tensor(self.Dy2, l_y, self._ky_cache)
        M, Lp = self.M, self.Lp
        Lam = _sandwich_gram(Ku4, Ky4, G1, Gy, M=M)
        blk = sigma2 * (G2 @ G2.T + np.eye(Lp))
        Lam4 = Lam.reshape(M, Lp, M, Lp)
        idx = np.arange(M)
        Lam4[idx, :, idx, :] += blk
        m_d = (G1 @ self.mu_H + Gy @ self.my_H).ravel(order="F")
        try:
            Lc, _ = jittered_cholesky(Lam)
        except NumericalError:
            return np.inf
        logdet = 2.0 * float(np.sum(np.log(np.diag(Lc))))
        quad = float(m_d @ cho_solve((Lc, True), m_d))
        prior = float(gamma @ s_inv @ gamma) if s_inv is not None else 0.0
        return logdet + quad + prior


def jmapml_objective(
    embedding: DataEmbedding,
    theta: Sequence[float],
    gamma: np.ndarray,
    S_gamma: Optional[np.ndarray] = None,
    input_kernel: str = "se",
    output_kernel: str = "se",
    m_u=None,
    m_y=None,
) -> float:
    """Objective logdet(Lambda) + m^T Lambda^{-1} m + gamma^T S^{-1} gamma.

    ``theta`` is (l_u, l_y, sigma2).  Passing ``S_gamma=None`` drops the prior
    term (the no-hyperprior ablation, equal to the marginal-likelihood
    objective since the training targets are zero).
    """
    l_u, l_y, sigma2 = (float(v) for v in theta)
    ws = _Workspace(embedding, input_kernel, output_kernel, m_u, m_y)
    s_inv = _prior_inverse(S_gamma) if S_gamma is not None else None
    return ws.value(l_u, l_y, sigma2, np.asarray(gamma, dtype=float).ravel(), s_inv)


@dataclass
class FitOptions:
    """Knobs for the JMAP-ML fit (iterations, starts, ablation, kernels)."""

    max_iter: int = 150
    n_starts: int = 3
    use_hyperprior: bool = True
    input_kernel: str = "se"
    output_kernel: str = "se"
    step_tol: float = 1e-8
    f_tol: float = 1e-9
    sigma2_floor: float = 1e-12
    rcond: float = 1e-10


@dataclass
class JmapInit:
    gamma: np.ndarray
    l_u: float = 1.0
    l_y: float = 1.0
    sigma2: float = 1.0


def subspace_init(embedding: DataEmbedding, rcond: float = 1e-10, sigma2_floor: float = 1e-12) -> JmapInit:
    """Default initializer: Toeplitz-projected subspace fit, unit length scales,
    noise variance set to the subspace-fit residual variance."""
    arx = fit_subspace(embedding.H_u, embedding.H_y, embedding.L0, embedding.Lp, rcond=rcond)
    packed = pack(arx.Gamma1, arx.Gamma2)
    n_y = embedding.n_y
    H_yp = embedding.H_y[: n_y * embedding.L0]
    H_yf = embedding.H_y[n_y * embedding.L0 :]
    Z = np.vstack([embedding.H_u, H_yp])
    resid = H_yf - np.hstack([arx.Gamma1, arx.Gamma2]) @ Z
    sigma2 = max(float(np.mean(resid**2)), sigma2_floor)
    return JmapInit(gamma=packed.gamma, l_u=1.0, l_y=1.0, sigma2=sigma2)


def fit_jmapml(
    embedding: DataEmbedding,
    zeta: Sequence[float],
    init: Optional[JmapInit] = None,
    options: Optional[FitOptions] = None,
) -> HyperParams:
    """Fit all hyperparameters by quasi-Newton descent on the JMAP-ML objective.

    Length scales and the noise variance are optimized in log space; the packed
    ARX vector is unconstrained.  Multi-start perturbs the initial length
    scales by factors (1, 0.5, 2); the best local optimum is returned.
    """
    from .solvers import OptimProblem, local_minimize

    opts = options or FitOptions()
    if init is None:
        init = subspace_init(embedding, rcond=opts.rcond, sigma2_floor=opts.sigma2_floor)
    L0, Lp = embedding.L0, embedding.Lp
    ws = _Workspace(embedding, opts.input_kernel, opts.output_kernel, None, None)
    s_inv = _prior_inverse(build_S_gamma(L0, Lp, zeta)) if opts.use_hyperprior else None

    has_lu = opts.input_kernel == "se"
    has_ly = opts.output_kernel == "se"
    dgam = gamma_length(L0, Lp)
    n_scale = int(has_lu) + int(has_ly)
    dim = n_scale + 1 + dgam

    def split(x):
        i = 0
        l_u = np.exp(x[i]) if has_lu else init.l_u
        i += int(has_lu)
        l_y = np.exp(x[i]) if has_ly else init.l_y
        i += int(has_ly)
        sigma2 = np.exp(x[i])
        return l_u, l_y, sigma2, x[i + 1 :]

    def objective(x):
        l_u, l_y, sigma2, gamma = split(x)
        return ws.value(l_u, l_y, sigma2, gamma, s_inv)

    lower = np.concatenate([
        np.full(n_scale, np.log(1e-3)),
        [np.log(opts.sigma2_floor)],
        np.full(dgam, -np.inf),
    ])
    upper = np.concatenate([
        np.full(n_scale, np.log(1e4)),
        [np.log(1e8)],
        np.full(dgam, np.inf),
    ])

    def make_start(scale: float) -> np.ndarray:
        parts = []
        if has_lu:
            parts.append([np.log(init.l_u * scale)])
        if has_ly:
            parts.append([np.log(init.l_y * scale)])
        parts.append([np.log(max(init.sigma2, opts.sigma2_floor))])
        parts.append(np.asarray(init.gamma, dtype=float))
        return np.concatenate([np.asarray(p, dtype=float).ravel() for p in parts])

    scales = [1.0, 0.5, 2.0][: max(1, opts.n_starts)] if n_scale else [1.0]
    results, failures = [], []
    for s in scales:
        problem = OptimProblem(
            objective=objective,
            dim=dim,
            lower=lower,
            upper=upper,
            seeds=[make_start(s)],
            step_tol=opts.step_tol,
            f_tol=opts.f_tol,
            max_iter=opts.max_iter,
        )
        res = local_minimize(problem)
        if res.status == "failed" or not np.isfinite(res.f):
            failures.append((s, res.status))
        else:
            results.append(res)
    if not results:
        raise RuntimeError(f"all JMAP-ML starts failed: {failures}")
    best = min(results, key=lambda r: r.f)
    l_u, l_y, sigma2, gamma = split(best.x)
    return HyperParams(l_u=float(l_u), l_y=float(l_y), sigma2=float(sigma2),
                       gamma=np.asarray(gamma, dtype=float), L0=L0, Lp=Lp)


def cross_validate_zeta(
    data: Trajectory,
    L0: int,
    Lp: int,
    grid_lambda: Sequence[float],
    grid_alpha: Sequence[float],
    split: float = 0.75,
    options: Optional[FitOptions] = None,
    predict_seed: int = 0,
) -> tuple[float, float]:
    """Select TC hyper-hyperparameters by chronological cross-validation.

    Fits on the first ``split`` fraction of the trajectory and scores one-step
    MMSE prediction RMSE on the remainder; returns the arg-min grid point,
    ties broken toward smaller lambda then smaller alpha.  Grid points whose
    fit fails score +inf.
    """
    from .predict import PredictionQuery, PredictOptions, predict

    if len(grid_lambda) == 0 or len(grid_alpha) == 0:
        raise ValueError("grids must be nonempty")
    u = np.asarray(data.u, dtype=float).ravel()
    y = np.asarray(data.y, dtype=float).ravel()
    N = len(u)
    L = L0 + Lp
    n_fit = int(round(split * N))
    if n_fit < L + 1 or N - n_fit < 1:
        raise ValueError("split leaves too little data for fitting or validation")
    emb = build_embedding(Trajectory(u=u[:n_fit], y=y[:n_fit]), L0, Lp)
    val_starts = [k for k in range(N - L + 1) if k + L0 >= n_fit]
    if not val_starts:
        val_starts = [N - L]
    pred_opts = PredictOptions(swarm_size=15, pso_iters=25, polish_max_iter=60)

    best = None
    for lam in sorted(set(float(v) for v in grid_lambda)):
        for alpha in sorted(set(float(v) for v in grid_alpha)):
            try:
                hyper = fit_jmapml(emb, (lam, alpha), options=options)
                opts = options or FitOptions()
                model = ImplicitGPModel(emb, hyper, input_kernel=opts.input_kernel,
                                        output_kernel=opts.output_kernel)
                errs = []
                for k in val_starts:
                    q = PredictionQuery(u=u[k : k + L], y_p=y[k : k + L0], criterion="mmse")
                    y_f, _ = predict(model, q, seed=predict_seed, options=pred_opts)
                    errs.append(y_f[0] - y[k + L0])
                score = float(np.sqrt(np.mean(np.square(errs))))
            except Exception:
                score = np.inf
            if best is None or score < best[0]:
                best = (score, lam, alpha)
    return best[1], best[2]
