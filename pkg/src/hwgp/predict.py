"""Explicit output prediction from the implicit GP posterior.

Predictions minimize a chosen optimality criterion over the future output
window, with a particle-swarm global stage seeded at the subspace prediction
followed by a quasi-Newton polish.  Nonlinearity recovery conditions the
input/output GP priors on the same training data.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .gpcore import GaussianPosterior, kernel_block
from .implicitgp import ImplicitGPModel, posterior_f, posterior_f_batch
from .linsys import identity
from .solvers import OptimProblem, local_minimize, particle_swarm

__all__ = [
    "PredictionQuery",
    "PredictOptions",
    "predict",
    "predict_hammerstein",
    "RecoveredNonlinearities",
    "recover_nonlinearities",
    "phi_posterior_mean",
]

CRITERIA = ("ml", "mmse", "mvu")


@dataclass
class PredictionQuery:
    """Input window (length L), past outputs (length L0), and criterion."""

    u: np.ndarray
    y_p: np.ndarray
    criterion: str = "mmse"

    def __post_init__(self) -> None:
        self.u = np.asarray(self.u, dtype=float).ravel()
        self.y_p = np.asarray(self.y_p, dtype=float).ravel()
        if self.criterion not in CRITERIA:
            raise ValueError(f"criterion must be one of {CRITERIA}")


@dataclass
class PredictOptions:
    swarm_size: int = 30
    pso_iters: int = 60
    polish_max_iter: int = 200
    box_scale: float = 5.0
    mvu_weight0: float = 1e2
    mvu_weight_factor: float = 10.0
    mvu_weight_cap: float = 1e8
    mvu_tol: float = 1e-6


def _batched_criterion(model: ImplicitGPModel, u: np.ndarray, y_p: np.ndarray,
                       criterion: str, weight: float = 1.0):
    """Vectorized objective over candidate future windows (B, Lp)."""
    Lp = model.embedding.Lp

    def objective(Yf: np.ndarray) -> np.ndarray:
        Yf = np.atleast_2d(Yf)
        B = Yf.shape[0]
        Eta = np.hstack([np.tile(u, (B, 1)), np.tile(y_p, (B, 1)), Yf])
        m_p, k_p = posterior_f_batch(model, Eta)
        sq = np.sum(m_p**2, axis=1)
        if criterion == "ml":
            tr = np.trace(k_p, axis1=1, axis2=2)
            floor = 1e-12 * (1.0 + np.abs(tr) / Lp)
            w, V = np.linalg.eigh(k_p)
            w = np.maximum(w, floor[:, None])
            z = np.einsum("bij,bi->bj", V, m_p)
            return np.sum(np.log(w), axis=1) + np.sum(z**2 / w, axis=1)
        k_hat = k_p + model.sigma2_gg[None, :, :]
        tr_hat = np.trace(k_hat, axis1=1, axis2=2)
        if criterion == "mmse":
            return tr_hat + sq
        return tr_hat + weight * sq  # mvu penalty form

    return objective


def _optimize(model, objective, seed_yf, opts, seed, polish_only=False):
    Lp = seed_yf.size
    radius = opts.box_scale * model.y_scale
    lower = seed_yf - radius
    upper = seed_yf + radius
    x = seed_yf
    if not polish_only:
        problem = OptimProblem(objective=objective, dim=Lp, lower=lower, upper=upper,
                               seeds=[seed_yf], vectorized=True)
        x, _ = particle_swarm(problem, swarm_size=opts.swarm_size, iters=opts.pso_iters, seed=seed)
    polish = OptimProblem(objective=objective, dim=Lp, lower=lower, upper=upper,
                          seeds=[x, seed_yf], vectorized=True,
                          max_iter=opts.polish_max_iter)
    res = local_minimize(polish)
    if res.status == "failed":
        warnings.warn("prediction polish did not converge; returning best iterate")
    return res.x


def predict(
    model: ImplicitGPModel,
    query: PredictionQuery,
    seed: Optional[int] = None,
    options: Optional[PredictOptions] = None,
) -> tuple[np.ndarray, GaussianPosterior]:
    """Optimal future output window and the posterior of f at the optimum."""
    opts = options or PredictOptions()
    L, L0 = model.embedding.L, model.embedding.L0
    if query.u.size != L or query.y_p.size != L0:
        raise ValueError("query window lengths do not match the model")
    seed_yf = model.G1 @ query.u + model.G2 @ query.y_p

    if query.criterion == "mvu":
        weight = opts.mvu_weight0
        objective = _batched_criterion(model, query.u, query.y_p, "mvu", weight)
        y_f = _optimize(model, objective, seed_yf, opts, seed)
        while True:
            eta = np.concatenate([query.u, query.y_p, y_f])
            m_p, _ = posterior_f_batch(model, eta[None, :])
            if np.linalg.norm(m_p[0]) <= opts.mvu_tol or weight >= opts.mvu_weight_cap:
                break
            weight *= opts.mvu_weight_factor
            objective = _batched_criterion(model, query.u, query.y_p, "mvu", weight)
            y_f = _optimize(model, objective, y_f, opts, seed, polish_only=True)
        if np.linalg.norm(m_p[0]) > opts.mvu_tol:
            warnings.warn("MVU constraint residual above tolerance at the penalty cap")
    else:
        objective = _batched_criterion(model, query.u, query.y_p, query.criterion)
        y_f = _optimize(model, objective, seed_yf, opts, seed)

    eta = np.concatenate([query.u, query.y_p, y_f])
    return y_f, posterior_f(model, eta)


def predict_hammerstein(model: ImplicitGPModel, query: PredictionQuery) -> np.ndarray:
    """Closed-form predictor for the Hammerstein configuration.

    Requires a zero output kernel and identity output mean, in which case the
    cross-covariance does not depend on the future outputs and the optimum of
    every criterion zeroes the posterior mean.
    """
    if model.k_y.family != "zero" or model.m_y is not identity:
        raise ValueError("closed-form predictor requires k_y = 0 and identity m_y")
    L0, Lp = model.embedding.L0, model.embedding.Lp
    from .implicitgp import cross_cov

    eta = np.concatenate([query.u, query.y_p, np.zeros(Lp)])
    correction = cross_cov(model, eta).T @ model.alpha
    mu_u = np.asarray(model.m_u(query.u), dtype=float)
    return model.G1 @ mu_u + model.G2 @ query.y_p - correction


# ---------------------------------------------------------------------------
# Nonlinearity recovery
# ---------------------------------------------------------------------------


def _kappa(model: ImplicitGPModel, spec, windows: np.ndarray, operator: np.ndarray,
           pts: np.ndarray) -> np.ndarray:
    """Cross-covariance (M*Lp, P) between training observations and the
    transformed block values at scalar query points."""
    M, Lp = model.embedding.M, model.embedding.Lp
    P = pts.size
    if spec.family == "zero":
        return np.zeros((M * Lp, P))
    KP = np.exp((windows[:, :, None] - pts[None, None, :]) ** 2 * (-0.5 / spec.length_scale**2))
    return np.einsum("ai,kip->kap", operator, KP, optimize=True).reshape(M * Lp, P)


def _block_posterior(model: ImplicitGPModel, spec, windows, operator, mean_fn, pts) -> GaussianPosterior:
    pts = np.asarray(pts, dtype=float).ravel()
    kap = _kappa(model, spec, windows, operator, pts)
    mean = np.asarray(mean_fn(pts), dtype=float) - kap.T @ model.alpha
    cov = kernel_block(spec, pts, pts) - kap.T @ model.solve(kap)
    return GaussianPosterior(mean=mean, cov=cov)


@dataclass
class RecoveredNonlinearities:
    u_grid: np.ndarray
    psi_mean: np.ndarray
    psi_std: np.ndarray
    y_grid: np.ndarray
    phi_mean: np.ndarray
    phi_std: np.ndarray


def recover_nonlinearities(model: ImplicitGPModel, u_grid: np.ndarray, y_grid: np.ndarray) -> RecoveredNonlinearities:
    """Posterior means and pointwise stdevs of the input map on ``u_grid`` and
    the output map on ``y_grid`` (each determined up to scaling)."""
    u_grid = np.asarray(u_grid, dtype=float).ravel()
    y_grid = np.asarray(y_grid, dtype=float).ravel()
    if u_grid.size == 0 or y_grid.size == 0:
        raise ValueError("query grids must be nonempty")
    post_u = _block_posterior(model, model.k_u, model.windows_u, model.G1, model.m_u, u_grid)
    post_y = _block_posterior(model, model.k_y, model.windows_y, model.Gy, model.m_y, y_grid)
    return RecoveredNonlinearities(
        u_grid=u_grid, psi_mean=post_u.mean, psi_std=post_u.stdev,
        y_grid=y_grid, phi_mean=post_y.mean, phi_std=post_y.stdev,
    )


def phi_posterior_mean(model: ImplicitGPModel, pts: np.ndarray) -> np.ndarray:
    """Posterior mean of the output map at arbitrary points (fast, mean only)."""
    pts = np.asarray(pts, dtype=float).ravel()
    base = np.asarray(model.m_y(pts), dtype=float)
    if model.k_y.family == "zero":
        return base
    kap = _kappa(model, model.k_y, model.windows_y, model.Gy, pts)
    return base - kap.T @ model.alpha
