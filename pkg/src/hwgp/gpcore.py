"""Kernel primitives, generic GP conditioning, and the black-box NARX baseline."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular

from .linsys import Trajectory
from .solvers import OptimProblem, local_minimize

__all__ = [
    "KernelSpec",
    "se_kernel",
    "tc_kernel",
    "zero_kernel",
    "kernel_eval",
    "kernel_block",
    "GaussianPosterior",
    "NumericalError",
    "jittered_cholesky",
    "gp_posterior",
    "NarxGP",
    "fit_narx_gp",
    "narx_predict",
]


class NumericalError(RuntimeError):
    """Raised when a covariance stays indefinite after jitter escalation."""


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family and parameters.

    Families: ``"se"`` (squared exponential, unit scaling, parameter
    ``length_scale``), ``"tc"`` (tuned/correlated stable kernel on integer
    indices, parameters ``lam >= 0`` and ``0 <= alpha < 1``), ``"zero"``.
    """

    family: str
    length_scale: Optional[float] = None
    lam: Optional[float] = None
    alpha: Optional[float] = None

    def __post_init__(self) -> None:
        if self.family == "se":
            if self.length_scale is None or self.length_scale <= 0:
                raise ValueError("SE kernel requires a positive length scale")
        elif self.family == "tc":
            if self.lam is None or self.lam < 0:
                raise ValueError("TC kernel requires lam >= 0")
            if self.alpha is None or not (0 <= self.alpha < 1):
                raise ValueError("TC kernel requires 0 <= alpha < 1")
        elif self.family != "zero":
            raise ValueError(f"unknown kernel family {self.family!r}")


def se_kernel(length_scale: float) -> KernelSpec:
    return KernelSpec(family="se", length_scale=float(length_scale))


def tc_kernel(lam: float, alpha: float) -> KernelSpec:
    return KernelSpec(family="tc", lam=float(lam), alpha=float(alpha))


def zero_kernel() -> KernelSpec:
    return KernelSpec(family="zero")


def kernel_eval(spec: KernelSpec, a: float, b: float) -> float:
    """Evaluate the kernel on a pair of scalar (SE) or integer (TC) points."""
    return float(kernel_block(spec, np.atleast_1d(a), np.atleast_1d(b))[0, 0])


def kernel_block(spec: KernelSpec, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Elementwise kernel matrix: entry (i, j) = k(xs_i, ys_j).

    Points may be scalars (shape ``(m,)``) or vectors (shape ``(m, d)``, SE
    only, squared Euclidean distance).
    """
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if spec.family == "zero":
        return np.zeros((xs.shape[0], ys.shape[0]))
    if spec.family == "se":
        if xs.ndim == 1:
            d2 = (xs[:, None] - ys[None, :]) ** 2
        else:
            d2 = np.sum((xs[:, None, :] - ys[None, :, :]) ** 2, axis=-1)
        return np.exp(-d2 / (2.0 * spec.length_scale**2))
    # TC: lam * alpha^max(i, j) on integer-indexed points
    mx = np.maximum(xs[:, None], ys[None, :])
    return spec.lam * spec.alpha**mx


def symmetrize(K: np.ndarray) -> np.ndarray:
    return 0.5 * (K + K.T)


@dataclass
class GaussianPosterior:
    """Posterior mean vector and (symmetric) covariance matrix."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=float).ravel()
        self.cov = symmetrize(np.atleast_2d(np.asarray(self.cov, dtype=float)))
        if self.cov.shape != (self.mean.size, self.mean.size):
            raise ValueError("covariance shape must match mean length")

    @property
    def stdev(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))


def jittered_cholesky(K: np.ndarray, rel_start: float = 1e-10, rel_max: float = 1e-4):
    """Lower Cholesky factor of ``K + jitter*I`` with escalating jitter.

    Jitter starts at ``rel_start`` times the mean diagonal and grows tenfold
    up to ``rel_max``; raises :class:`NumericalError` if the matrix stays
    indefinite.  Returns ``(L, jitter_used)``.
    """
    K = symmetrize(np.atleast_2d(np.asarray(K, dtype=float)))
    base = float(np.mean(np.diag(K)))
    if not np.isfinite(base) or base <= 0:
        base = 1.0
    try:
        return cholesky(K, lower=True), 0.0
    except np.linalg.LinAlgError:
        pass
    rel = rel_start
    while rel <= rel_max * (1 + 1e-12):
        try:
            return cholesky(K + rel * base * np.eye(K.shape[0]), lower=True), rel * base
        except np.linalg.LinAlgError:
            rel *= 10.0
    raise NumericalError("matrix not positive definite after jitter escalation")


def gp_posterior(
    prior_mean_at_query: np.ndarray,
    prior_mean_at_data: np.ndarray,
    k_qq: np.ndarray,
    k_dq: np.ndarray,
    K_dd: np.ndarray,
    noise_cov: np.ndarray,
    observations: np.ndarray,
) -> GaussianPosterior:
    """Condition a joint Gaussian on observed data.

    ``k_dq`` has shape (n_data, n_query).  The linear systems are solved with a
    jittered Cholesky factorization of ``K_dd + noise_cov``.
    """
    m_q = np.asarray(prior_mean_at_query, dtype=float).ravel()
    m_d = np.asarray(prior_mean_at_data, dtype=float).ravel()
    obs = np.asarray(observations, dtype=float).ravel()
    k_qq = np.atleast_2d(np.asarray(k_qq, dtype=float))
    k_dq = np.asarray(k_dq, dtype=float).reshape(m_d.size, m_q.size)
    S = np.atleast_2d(K_dd) + np.atleast_2d(noise_cov)
    L, _ = jittered_cholesky(S)
    delta = obs - m_d
    mean = m_q + k_dq.T @ cho_solve((L, True), delta)
    V = solve_triangular(L, k_dq, lower=True)
    cov = k_qq - V.T @ V
    return GaussianPosterior(mean=mean, cov=cov)


# ---------------------------------------------------------------------------
# Black-box NARX GP baseline
# ---------------------------------------------------------------------------


def _median_heuristic(Z: np.ndarray) -> float:
    d2 = np.sum((Z[:, None, :] - Z[None, :, :]) ** 2, axis=-1)
    vals = np.sqrt(d2[np.triu_indices_from(d2, k=1)])
    med = float(np.median(vals)) if vals.size else 1.0
    return med if med > 0 else 1.0


@dataclass
class NarxStepGP:
    """Single-step SE GP with constant mean on NARX regressors."""

    Z: np.ndarray
    targets: np.ndarray
    length_scale: float
    signal_var: float
    noise_var: float
    const_mean: float

    def __post_init__(self) -> None:
        K = self.signal_var * kernel_block(se_kernel(self.length_scale), self.Z, self.Z)
        K[np.diag_indices_from(K)] += self.noise_var
        self._chol, _ = jittered_cholesky(K)
        self._alpha = cho_solve((self._chol, True), self.targets - self.const_mean)

    def predict(self, Zq: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and variance (including noise) at query regressors."""
        Zq = np.atleast_2d(np.asarray(Zq, dtype=float))
        ks = self.signal_var * kernel_block(se_kernel(self.length_scale), self.Z, Zq)
        mean = self.const_mean + ks.T @ self._alpha
        V = solve_triangular(self._chol, ks, lower=True)
        var = self.signal_var + self.noise_var - np.sum(V * V, axis=0)
        return mean, np.clip(var, self.noise_var * 1e-12, None)


@dataclass
class NarxGP:
    steps: list
    L0: int
    Lp: int

    @property
    def L(self) -> int:
        return self.L0 + self.Lp


def _narx_nll(Z: np.ndarray, t: np.ndarray, log_params: np.ndarray) -> float:
    l, sf2, sn2 = np.exp(log_params)
    K = sf2 * kernel_block(se_kernel(l), Z, Z)
    K[np.diag_indices_from(K)] += sn2
    try:
        L, _ = jittered_cholesky(K)
    except NumericalError:
        return np.inf
    ones = np.ones_like(t)
    Kinv_1 = cho_solve((L, True), ones)
    beta = float(t @ Kinv_1) / float(ones @ Kinv_1)  # profiled constant mean
    delta = t - beta
    quad = float(delta @ cho_solve((L, True), delta))
    logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
    return logdet + quad


def fit_narx_gp(data: Trajectory, L0: int, Lp: int, max_iter: int = 60) -> NarxGP:
    """Fit one SE GP per future step, mapping col(u window, y past) to y.

    Hyperparameters (length scale, signal and noise variance) maximize the
    marginal likelihood per step, with the constant mean profiled out; on
    optimizer failure the length scale falls back to the median heuristic.
    """
    u = np.asarray(data.u, dtype=float).ravel()
    y = np.asarray(data.y, dtype=float).ravel()
    L = L0 + Lp
    if len(u) < L:
        raise ValueError("trajectory too short for the requested window")
    M = len(u) - L + 1
    idx = np.arange(M)
    Z = np.hstack([
        u[idx[:, None] + np.arange(L)[None, :]],
        y[idx[:, None] + np.arange(L0)[None, :]],
    ])
    y_std = max(float(np.std(y)), 1e-8)
    l0 = max(float(np.mean(np.std(Z, axis=0))), 1e-8)
    steps = []
    for l_step in range(1, Lp + 1):
        t = y[idx + L0 + l_step - 1]
        x0 = np.log([l0, y_std**2 / 2.0, y_std**2 / 2.0])
        problem = OptimProblem(
            objective=lambda lp, t=t: _narx_nll(Z, t, lp),
            dim=3,
            lower=np.log([1e-4, 1e-10, 1e-10]),
            upper=np.log([1e6, 1e8, 1e8]),
            seeds=[x0, x0 + np.log([0.3, 1.0, 1.0]), x0 + np.log([3.0, 1.0, 1.0])],
            max_iter=max_iter,
        )
        res = local_minimize(problem)
        if res.status == "failed" or not np.isfinite(res.f):
            warnings.warn("NARX hyperparameter fit failed; using median heuristic")
            l, sf2, sn2 = _median_heuristic(Z), y_std**2 / 2.0, y_std**2 / 2.0
        else:
            l, sf2, sn2 = np.exp(res.x)
        K = sf2 * kernel_block(se_kernel(l), Z, Z)
        K[np.diag_indices_from(K)] += sn2
        Lc, _ = jittered_cholesky(K)
        ones = np.ones_like(t)
        Kinv_1 = cho_solve((Lc, True), ones)
        beta = float(t @ Kinv_1) / float(ones @ Kinv_1)
        steps.append(NarxStepGP(Z=Z, targets=t, length_scale=float(l),
                                signal_var=float(sf2), noise_var=float(sn2), const_mean=beta))
    return NarxGP(steps=steps, L0=L0, Lp=Lp)


def narx_predict(models: NarxGP, u: np.ndarray, y_p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-step posterior mean and standard deviation for one query window."""
    u = np.asarray(u, dtype=float).ravel()
    y_p = np.asarray(y_p, dtype=float).ravel()
    if u.size != models.L or y_p.size != models.L0:
        raise ValueError("query window lengths do not match the fitted model")
    zq = np.concatenate([u, y_p])[None, :]
    mean = np.empty(models.Lp)
    std = np.empty(models.Lp)
    for i, gp in enumerate(models.steps):
        m, v = gp.predict(zq)
        mean[i], std[i] = m[0], np.sqrt(v[0])
    return mean, std
