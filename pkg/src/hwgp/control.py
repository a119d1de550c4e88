"""Chance-constrained receding-horizon control and baseline controllers.

The proposed controller jointly optimizes the input and output windows of the
implicit GP model, penalizing expected tracking cost plus the posterior trace,
with Lipschitz-based constraint tightening; the tightening radius is refreshed
in a short solve/retighten fixed point.  Baselines: black-box NARX-GP MPC and
subspace predictive control with certainty equivalence.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.optimize import brentq
from scipy.special import gammainc

from .gpcore import GaussianPosterior, NarxGP
from .implicitgp import ImplicitGPModel, posterior_f_batch
from .linpred import ARXParams
from .linsys import HWSystem
from .predict import phi_posterior_mean
from .solvers import OptimProblem, local_minimize, particle_swarm

__all__ = [
    "ControllerConfig",
    "ClosedLoopLog",
    "chi2_quantile",
    "lipschitz_radius",
    "tighten",
    "expected_cost",
    "RHCOptions",
    "solve_rhc",
    "solve_rhc_blackbox",
    "solve_rhc_spc",
    "ProposedController",
    "BlackBoxController",
    "SPCController",
    "closed_loop",
    "first_step_interval",
    "sine_reference",
]


def chi2_quantile(p: float, dof: int) -> float:
    """Quantile of the chi-squared distribution by bracketed CDF inversion.

    The CDF is the regularized incomplete gamma function; the root is located
    by expanding an upper bracket and solved to absolute accuracy 1e-9.
    """
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie strictly between 0 and 1")
    if dof < 1:
        raise ValueError("dof must be a positive integer")

    def cdf(x: float) -> float:
        return float(gammainc(dof / 2.0, x / 2.0))

    hi = dof + 10.0 * np.sqrt(2.0 * dof) + 10.0
    while cdf(hi) < p:
        hi *= 2.0
    return float(brentq(lambda x: cdf(x) - p, 0.0, hi, xtol=1e-12, rtol=8.9e-16))


@dataclass
class ControllerConfig:
    """Cost matrices, output constraints, probability level, and input box."""

    Q: np.ndarray
    R: np.ndarray
    H: np.ndarray
    q: np.ndarray
    p: float = 0.7
    M_lip: float = 2.0
    u_min: Optional[np.ndarray] = None
    u_max: Optional[np.ndarray] = None
    soft_penalty: float = 100.0

    def __post_init__(self) -> None:
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        self.q = np.asarray(self.q, dtype=float).ravel()
        if not 0.0 < self.p < 1.0:
            raise ValueError("probability level p must lie in (0, 1)")
        if self.M_lip < 0:
            raise ValueError("Lipschitz constant must be >= 0")
        if self.H.shape[0] != self.q.size:
            raise ValueError("H and q row counts differ")


def lipschitz_radius(config: ControllerConfig, posterior: GaussianPosterior, hat_kp: np.ndarray) -> float:
    """Tightening radius c_p = M (sqrt(mu(p) sigma_p) + ||m_p||)."""
    hat_kp = np.atleast_2d(np.asarray(hat_kp, dtype=float))
    sigma_p = max(float(np.max(np.linalg.eigvalsh(0.5 * (hat_kp + hat_kp.T)))), 0.0)
    mu = chi2_quantile(config.p, hat_kp.shape[0])
    return config.M_lip * (np.sqrt(mu * sigma_p) + float(np.linalg.norm(posterior.mean)))


def tighten(config: ControllerConfig, posterior: GaussianPosterior, hat_kp: np.ndarray) -> np.ndarray:
    """Tightened bound vector q - c_p sqrt(diag(H H^T))."""
    c_p = lipschitz_radius(config, posterior, hat_kp)
    return config.q - c_p * np.sqrt(np.sum(config.H**2, axis=1))


def expected_cost(
    config: ControllerConfig,
    model: ImplicitGPModel,
    u_seq: np.ndarray,
    y_seq: np.ndarray,
    eta_k: np.ndarray,
    r_seq: np.ndarray,
) -> float:
    """Expected tracking cost under the implicit GP posterior.

    Output-map values at the predicted outputs and at the reference are
    replaced by their recovery posterior means (certainty equivalence).
    """
    u_seq = np.asarray(u_seq, dtype=float).ravel()
    y_seq = np.asarray(y_seq, dtype=float).ravel()
    r_seq = np.asarray(r_seq, dtype=float).ravel()
    m_p, k_p = posterior_f_batch(model, np.asarray(eta_k, dtype=float)[None, :])
    k_hat = k_p[0] + model.sigma2_gg
    track = phi_posterior_mean(model, y_seq) + m_p[0] - phi_posterior_mean(model, r_seq)
    return float(u_seq @ config.R @ u_seq + track @ config.Q @ track + np.trace(config.Q @ k_hat))


@dataclass
class RHCOptions:
    max_iter: int = 80
    retighten: int = 3
    c_p_rtol: float = 1e-3
    pso_fallback: bool = True
    pso_swarm: int = 25
    pso_iters: int = 40
    box_scale: float = 5.0


def _input_bounds(config: ControllerConfig, Lp: int) -> tuple[np.ndarray, np.ndarray]:
    lo = np.full(Lp, -np.inf) if config.u_min is None else np.broadcast_to(
        np.asarray(config.u_min, dtype=float), (Lp,)).copy()
    hi = np.full(Lp, np.inf) if config.u_max is None else np.broadcast_to(
        np.asarray(config.u_max, dtype=float), (Lp,)).copy()
    if np.any(lo > hi):
        raise ValueError("infeasible input box")
    return lo, hi


def _soft_violation(H: np.ndarray, q_eff: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Sum of squared constraint violations per candidate row."""
    slack = Y @ H.T - q_eff  # broadcast: (B, n_c)
    return np.sum(np.clip(slack, 0.0, None) ** 2, axis=1)


def _local_then_pso(objective, dim, lower, upper, seed_pt, opts: RHCOptions, seed):
    problem = OptimProblem(objective=objective, dim=dim, lower=lower, upper=upper,
                           seeds=[seed_pt], vectorized=True, max_iter=opts.max_iter)
    res = local_minimize(problem)
    f_seed = problem.eval_one(np.asarray(seed_pt, dtype=float))
    stalled = res.status == "failed" or res.f > f_seed - 1e-12 * (1 + abs(f_seed))
    if stalled and opts.pso_fallback:
        finite_lo = np.where(np.isfinite(lower), lower, np.asarray(seed_pt) - opts.box_scale)
        finite_hi = np.where(np.isfinite(upper), upper, np.asarray(seed_pt) + opts.box_scale)
        pso_problem = OptimProblem(objective=objective, dim=dim, lower=finite_lo,
                                   upper=finite_hi, seeds=[seed_pt, res.x], vectorized=True)
        x0, _ = particle_swarm(pso_problem, swarm_size=opts.pso_swarm, iters=opts.pso_iters, seed=seed)
        polish = OptimProblem(objective=objective, dim=dim, lower=lower, upper=upper,
                              seeds=[x0, res.x], vectorized=True, max_iter=opts.max_iter)
        res2 = local_minimize(polish)
        if res2.f < res.f:
            res = res2
    return res


def solve_rhc(
    config: ControllerConfig,
    model: ImplicitGPModel,
    history: tuple[np.ndarray, np.ndarray],
    r_seq: np.ndarray,
    seed: Optional[int] = None,
    options: Optional[RHCOptions] = None,
) -> tuple[np.ndarray, np.ndarray, dict]:
    """Jointly optimize input and output windows under tightened constraints.

    ``history`` holds the last L0 applied inputs and measured outputs.  The
    tightened output constraints enter as soft penalties; the input box is
    enforced exactly.  Returns (u_seq, y_seq, diagnostics).
    """
    opts = options or RHCOptions()
    L0, Lp = model.embedding.L0, model.embedding.Lp
    u_p = np.asarray(history[0], dtype=float).ravel()
    y_p = np.asarray(history[1], dtype=float).ravel()
    r_seq = np.asarray(r_seq, dtype=float).ravel()
    if u_p.size != L0 or y_p.size != L0 or r_seq.size != Lp:
        raise ValueError("history/reference lengths do not match the model")

    myp_r = phi_posterior_mean(model, r_seq)
    scale_y = opts.box_scale * model.y_scale
    scale_u = opts.box_scale * max(model.u_scale, 1.0)
    u_lo, u_hi = _input_bounds(config, Lp)
    lower = np.concatenate([u_lo, np.full(Lp, -np.inf)])
    upper = np.concatenate([u_hi, np.full(Lp, np.inf)])

    y_seed = model.G1 @ np.concatenate([u_p, np.zeros(Lp)]) + model.G2 @ y_p
    z = np.concatenate([np.clip(np.zeros(Lp), u_lo, u_hi), y_seed])

    sq_diag = np.sqrt(np.sum(config.H**2, axis=1))

    def posterior_at(zz: np.ndarray):
        eta = np.concatenate([u_p, zz[:Lp], y_p, zz[Lp:]])
        m_p, k_p = posterior_f_batch(model, eta[None, :])
        return m_p[0], k_p[0] + model.sigma2_gg

    def c_p_at(zz: np.ndarray) -> float:
        m_p, k_hat = posterior_at(zz)
        return lipschitz_radius(config, GaussianPosterior(m_p, k_hat), k_hat)

    c_p = c_p_at(z)
    n_solves = 0
    status = "converged"
    for _ in range(max(1, opts.retighten)):
        q_eff = config.q - c_p * sq_diag

        def objective(Z: np.ndarray) -> np.ndarray:
            Z = np.atleast_2d(Z)
            B = Z.shape[0]
            U, Y = Z[:, :Lp], Z[:, Lp:]
            Eta = np.hstack([np.tile(u_p, (B, 1)), U, np.tile(y_p, (B, 1)), Y])
            m_p, k_p = posterior_f_batch(model, Eta)
            k_hat = k_p + model.sigma2_gg[None, :, :]
            myp_y = phi_posterior_mean(model, Y.ravel()).reshape(B, Lp)
            track = myp_y + m_p - myp_r[None, :]
            J = np.einsum("bi,ij,bj->b", U, config.R, U)
            J += np.einsum("bi,ij,bj->b", track, config.Q, track)
            J += np.einsum("ij,bji->b", config.Q, k_hat)
            J += config.soft_penalty * _soft_violation(config.H, q_eff, Y)
            return J

        res = _local_then_pso(objective, 2 * Lp, lower, upper, z, opts, seed)
        n_solves += 1
        z = res.x
        if res.status == "failed":
            status = "stalled"
        c_new = c_p_at(z)
        if abs(c_new - c_p) <= opts.c_p_rtol * (1.0 + c_p):
            c_p = c_new
            break
        c_p = c_new

    m_p, k_hat = posterior_at(z)
    diagnostics = {
        "cost": float(res.f),
        "c_p": float(c_p),
        "n_solves": n_solves,
        "status": status,
        "posterior": GaussianPosterior(m_p, k_hat - model.sigma2_gg),
        "hat_kp": k_hat,
    }
    return z[:Lp].copy(), z[Lp:].copy(), diagnostics


def solve_rhc_blackbox(
    config: ControllerConfig,
    narx: NarxGP,
    history: tuple[np.ndarray, np.ndarray],
    r_seq: np.ndarray,
    seed: Optional[int] = None,
    options: Optional[RHCOptions] = None,
) -> tuple[np.ndarray, np.ndarray, dict]:
    """Receding-horizon control with the black-box NARX GP predictor.

    The predicted outputs are the per-step posterior means; the cost carries
    diag(Q)^T sigma_bb^2 and the bounds are tightened by the largest posterior
    standard deviation times sqrt(mu(p)).
    """
    opts = options or RHCOptions()
    L0, Lp = narx.L0, narx.Lp
    u_p = np.asarray(history[0], dtype=float).ravel()
    y_p = np.asarray(history[1], dtype=float).ravel()
    r_seq = np.asarray(r_seq, dtype=float).ravel()
    mu = chi2_quantile(config.p, Lp)
    sq_diag = np.sqrt(mu * np.sum(config.H**2, axis=1))
    u_lo, u_hi = _input_bounds(config, Lp)
    qdiag = np.diag(config.Q)

    def predict_batch(U: np.ndarray):
        B = U.shape[0]
        Z = np.hstack([np.tile(u_p, (B, 1)), U, np.tile(y_p, (B, 1))])
        means = np.empty((B, Lp))
        vars_ = np.empty((B, Lp))
        for i, gp in enumerate(narx.steps):
            m, v = gp.predict(Z)
            means[:, i], vars_[:, i] = m, v
        return means, vars_

    def objective(U: np.ndarray) -> np.ndarray:
        U = np.atleast_2d(U)
        Y, V = predict_batch(U)
        sbar = np.sqrt(np.max(V, axis=1))
        J = np.einsum("bi,ij,bj->b", U, config.R, U)
        err = Y - r_seq[None, :]
        J += np.einsum("bi,ij,bj->b", err, config.Q, err)
        J += V @ qdiag
        slack = Y @ config.H.T - (config.q[None, :] - sbar[:, None] * sq_diag[None, :])
        J += config.soft_penalty * np.sum(np.clip(slack, 0.0, None) ** 2, axis=1)
        return J

    z0 = np.clip(np.zeros(Lp), u_lo, u_hi)
    res = _local_then_pso(objective, Lp, u_lo, u_hi, z0, opts, seed)
    u = res.x
    y, v = predict_batch(u[None, :])
    diagnostics = {"cost": float(res.f), "sigma_bb": np.sqrt(v[0]), "status": res.status}
    return u.copy(), y[0].copy(), diagnostics


def solve_rhc_spc(
    config: ControllerConfig,
    arx: ARXParams,
    history: tuple[np.ndarray, np.ndarray],
    r_seq: np.ndarray,
    options: Optional[RHCOptions] = None,
) -> tuple[np.ndarray, np.ndarray, dict]:
    """Subspace predictive control with certainty equivalence (no tightening)."""
    opts = options or RHCOptions()
    L0, Lp = arx.L0, arx.Lp
    u_p = np.asarray(history[0], dtype=float).ravel()
    y_p = np.asarray(history[1], dtype=float).ravel()
    r_seq = np.asarray(r_seq, dtype=float).ravel()
    u_lo, u_hi = _input_bounds(config, Lp)
    T = arx.Gamma12
    c0 = arx.Gamma11 @ u_p + arx.Gamma2 @ y_p

    # unconstrained quadratic solution as seed
    A = config.R + T.T @ config.Q @ T
    b = T.T @ config.Q @ (r_seq - c0)
    u_seed = np.clip(np.linalg.solve(A + 1e-12 * np.eye(Lp), b), u_lo, u_hi)

    def objective(U: np.ndarray) -> np.ndarray:
        U = np.atleast_2d(U)
        Y = c0[None, :] + U @ T.T
        err = Y - r_seq[None, :]
        J = np.einsum("bi,ij,bj->b", U, config.R, U)
        J += np.einsum("bi,ij,bj->b", err, config.Q, err)
        J += config.soft_penalty * _soft_violation(config.H, config.q, Y)
        return J

    problem = OptimProblem(objective=objective, dim=Lp, lower=u_lo, upper=u_hi,
                           seeds=[u_seed, np.clip(np.zeros(Lp), u_lo, u_hi)],
                           vectorized=True, max_iter=opts.max_iter)
    res = local_minimize(problem)
    u = res.x
    y = c0 + T @ u
    return u.copy(), y.copy(), {"cost": float(res.f), "status": res.status}


# ---------------------------------------------------------------------------
# Closed loop
# ---------------------------------------------------------------------------


def sine_reference(amplitude: float, period: float) -> Callable[[int], float]:
    return lambda k: amplitude * np.sin(2.0 * np.pi * k / period)


def _reference_window(reference, k: int, Lp: int) -> np.ndarray:
    if callable(reference):
        return np.array([reference(k + i) for i in range(Lp)], dtype=float)
    arr = np.asarray(reference, dtype=float).ravel()
    return arr[k : k + Lp]


def first_step_interval(H: np.ndarray, q: np.ndarray) -> tuple[float, float]:
    """Bounds on the first predicted output implied by rows of H acting on it."""
    lo, hi = -np.inf, np.inf
    H = np.atleast_2d(H)
    q = np.asarray(q, dtype=float).ravel()
    for i in range(H.shape[0]):
        row = H[i]
        if row[0] != 0 and np.all(row[1:] == 0):
            bound = q[i] / row[0]
            if row[0] > 0:
                hi = min(hi, bound)
            else:
                lo = max(lo, bound)
    return lo, hi


class ProposedController:
    """Receding-horizon controller backed by the implicit GP model."""

    def __init__(self, model: ImplicitGPModel, config: ControllerConfig, reference,
                 options: Optional[RHCOptions] = None, seed: int = 0):
        self.model = model
        self.config = config
        self.reference = reference
        self.options = options or RHCOptions()
        self.seed = seed
        self.L0 = model.embedding.L0
        self.Lp = model.embedding.Lp
        self._warm: Optional[np.ndarray] = None

    def plan(self, k: int, u_hist: np.ndarray, y_hist: np.ndarray):
        r_seq = _reference_window(self.reference, k, self.Lp)
        u, y, diag = solve_rhc(self.config, self.model, (u_hist, y_hist), r_seq,
                               seed=self.seed + k, options=self.options)
        std = np.sqrt(np.clip(np.diag(diag["hat_kp"]), 0.0, None))
        info = {"pred_std": float(std[0]), "c_p": diag["c_p"], "cost": diag["cost"],
                "r_seq": r_seq}
        return u, y, info


class BlackBoxController:
    def __init__(self, narx: NarxGP, config: ControllerConfig, reference,
                 options: Optional[RHCOptions] = None, seed: int = 0):
        self.narx = narx
        self.config = config
        self.reference = reference
        self.options = options or RHCOptions()
        self.seed = seed
        self.L0 = narx.L0
        self.Lp = narx.Lp

    def plan(self, k: int, u_hist: np.ndarray, y_hist: np.ndarray):
        r_seq = _reference_window(self.reference, k, self.Lp)
        u, y, diag = solve_rhc_blackbox(self.config, self.narx, (u_hist, y_hist), r_seq,
                                        seed=self.seed + k, options=self.options)
        info = {"pred_std": float(diag["sigma_bb"][0]), "cost": diag["cost"], "r_seq": r_seq}
        return u, y, info


class SPCController:
    def __init__(self, arx: ARXParams, config: ControllerConfig, reference,
                 options: Optional[RHCOptions] = None):
        self.arx = arx
        self.config = config
        self.reference = reference
        self.options = options or RHCOptions()
        self.L0 = arx.L0
        self.Lp = arx.Lp

    def plan(self, k: int, u_hist: np.ndarray, y_hist: np.ndarray):
        r_seq = _reference_window(self.reference, k, self.Lp)
        u, y, diag = solve_rhc_spc(self.config, self.arx, (u_hist, y_hist), r_seq,
                                   options=self.options)
        info = {"pred_std": float("nan"), "cost": diag["cost"], "r_seq": r_seq}
        return u, y, info


@dataclass
class ClosedLoopLog:
    """Per-step records of a receding-horizon run."""

    u: np.ndarray
    y: np.ndarray
    y0: np.ndarray
    r: np.ndarray
    y_pred: np.ndarray
    pred_std: np.ndarray
    violation: np.ndarray
    solve_time: np.ndarray

    def __len__(self) -> int:
        return len(self.u)


def closed_loop(sys: HWSystem, controller, steps: int, seed: Optional[int] = None) -> ClosedLoopLog:
    """Run a receding-horizon loop: solve, apply the first input, measure.

    The plant starts at rest with zero-padded history (consistent with a zero
    initial state).  Violation flags are computed on the noise-free outputs
    against the first-step bounds implied by the controller's (H, q).
    """
    rng = np.random.default_rng(seed)
    lin = sys.lin
    L0, Lp = controller.L0, controller.Lp
    lo, hi = first_step_interval(controller.config.H, controller.config.q)
    x = np.zeros(lin.n_x)
    u_hist = np.zeros(L0)
    y_hist = np.zeros(L0)
    cols = {name: [] for name in ("u", "y", "y0", "r", "y_pred", "pred_std", "violation", "solve_time")}
    for k in range(steps):
        t0 = time.perf_counter()
        u_f, y_pred, info = controller.plan(k, u_hist.copy(), y_hist.copy())
        dt = time.perf_counter() - t0
        u_k = float(u_f[0])
        ubar = float(np.asarray(sys.psi(u_k)))
        ybar0 = float(lin.C @ x + lin.D[:, 0] * ubar)
        e = float(sys.sigma * rng.standard_normal()) if sys.sigma > 0 else 0.0
        y0_k = float(np.asarray(sys.phi_inv(ybar0)))
        y_k = float(np.asarray(sys.phi_inv(ybar0 + e)))
        x = lin.A @ x + lin.B[:, 0] * ubar
        cols["u"].append(u_k)
        cols["y"].append(y_k)
        cols["y0"].append(y0_k)
        cols["r"].append(float(_reference_window(controller.reference, k, 1)[0]))
        cols["y_pred"].append(float(y_pred[0]))
        cols["pred_std"].append(float(info.get("pred_std", float("nan"))))
        cols["violation"].append(bool(y0_k < lo or y0_k > hi))
        cols["solve_time"].append(dt)
        u_hist = np.concatenate([u_hist[1:], [u_k]])
        y_hist = np.concatenate([y_hist[1:], [y_k]])
    return ClosedLoopLog(
        u=np.array(cols["u"]), y=np.array(cols["y"]), y0=np.array(cols["y0"]),
        r=np.array(cols["r"]), y_pred=np.array(cols["y_pred"]),
        pred_std=np.array(cols["pred_std"]), violation=np.array(cols["violation"], dtype=bool),
        solve_time=np.array(cols["solve_time"]),
    )
