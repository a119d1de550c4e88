"""Shared optimization engines: projected quasi-Newton and particle swarm.

Both solvers are deliberately self-contained and deterministic under a fixed
seed.  Objectives may optionally be vectorized (accepting a batch of points as
an ``(B, dim)`` array and returning ``(B,)`` values), which the solvers exploit
to evaluate finite-difference stencils and whole swarms in one call.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = ["OptimProblem", "MinimizeResult", "local_minimize", "particle_swarm"]

_ARMIJO_C1 = 1e-4
_MAX_BACKTRACKS = 40


@dataclass
class OptimProblem:
    """An unconstrained or box-constrained minimization problem.

    Parameters
    ----------
    objective : callable
        Maps a point ``x`` of shape ``(dim,)`` to a float.  If ``vectorized``
        is true it must instead map an ``(B, dim)`` array to ``(B,)`` values.
    dim : int
        Number of decision variables.
    lower, upper : array or None
        Optional elementwise box bounds; ``None`` or ``+-inf`` entries mean
        unbounded.
    seeds : sequence of arrays
        Starting points.  Solvers never return a point worse than the best
        seed.
    """

    objective: Callable[..., np.ndarray]
    dim: int
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None
    seeds: Sequence[np.ndarray] = field(default_factory=list)
    step_tol: float = 1e-8
    f_tol: float = 1e-10
    max_iter: int = 500
    vectorized: bool = False

    def __post_init__(self) -> None:
        if self.dim < 1:
            raise ValueError("problem dimension must be >= 1")
        self.lower = self._as_bound(self.lower, -np.inf)
        self.upper = self._as_bound(self.upper, np.inf)
        if np.any(self.lower > self.upper):
            raise ValueError("lower bounds must not exceed upper bounds")
        self.seeds = [np.asarray(s, dtype=float).ravel() for s in self.seeds]
        for s in self.seeds:
            if s.size != self.dim:
                raise ValueError("seed dimension mismatch")

    def _as_bound(self, b, fill: float) -> np.ndarray:
        if b is None:
            return np.full(self.dim, fill)
        b = np.asarray(b, dtype=float).ravel()
        if b.size == 1:
            return np.full(self.dim, float(b[0]))
        if b.size != self.dim:
            raise ValueError("bound dimension mismatch")
        return b.copy()

    def clip(self, x: np.ndarray) -> np.ndarray:
        return np.minimum(np.maximum(x, self.lower), self.upper)

    def eval_one(self, x: np.ndarray) -> float:
        if self.vectorized:
            return float(np.asarray(self.objective(x[None, :])).ravel()[0])
        return float(self.objective(x))

    def eval_batch(self, X: np.ndarray) -> np.ndarray:
        if self.vectorized:
            return np.asarray(self.objective(X), dtype=float).ravel()
        return np.array([float(self.objective(x)) for x in X])


@dataclass
class MinimizeResult:
    x: np.ndarray
    f: float
    status: str  # "converged" | "max_iter" | "failed"
    n_iter: int
    n_eval: int


def _fd_gradient(problem: OptimProblem, x: np.ndarray, f_x: float) -> tuple[np.ndarray, int]:
    """Central-difference gradient with per-coordinate step 1e-6*(1+|x_i|).

    Steps are shrunk where the box would otherwise be violated; on a degenerate
    (fixed) coordinate the derivative is reported as zero.
    """
    h = 1e-6 * (1.0 + np.abs(x))
    lo, hi = problem.lower, problem.upper
    # keep the stencil inside the box, shrinking h when x sits near a bound
    h = np.minimum(h, np.maximum(1e-14, (hi - lo) / 4.0))
    xp = np.minimum(x + h, hi)
    xm = np.maximum(x - h, lo)
    denom = xp - xm
    pts = np.concatenate([np.tile(x, (problem.dim, 1)), np.tile(x, (problem.dim, 1))])
    idx = np.arange(problem.dim)
    pts[idx, idx] = xp
    pts[problem.dim + idx, idx] = xm
    vals = problem.eval_batch(pts)
    fp, fm = vals[: problem.dim], vals[problem.dim:]
    grad = np.zeros(problem.dim)
    ok = denom > 0
    grad[ok] = (fp[ok] - fm[ok]) / denom[ok]
    return grad, 2 * problem.dim


def local_minimize(problem: OptimProblem) -> MinimizeResult:
    """Projected BFGS with numerical gradients and backtracking line search.

    The iterate sequence is monotone nonincreasing in the objective.  Box
    bounds are handled by projecting trial points.  A non-finite objective
    value at the current iterate terminates with ``status="failed"`` carrying
    the last good point.
    """
    if problem.seeds:
        fs = [problem.eval_one(s) for s in problem.seeds]
        i0 = int(np.argmin(fs))
        x, f_x = problem.clip(problem.seeds[i0].copy()), fs[i0]
        n_eval = len(fs)
        if not np.isclose(f_x, problem.eval_one(x)):
            f_x = problem.eval_one(x)  # seed was outside the box
            n_eval += 1
    else:
        x = problem.clip(np.zeros(problem.dim))
        f_x = problem.eval_one(x)
        n_eval = 1
    if not np.isfinite(f_x):
        return MinimizeResult(x, f_x, "failed", 0, n_eval)

    H = np.eye(problem.dim)  # inverse Hessian approximation
    grad, ne = _fd_gradient(problem, x, f_x)
    n_eval += ne
    status = "max_iter"
    it = 0
    for it in range(1, problem.max_iter + 1):
        if not np.all(np.isfinite(grad)):
            status = "failed"
            break
        d = -H @ grad
        if d @ grad >= 0:
            H = np.eye(problem.dim)
            d = -grad
        # backtracking with projection; Armijo on the realized step
        accepted = False
        for direction in (d, -grad):
            t = 1.0
            for _ in range(_MAX_BACKTRACKS):
                x_new = problem.clip(x + t * direction)
                s = x_new - x
                if np.max(np.abs(s)) == 0.0:
                    break
                f_new = problem.eval_one(x_new)
                n_eval += 1
                if np.isfinite(f_new) and f_new <= f_x + _ARMIJO_C1 * (grad @ s):
                    accepted = True
                    break
                t *= 0.5
            if accepted:
                break
            H = np.eye(problem.dim)
        if not accepted:
            status = "converged"
            break

        grad_new, ne = _fd_gradient(problem, x_new, f_new)
        n_eval += ne
        s = x_new - x
        yk = grad_new - grad
        sy = s @ yk
        if sy > 1e-12 * max(1.0, np.linalg.norm(s) * np.linalg.norm(yk)):
            rho = 1.0 / sy
            I = np.eye(problem.dim)
            V = I - rho * np.outer(s, yk)
            H = V @ H @ V.T + rho * np.outer(s, s)

        df = f_x - f_new
        x, f_x, grad = x_new, f_new, grad_new
        if np.max(np.abs(s)) <= problem.step_tol * (1.0 + np.max(np.abs(x))):
            status = "converged"
            break
        if df <= problem.f_tol * (1.0 + abs(f_x)):
            status = "converged"
            break
    return MinimizeResult(x, f_x, status, it, n_eval)


def particle_swarm(
    problem: OptimProblem,
    swarm_size: int = 50,
    iters: int = 200,
    seed: Optional[int] = None,
) -> tuple[np.ndarray, float]:
    """Global-best PSO with constriction constants (0.729, 1.494, 1.494).

    Requires finite box bounds.  Deterministic for a fixed ``seed``; the
    returned point is never worse than the best problem seed.
    """
    lo, hi = problem.lower, problem.upper
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise ValueError("particle_swarm requires finite box bounds")
    rng = np.random.default_rng(seed)
    span = hi - lo

    X = lo + rng.random((swarm_size, problem.dim)) * span
    for i, s in enumerate(problem.seeds[:swarm_size]):
        X[i] = problem.clip(s)
    V = (rng.random((swarm_size, problem.dim)) - 0.5) * span
    F = problem.eval_batch(X)
    F = np.where(np.isfinite(F), F, np.inf)
    P, Fp = X.copy(), F.copy()
    ib = int(np.argmin(Fp))
    g, fg = P[ib].copy(), float(Fp[ib])

    w, c1, c2 = 0.729, 1.494, 1.494
    for _ in range(iters):
        r1 = rng.random((swarm_size, problem.dim))
        r2 = rng.random((swarm_size, problem.dim))
        V = w * V + c1 * r1 * (P - X) + c2 * r2 * (g[None, :] - X)
        V = np.clip(V, -span, span)
        X = np.clip(X + V, lo, hi)
        F = problem.eval_batch(X)
        F = np.where(np.isfinite(F), F, np.inf)
        better = F < Fp
        P[better] = X[better]
        Fp[better] = F[better]
        ib = int(np.argmin(Fp))
        if Fp[ib] < fg:
            g, fg = P[ib].copy(), float(Fp[ib])
    return g, fg
