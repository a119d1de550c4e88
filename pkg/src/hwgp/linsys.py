"""Hammerstein-Wiener plants: simulation, random stable linear blocks, norms.

A plant is a discrete-time linear block sandwiched between a static input
nonlinearity ``psi`` and a static output nonlinearity ``phi_inv``; output noise
enters before ``phi_inv``.  All nonlinearities are scalar maps applied
elementwise and must broadcast over numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.optimize import brentq

__all__ = [
    "LinearStateSpace",
    "HWSystem",
    "Trajectory",
    "identity",
    "numeric_inverse",
    "make_hw_system",
    "simulate_hw",
    "random_stable_system",
    "h2_norm",
    "spectral_radius",
    "impulse_response",
]


def identity(x):
    """Identity nonlinearity (the default for absent blocks)."""
    return x


def spectral_radius(A: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(np.atleast_2d(A)))))


@dataclass(frozen=True)
class LinearStateSpace:
    """Stable discrete-time state-space block (A, B, C, D)."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray

    def __post_init__(self) -> None:
        for name in ("A", "B", "C", "D"):
            object.__setattr__(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=float)))
        n_x = self.A.shape[0]
        if self.A.shape != (n_x, n_x):
            raise ValueError("A must be square")
        if self.B.shape[0] != n_x:
            raise ValueError("B row count must match state dimension")
        if self.C.shape[1] != n_x:
            raise ValueError("C column count must match state dimension")
        if self.D.shape != (self.C.shape[0], self.B.shape[1]):
            raise ValueError("D must be n_y x n_u")
        if min(self.A.shape[0], self.B.shape[1], self.C.shape[0]) < 1:
            raise ValueError("all dimensions must be >= 1")
        if spectral_radius(self.A) >= 1.0:
            raise ValueError("A must have spectral radius strictly below 1")

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    @property
    def n_u(self) -> int:
        return self.B.shape[1]

    @property
    def n_y(self) -> int:
        return self.C.shape[0]


@dataclass(frozen=True)
class HWSystem:
    """Linear block plus static input/output nonlinearities and noise level."""

    lin: LinearStateSpace
    psi: Callable = identity
    phi_inv: Callable = identity
    phi: Callable = identity
    sigma: float = 0.0

    def __post_init__(self) -> None:
        if self.sigma < 0:
            raise ValueError("noise level sigma must be >= 0")


@dataclass
class Trajectory:
    """Input-output record; ``y0`` holds the noise-free outputs when known."""

    u: np.ndarray
    y: np.ndarray
    y0: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        self.u = np.asarray(self.u, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.y0 is not None:
            self.y0 = np.asarray(self.y0, dtype=float)
        if len(self.u) != len(self.y) or (self.y0 is not None and len(self.y0) != len(self.y)):
            raise ValueError("u, y (and y0) must have equal length")
        if len(self.u) < 1:
            raise ValueError("trajectory must contain at least one sample")

    def __len__(self) -> int:
        return len(self.u)


def numeric_inverse(f: Callable, bracket: float = 64.0) -> Callable:
    """Numeric inverse of a monotone nondecreasing scalar map.

    Returns a vectorized function solving ``f(x) = y`` by bracketed root
    finding, expanding the initial bracket as needed.
    """

    def solve_one(y: float) -> float:
        lo, hi = -bracket, bracket
        for _ in range(80):
            if f(lo) <= y <= f(hi):
                return brentq(lambda x: f(x) - y, lo, hi, xtol=1e-12)
            lo, hi = 2 * lo, 2 * hi
        raise ValueError("could not bracket inverse; is the map monotone?")

    def inv(y):
        arr = np.asarray(y, dtype=float)
        out = np.array([solve_one(v) for v in np.atleast_1d(arr)])
        return out.reshape(arr.shape) if arr.ndim else float(out[0])

    return inv


def make_hw_system(
    lin: LinearStateSpace,
    psi: Optional[Callable] = None,
    phi_inv: Optional[Callable] = None,
    sigma: float = 0.0,
    phi: Optional[Callable] = None,
) -> HWSystem:
    """Assemble an :class:`HWSystem`, deriving ``phi`` numerically if needed."""
    psi = psi if psi is not None else identity
    phi_inv = phi_inv if phi_inv is not None else identity
    if phi is None:
        phi = identity if phi_inv is identity else numeric_inverse(phi_inv)
    return HWSystem(lin=lin, psi=psi, phi_inv=phi_inv, phi=phi, sigma=sigma)


def simulate_hw(
    sys: HWSystem,
    u: np.ndarray,
    x0: Optional[np.ndarray] = None,
    seed: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> Trajectory:
    """Simulate the plant for an input sequence.

    Noise ``e_k ~ N(0, sigma^2 I)`` is added to the linear-block output before
    the output nonlinearity.  The returned trajectory also carries the
    noise-free outputs computed along the same state path.
    """
    lin = sys.lin
    u = np.asarray(u, dtype=float)
    squeeze = u.ndim == 1
    U = u[:, None] if squeeze else u
    if U.ndim != 2 or U.shape[1] != lin.n_u:
        raise ValueError("input dimension mismatch")
    T = U.shape[0]
    if T < 1:
        raise ValueError("input sequence must be nonempty")
    x = np.zeros(lin.n_x) if x0 is None else np.asarray(x0, dtype=float).ravel()
    if x.size != lin.n_x:
        raise ValueError("initial state dimension mismatch")
    if rng is None:
        rng = np.random.default_rng(seed)

    Ubar = np.asarray(sys.psi(U), dtype=float)
    E = sys.sigma * rng.standard_normal((T, lin.n_y)) if sys.sigma > 0 else np.zeros((T, lin.n_y))
    Y0bar = np.empty((T, lin.n_y))
    for k in range(T):
        Y0bar[k] = lin.C @ x + lin.D @ Ubar[k]
        x = lin.A @ x + lin.B @ Ubar[k]
    y0 = np.asarray(sys.phi_inv(Y0bar), dtype=float)
    y = np.asarray(sys.phi_inv(Y0bar + E), dtype=float)
    if squeeze and lin.n_y == 1:
        return Trajectory(u=u, y=y.ravel(), y0=y0.ravel())
    return Trajectory(u=U, y=y, y0=y0)


def _dlyap(A: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """Solve P = A P A^T + Q by a direct vectorized linear solve."""
    n = A.shape[0]
    M = np.eye(n * n) - np.kron(A, A)
    P = np.linalg.solve(M, Q.ravel()).reshape(n, n)
    return 0.5 * (P + P.T)


def h2_norm(lin: LinearStateSpace) -> float:
    """H2 norm sqrt(trace(C P C^T + D D^T)) with P the controllability Gramian."""
    if spectral_radius(lin.A) >= 1.0:
        raise ValueError("H2 norm requires a stable A")
    P = _dlyap(lin.A, lin.B @ lin.B.T)
    return float(np.sqrt(np.trace(lin.C @ P @ lin.C.T + lin.D @ lin.D.T)))


def impulse_response(lin: LinearStateSpace, n: int) -> np.ndarray:
    """First ``n`` Markov parameters g_0 = D, g_k = C A^(k-1) B, shape (n, n_y, n_u)."""
    out = np.empty((n, lin.n_y, lin.n_u))
    out[0] = lin.D
    Ak_B = lin.B.copy()
    for k in range(1, n):
        out[k] = lin.C @ Ak_B
        Ak_B = lin.A @ Ak_B
    return out


def random_stable_system(
    n_x: int = 2,
    seed: Optional[int] = None,
    target_h2: float = 10.0,
    pole_radius: float = 0.95,
) -> LinearStateSpace:
    """Random SISO state-space block normalized to a prescribed H2 norm.

    Poles are drawn uniformly in the disk of radius ``pole_radius`` (complex
    conjugate pairs or reals) and assembled in real modal form; B, C, D are
    standard normal with C, D rescaled to hit ``target_h2``.
    """
    if n_x < 1:
        raise ValueError("n_x must be >= 1")
    if target_h2 <= 0:
        raise ValueError("target_h2 must be positive")
    rng = np.random.default_rng(seed)
    while True:
        blocks = []
        remaining = n_x
        while remaining > 0:
            if remaining >= 2 and rng.random() < 0.5:
                r = pole_radius * np.sqrt(rng.random())
                th = rng.uniform(0.0, np.pi)
                a, b = r * np.cos(th), r * np.sin(th)
                blocks.append(np.array([[a, b], [-b, a]]))
                remaining -= 2
            else:
                blocks.append(np.array([[rng.uniform(-pole_radius, pole_radius)]]))
                remaining -= 1
        A = np.zeros((n_x, n_x))
        i = 0
        for blk in blocks:
            m = blk.shape[0]
            A[i : i + m, i : i + m] = blk
            i += m
        B = rng.standard_normal((n_x, 1))
        C = rng.standard_normal((1, n_x))
        D = rng.standard_normal((1, 1))
        lin = LinearStateSpace(A=A, B=B, C=C, D=D)
        h0 = h2_norm(lin)
        if h0 > 1e-8:
            s = target_h2 / h0
            return LinearStateSpace(A=A, B=B, C=s * C, D=s * D)
