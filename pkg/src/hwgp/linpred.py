"""Subspace predictor: multi-step ARX fit via Hankel pseudoinverse.

This is both the linear baseline and the initializer for the ARX operator of
the implicit GP model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .hankel import build_hankel

__all__ = ["ARXParams", "fit_subspace", "subspace_predict", "pe_order"]

DEFAULT_RCOND = 1e-10


@dataclass
class ARXParams:
    """Multi-step ARX operator [Gamma1 Gamma2].

    ``Gamma1`` maps the stacked length-L input window, ``Gamma2`` the length-L0
    past output window, to the length-Lp future output window (SISO layout).
    """

    Gamma1: np.ndarray
    Gamma2: np.ndarray

    def __post_init__(self) -> None:
        self.Gamma1 = np.atleast_2d(np.asarray(self.Gamma1, dtype=float))
        self.Gamma2 = np.atleast_2d(np.asarray(self.Gamma2, dtype=float))
        if self.Gamma1.shape[0] != self.Gamma2.shape[0]:
            raise ValueError("Gamma1 and Gamma2 must have the same row count")

    @property
    def Lp(self) -> int:
        return self.Gamma1.shape[0]

    @property
    def L0(self) -> int:
        return self.Gamma2.shape[1]

    @property
    def L(self) -> int:
        return self.Gamma1.shape[1]

    @property
    def Gamma11(self) -> np.ndarray:
        return self.Gamma1[:, : self.L0]

    @property
    def Gamma12(self) -> np.ndarray:
        return self.Gamma1[:, self.L0:]


def fit_subspace(
    H_u: np.ndarray,
    H_y: np.ndarray,
    L0: int,
    Lp: int,
    rcond: float = DEFAULT_RCOND,
) -> ARXParams:
    """Least-squares ARX operator [Gamma1 Gamma2] = H_yf pinv(col(H_u, H_yp)).

    The pseudoinverse is SVD-based; singular values below ``rcond`` times the
    largest are treated as zero.
    """
    H_u = np.atleast_2d(np.asarray(H_u, dtype=float))
    H_y = np.atleast_2d(np.asarray(H_y, dtype=float))
    if H_u.size == 0 or H_y.size == 0:
        raise ValueError("empty Hankel matrices")
    if H_u.shape[1] != H_y.shape[1]:
        raise ValueError("H_u and H_y must have the same number of columns")
    L = L0 + Lp
    if H_y.shape[0] % L != 0 or H_u.shape[0] % L != 0:
        raise ValueError("Hankel row counts must be multiples of L0 + Lp")
    n_y = H_y.shape[0] // L
    H_yp, H_yf = H_y[: n_y * L0], H_y[n_y * L0:]
    Z = np.vstack([H_u, H_yp])
    Gam = H_yf @ np.linalg.pinv(Z, rcond=rcond)
    return ARXParams(Gamma1=Gam[:, : H_u.shape[0]], Gamma2=Gam[:, H_u.shape[0]:])


def subspace_predict(p: ARXParams, u: np.ndarray, y_p: np.ndarray) -> np.ndarray:
    """Predict the future output window: Gamma1 u + Gamma2 y_p."""
    u = np.asarray(u, dtype=float).ravel()
    y_p = np.asarray(y_p, dtype=float).ravel()
    if u.size != p.Gamma1.shape[1]:
        raise ValueError(f"expected input window of length {p.Gamma1.shape[1]}, got {u.size}")
    if y_p.size != p.Gamma2.shape[1]:
        raise ValueError(f"expected past output window of length {p.Gamma2.shape[1]}, got {y_p.size}")
    return p.Gamma1 @ u + p.Gamma2 @ y_p


def pe_order(u: np.ndarray, order: int, rcond: float = DEFAULT_RCOND) -> bool:
    """True iff the depth-``order`` Hankel matrix of ``u`` has full row rank."""
    H = build_hankel(u, order)
    s = np.linalg.svd(H, compute_uv=False)
    rank = int(np.sum(s > rcond * s[0])) if s.size and s[0] > 0 else 0
    return rank == H.shape[0]
