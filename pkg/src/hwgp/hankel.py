"""Hankel matrices and the training embedding for the implicit GP model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linsys import Trajectory

__all__ = ["DataEmbedding", "build_hankel", "build_embedding", "split_past_future"]


def build_hankel(x: np.ndarray, L: int) -> np.ndarray:
    """Depth-L Hankel matrix of a signal, column j = col(x_j, ..., x_{j+L-1}).

    ``x`` has shape ``(N,)`` or ``(N, n)``; the result is ``(n*L, N-L+1)`` with
    samples stacked time-major within each column.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    N, n = x.shape
    if L < 1:
        raise ValueError("depth L must be >= 1")
    if N < L:
        raise ValueError(f"need at least L={L} samples, got {N}")
    M = N - L + 1
    idx = np.arange(L)[:, None] + np.arange(M)[None, :]
    return x[idx].transpose(0, 2, 1).reshape(L * n, M)


@dataclass
class DataEmbedding:
    """Hankel data plus the implicit-GP training pairs (eta^d, chi^d = 0)."""

    H_u: np.ndarray
    H_y: np.ndarray
    eta_d: np.ndarray
    chi_d: np.ndarray
    L0: int
    Lp: int
    N: int
    n_u: int = 1
    n_y: int = 1

    @property
    def L(self) -> int:
        return self.L0 + self.Lp

    @property
    def M(self) -> int:
        return self.H_u.shape[1]


def build_embedding(data: Trajectory, L0: int, Lp: int) -> DataEmbedding:
    """Training embedding of depth L = L0 + Lp from a collected trajectory."""
    if L0 < 1 or Lp < 1:
        raise ValueError("window lengths must be >= 1")
    u = np.asarray(data.u, dtype=float)
    y = np.asarray(data.y, dtype=float)
    n_u = 1 if u.ndim == 1 else u.shape[1]
    n_y = 1 if y.ndim == 1 else y.shape[1]
    L = L0 + Lp
    N = len(u)
    if N < L:
        raise ValueError(f"trajectory of length {N} too short for depth {L}")
    H_u = build_hankel(u, L)
    H_y = build_hankel(y, L)
    eta_d = np.vstack([H_u, H_y])
    chi_d = np.zeros((n_y * Lp, H_u.shape[1]))
    return DataEmbedding(H_u=H_u, H_y=H_y, eta_d=eta_d, chi_d=chi_d, L0=L0, Lp=Lp, N=N, n_u=n_u, n_y=n_y)


def split_past_future(v: np.ndarray, L0: int, Lp: int, n: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Split a stacked length-n*(L0+Lp) window into past and future parts."""
    v = np.asarray(v, dtype=float).ravel()
    if v.size != n * (L0 + Lp):
        raise ValueError(f"expected length {n * (L0 + Lp)}, got {v.size}")
    return v[: n * L0], v[n * L0:]
