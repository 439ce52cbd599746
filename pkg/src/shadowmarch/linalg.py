"""Thin QR with a fixed sign convention, triangular solves, projections.

All routines accept stacks of matrices (leading axes are batch axes).
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .exceptions import RankDeficientError, SingularSystemError

RANK_TOL = 1e-10
SINGULAR_TOL = 1e-14


class ThinQR(NamedTuple):
    Q: np.ndarray
    R: np.ndarray


def thin_qr(A, rank_tol=RANK_TOL):
    """Householder thin QR of ``A`` (``(..., n, m)``, ``m <= n``) with diag(R) >= 0.

    Columns whose diagonal falls below ``rank_tol`` times the largest column
    norm raise :class:`RankDeficientError` naming the first offending column.
    """
    A = np.asarray(A, dtype=float)
    n, m = A.shape[-2:]
    if m > n:
        raise ValueError(f"thin QR needs m <= n, got {A.shape}")
    Q, R = np.linalg.qr(A, mode="reduced")
    diag = np.diagonal(R, axis1=-2, axis2=-1)
    sign = np.where(diag < 0, -1.0, 1.0)
    Q = Q * sign[..., None, :]
    R = R * sign[..., :, None]
    if m:
        scale = np.linalg.norm(A, axis=-2).max(axis=-1)
        bad = np.abs(diag) <= rank_tol * scale[..., None]
        if np.any(bad):
            col = int(np.argmax(bad.reshape(-1, m).any(axis=0)))
            flat = np.abs(diag).reshape(-1, m)[:, col].min()
            raise RankDeficientError(col, flat, rank_tol * float(scale.max()))
    return ThinQR(Q, R)


class TriangularSolveCounter:
    """Flop tally for :func:`back_substitute` (m^2 per solve)."""

    def __init__(self):
        self.solves = 0
        self.flops = 0

    def add(self, m):
        self.solves += 1
        self.flops += m * m


def back_substitute(R, rhs, counter=None, singular_tol=SINGULAR_TOL):
    """Solve ``R x = rhs`` for upper-triangular ``R`` by backward substitution."""
    R = np.asarray(R, dtype=float)
    rhs = np.asarray(rhs, dtype=float)
    m = R.shape[-1]
    if R.shape[-2:] != (m, m) or rhs.shape[-1] != m:
        raise ValueError(f"shape mismatch: R {R.shape}, rhs {rhs.shape}")
    diag = np.diagonal(R, axis1=-2, axis2=-1)
    if m:
        floor = singular_tol * np.abs(R).max()
        small = np.abs(diag) <= floor
        if np.any(small):
            idx = int(np.argmax(small.reshape(-1, m).any(axis=0)))
            raise SingularSystemError(idx, float(np.abs(diag).reshape(-1, m)[:, idx].min()))
    x = np.empty(np.broadcast_shapes(R.shape[:-1], rhs.shape))
    for j in range(m - 1, -1, -1):
        acc = rhs[..., j] - np.sum(R[..., j, j + 1 :] * x[..., j + 1 :], axis=-1)
        x[..., j] = acc / diag[..., j]
    if counter is not None:
        counter.add(m)
    return x


def triangular_multiply(R, x):
    """``R @ x`` using only the upper triangle of ``R``."""
    return np.einsum("...ij,...j->...i", np.triu(R), x)


def project_out(Q, v):
    """``(I - Q Q^T) v`` for orthonormal columns ``Q``."""
    Q = np.asarray(Q, dtype=float)
    v = np.asarray(v, dtype=float)
    coef = np.einsum("...ij,...i->...j", Q, v)
    return v - np.einsum("...ij,...j->...i", Q, coef)
