"""Dense tensor arithmetic and the factorizations everything else rests on.

Layout conventions used across the package:

* site tensor ``A``: shape ``(chi_l, chi_r, d)``
* environment ``L`` / ``R``: shape ``(chi', m, chi)``, primed index on the bra side
* MPO bulk ``W``: shape ``(m, m, d, d)`` indexed ``[mu_l, mu_r, s', s]``
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg as sla

LEFT = "left"
RIGHT = "right"


class DimensionError(ValueError):
    """Paired axes disagree in extent."""


class DegenerateInputError(ValueError):
    """Input tensor has zero norm where a nonzero one is required."""


class PreconditionError(ValueError):
    """Input violates a documented precondition."""


@dataclass(frozen=True)
class Factorization:
    """``m = U @ diag(D) @ V.conj().T`` with ``D`` descending and non-negative."""

    U: np.ndarray
    D: np.ndarray
    V: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.D) @ self.V.conj().T


def contract(a: np.ndarray, b: np.ndarray, pairs: Sequence[tuple[int, int]]) -> np.ndarray:
    """Sum over paired axes of ``a`` and ``b``.

    The result carries the unpaired axes of ``a`` followed by those of ``b``,
    each in their original order.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    axes_a = [p[0] for p in pairs]
    axes_b = [p[1] for p in pairs]
    for ia, ib in pairs:
        if a.shape[ia] != b.shape[ib]:
            raise DimensionError(
                f"axis {ia} of a has extent {a.shape[ia]} but axis {ib} of b has extent {b.shape[ib]}"
            )
    return np.tensordot(a, b, axes=(axes_a, axes_b))


def svd(m: np.ndarray) -> Factorization:
    """Thin SVD. LAPACK failures propagate as ``numpy.linalg.LinAlgError``."""
    m = np.asarray(m)
    if not np.all(np.isfinite(m)):
        raise PreconditionError("svd input contains non-finite entries")
    try:
        u, s, vh = sla.svd(m, full_matrices=False, lapack_driver="gesdd")
    except np.linalg.LinAlgError:
        u, s, vh = sla.svd(m, full_matrices=False, lapack_driver="gesvd")
    return Factorization(u, s, vh.conj().T)


def decompose_site(a: np.ndarray, side: str) -> tuple[np.ndarray, np.ndarray]:
    """Split a site tensor into an orthogonal part and a Hermitian PSD bond matrix.

    ``side == LEFT`` groups ``(chi_l, s)`` as rows and returns ``Q, lam`` with
    ``A[a, b, s] = sum_c Q[a, c, s] lam[c, b]``.  ``side == RIGHT`` groups
    ``(s, chi_r)`` and returns ``A[a, b, s] = sum_c lam[a, c] Q[c, b, s]``.

    Both use the polar factor ``Q = U V^dagger`` of the SVD, which keeps ``Q``
    as close to ``A`` as any isometry can be.
    """
    a = np.asarray(a)
    if a.ndim != 3:
        raise DimensionError(f"site tensor must have 3 axes, got shape {a.shape}")
    if not np.any(a):
        raise DegenerateInputError("cannot decompose a zero site tensor")
    chi_l, chi_r, d = a.shape
    if side == LEFT:
        m = a.transpose(0, 2, 1).reshape(chi_l * d, chi_r)
        f = svd(m)
        q = (f.U @ f.V.conj().T).reshape(chi_l, d, chi_r).transpose(0, 2, 1)
        lam = (f.V * f.D) @ f.V.conj().T
    elif side == RIGHT:
        m = a.reshape(chi_l, chi_r * d)
        f = svd(m)
        q = (f.U @ f.V.conj().T).reshape(chi_l, chi_r, d)
        lam = (f.U * f.D) @ f.U.conj().T
    else:
        raise ValueError(f"side must be {LEFT!r} or {RIGHT!r}, got {side!r}")
    lam = 0.5 * (lam + lam.conj().T)
    return np.ascontiguousarray(q), lam


def takagi(s: np.ndarray, tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """Takagi factorization ``s = U diag(D) U^T`` of a complex symmetric matrix.

    Positive singular values come from the real symmetric embedding
    ``[[Re s, Im s], [Im s, -Re s]]`` whose eigenvalues are ``+-D``; the null
    space is filled with the conjugate of an orthonormal kernel basis.
    """
    s = np.asarray(s)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise PreconditionError(f"takagi needs a square matrix, got {s.shape}")
    norm = np.linalg.norm(s)
    if norm == 0.0:
        n = s.shape[0]
        return np.eye(n, dtype=complex), np.zeros(n)
    if np.linalg.norm(s - s.T) > tol * norm:
        raise PreconditionError("takagi input is not symmetric")
    n = s.shape[0]
    a, b = s.real, s.imag
    emb = np.block([[a, b], [b, -a]])
    w, v = np.linalg.eigh(emb)
    order = np.argsort(w)[::-1]
    w, v = w[order], v[:, order]
    cutoff = max(n, 1) * np.finfo(float).eps * 10 * w[0]
    rank = int(np.count_nonzero(w[:n] > cutoff))
    u = v[:n, :rank] + 1j * v[n:, :rank]
    d = w[:rank].copy()
    if rank < n:
        f = svd(s)
        kernel = f.V[:, rank:]
        u = np.hstack([u, kernel.conj()])
        d = np.concatenate([d, np.zeros(n - rank)])
    return u, d


def random_isometry(rows: int, cols: int, rng: np.random.Generator, dtype=float) -> np.ndarray:
    """Random ``rows x cols`` matrix with orthonormal columns."""
    m = rng.standard_normal((rows, cols))
    if np.issubdtype(dtype, np.complexfloating):
        m = m + 1j * rng.standard_normal((rows, cols))
    q, _ = np.linalg.qr(m)
    return q
