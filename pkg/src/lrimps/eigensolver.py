"""Lowest-eigenpair solver on an implicitly given Hermitian operator.

The basis is grown from the residual (Lanczos-like), optionally through a
Davidson-type preconditioner and an arbitrary basis-alteration hook.  The first
seed stays pinned as basis vector 0, which is what lets the rank-one gain term
``-gamma |v0><v0|`` be handled by editing a single projected entry.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg as sla

Apply = Callable[[np.ndarray], np.ndarray]


class SolverError(RuntimeError):
    pass


def _orthonormalize(v: np.ndarray, basis: np.ndarray, rel_tol: float = 1e-10) -> Optional[np.ndarray]:
    """Two passes of classical Gram-Schmidt; ``None`` if nothing survives."""
    norm0 = np.linalg.norm(v)
    if norm0 == 0.0 or not np.isfinite(norm0):
        return None
    w = v.copy()
    if basis.shape[1]:
        for _ in range(2):
            w -= basis @ (basis.conj().T @ w)
    norm = np.linalg.norm(w)
    if norm <= rel_tol * norm0:
        return None
    return w / norm


@dataclass
class SubspaceBasis:
    """Orthonormal vectors, their operator images, and the projected matrix.

    ``h`` always holds the bare projection; ``gamma`` is the rank-one gain
    applied to the first vector, so the effective matrix is ``h - gamma e0 e0^T``.
    """

    vectors: np.ndarray
    images: np.ndarray
    h: np.ndarray
    gamma: float = 0.0

    @classmethod
    def empty(cls, n: int, dtype) -> "SubspaceBasis":
        return cls(np.zeros((n, 0), dtype), np.zeros((n, 0), dtype), np.zeros((0, 0), dtype))

    @property
    def size(self) -> int:
        return self.vectors.shape[1]

    @property
    def dim(self) -> int:
        return self.vectors.shape[0]

    def effective(self) -> np.ndarray:
        h = self.h.copy()
        if self.size:
            h[0, 0] -= self.gamma
        return h

    def append(self, v: np.ndarray, hv: np.ndarray) -> None:
        k = self.size
        overlaps = self.vectors.conj().T @ hv
        h = np.zeros((k + 1, k + 1), dtype=np.result_type(self.h, hv))
        h[:k, :k] = self.h
        h[:k, k] = overlaps
        h[k, :k] = overlaps.conj()
        h[k, k] = np.vdot(v, hv).real
        self.vectors = np.column_stack([self.vectors, v])
        self.images = np.column_stack([self.images, hv])
        self.h = h

    def ritz(self) -> tuple[np.ndarray, np.ndarray]:
        return np.linalg.eigh(self.effective())

    def combine(self, coeffs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.vectors @ coeffs, self.images @ coeffs

    def residual(self, theta: float, coeffs: np.ndarray) -> np.ndarray:
        v, hv = self.combine(coeffs)
        r = hv - theta * v
        if self.gamma and self.size:
            r -= self.gamma * coeffs[0] * self.vectors[:, 0]
        return r

    def compress(self, coeffs: np.ndarray) -> None:
        """Replace the basis by ``vectors @ coeffs`` (``coeffs`` with orthonormal columns)."""
        self.vectors = self.vectors @ coeffs
        self.images = self.images @ coeffs
        self.h = coeffs.conj().T @ self.h @ coeffs
        self.h = 0.5 * (self.h + self.h.conj().T)


@dataclass
class DavidsonPreconditioner:
    """Approximate ``(E0 - H)^{-1}`` from known eigenpairs plus an average eigenvalue."""

    values: np.ndarray
    vectors: np.ndarray
    images: np.ndarray
    alpha: float
    e0: float
    shift: float
    dim: int

    @property
    def target(self) -> float:
        return self.e0 - self.shift


def build_davidson(eigpairs: Sequence[tuple[float, np.ndarray, np.ndarray]], trace_h: float, n: int,
                   epsilon_shift: Optional[float] = None, drop_factor: float = 100.0) -> DavidsonPreconditioner:
    """Build the preconditioner from ``(e_i, |e_i>, H|e_i>)`` sorted ascending.

    ``alpha`` averages the eigenvalues not represented in ``eigpairs``.  The
    lowest pair sets the target only; its own projector term is left out.
    Pairs with ``e_i - e_0 > drop_factor * (e_1 - e_0)`` are ignored.
    """
    k = len(eigpairs)
    if n <= k:
        raise SolverError(f"dimension {n} must exceed the number of eigenpairs {k}")
    vals = np.array([p[0] for p in eigpairs], dtype=float)
    alpha = (trace_h - vals.sum()) / (n - k)
    if k == 0:
        e0 = alpha
        vecs = np.zeros((n, 0))
        imgs = np.zeros((n, 0))
        kept = vals
    else:
        e0 = vals[0]
        vecs = np.column_stack([p[1] for p in eigpairs[1:]]) if k > 1 else np.zeros((n, 0))
        imgs = np.column_stack([p[2] for p in eigpairs[1:]]) if k > 1 else np.zeros((n, 0))
        kept = vals[1:]
        if k > 2:
            gap = vals[1] - vals[0]
            keep = (kept - vals[0]) <= drop_factor * max(gap, np.finfo(float).tiny)
            vecs, imgs, kept = vecs[:, keep], imgs[:, keep], kept[keep]
    if epsilon_shift is None:
        epsilon_shift = 1e-3 * abs(e0) if e0 != 0 else 1e-3
    return DavidsonPreconditioner(kept, vecs, imgs, float(alpha), float(e0), float(epsilon_shift), n)


def precondition_apply(d: DavidsonPreconditioner, r: np.ndarray, e0: Optional[float] = None) -> np.ndarray:
    """``(E0-alpha)^{-1} (r + sum_i (H-alpha)|e_i> <e_i|r> / (E0-e_i))``."""
    target = (d.e0 if e0 is None else e0) - d.shift
    out = r.astype(np.result_type(r, d.vectors), copy=True)
    if d.values.size:
        overlaps = d.vectors.conj().T @ r
        weights = overlaps / (target - d.values)
        out += (d.images - d.alpha * d.vectors) @ weights
    return out / (target - d.alpha)


def alter_basis_invariance(candidate: np.ndarray, q_left: np.ndarray, q_right: np.ndarray,
                           basis: Optional[np.ndarray] = None) -> Optional[np.ndarray]:
    """Pull a candidate vector toward tensors with equal left and right bond matrices.

    ``candidate`` is a flattened site tensor of shape ``q_left.shape``.  With
    ``lam_r = A . Q_R^*`` and ``lam_l = Q_L^* . A`` the returned vector is the
    normalized, basis-orthogonal part of ``A/2 + (Q_L lam_r + lam_l Q_R)/4``.
    """
    shape = q_left.shape
    a = candidate.reshape(shape)
    lam_r = np.einsum("acs,bcs->ab", a, q_right.conj())
    lam_l = np.einsum("cas,cbs->ab", q_left.conj(), a)
    alt = 0.5 * a + 0.25 * (np.einsum("acs,cb->abs", q_left, lam_r) + np.einsum("ac,cbs->abs", lam_l, q_right))
    alt = alt.reshape(-1)
    if basis is None:
        basis = np.zeros((alt.size, 0), alt.dtype)
    return _orthonormalize(alt, basis)


def bond_matrices(a: np.ndarray, q_left: np.ndarray, q_right: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``(lam_l, lam_r)`` of a site tensor against fixed orthogonal tensors."""
    lam_r = np.einsum("acs,bcs->ab", a, q_right.conj())
    lam_l = np.einsum("cas,cbs->ab", q_left.conj(), a)
    return lam_l, lam_r


def subspace_gamma_update(basis: SubspaceBasis, gamma: float) -> SubspaceBasis:
    """Set the gain on the first basis vector; the cached images are reused."""
    basis.gamma = float(gamma)
    return basis


def residual_expand(basis: SubspaceBasis, apply: Apply, tol: float = 1e-10,
                    transform: Optional[Callable[[np.ndarray, float], np.ndarray]] = None) -> bool:
    """Add the (transformed) residual of the lowest Ritz pair to the basis.

    Returns ``False`` when the residual is below ``tol`` or nothing new survives
    orthogonalization.
    """
    vals, vecs = basis.ritz()
    r = basis.residual(vals[0], vecs[:, 0])
    if np.linalg.norm(r) <= tol:
        return False
    cand = transform(r, vals[0]) if transform is not None else r
    v = _orthonormalize(cand, basis.vectors) if cand is not None else None
    if v is None:
        v = _orthonormalize(r, basis.vectors)
    if v is None:
        return False
    basis.append(v, apply(v))
    return True


@dataclass
class SolverOptions:
    tol: float = 1e-10
    max_basis: int = 40
    max_iter: int = 400
    restart_keep: int = 3
    n_extra: int = 0
    gamma: float = 0.0
    preconditioner: Optional[DavidsonPreconditioner] = None
    alter: Optional[Callable[[np.ndarray, np.ndarray], Optional[np.ndarray]]] = None


@dataclass
class SolveResult:
    e0: float
    v0: np.ndarray
    extra: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    residual: float = float("nan")
    basis: Optional[SubspaceBasis] = None
    history: list = field(default_factory=list)


def _ritz_result(basis: SubspaceBasis, n_extra: int):
    vals, vecs = basis.ritz()
    pairs = []
    for j in range(1, min(1 + n_extra, len(vals))):
        v, hv = basis.combine(vecs[:, j])
        pairs.append((float(vals[j]), v, hv))
    return vals, vecs, pairs


def solve_lowest(apply: Apply, seeds: Sequence[np.ndarray], opts: Optional[SolverOptions] = None) -> SolveResult:
    """Lowest eigenpair of ``H - gamma |s0><s0|`` where ``s0`` is the normalized first seed.

    ``iterations`` counts operator applications.  The residual test is
    ``||r|| <= tol * max(1, |e0|)``.
    """
    opts = opts or SolverOptions()
    if not seeds:
        raise SolverError("at least one seed vector is required")
    first = np.asarray(seeds[0])
    if not np.any(first):
        raise SolverError("first seed is zero")
    n = first.size
    dtype = np.result_type(*[np.asarray(s).dtype for s in seeds], float)
    basis = SubspaceBasis.empty(n, dtype)
    basis.gamma = opts.gamma
    applies = 0
    for i, s in enumerate(seeds):
        s = np.asarray(s, dtype=dtype).reshape(-1)
        if i > 0 and opts.alter is not None:
            alt = opts.alter(s, basis.vectors)
            s = alt if alt is not None else s
        v = _orthonormalize(s, basis.vectors)
        if v is None:
            continue
        basis.append(v, apply(v))
        applies += 1
        if basis.size >= opts.max_basis - 1:
            break

    def transform(r, theta):
        c = r
        if opts.preconditioner is not None:
            c = precondition_apply(opts.preconditioner, r, e0=theta)
        if opts.alter is not None:
            alt = opts.alter(c, basis.vectors)
            if alt is not None:
                c = alt
        return c

    history = []
    converged = False
    res_norm = float("inf")
    while True:
        vals, vecs = basis.ritz()
        theta = float(vals[0])
        history.append(theta)
        r = basis.residual(theta, vecs[:, 0])
        res_norm = float(np.linalg.norm(r))
        if res_norm <= opts.tol * max(1.0, abs(theta)):
            converged = True
            break
        if applies >= opts.max_iter:
            break
        if basis.size >= opts.max_basis:
            keep = min(opts.restart_keep, basis.size - 1)
            c = vecs[:, :keep]
            e1 = np.zeros((basis.size, 1), dtype=c.dtype)
            e1[0, 0] = 1.0
            c = c - e1 @ c[:1, :]
            q, _ = np.linalg.qr(c)
            basis.compress(np.hstack([e1, q]))
            continue
        cand = transform(r, theta)
        v = _orthonormalize(cand, basis.vectors)
        if v is None and cand is not r:
            v = _orthonormalize(r, basis.vectors)
        if v is None:
            converged = True
            break
        basis.append(v, apply(v))
        applies += 1
    vals, vecs, pairs = _ritz_result(basis, opts.n_extra)
    v0, _ = basis.combine(vecs[:, 0])
    return SolveResult(float(vals[0]), v0, pairs, applies, converged, res_norm, basis, history)
