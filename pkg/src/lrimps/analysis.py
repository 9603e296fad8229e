"""Observables of a converged infinite MPS.

States are held in the mixed gauge: a center tensor at site 0, left-orthogonal
tensors to its left and right-orthogonal tensors to its right.  Expectation
values then need no fixed-point solves; the left environment of site 0 and
the right environment of every site are identities.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg as sla
from scipy.optimize import least_squares
from scipy.sparse.linalg import LinearOperator, eigs, gmres

from .mpo import Mpo
from .tensors import LEFT, RIGHT, DegenerateInputError, PreconditionError, decompose_site, svd


class FitError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# transfer matrix
# --------------------------------------------------------------------------

@dataclass
class TransferMatrix:
    data: np.ndarray
    side: str
    chi: int

    def eigenvalues(self, k: Optional[int] = None) -> np.ndarray:
        n = self.data.shape[0]
        if k is None or k >= n - 2 or n <= 1100:
            vals = np.linalg.eigvals(self.data)
        else:
            vals = eigs(self.data, k=k, which="LM", return_eigenvectors=False, tol=1e-12)
        return vals[np.argsort(-np.abs(vals))]


def transfer_matrix(q: np.ndarray, side: str = LEFT) -> TransferMatrix:
    """``T[(a a'), (b b')] = sum_s Q[a, b, s] Q*[a', b', s]``."""
    chi_l, chi_r, d = q.shape
    if chi_l != chi_r:
        raise PreconditionError("transfer matrix needs a square bond shape")
    t = np.einsum("abs,cds->acbd", q, q.conj()).reshape(chi_l * chi_l, chi_r * chi_r)
    return TransferMatrix(t, side, chi_l)


def detect_periodicity(t: TransferMatrix, tol: float = 1e-6, k: int = 24) -> int:
    """Number of eigenvalues on the unit circle."""
    vals = t.eigenvalues(k)
    q = int(np.count_nonzero(np.abs(1.0 - np.abs(vals)) < tol))
    return max(q, 1)


# --------------------------------------------------------------------------
# mixed-gauge state
# --------------------------------------------------------------------------

def _apply_site(env: np.ndarray, a: np.ndarray, b: np.ndarray, op: Optional[np.ndarray] = None) -> np.ndarray:
    """``env'[b', b] = sum a*[a', b', s'] env[a', a] op[s', s] b[a, b, s]``."""
    t = np.tensordot(env, b, axes=(1, 0))          # a', b, s
    if op is not None:
        t = np.tensordot(t, op, axes=(2, 1))        # a', b, s'
    return np.tensordot(a.conj(), t, axes=([0, 2], [0, 2]))


@dataclass
class UniformState:
    center: np.ndarray
    q_left: np.ndarray
    q_right: np.ndarray
    lam: np.ndarray

    @property
    def chi(self) -> int:
        return self.center.shape[0]

    @property
    def d(self) -> int:
        return self.center.shape[2]

    def with_center(self, center: np.ndarray) -> "UniformState":
        return UniformState(center / np.linalg.norm(center), self.q_left, self.q_right, self.lam)


def _trim_support(a: np.ndarray, rel_tol: float = 1e-12) -> np.ndarray:
    """Drop bond directions that carry no weight on either side of ``a``.

    Zero singular values leave the orthogonal factors undetermined there, which
    would otherwise show up as spurious unit-modulus transfer eigenvalues.
    """
    _, lam_l = decompose_site(a, LEFT)
    _, lam_r = decompose_site(a, RIGHT)
    wl, vl = np.linalg.eigh(lam_l)
    wr, vr = np.linalg.eigh(lam_r)
    keep_l = wl > rel_tol * wl.max()
    keep_r = wr > rel_tol * wr.max()
    if keep_l.all() or keep_l.sum() != keep_r.sum():
        return a
    # right bond support from lam_l, left bond support from lam_r; a translation-
    # invariant state needs both to span the same space
    pr, pl = vl[:, keep_l], vr[:, keep_r]
    overlap = np.linalg.svd(pl.conj().T @ pr, compute_uv=False)
    if overlap.min() < 1 - 1e-8:
        return a
    basis = pr
    return np.einsum("xa,xys,yb->abs", basis.conj(), a, basis)


def uniform_state(a: np.ndarray) -> UniformState:
    """Mixed-gauge state around the converged site tensor ``a``."""
    nrm = np.linalg.norm(a)
    if nrm == 0:
        raise DegenerateInputError("zero site tensor")
    a = _trim_support(a / nrm)
    ql, lam = decompose_site(a, LEFT)
    qr, _ = decompose_site(a, RIGHT)
    return UniformState(a, ql, qr, lam)


def _site_tensor(state: UniformState, j: int) -> np.ndarray:
    return state.center if j == 0 else state.q_right


def expectation_local(state: UniformState, op: np.ndarray, site: int = 0) -> complex | float:
    """``<O_site>`` for ``site >= 0`` (site 0 carries the center tensor)."""
    if site < 0:
        raise PreconditionError("sites left of the center are not supported; shift the center instead")
    env = np.eye(state.chi, dtype=state.center.dtype)
    for j in range(site + 1):
        a = _site_tensor(state, j)
        env = _apply_site(env, a, a, op if j == site else None)
    val = np.trace(env)
    return float(val.real) if abs(val.imag) < 1e-12 else complex(val)


def density_profile(state: UniformState, op: np.ndarray, period: int) -> np.ndarray:
    env = np.eye(state.chi, dtype=state.center.dtype)
    out = []
    for j in range(period):
        a = _site_tensor(state, j)
        out.append(np.trace(_apply_site(env, a, a, op)).real)
        env = _apply_site(env, a, a)
    return np.array(out)


@dataclass
class CorrelationSeries:
    r: np.ndarray
    values: np.ndarray
    connected: bool = False
    names: tuple = ("", "")

    def __post_init__(self):
        if np.any(np.diff(self.r) <= 0):
            raise PreconditionError("distances must be strictly increasing")
        if not np.all(np.isfinite(self.values)):
            raise PreconditionError("non-finite correlation values")

    def window(self, r_min: int, r_max: int) -> "CorrelationSeries":
        m = (self.r >= r_min) & (self.r <= r_max)
        return CorrelationSeries(self.r[m], self.values[m], self.connected, self.names)


def correlation(state: UniformState, op1: np.ndarray, op2: np.ndarray, r_max: int,
                connected: bool = False, names: tuple = ("", "")) -> CorrelationSeries:
    """``<O1_0 O2_r>`` for ``r = 1..r_max`` by repeated transfer through right-orthogonal tensors."""
    if r_max < 1:
        raise PreconditionError("r_max must be at least 1")
    qr = state.q_right
    env = _apply_site(np.eye(state.chi, dtype=state.center.dtype), state.center, state.center, op1)
    vals = np.empty(r_max, dtype=complex)
    for r in range(1, r_max + 1):
        vals[r - 1] = np.trace(_apply_site(env, qr, qr, op2))
        env = _apply_site(env, qr, qr)
    if connected:
        e1 = expectation_local(state, op1, 0)
        e2 = np.array([expectation_local(state, op2, r) for r in range(1, r_max + 1)])
        vals = vals - e1 * e2
    if np.max(np.abs(vals.imag), initial=0.0) < 1e-12 * max(1.0, np.max(np.abs(vals))):
        vals = vals.real
    return CorrelationSeries(np.arange(1, r_max + 1), vals, connected, names)


# --------------------------------------------------------------------------
# entropy and Luttinger fits
# --------------------------------------------------------------------------

def entanglement_entropy(lam: np.ndarray) -> float:
    """Half-chain entropy in bits from the bond matrix."""
    lam = np.asarray(lam)
    s = np.linalg.svd(lam, compute_uv=False) if lam.ndim == 2 else np.abs(lam)
    p = s ** 2
    tot = p.sum()
    if tot == 0:
        raise DegenerateInputError("zero bond matrix")
    p = p[p > 0] / tot
    return float(max(0.0, -np.sum(p * np.log2(p))))


@dataclass
class LuttingerFit:
    k_nn: float
    k_cc: float
    const_nn: float
    const_cc: float
    residual_nn: float
    residual_cc: float


def _fit_nn(r, y, rho0):
    base = rho0 * rho0
    osc = np.cos(2 * np.pi * rho0 * r)

    def res(p):
        const, k = p
        return const * osc * r ** (-2 * k) - (y - base)

    # start from the envelope slope
    env = np.abs(y - base)
    good = env > 0
    if np.count_nonzero(good) < 2:
        raise FitError("density correlations show no decaying oscillation")
    slope, icpt = np.polyfit(np.log(r[good]), np.log(env[good]), 1)
    k0 = max(-slope / 2, 1e-3)
    sign = np.sign(np.sum((y - base) * osc)) or 1.0
    sol = least_squares(res, [sign * math.exp(icpt), k0], xtol=1e-15, ftol=1e-15, gtol=1e-15)
    return sol.x[1], sol.x[0], float(np.sqrt(np.mean(sol.fun ** 2)))


def _fit_cc(r, y):
    if np.any(y <= 0):
        raise FitError("hopping correlations must be positive for a power-law fit")
    slope, icpt = np.polyfit(np.log(r), np.log(y), 1)
    k = -1.0 / (2.0 * slope) if slope < 0 else math.inf
    model = math.exp(icpt) * r ** slope
    return k, math.exp(icpt), float(np.sqrt(np.mean((model - y) ** 2)))


def fit_luttinger(nn: CorrelationSeries, cc: CorrelationSeries, rho0: float,
                  r_window: tuple[int, int] = (10, 60)) -> LuttingerFit:
    """Fit ``<n_0 n_r> = rho0^2 + const1 cos(2 pi rho0 r) r^(-2K)`` and
    ``<cdag_0 c_r> = const2 r^(-1/(2K))`` over ``r_window``."""
    a = nn.window(*r_window)
    b = cc.window(*r_window)
    if len(a.r) < 2 or len(b.r) < 2:
        raise FitError("fit window holds fewer than two points")
    k_nn, c1, res_nn = _fit_nn(a.r.astype(float), np.real(a.values), rho0)
    k_cc, c2, res_cc = _fit_cc(b.r.astype(float), np.real(b.values))
    return LuttingerFit(float(k_nn), float(k_cc), float(c1), float(c2), res_nn, res_cc)


# --------------------------------------------------------------------------
# energy of the uniform state
# --------------------------------------------------------------------------

def _left_fixed_solve(q, src, c):
    """Solve ``E - c T(E) = src`` for the left transfer map of ``q``."""
    if c == 0.0:
        return src
    chi = q.shape[0]
    shape = src.shape

    def mv(x):
        x = x.reshape(shape)
        return (x - c * _apply_site(x, q, q)).reshape(-1)

    op = LinearOperator((chi * chi, chi * chi), matvec=mv, dtype=np.result_type(q, src))
    x, info = gmres(op, src.reshape(-1), rtol=1e-14, atol=0.0, restart=60, maxiter=200)
    if info != 0:
        x = np.linalg.solve(np.eye(chi * chi) - c * transfer_matrix(q).data.T, src.reshape(-1))
    return x.reshape(shape)


def energy_per_site(mpo: Mpo, a: np.ndarray) -> float:
    """Energy per site of the translation-invariant state generated by the left-orthogonal part of ``a``.

    Requires ``mpo`` to be upper-block free apart from diagonal entries that
    are multiples of the identity, which holds for all builders here.
    """
    ql, _ = decompose_site(a / np.linalg.norm(a), LEFT)
    chi = ql.shape[0]
    w = mpo.bulk
    m = mpo.m
    t = transfer_matrix(ql)
    vals, vecs = np.linalg.eig(t.data) if chi * chi <= 1100 else eigs(t.data, k=4, which="LM")
    idx = int(np.argmin(np.abs(vals - 1.0)))
    rho = vecs[:, idx].reshape(chi, chi)
    env = [None] * m
    env[m - 1] = np.eye(chi, dtype=ql.dtype)
    for mu in range(m - 2, 0, -1):
        src = np.zeros((chi, chi), dtype=np.result_type(ql, w))
        for nu in range(mu + 1, m):
            if env[nu] is not None and np.any(w[nu, mu]):
                src = src + _apply_site(env[nu], ql, ql, w[nu, mu])
        diag = w[mu, mu]
        c = diag[0, 0]
        if not np.allclose(diag, c * np.eye(mpo.d)):
            raise PreconditionError(f"slot {mu} has a non-scalar diagonal block")
        env[mu] = _left_fixed_solve(ql, src, c) if np.any(src) else None
    cterm = np.zeros((chi, chi), dtype=np.result_type(ql, w))
    for nu in range(1, m):
        if env[nu] is not None and np.any(w[nu, 0]):
            cterm = cterm + _apply_site(env[nu], ql, ql, w[nu, 0])
    # env is (bra, ket), rho is (ket, bra)
    e = np.trace(cterm @ rho) / np.trace(rho)
    return float(np.real(e))


# --------------------------------------------------------------------------
# symmetry-broken ground state selection
# --------------------------------------------------------------------------

@dataclass
class Selection:
    gamma: np.ndarray
    value: float
    degenerate: bool
    candidates: int
    values: np.ndarray = field(default_factory=lambda: np.zeros(0))


def select_ground_state(q_left: np.ndarray, q_right: np.ndarray, lam: np.ndarray, objective: np.ndarray,
                        tol: float = 1e-6, degeneracy_tol: float = 1e-8) -> Selection:
    """Choose the bond matrix that maximizes ``<objective>`` on the last left-orthogonal site.

    Candidates are ``X lam`` with ``X`` spanning the left eigenmatrices of the
    transfer map whose eigenvalues lie on the unit circle; these generate all
    states degenerate with the given one.  The quadratic form is diagonalized
    in that span.
    """
    t = transfer_matrix(q_left)
    chi = t.chi
    # left eigenmatrices: X -> sum Q^dag X Q, i.e. T^T acting on vec(X)
    vals, vecs = np.linalg.eig(t.data.T) if chi * chi <= 1100 else eigs(t.data.T, k=24, which="LM")
    sel = np.abs(1.0 - np.abs(vals)) < tol
    xs = [vecs[:, i].reshape(chi, chi) for i in np.flatnonzero(sel)]
    if not xs:
        xs = [np.eye(chi)]
    cands = [x @ lam for x in xs]
    basis = np.array([c.reshape(-1) for c in cands]).T
    # orthonormal span, dropping dependent directions
    u, s, _ = np.linalg.svd(basis, full_matrices=False)
    keep = s > s[0] * 1e-10
    u = u[:, keep]
    mmat = _apply_site(np.eye(chi, dtype=q_left.dtype), q_left, q_left, objective)
    proj = []
    for i in range(u.shape[1]):
        g = u[:, i].reshape(chi, chi)
        proj.append((mmat @ g).reshape(-1))
    h = u.conj().T @ np.array(proj).T
    h = 0.5 * (h + h.conj().T)
    w, v = np.linalg.eigh(h)
    gamma = (u @ v[:, -1]).reshape(chi, chi)
    gamma = gamma / np.linalg.norm(gamma)
    degenerate = bool(len(w) > 1 and w[-1] - w[-2] < degeneracy_tol * max(1.0, abs(w[-1])))
    if np.allclose(objective, objective[0, 0] * np.eye(objective.shape[0])):
        degenerate = True
    return Selection(gamma, float(w[-1]), degenerate, int(u.shape[1]), w[::-1].copy())


def selected_state(state: UniformState, selection: Selection) -> UniformState:
    """Mixed-gauge state whose center is the last left-orthogonal site carrying the chosen bond matrix."""
    center = np.einsum("abs,bc->acs", state.q_left, selection.gamma)
    return state.with_center(center)
