"""The iMPS growth engine.

Each round inserts one optimized site tensor between the left and right
environment halves, absorbs its orthogonal parts into both halves and mixes
the grown halves with the old ones (superposed multi-optimization).  A
rank-one gain term pulls the solution toward a running reference tensor, and
the local MPO slot carries a cumulative energy shift so the effective operator
stays well conditioned.

Environments are stored normalized: the superposition ``L_old + xi * L_new``
is divided by ``1 + xi``.  That rescales the effective operator by a positive
constant and leaves every eigenvector unchanged, but keeps the identity slot
of each half exactly equal to the identity matrix.
"""
from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Optional

import numpy as np
import scipy.linalg as sla
from scipy.sparse.linalg import LinearOperator, eigsh

from .eigensolver import (DavidsonPreconditioner, SolverOptions, SubspaceBasis, alter_basis_invariance,
                          bond_matrices, build_davidson, solve_lowest, subspace_gamma_update)
from .mpo import Mpo, add_local_term, block_operators
from .tensors import LEFT, RIGHT, DegenerateInputError, PreconditionError, decompose_site, svd, takagi

log = logging.getLogger(__name__)


class EngineError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# configuration and bookkeeping
# --------------------------------------------------------------------------

def heuristic_c(delta: float) -> float:
    """Fraction of the free step to allow, from the undamped deviation ``delta``."""
    if delta <= 0.0:
        return 0.9
    return 1.0 - max(0.1, 0.7 + 0.1 * math.log10(delta))


@dataclass
class EngineConfig:
    chi: int = 16
    chi_schedule: tuple = ()
    n0: int = 8
    tol: float = 1e-9
    window: int = 20
    max_rounds: int = 2000
    smo: bool = True
    gain: bool = True
    subtract_energy: bool = True
    enforce_invariance: bool = False
    mirror: bool = False
    c_value: Optional[float] = None
    delta_max_factor: float = 10.0
    gamma_floor: float = 1e-12
    avg_decay: float = 0.9
    avg_weight: float = 0.1
    avg_cap: float = 1.02
    recycle: int = 3
    recycle_gap: float = 1e-8
    davidson: bool = True
    davidson_pairs: int = 4
    epsilon_shift: float = 1e-3
    solver_tol: float = 1e-10
    max_basis: int = 24
    solver_max_iter: int = 120
    restart_keep: int = 3
    grow_noise: float = 1e-4
    init_noise: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.n0 < 2 or self.n0 % 2:
            raise PreconditionError(f"n0 must be even and >= 2, got {self.n0}")
        if self.chi < 1:
            raise PreconditionError("chi must be at least 1")
        if self.tol <= 0 or self.solver_tol <= 0:
            raise PreconditionError("tolerances must be positive")
        self.chi_schedule = tuple(int(c) for c in self.chi_schedule)

    def c_policy(self, delta: float) -> float:
        return heuristic_c(delta) if self.c_value is None else float(self.c_value)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["chi_schedule"] = list(self.chi_schedule)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EngineConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class ConvergenceState:
    a_refer: np.ndarray
    avg_dev: Optional[float] = None
    avg_acc: float = 0.0
    n_dev: int = 0
    last_xi: float = 1.0
    round: int = 0
    streak: int = 0
    gamma_floor: float = 1e-12
    energy_per_site: list = field(default_factory=list)


@dataclass
class StepReport:
    round: int
    energy_per_site: float
    eigenvalue: float
    delta: float
    xi: float
    gamma: float
    iterations: int
    converged_solver: bool
    lambda_asymmetry: float

    def as_dict(self) -> dict:
        return asdict(self)


def running_average_update(state: ConvergenceState, delta: float, decay: float = 0.9,
                           weight: float = 0.1, cap: float = 1.02) -> ConvergenceState:
    """Bias-corrected exponential average of the deviations, growth capped per round."""
    state.n_dev += 1
    acc = decay * state.avg_acc + weight * delta
    norm = 1.0 - decay ** state.n_dev
    cand = acc / norm
    if state.avg_dev is not None:
        capped = min(cand, cap * state.avg_dev)
        if capped < cand:
            acc = capped * norm
        cand = capped
    state.avg_acc = acc
    state.avg_dev = cand
    return state


def superposition_weight(avg_dev: Optional[float], delta: float) -> float:
    if avg_dev is None or delta <= avg_dev:
        return 1.0
    return float(min(1.0, avg_dev / delta))


def smo_accumulate(L_old, L_new, R_old, R_new, state: ConvergenceState, delta: float,
                   decay: float = 0.9, weight: float = 0.1, cap: float = 1.02):
    """Superpose old and grown halves with weight ``xi``; update the running deviation.

    Returns ``((L_old + xi L_new)/(1+xi), (R_old + xi R_new)/(1+xi), xi)``.
    """
    xi = superposition_weight(state.avg_dev, delta)
    running_average_update(state, delta, decay, weight, cap)
    state.last_xi = xi
    s = 1.0 / (1.0 + xi)
    return (L_old + xi * L_new) * s, (R_old + xi * R_new) * s, xi


def update_reference(state: ConvergenceState, a: np.ndarray, xi: float) -> ConvergenceState:
    new = state.a_refer + xi * a
    nrm = np.linalg.norm(new)
    if nrm == 0.0:
        raise DegenerateInputError("reference tensor cancelled to zero")
    state.a_refer = new / nrm
    return state


def mirror_symmetrize(a: np.ndarray) -> np.ndarray:
    """Symmetrize the two bond indices and normalize."""
    s = 0.5 * (a + a.transpose(1, 0, 2))
    nrm = np.linalg.norm(s)
    if nrm <= 1e-14 * max(np.linalg.norm(a), 1e-300):
        raise DegenerateInputError("mirror-symmetric part of the site tensor vanishes")
    return s / nrm


# --------------------------------------------------------------------------
# effective operator and environment updates
# --------------------------------------------------------------------------

class EffectiveHamiltonian:
    """Single-site operator built from ``L``, one MPO tensor and ``R``."""

    def __init__(self, L: np.ndarray, W: np.ndarray, R: np.ndarray):
        if L.shape[1] != W.shape[0] or R.shape[1] != W.shape[1]:
            raise PreconditionError(
                f"MPO slots do not match environments: L{L.shape} W{W.shape} R{R.shape}")
        if L.shape[0] != L.shape[2] or R.shape[0] != R.shape[2]:
            raise PreconditionError("environments must be square in the bond indices")
        self.L, self.W, self.R = L, W, R
        self.shape = (L.shape[2], R.shape[2], W.shape[3])
        self.dim = int(np.prod(self.shape))
        self.dtype = np.result_type(L, W, R)
        self.applications = 0

    def apply_tensor(self, a: np.ndarray) -> np.ndarray:
        t = np.tensordot(self.L, a, axes=(2, 0))
        t = np.tensordot(t, self.W, axes=([1, 3], [0, 3]))
        t = np.tensordot(t, self.R, axes=([1, 2], [2, 1]))
        return t.transpose(0, 2, 1)

    def apply(self, v: np.ndarray) -> np.ndarray:
        self.applications += 1
        return self.apply_tensor(v.reshape(self.shape)).reshape(-1)

    __call__ = apply

    def trace(self) -> float:
        tl = np.einsum("aia->i", self.L)
        tr = np.einsum("aia->i", self.R)
        tw = np.einsum("ijss->ij", self.W)
        return float(np.real(tl @ tw @ tr))

    def dense(self) -> np.ndarray:
        h = np.einsum("xma,mnts,ynb->xytabs", self.L, self.W, self.R)
        return h.reshape(self.dim, self.dim)

    def expectation(self, a: np.ndarray) -> float:
        a = a.reshape(self.shape)
        return float(np.real(np.vdot(a, self.apply_tensor(a))) / np.real(np.vdot(a, a)))

    def as_linear_operator(self) -> LinearOperator:
        return LinearOperator((self.dim, self.dim), matvec=self.apply, dtype=self.dtype)


def assemble_effective(L, W, R) -> EffectiveHamiltonian:
    return EffectiveHamiltonian(L, W, R)


def absorb_left(L: np.ndarray, q: np.ndarray, W: np.ndarray) -> np.ndarray:
    t = np.tensordot(L, q, axes=(2, 0))
    t = np.tensordot(t, W, axes=([1, 3], [0, 3]))
    t = np.tensordot(q.conj(), t, axes=([0, 2], [0, 3]))
    return t.transpose(0, 2, 1)


def absorb_right(R: np.ndarray, q: np.ndarray, W: np.ndarray) -> np.ndarray:
    t = np.tensordot(q, R, axes=(1, 2))
    t = np.tensordot(t, W, axes=([3, 1], [1, 3]))
    t = np.tensordot(q.conj(), t, axes=([1, 2], [1, 3]))
    return t.transpose(0, 2, 1)


@dataclass
class Absorption:
    L: np.ndarray
    R: np.ndarray
    q_left: np.ndarray
    lam_left: np.ndarray
    q_right: np.ndarray
    lam_right: np.ndarray


def absorb_both(L, R, a, W) -> Absorption:
    """Grow both halves by the orthogonal parts of ``a``."""
    ql, ll = decompose_site(a, LEFT)
    qr, lr = decompose_site(a, RIGHT)
    return Absorption(absorb_left(L, ql, W), absorb_right(R, qr, W), ql, ll, qr, lr)


def bond_energy(L, lam, R) -> float:
    """Energy of the state ``... L lam R ...`` with the MPO bond joining ``L`` and ``R`` directly."""
    t = np.einsum("xma,ab,ymb,xy->", L, lam, R, lam.conj())
    return float(np.real(t) / np.real(np.vdot(lam, lam)))


# --------------------------------------------------------------------------
# gain function
# --------------------------------------------------------------------------

@dataclass
class GainInfo:
    gamma: float
    c: float
    delta_max: float
    eps0: float
    target: float
    h_aa: float
    h_bb: float
    h_ab: float
    exact: bool
    fallback: bool = False


def _gamma_for_eps(eps, h_ab, gap, exact):
    """Shift that makes the two-level minimizer have overlap ``eps`` with ``B``."""
    if exact:
        theta = math.asin(min(eps, 1.0))
        tan2 = math.tan(2.0 * theta)
        if tan2 <= 0:
            return -math.inf
        return 2.0 * abs(h_ab) / tan2 - gap
    return abs(h_ab) / eps - gap


def gain_from_matrix(h: np.ndarray, a0: np.ndarray, c: float, delta_max: float,
                     gamma_floor: float = 1e-12, exact_threshold: float = 0.01) -> GainInfo:
    """Gain ``gamma`` from the projected matrix ``h`` (vector 0 is the reference)
    and the undamped Ritz coefficients ``a0``."""
    a0 = np.asarray(a0)
    if abs(a0[0]) > 0:
        a0 = a0 * (abs(a0[0]) / a0[0])
    b = a0.copy()
    b[0] = 0.0
    eps0 = float(np.linalg.norm(b))
    h_aa = float(np.real(h[0, 0]))
    if eps0 < 1e-15:
        return GainInfo(gamma_floor, c, delta_max, eps0, 0.0, h_aa, h_aa, 0.0, False)
    b = b / eps0
    h_bb = float(np.real(np.vdot(b, h @ b)))
    h_ab = float(np.real(h[0, :] @ b))
    gap = h_bb - h_aa
    exact = eps0 > exact_threshold
    if h_ab >= 0.0 or (not exact and gap <= 0.0):
        log.warning("gain function: degenerate two-level data (gap=%g, h_ab=%g), using gamma floor", gap, h_ab)
        return GainInfo(gamma_floor, c, delta_max, eps0, eps0, h_aa, h_bb, h_ab, exact, True)
    if exact:
        eps_free = math.sin(0.5 * math.atan2(2.0 * abs(h_ab), gap))
    else:
        eps_free = abs(h_ab) / gap
    target = min(c * eps_free, delta_max)
    candidates = [gamma_floor]
    if c < 1.0:
        if exact:
            candidates.append(_gamma_for_eps(c * eps_free, h_ab, gap, True))
        else:
            candidates.append((1.0 - c) / c * gap)
    if delta_max < eps_free:
        candidates.append(_gamma_for_eps(delta_max, h_ab, gap, exact))
    gamma = max(candidates)
    return GainInfo(float(gamma), c, delta_max, eps_free, target, h_aa, h_bb, h_ab, exact)


def compute_gain_gamma(subspace: SubspaceBasis, c: float, delta_max: float,
                       gamma_floor: float = 1e-12) -> GainInfo:
    """Gain for the reference (basis vector 0) given the bare projected matrix."""
    vals, vecs = np.linalg.eigh(subspace.h)
    return gain_from_matrix(subspace.h, vecs[:, 0], c, delta_max, gamma_floor)


# --------------------------------------------------------------------------
# initialization
# --------------------------------------------------------------------------

def _ground_state(vl: np.ndarray, vr: np.ndarray, mirror: bool = False) -> tuple[float, np.ndarray]:
    """Ground state of ``sum_mu vl[mu] (x) vr[mu]`` as a ``(dl, dr)`` matrix."""
    m, dl, _ = vl.shape
    dr = vr.shape[1]
    dim = dl * dr
    if dim <= 1024:
        h = np.einsum("mij,mkl->ikjl", vl, vr).reshape(dim, dim)
        h = 0.5 * (h + h.conj().T)
        w, v = np.linalg.eigh(h)
        e, psi = w[0], v[:, 0]
    else:
        def mv(x):
            x = x.reshape(dl, dr)
            out = np.zeros_like(x, dtype=np.result_type(x, vl, vr))
            for mu in range(m):
                out += vl[mu] @ x @ vr[mu].T
            return out.reshape(-1)
        dtype = np.result_type(vl, vr)
        op = LinearOperator((dim, dim), matvec=mv, dtype=dtype)
        v0 = np.ones(dim, dtype=dtype)
        w, v = eigsh(op, k=1, which="SA", v0=v0, tol=1e-13, maxiter=20000)
        e, psi = w[0], v[:, 0]
    return float(e), psi.reshape(dl, dr)


def _mirror_permutation(d: int, k: int) -> np.ndarray:
    """Index map from site-reversed to natural ordering of a ``k``-site block."""
    idx = np.arange(d ** k).reshape((d,) * k)
    return idx.transpose(tuple(range(k - 1, -1, -1))).reshape(-1)


@dataclass
class InitialData:
    L: np.ndarray
    R: np.ndarray
    A: np.ndarray
    lam: np.ndarray
    energy: float
    state: ConvergenceState
    psi: np.ndarray


def initialize(mpo: Mpo, n0: int = 8, chi: Optional[int] = None, mirror: bool = False) -> InitialData:
    """Environments from the exact ground state of an ``n0``-site chain.

    The ground state is split in the middle and factorized (SVD, or Takagi when
    mirror symmetry is requested).  ``L``/``R`` are the left/right block
    operator vectors projected onto the kept Schmidt states; the bond matrix
    ``lam`` carries the Schmidt values.  ``energy`` is the Rayleigh quotient of
    the ``L lam R`` state, equal to the ``n0``-site ground energy whenever no
    Schmidt state is cut.  ``A`` is a normalized starting tensor carrying
    ``lam`` on the bonds and the dominant single-site state on the physical leg.
    """
    if n0 < 2 or n0 % 2:
        raise PreconditionError(f"n0 must be even and >= 2, got {n0}")
    d = mpo.d
    k = n0 // 2
    if d ** n0 > 2 ** 22:
        raise PreconditionError(f"exact diagonalization of {d}**{n0} states is not feasible")
    vl = block_operators(mpo, k, "left")
    vr = block_operators(mpo, k, "right")
    e0, psi = _ground_state(vl, vr)
    chi = d ** k if chi is None else min(chi, d ** k)
    if mirror:
        perm = _mirror_permutation(d, k)
        sym = psi[:, perm]
        sym = 0.5 * (sym + sym.T)
        if np.linalg.norm(sym) < 1e-8:
            raise EngineError("ground state has no mirror-symmetric component")
        sym /= np.linalg.norm(sym)
        psi = sym[:, np.argsort(perm)]
        u, dvals = takagi(sym.astype(complex))
        left = u[:, :chi]
        right = np.empty_like(left)
        right[perm] = left
        # right states in natural order: psi = sum_b d_b left_b (x) right_b
    else:
        f = svd(psi)
        dvals = f.D
        left = f.U[:, :chi]
        right = f.V[:, :chi].conj()
    lam_vals = dvals[:chi]
    L = np.einsum("ia,mij,jb->amb", left.conj(), vl, left)
    R = np.einsum("ia,mij,jb->amb", right.conj(), vr, right)
    lam = np.diag(lam_vals).astype(np.result_type(left, float))
    nrm = np.linalg.norm(lam)
    if nrm == 0:
        raise EngineError("initial state has vanishing Schmidt weight")
    lam = lam / nrm
    energy = bond_energy(L, lam, R)
    # dominant single-site state at the cut
    full = (left * lam_vals) @ right.T
    site = full.reshape(d ** (k - 1), d, d ** k)
    rho = np.einsum("asb,atb->st", site, site.conj())
    w, v = np.linalg.eigh(rho)
    phi = v[:, -1]
    a = np.einsum("ab,s->abs", lam, phi)
    if mirror:
        a = mirror_symmetrize(a)
    a = a / np.linalg.norm(a)
    state = ConvergenceState(a_refer=a.copy())
    return InitialData(L, R, a, lam, energy, state, psi)


# --------------------------------------------------------------------------
# the engine
# --------------------------------------------------------------------------

class Engine:
    """Owns environments, reference tensor and energy shift of one run."""

    def __init__(self, mpo: Mpo, config: Optional[EngineConfig] = None, *, _skip_init: bool = False):
        self.mpo = mpo
        self.config = config or EngineConfig()
        self.rng = np.random.default_rng(self.config.seed)
        self.shift = 0.0
        self.gamma_prev = 0.0
        self.recycled: deque = deque(maxlen=max(self.config.recycle, 1))
        self.recycle_enabled = True
        self.pairs: list = []
        self.q_left = self.q_right = None
        self.lam_left = self.lam_right = None
        self.reports: list[StepReport] = []
        self.last_eigenvalue = float("nan")
        if _skip_init:
            return
        chi0 = self.config.chi_schedule[0] if self.config.chi_schedule else self.config.chi
        init = initialize(mpo, self.config.n0, chi0, self.config.mirror)
        self.L, self.R, self.A = init.L, init.R, init.A
        self.lam_left = self.lam_right = init.lam
        self.state = init.state
        if self.config.init_noise > 0:
            ref = self.state.a_refer + self.config.init_noise * self.rng.standard_normal(self.A.shape)
            if self.config.mirror:
                ref = mirror_symmetrize(ref)
            self.state.a_refer = ref / np.linalg.norm(ref)
        self.state.gamma_floor = self.config.gamma_floor
        self.initial_energy = init.energy
        self.initial_lambda = init.lam

    # -- helpers -----------------------------------------------------------
    @property
    def chi(self) -> int:
        return self.L.shape[0]

    @property
    def round(self) -> int:
        return self.state.round

    def working_mpo(self, shift: Optional[float] = None) -> np.ndarray:
        s = self.shift if shift is None else shift
        if s == 0.0:
            return self.mpo.bulk
        return add_local_term(self.mpo, -s * np.eye(self.mpo.d)).bulk

    def effective(self) -> EffectiveHamiltonian:
        return assemble_effective(self.L, self.working_mpo(), self.R)

    @property
    def converged(self) -> bool:
        return self.state.streak >= self.config.window

    def lambda_asymmetry(self) -> float:
        if self.lam_left is None or self.lam_right is None:
            return float("nan")
        return float(np.linalg.norm(self.lam_left - self.lam_right) / np.linalg.norm(self.lam_left))

    # -- one round ---------------------------------------------------------
    def step(self) -> StepReport:
        cfg = self.config
        st = self.state
        heff = self.effective()
        ref = st.a_refer.reshape(-1)
        invariance = cfg.enforce_invariance and self.q_left is not None and self.q_left.shape == heff.shape
        if invariance:
            # the reference is basis vector 0 and is altered like every other basis vector
            alt_ref = alter_basis_invariance(ref, self.q_left, self.q_right)
            ref = alt_ref if alt_ref is not None else ref
        seeds = [ref]
        if cfg.recycle > 0 and self.recycle_enabled:
            seeds += list(self.recycled)
        precond = None
        if cfg.davidson and self.pairs and self.pairs[0][1].size == heff.dim:
            # previous-round pairs, re-anchored at the reference energy of this round
            e_ref = heff.expectation(st.a_refer)
            pairs = [(e_ref + gap, v, hv) for gap, v, hv in self.pairs]
            precond = build_davidson(pairs, heff.trace(), heff.dim,
                                     cfg.epsilon_shift * max(abs(e_ref), 1e-12))
        alter = None
        if invariance:
            ql, qr = self.q_left, self.q_right
            alter = lambda c, basis: alter_basis_invariance(c, ql, qr, basis)
        opts = SolverOptions(tol=cfg.solver_tol, max_basis=cfg.max_basis, max_iter=cfg.solver_max_iter,
                             restart_keep=cfg.restart_keep,
                             gamma=self.gamma_prev if cfg.gain else 0.0,
                             preconditioner=precond, alter=alter)
        res = solve_lowest(heff.apply, seeds, opts)
        basis = res.basis
        if not np.allclose(basis.vectors[:, 0], ref, atol=1e-12):
            raise EngineError("reference tensor was not kept as the first basis vector")

        subspace_gamma_update(basis, 0.0)
        vals, vecs = basis.ritz()
        bare_pairs = []
        for j in range(min(1 + cfg.davidson_pairs, len(vals))):
            v, hv = basis.combine(vecs[:, j])
            bare_pairs.append((float(vals[j] - vals[0]), v, hv))
        a0 = vecs[:, 0]
        a0 = a0 * (abs(a0[0]) / a0[0]) if abs(a0[0]) > 0 else a0
        delta0 = float(np.linalg.norm(a0 - np.eye(len(a0))[0]))
        gamma = 0.0
        if cfg.gain:
            dmax = math.inf if st.avg_dev is None else cfg.delta_max_factor * st.avg_dev
            info = gain_from_matrix(basis.h, a0, cfg.c_policy(delta0), dmax, cfg.gamma_floor)
            gamma = info.gamma
        subspace_gamma_update(basis, gamma)
        vals, vecs = basis.ritz()
        coeff = vecs[:, 0]
        coeff = coeff * (abs(coeff[0]) / coeff[0]) if abs(coeff[0]) > 0 else coeff
        vec, hvec = basis.combine(coeff)
        a = vec.reshape(heff.shape)
        if cfg.mirror:
            a = mirror_symmetrize(a)
        a = a / np.linalg.norm(a)
        eig = float(np.real(np.vdot(a, heff.apply_tensor(a))))
        delta = float(np.linalg.norm(a - st.a_refer))
        if not np.isfinite(eig) or not np.all(np.isfinite(a)):
            raise EngineError(f"non-finite values in round {st.round + 1}")

        # recycling data for the next round
        self.pairs = bare_pairs
        if len(vals) > 1 and vals[1] - vals[0] < cfg.recycle_gap:
            self.recycle_enabled = False
        self.gamma_prev = gamma

        new_shift = self.shift + eig if cfg.subtract_energy else self.shift
        W = self.working_mpo(new_shift)
        ab = absorb_both(self.L, self.R, a, W)
        self.q_left, self.q_right = ab.q_left, ab.q_right
        self.lam_left, self.lam_right = ab.lam_left, ab.lam_right
        if cfg.smo:
            self.L, self.R, xi = smo_accumulate(self.L, ab.L, self.R, ab.R, st, delta,
                                                cfg.avg_decay, cfg.avg_weight, cfg.avg_cap)
        else:
            xi = superposition_weight(st.avg_dev, delta)
            running_average_update(st, delta, cfg.avg_decay, cfg.avg_weight, cfg.avg_cap)
            st.last_xi = xi
            self.L, self.R = ab.L, ab.R
        self.recycled.appendleft(st.a_refer.reshape(-1).copy())
        update_reference(st, a, xi)
        self.A = a
        self.shift = new_shift
        self.last_eigenvalue = eig
        st.round += 1
        st.streak = st.streak + 1 if delta < cfg.tol else 0
        e_site = self.shift if cfg.subtract_energy else float("nan")
        st.energy_per_site.append(e_site)
        rep = StepReport(st.round, e_site, eig, delta, xi, gamma, res.iterations, res.converged,
                         self.lambda_asymmetry())
        self.reports.append(rep)
        return rep

    def run(self, max_rounds: Optional[int] = None, callback: Optional[Callable[[StepReport], None]] = None,
            until_converged: bool = True) -> bool:
        """Step until converged (``window`` consecutive small deviations) or out of rounds.

        With a bond-dimension schedule, each converged stage is followed by a
        growth step to the next entry.
        """
        budget = self.config.max_rounds if max_rounds is None else max_rounds
        schedule = [c for c in self.config.chi_schedule if c > self.chi]
        if self.config.chi > self.chi and self.config.chi not in schedule:
            schedule.append(self.config.chi)
        for _ in range(budget):
            rep = self.step()
            if callback is not None:
                callback(rep)
            if until_converged and self.converged:
                if schedule:
                    self.grow(schedule.pop(0))
                    continue
                return True
        return self.converged and not schedule

    # -- bond growth -------------------------------------------------------
    def grow(self, chi_big: int, noise: Optional[float] = None) -> "Engine":
        """Enlarge the bond dimension and re-seed the run.

        The environments are embedded, then grown once (no superposition) with
        isometries whose extra columns come from the discarded part of the
        ``chi_small * d`` space, which keeps the identity slots exact.
        """
        noise = self.config.grow_noise if noise is None else noise
        chi_s = self.chi
        d = self.mpo.d
        if chi_big == chi_s:
            return self
        if chi_big > chi_s * d:
            self.grow(chi_s * d, noise)
            return self.grow(chi_big, noise)
        a = self.state.a_refer
        W = self.working_mpo()
        ml = a.transpose(0, 2, 1).reshape(chi_s * d, chi_s)
        ql = _extend_isometry(ml, chi_big, self.rng)
        ql = ql.reshape(chi_s, d, chi_big).transpose(0, 2, 1)
        mr = a.reshape(chi_s, chi_s * d).T
        qr = _extend_isometry(mr, chi_big, self.rng).T.reshape(chi_big, chi_s, d)
        L_new = absorb_left(self.L, ql, W)
        R_new = absorb_right(self.R, qr, W)
        grow_bond_dimension(self, chi_big, noise=noise)
        self.L, self.R = L_new, R_new
        return self


def _extend_isometry(m: np.ndarray, cols: int, rng: np.random.Generator) -> np.ndarray:
    """Polar factor of ``m`` completed by further orthonormal columns to ``cols`` columns."""
    f = svd(m)
    q = f.U @ f.V.conj().T
    extra = cols - q.shape[1]
    if extra <= 0:
        return q[:, :cols]
    g = rng.standard_normal((m.shape[0], extra)).astype(q.dtype)
    g -= q @ (q.conj().T @ g)
    g -= q @ (q.conj().T @ g)
    gq, _ = np.linalg.qr(g)
    return np.hstack([q, gq])


def grow_bond_dimension(engine: Engine, chi_big: int, u: Optional[np.ndarray] = None,
                        noise: float = 0.0) -> Engine:
    """Embed ``L``, ``R``, the site tensor and the reference with an isometry.

    ``u`` is ``chi_small x chi_big`` with ``u u^T = 1``; by default the leading
    columns of the identity.  Kets transform with ``u^T``, environments as
    ``u^T L u^*``, so Rayleigh quotients are preserved exactly.
    """
    chi_s = engine.chi
    if chi_big < chi_s:
        raise PreconditionError("cannot shrink the bond dimension")
    if u is None:
        u = np.eye(chi_s, chi_big)
    u = np.asarray(u)
    if u.shape != (chi_s, chi_big) or not np.allclose(u @ u.conj().T, np.eye(chi_s), atol=1e-12):
        raise PreconditionError("u must be a chi_small x chi_big matrix with orthonormal rows")
    if chi_big == chi_s and np.array_equal(u, np.eye(chi_s)):
        return engine
    e = u.T

    def env(x):
        return np.einsum("ax,xmy,by->amb", e, x, e.conj())

    def ket(x):
        return np.einsum("ax,by,xys->abs", e, e, x)

    engine.L, engine.R = env(engine.L), env(engine.R)
    a = ket(engine.A)
    ref = ket(engine.state.a_refer)
    if noise > 0:
        ref = ref + noise * engine.rng.standard_normal(ref.shape)
        ref /= np.linalg.norm(ref)
    engine.A = a
    st = engine.state
    st.a_refer = ref
    st.avg_dev, st.avg_acc, st.n_dev, st.streak = None, 0.0, 0, 0
    engine.recycled.clear()
    engine.pairs = []
    engine.q_left = engine.q_right = None
    engine.gamma_prev = 0.0
    engine.recycle_enabled = True
    return engine


# --------------------------------------------------------------------------
# Krylov insertion
# --------------------------------------------------------------------------

def krylov_insert(env: np.ndarray, a_conv: np.ndarray, W: np.ndarray, p: int, k: int = 30,
                  side: str = LEFT) -> np.ndarray:
    """Apply the one-site absorption map ``p`` times through a ``k``-dimensional Krylov space.

    The map uses the orthogonal part of ``a_conv`` on the given side.  The
    result is ``|env| * sum_i (J^p e_1)_i K_i`` with ``J`` the projected map.
    """
    if k < 2:
        raise PreconditionError("Krylov basis needs at least two vectors")
    if p < 0:
        raise PreconditionError("insertion count must be non-negative")
    q, _ = decompose_site(a_conv, side)
    step = (lambda x: absorb_left(x, q, W)) if side == LEFT else (lambda x: absorb_right(x, q, W))
    shape = env.shape
    nrm = np.linalg.norm(env)
    if nrm == 0:
        raise DegenerateInputError("zero environment")
    dtype = np.result_type(env, q, W)
    basis = [(env / nrm).reshape(-1).astype(dtype)]
    images = []
    for j in range(k):
        w = step(basis[j].reshape(shape)).reshape(-1)
        images.append(w)
        if j == k - 1:
            break
        v = w.copy()
        mat = np.array(basis).T
        for _ in range(2):
            v -= mat @ (mat.conj().T @ v)
        vn = np.linalg.norm(v)
        if vn <= 1e-13 * max(np.linalg.norm(w), 1e-300):
            break
        basis.append(v / vn)
    V = np.array(basis).T
    J = V.conj().T @ np.array(images).T
    coeff = np.linalg.matrix_power(J, p)[:, 0] if p > 0 else np.eye(J.shape[0])[:, 0]
    if not np.all(np.isfinite(coeff)):
        raise EngineError("Krylov power overflowed; is the energy subtraction active?")
    out = nrm * (V @ coeff)
    return out.reshape(shape)
