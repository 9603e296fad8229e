"""Matrix product operators for translation invariant chains.

Slot automaton: slot ``0`` carries the completed Hamiltonian, slot ``m-1``
the identity ("nothing placed yet").  A bulk tensor ``W[mu_l, mu_r]`` is lower
triangular in the slots, so a left block's operator vector is a row that gets
multiplied by ``W`` from the right.  The left boundary is the last row of
``W`` and the right boundary is its first column; local terms live in the
bottom left entry ``W[m-1, 0]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .expfit import ExpSumFit
from .operators import SIGMA_X, SIGMA_Y, SIGMA_Z, boson_ops
from .tensors import DimensionError, PreconditionError


@dataclass(frozen=True)
class Mpo:
    bulk: np.ndarray
    name: str = "custom"
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        b = self.bulk
        if b.ndim != 4 or b.shape[0] != b.shape[1] or b.shape[2] != b.shape[3]:
            raise DimensionError(f"MPO bulk must have shape (m, m, d, d), got {b.shape}")

    @property
    def m(self) -> int:
        return self.bulk.shape[0]

    @property
    def d(self) -> int:
        return self.bulk.shape[2]

    @property
    def local_slot(self) -> tuple[int, int]:
        return (self.m - 1, 0)

    @property
    def left_boundary(self) -> np.ndarray:
        return self.bulk[self.m - 1]

    @property
    def right_boundary(self) -> np.ndarray:
        return self.bulk[:, 0]

    def local_term(self) -> np.ndarray:
        return self.bulk[self.local_slot]


def _empty(m: int, d: int, dtype=float) -> np.ndarray:
    w = np.zeros((m, m, d, d), dtype=dtype)
    w[0, 0] = np.eye(d)
    w[m - 1, m - 1] = np.eye(d)
    return w


def block_operators(mpo: Mpo, n: int, side: str = "left") -> np.ndarray:
    """Operator vector of an ``n``-site block, shape ``(m, d**n, d**n)``.

    ``side='left'`` gives the row ``e_{m-1} W^n`` (slot 0 is the block
    Hamiltonian); ``side='right'`` gives the column ``W^n e_0`` (slot ``m-1``
    is the block Hamiltonian).
    """
    w = mpo.bulk
    if side == "left":
        v = w[mpo.m - 1]
        for _ in range(n - 1):
            v = np.einsum("aij,abkl->bikjl", v, w).reshape(mpo.m, v.shape[1] * mpo.d, -1)
        return v
    v = w[:, 0]
    for _ in range(n - 1):
        v = np.einsum("abij,bkl->aikjl", w, v).reshape(mpo.m, mpo.d * v.shape[1], -1)
    return v


def dense_hamiltonian(mpo: Mpo, n: int) -> np.ndarray:
    """Contract left boundary, ``n-2`` bulk tensors and right boundary."""
    if n < 1:
        raise ValueError("n must be positive")
    return block_operators(mpo, n, "left")[0]


def add_local_term(mpo: Mpo, op: np.ndarray) -> Mpo:
    """Return a copy with ``op`` added to every site's on-site term."""
    op = np.asarray(op)
    if op.shape != (mpo.d, mpo.d):
        raise DimensionError(f"local term must be {mpo.d}x{mpo.d}, got {op.shape}")
    dtype = np.result_type(mpo.bulk, op)
    bulk = mpo.bulk.astype(dtype, copy=True)
    bulk[mpo.local_slot] += op
    return Mpo(bulk, mpo.name, dict(mpo.params))


def build_ising_mpo(J: float = 1.0, h: float = 1.0) -> Mpo:
    """``H = -J sum sz sz - h sum sx``."""
    w = _empty(3, 2)
    w[1, 0] = -J * SIGMA_Z
    w[2, 1] = SIGMA_Z
    w[2, 0] = -h * SIGMA_X
    return Mpo(w, "ising", {"J": J, "h": h})


def build_heisenberg_mpo(Jx: float = 1.0, Jy: float = 1.0, Jz: float = 1.0, h: float = 0.0) -> Mpo:
    """``H = sum (Jx sx sx + Jy sy sy + Jz sz sz) - h sum sz``.

    The ``sy sy`` channel uses the real matrix ``i sy`` so the tensor stays real.
    """
    isy = (1j * SIGMA_Y).real
    w = _empty(5, 2)
    for slot, (coup, op, sign) in enumerate(((Jx, SIGMA_X, 1.0), (Jy, isy, -1.0), (Jz, SIGMA_Z, 1.0)), start=1):
        w[4, slot] = op
        w[slot, 0] = sign * coup * op
    w[4, 0] = -h * SIGMA_Z
    return Mpo(w, "heisenberg", {"Jx": Jx, "Jy": Jy, "Jz": Jz, "h": h})


def build_exp_decay_mpo(J: float = 1.0, lam: float = 0.5) -> Mpo:
    """``H = J sum_{i>j} lam**(i-j-1) sz_j sz_i``."""
    if not abs(lam) < 1.0:
        raise PreconditionError(f"decay rate must satisfy |lambda| < 1, got {lam}")
    w = _empty(3, 2)
    w[2, 1] = SIGMA_Z
    w[1, 1] = lam * np.eye(2)
    w[1, 0] = J * SIGMA_Z
    return Mpo(w, "expdecay", {"J": J, "lambda": lam})


def build_dipolar_bose_hubbard_mpo(V: float, U: float, mu: float, t: float, n_max: int,
                                   fit: ExpSumFit) -> Mpo:
    """Bose-Hubbard chain with a fitted long-range density interaction.

    ``H = V sum_{j<i} f(i-j) n_j n_i + U/2 sum n(n-1) - mu sum n
    - t sum (cdag_j c_{j+1} + h.c.)`` with ``f(r) = sum_k a_k lam_k**(r-1)``.

    Slots: ``0`` Hamiltonian, ``1`` pending ``cdag``, ``2`` pending ``c``,
    ``3 .. 3+N_exp-1`` density channels, last the identity.
    """
    if n_max < 1:
        raise PreconditionError("n_max must be at least 1")
    fit.validate()
    c, cdag, n = boson_ops(n_max)
    d = n_max + 1
    m = fit.n_exp + 4
    w = _empty(m, d)
    last = m - 1
    w[last, 1] = cdag
    w[1, 0] = -t * c
    w[last, 2] = c
    w[2, 0] = -t * cdag
    for k, (a, lam) in enumerate(zip(fit.coefficients, fit.rates)):
        slot = 3 + k
        w[last, slot] = n
        w[slot, slot] = lam * np.eye(d)
        w[slot, 0] = V * a * n
    w[last, 0] = 0.5 * U * n @ (n - np.eye(d)) - mu * n
    params = {"V": V, "U": U, "mu": mu, "t": t, "n_max": n_max, "n_exp": fit.n_exp}
    return Mpo(w, "dipolar_bose_hubbard", params)
