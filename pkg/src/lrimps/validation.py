"""Self-checks against dense reference computations."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from .eigensolver import SolverOptions, solve_lowest
from .engine import initialize
from .expfit import fit_power_law
from .mpo import Mpo, build_dipolar_bose_hubbard_mpo, build_exp_decay_mpo, build_heisenberg_mpo, build_ising_mpo, \
    dense_hamiltonian
from .operators import SIGMA_X, SIGMA_Y, SIGMA_Z, boson_ops
from .tensors import LEFT, RIGHT, decompose_site, takagi

FAULTS = ("mpo-slot",)


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str


def _embed(op, j, n):
    out = np.eye(1)
    for k in range(n):
        out = np.kron(out, op if k == j else np.eye(op.shape[0]))
    return out


def _pair_sum(n, pairs_weight, ops_a, ops_b, single=None):
    d = ops_a.shape[0]
    h = np.zeros((d ** n, d ** n), dtype=np.result_type(ops_a, ops_b, float))
    for j in range(n):
        for i in range(j + 1, n):
            w = pairs_weight(i - j)
            if w:
                h += w * _embed(ops_a, j, n) @ _embed(ops_b, i, n)
        if single is not None:
            h += _embed(single, j, n)
    return h


def direct_hamiltonian(name: str, n: int, **p) -> np.ndarray:
    """Dense Hamiltonian built term by term, independent of any MPO."""
    nn = lambda c: (lambda r: c if r == 1 else 0.0)
    if name == "ising":
        return _pair_sum(n, nn(-p["J"]), SIGMA_Z, SIGMA_Z, -p["h"] * SIGMA_X)
    if name == "heisenberg":
        h = _pair_sum(n, nn(p["Jx"]), SIGMA_X, SIGMA_X, -p["h"] * SIGMA_Z)
        h = h + _pair_sum(n, nn(p["Jy"]), SIGMA_Y, SIGMA_Y)
        return h + _pair_sum(n, nn(p["Jz"]), SIGMA_Z, SIGMA_Z)
    if name == "expdecay":
        return _pair_sum(n, lambda r: p["J"] * p["lam"] ** (r - 1), SIGMA_Z, SIGMA_Z)
    if name == "dipolar":
        c, cdag, num = boson_ops(p["n_max"])
        d = p["n_max"] + 1
        local = 0.5 * p["U"] * num @ (num - np.eye(d)) - p["mu"] * num
        h = _pair_sum(n, lambda r: p["V"] * p["kernel"](r), num, num, local)
        h = h + _pair_sum(n, nn(-p["t"]), cdag, c) + _pair_sum(n, nn(-p["t"]), c, cdag)
        return h
    raise KeyError(name)


def _models(fault: Optional[str]):
    fit = fit_power_law(3.0, 4, 50, error_ceiling=0.1)
    out = [
        ("ising", build_ising_mpo(1.0, 0.7), {"J": 1.0, "h": 0.7}),
        ("heisenberg", build_heisenberg_mpo(1.0, 0.8, 0.6, 0.3), {"Jx": 1.0, "Jy": 0.8, "Jz": 0.6, "h": 0.3}),
        ("expdecay", build_exp_decay_mpo(0.9, 0.4), {"J": 0.9, "lam": 0.4}),
        ("dipolar", build_dipolar_bose_hubbard_mpo(1.0, 0.7, 0.4, 0.2, 2, fit),
         {"V": 1.0, "U": 0.7, "mu": 0.4, "t": 0.2, "n_max": 2, "kernel": fit}),
    ]
    if fault == "mpo-slot":
        name, mpo, p = out[0]
        bulk = mpo.bulk.copy()
        bulk[1, 1] = 0.5 * np.eye(mpo.d)
        out[0] = (name, Mpo(bulk, mpo.name, mpo.params), p)
    return out


def check_mpo_structure(fault=None) -> CheckResult:
    for name, mpo, _ in _models(fault):
        w = mpo.bulk
        m, d = mpo.m, mpo.d
        if not (np.array_equal(w[0, 0], np.eye(d)) and np.array_equal(w[m - 1, m - 1], np.eye(d))):
            return CheckResult("mpo-structure", False, f"{name}: identity slots are not exact identities")
        upper = [(i, j) for i in range(m) for j in range(i + 1, m) if np.any(w[i, j])]
        if upper:
            return CheckResult("mpo-structure", False, f"{name}: MPO is not lower triangular, slots {upper}")
    return CheckResult("mpo-structure", True, "identity slots exact, lower triangular")


def check_mpo_oracle(fault=None) -> CheckResult:
    worst = 0.0
    for name, mpo, p in _models(fault):
        for n in range(2, 6):
            if mpo.d ** n > 300:
                continue
            a = dense_hamiltonian(mpo, n)
            b = direct_hamiltonian(name, n, **p)
            err = np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300)
            worst = max(worst, err)
            if err > 1e-12:
                return CheckResult("mpo-oracle", False,
                                   f"{name}: dense MPO contraction differs from direct construction "
                                   f"at n={n} (max relative entry error {err:.3e})")
    return CheckResult("mpo-oracle", True, f"max relative entry error {worst:.2e}")


def check_init_ed(fault=None) -> CheckResult:
    mpo = build_ising_mpo(1.0, 1.0)
    init = initialize(mpo, 8, 16)
    exact = np.linalg.eigvalsh(direct_hamiltonian("ising", 8, J=1.0, h=1.0))[0]
    err = abs(init.energy - exact)
    return CheckResult("init-ed", err < 1e-10, f"initial Rayleigh quotient off by {err:.2e}")


def check_solver(fault=None) -> CheckResult:
    rng = np.random.default_rng(7)
    n = 400
    m = sp.random(n, n, density=0.02, random_state=rng)
    m = (m + m.T) * 0.5 + sp.diags(rng.uniform(0, 5, n))
    m = m.tocsr()
    ref = np.linalg.eigvalsh(m.toarray())[0]
    res = solve_lowest(lambda v: m @ v, [rng.standard_normal(n)], SolverOptions(tol=1e-11, max_iter=4000))
    err = abs(res.e0 - ref)
    return CheckResult("solver-oracle", err < 1e-9, f"lowest eigenvalue off by {err:.2e}")


def check_decomposition(fault=None) -> CheckResult:
    rng = np.random.default_rng(3)
    a = rng.standard_normal((5, 5, 3)) + 1j * rng.standard_normal((5, 5, 3))
    ql, ll = decompose_site(a, LEFT)
    qr, lr = decompose_site(a, RIGHT)
    e1 = np.linalg.norm(np.einsum("abs,bc->acs", ql, ll) - a) / np.linalg.norm(a)
    e2 = np.linalg.norm(np.einsum("ab,bcs->acs", lr, qr) - a) / np.linalg.norm(a)
    s = rng.standard_normal((6, 6)) + 1j * rng.standard_normal((6, 6))
    s = s + s.T
    u, dv = takagi(s)
    e3 = np.linalg.norm(u @ np.diag(dv) @ u.T - s) / np.linalg.norm(s)
    worst = max(e1, e2, e3)
    return CheckResult("factorizations", worst < 1e-10, f"max reconstruction error {worst:.2e}")


def check_expfit(fault=None) -> CheckResult:
    fit = fit_power_law(3.0, 6, 100)
    return CheckResult("expfit", fit.max_rel_error < 1e-2, f"max relative error {fit.max_rel_error:.2e}")


CHECKS: dict[str, tuple[str, Callable[..., CheckResult]]] = {
    "mpo-structure": ("MPO identity slots and triangular form", check_mpo_structure),
    "mpo-oracle": ("MPO contraction equals term-by-term dense Hamiltonian", check_mpo_oracle),
    "init-ed": ("initial Rayleigh quotient equals dense ground energy", check_init_ed),
    "solver-oracle": ("iterative eigensolver against dense diagonalization", check_solver),
    "factorizations": ("site decomposition and Takagi reconstruction", check_decomposition),
    "expfit": ("exponential-sum fit of a power law", check_expfit),
}


def run_checks(names=None, fault: Optional[str] = None) -> list[CheckResult]:
    names = list(CHECKS) if not names else names
    out = []
    for n in names:
        if n not in CHECKS:
            raise KeyError(f"unknown check {n!r}")
        try:
            out.append(CHECKS[n][1](fault))
        except Exception as exc:  # a crashing check is a failing check
            out.append(CheckResult(n, False, f"raised {type(exc).__name__}: {exc}"))
    return out
