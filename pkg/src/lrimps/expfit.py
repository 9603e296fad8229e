"""Sums of decaying exponentials approximating a tabulated kernel.

A long-range coupling ``f(r)`` enters an MPO only as a sum of geometric
channels ``sum_i a_i * lam_i**(r-1)``.  This module finds such sums.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares


class FitError(RuntimeError):
    """The fitter could not reach the requested accuracy."""


@dataclass(frozen=True)
class ExpSumFit:
    coefficients: np.ndarray
    rates: np.ndarray
    max_rel_error: float
    r_max: int
    max_abs_error: float = float("nan")

    @property
    def n_exp(self) -> int:
        return len(self.rates)

    def __call__(self, r) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        return np.power.outer(self.rates, r - 1.0).T @ self.coefficients

    def validate(self) -> None:
        if not (np.all(self.rates > 0.0) and np.all(self.rates < 1.0)):
            raise FitError("all rates must lie in (0, 1)")
        if not (np.all(np.isfinite(self.coefficients)) and np.all(np.isfinite(self.rates))):
            raise FitError("non-finite fit parameters")

    def to_text(self) -> str:
        lines = [f"# n_exp={self.n_exp} r_max={self.r_max} max_rel_error={self.max_rel_error:.17g}",
                 "# a_i lambda_i"]
        lines += [f"{a:.17g} {lam:.17g}" for a, lam in zip(self.coefficients, self.rates)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, target=None) -> "ExpSumFit":
        header = {}
        rows = []
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                for tok in line[1:].split():
                    if "=" in tok:
                        k, v = tok.split("=", 1)
                        header[k] = v
                continue
            a, lam = line.split()
            rows.append((float(a), float(lam)))
        arr = np.array(rows, dtype=float).reshape(-1, 2)
        return cls(arr[:, 0].copy(), arr[:, 1].copy(), float(header.get("max_rel_error", "nan")),
                   int(header.get("r_max", 0)))


def _errors(values: np.ndarray, a: np.ndarray, lam: np.ndarray) -> tuple[float, float]:
    r = np.arange(1, len(values) + 1, dtype=float)
    model = np.power.outer(lam, r - 1.0).T @ a
    diff = np.abs(model - values)
    return float(np.max(diff / np.abs(values))), float(np.max(diff))


def _linear_amplitudes(values, lam, weights):
    r = np.arange(len(values), dtype=float)
    basis = np.power.outer(lam, r).T
    a, *_ = np.linalg.lstsq(basis * weights[:, None], values * weights, rcond=None)
    return a


def _pencil_guess(values: np.ndarray, n_exp: int) -> tuple[np.ndarray, np.ndarray] | None:
    """Matrix-pencil estimate of the rates from uniformly sampled data."""
    n = len(values)
    rows = n // 2
    hankel = np.lib.stride_tricks.sliding_window_view(values, n - rows)[: rows + 1]
    y0, y1 = hankel[:-1], hankel[1:]
    u, s, vh = np.linalg.svd(y0, full_matrices=False)
    k = min(n_exp, int(np.count_nonzero(s > s[0] * 1e-14)))
    if k == 0:
        return None
    u, s, vh = u[:, :k], s[:k], vh[:k]
    z = np.linalg.eigvals((u.conj().T @ y1 @ vh.conj().T) / s[None, :])
    lam = np.clip(np.abs(z.real), 1e-12, 1 - 1e-12)
    lam = np.sort(lam)[::-1]
    if len(lam) < n_exp:
        extra = np.geomspace(min(lam.min(), 0.5) * 0.5, 1e-3, n_exp - len(lam))
        lam = np.concatenate([lam, extra])
    weights = 1.0 / np.abs(values)
    return _linear_amplitudes(values, lam, weights), lam


def fitting_grid(r_max: int, dense_up_to: int = 64, n_log: int = 160) -> np.ndarray:
    """Integer distances: every r up to ``dense_up_to``, log-spaced beyond."""
    head = np.arange(1, min(dense_up_to, r_max) + 1)
    if r_max <= dense_up_to:
        return head
    tail = np.unique(np.round(np.geomspace(dense_up_to + 1, r_max, n_log)).astype(int))
    return np.concatenate([head, tail])


def _refine(values: np.ndarray, a: np.ndarray, lam: np.ndarray, rounds: int = 5, max_nfev: int = 600):
    """Least squares on relative residuals, then Lawson reweighting toward minimax."""
    grid = fitting_grid(len(values))
    r = grid - 1.0
    values = values[grid - 1]
    n = len(values)
    scale = np.abs(values)
    n_exp = len(lam)

    def unpack(p):
        theta = np.clip(p[n_exp:], -700.0, 700.0)
        return p[:n_exp], 1.0 / (1.0 + np.exp(-theta))

    weights = np.ones(n)

    def residual(p):
        aa, ll = unpack(p)
        return weights * (np.power.outer(ll, r).T @ aa - values) / scale

    def jac(p):
        aa, ll = unpack(p)
        pw = np.power.outer(ll, r).T
        d_a = pw
        d_l = np.power.outer(ll, np.maximum(r - 1, 0)).T * r[:, None] * aa[None, :]
        d_theta = d_l * (ll * (1 - ll))[None, :]
        return (weights / scale)[:, None] * np.hstack([d_a, d_theta])

    def max_rel(aa, ll):
        return float(np.max(np.abs(np.power.outer(ll, r).T @ aa - values) / scale))

    lam = np.clip(lam, 1e-15, 1 - 1e-15)
    p = np.concatenate([a, np.log(lam / (1 - lam))])
    best = (max_rel(a, lam), a, lam)
    for _ in range(rounds):
        sol = least_squares(residual, p, jac=jac, method="lm", xtol=1e-15, ftol=1e-15,
                            gtol=1e-15, max_nfev=max_nfev)
        p = sol.x
        aa, ll = unpack(p)
        err = max_rel(aa, ll)
        if np.isfinite(err) and err < best[0]:
            best = (err, aa.copy(), ll.copy())
        rel = np.abs(np.power.outer(ll, r).T @ aa - values) / scale
        weights = weights * np.sqrt(rel / rel.max() + 1e-3)
        weights /= weights.max()
    return best[1], best[2]


def fit_exp_sum(values, n_exp: int, error_ceiling: float = 1e-2, init=None) -> ExpSumFit:
    """Fit ``values[r-1] ~ sum_i a_i lam_i**(r-1)`` for ``r = 1..len(values)``."""
    values = np.asarray(values, dtype=float)
    r_max = len(values)
    if n_exp < 1:
        raise ValueError("n_exp must be at least 1")
    if r_max < 2 * n_exp:
        raise ValueError("need at least 2*n_exp samples")
    if np.any(values == 0) or not np.all(np.isfinite(values)):
        raise ValueError("target values must be finite and nonzero")
    candidates = []
    if init is not None:
        candidates.append(init)
    else:
        guess = _pencil_guess(values, n_exp)
        if guess is not None:
            candidates.append(guess)
    if not candidates:
        raise FitError("no usable starting point for the exponential-sum fit")
    best = None
    for a0, lam0 in candidates:
        err0 = _errors(values, a0, lam0)[0]
        if err0 > 1e-13:
            a1, lam1 = _refine(values, a0, lam0)
        else:
            a1, lam1 = a0, lam0
        err = _errors(values, a1, lam1)[0]
        if best is None or err < best[0]:
            best = (err, a1, lam1)
    err, a, lam = best
    order = np.argsort(lam)[::-1]
    a, lam = a[order], lam[order]
    rel, ab = _errors(values, a, lam)
    if not np.isfinite(rel) or rel > error_ceiling or np.any(lam <= 0) or np.any(lam >= 1):
        raise FitError(f"exponential-sum fit failed: max relative error {rel:.3e}, "
                       f"rates in [{lam.min():.3e}, {lam.max():.3e}], n_exp={n_exp}, r_max={r_max}")
    return ExpSumFit(a, lam, rel, r_max, ab)


def fit_power_law(k: float = 3.0, n_exp: int = 20, r_max: int = 1000,
                  error_ceiling: float = 1e-2) -> ExpSumFit:
    """Approximate ``r**-k`` on ``r = 1..r_max`` by ``n_exp`` geometric channels."""
    if k <= 0:
        raise ValueError("exponent must be positive")
    if r_max < 2 * n_exp:
        raise ValueError("r_max must be at least 2*n_exp")
    values = np.arange(1, r_max + 1, dtype=float) ** (-k)
    return fit_exp_sum(values, n_exp, error_ceiling)
