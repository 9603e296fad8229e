"""Named model builders for configuration-driven runs."""
from __future__ import annotations

from functools import lru_cache
from typing import Any

from .expfit import ExpSumFit, fit_power_law
from .mpo import (Mpo, build_dipolar_bose_hubbard_mpo, build_exp_decay_mpo, build_heisenberg_mpo,
                  build_ising_mpo)


class UnknownModelError(KeyError):
    pass


# parameter name -> default, per builder
MODEL_PARAMS: dict[str, dict[str, Any]] = {
    "ising": {"J": 1.0, "h": 1.0},
    "heisenberg": {"Jx": 1.0, "Jy": 1.0, "Jz": 1.0, "h": 0.0},
    "expdecay": {"J": 1.0, "lam": 0.5},
    "dipolar": {"V": 1.0, "U": 1.0, "mu": 0.0, "t": 0.0, "n_max": 1,
                "k": 3.0, "n_exp": 20, "r_max": 1000},
}

INT_PARAMS = {"n_max", "n_exp", "r_max"}


@lru_cache(maxsize=16)
def cached_power_law_fit(k: float, n_exp: int, r_max: int) -> ExpSumFit:
    return fit_power_law(k, n_exp, r_max)


def build_model(name: str, params: dict[str, Any]) -> Mpo:
    if name not in MODEL_PARAMS:
        raise UnknownModelError(f"unknown model {name!r}; available: {', '.join(sorted(MODEL_PARAMS))}")
    p = dict(MODEL_PARAMS[name])
    unknown = set(params) - set(p)
    if unknown:
        raise UnknownModelError(f"unknown parameter(s) for model {name!r}: {', '.join(sorted(unknown))}")
    p.update(params)
    if name == "ising":
        return build_ising_mpo(p["J"], p["h"])
    if name == "heisenberg":
        return build_heisenberg_mpo(p["Jx"], p["Jy"], p["Jz"], p["h"])
    if name == "expdecay":
        return build_exp_decay_mpo(p["J"], p["lam"])
    fit = cached_power_law_fit(float(p["k"]), int(p["n_exp"]), int(p["r_max"]))
    return build_dipolar_bose_hubbard_mpo(p["V"], p["U"], p["mu"], p["t"], int(p["n_max"]), fit)


def density_operator_name(name: str) -> str:
    """Operator reported as the density column."""
    return "n" if name == "dipolar" else "sz"
