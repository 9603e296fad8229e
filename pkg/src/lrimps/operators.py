"""Single-site operator matrices."""
import numpy as np

SIGMA_X = np.array([[0.0, 1.0], [1.0, 0.0]])
SIGMA_Y = np.array([[0.0, -1.0j], [1.0j, 0.0]])
SIGMA_Z = np.array([[1.0, 0.0], [0.0, -1.0]])


def boson_ops(n_max: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(c, cdag, n)`` truncated to occupations ``0..n_max``."""
    if n_max < 1:
        raise ValueError("n_max must be at least 1")
    c = np.diag(np.sqrt(np.arange(1, n_max + 1, dtype=float)), k=1)
    return c, c.T.copy(), np.diag(np.arange(n_max + 1, dtype=float))


def named_operator(name: str, d: int) -> np.ndarray:
    """Look up an operator by short name for a site of dimension ``d``."""
    name = name.strip().lower()
    if name in ("id", "i", "identity"):
        return np.eye(d)
    if d == 2 and name in ("sx", "sy", "sz"):
        return {"sx": SIGMA_X, "sy": SIGMA_Y, "sz": SIGMA_Z}[name]
    if name in ("n", "c", "cdag"):
        c, cdag, n = boson_ops(d - 1)
        return {"n": n, "c": c, "cdag": cdag}[name]
    raise KeyError(f"unknown operator {name!r} for local dimension {d}")
