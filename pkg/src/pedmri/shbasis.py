"""Real, antipodally symmetric spherical harmonics (even l <= 8).

Coefficient order: l = 0, 2, 4, 6, 8 and, within each l, m = -l..l.
"""
from __future__ import annotations

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import sph_harm_y

LMAX = 8
DEGREES = tuple(range(0, LMAX + 1, 2))
N_COEFFS = sum(2 * l + 1 for l in DEGREES)  # 45

L_INDEX = np.concatenate([np.full(2 * l + 1, l) for l in DEGREES])
M_INDEX = np.concatenate([np.arange(-l, l + 1) for l in DEGREES])
LAPLACE_BELTRAMI = (L_INDEX ** 2 * (L_INDEX + 1) ** 2).astype(float)

COND_LIMIT = 1e12


class DegenerateDirectionsError(ValueError):
    """The fitting directions do not determine the SH coefficients."""


class UndefinedAccError(ValueError):
    """ACC needs a nonzero l >= 2 block in both arguments."""


def _as_dirs(dirs) -> np.ndarray:
    d = np.atleast_2d(np.asarray(dirs, dtype=float))
    if d.shape[-1] != 3:
        raise ValueError(f"directions must have 3 components, got shape {d.shape}")
    dev = np.abs(np.linalg.norm(d, axis=-1) - 1.0)
    if np.any(dev > 1e-6):
        raise ValueError(f"non-unit direction (norm deviation {dev.max():.3g} > 1e-6)")
    return d


def sh_design_matrix(dirs) -> np.ndarray:
    """(N, 45) matrix; row i is the basis evaluated at ``dirs[i]``."""
    d = _as_dirs(dirs)
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    theta = np.arccos(np.clip(z, -1.0, 1.0))
    phi = np.arctan2(y, x)
    out = np.empty((len(d), N_COEFFS))
    col = 0
    for l in DEGREES:
        for m in range(-l, l + 1):
            if m == 0:
                out[:, col] = sph_harm_y(l, 0, theta, phi).real
            elif m < 0:
                out[:, col] = np.sqrt(2.0) * (-1) ** m * sph_harm_y(l, -m, theta, phi).imag
            else:
                out[:, col] = np.sqrt(2.0) * (-1) ** m * sph_harm_y(l, m, theta, phi).real
            col += 1
    return out


def sh_eval_basis(direction) -> np.ndarray:
    return sh_design_matrix(np.asarray(direction, dtype=float).reshape(1, 3))[0]


def sh_eval(coeffs, dirs) -> np.ndarray:
    """Evaluate ``B @ c``; ``coeffs`` may carry leading batch axes."""
    B = sh_design_matrix(dirs)
    return np.asarray(coeffs) @ B.T


class ShFitter:
    """Regularized least-squares SH fit for a fixed set of directions.

    The normal matrix is factored once so that whole volumes can be fitted
    with a single triangular solve.
    """

    def __init__(self, dirs, lambda_reg: float = 0.0):
        if lambda_reg < 0:
            raise ValueError("lambda_reg must be >= 0")
        self.B = sh_design_matrix(dirs)
        self.lambda_reg = float(lambda_reg)
        n = len(self.B)
        if lambda_reg == 0.0 and n < N_COEFFS:
            raise DegenerateDirectionsError(
                f"{n} directions cannot determine {N_COEFFS} coefficients without regularization")
        normal = self.B.T @ self.B + self.lambda_reg * np.diag(LAPLACE_BELTRAMI)
        cond = np.linalg.cond(normal)
        if not np.isfinite(cond) or cond > COND_LIMIT:
            raise DegenerateDirectionsError(
                f"degenerate direction set (normal-matrix condition {cond:.3g})")
        self._cho = cho_factor(normal)

    def fit(self, values) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        if values.shape[-1] != len(self.B):
            raise ValueError(f"expected {len(self.B)} samples per fit, got {values.shape[-1]}")
        flat = values.reshape(-1, values.shape[-1])
        c = cho_solve(self._cho, self.B.T @ flat.T).T
        return c.reshape(values.shape[:-1] + (N_COEFFS,))


def sh_fit(dirs, values, lambda_reg: float = 0.0) -> np.ndarray:
    return ShFitter(dirs, lambda_reg).fit(values)


def acc(u, v) -> float:
    """Angular correlation coefficient over the l >= 2 coefficients."""
    u = np.asarray(u, dtype=float)[1:]
    v = np.asarray(v, dtype=float)[1:]
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise UndefinedAccError("ACC undefined: l>=2 coefficients are all zero")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def acc_batch(u, v) -> np.ndarray:
    """Row-wise ACC; undefined rows come back as NaN."""
    u = np.asarray(u, dtype=float)[..., 1:]
    v = np.asarray(v, dtype=float)[..., 1:]
    num = np.sum(u * v, axis=-1)
    den = np.linalg.norm(u, axis=-1) * np.linalg.norm(v, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.nan)
    return np.clip(out, -1.0, 1.0)
