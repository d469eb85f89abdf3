"""Intercept-free least squares and the inverse-Wishart coefficient variance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from overid.errors import (
    CollinearityError,
    DegreesOfFreedomError,
    UnderdeterminedError,
)
from overid.scm import CovMatrix

DEFAULT_CONDITION_CAP = 1e12


@dataclass(frozen=True)
class OlsFit:
    coefficients: np.ndarray
    residual_variance: float
    n: int
    d: int

    @property
    def residual_dof(self) -> int:
        return self.n - self.d


def _design(regressors) -> np.ndarray:
    X = np.asarray(regressors, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise ValueError(f"regressors must be 1-D or 2-D, got shape {X.shape}")
    return X


def ols_fit(regressors, response, condition_cap: float = DEFAULT_CONDITION_CAP) -> OlsFit:
    """Fit ``response ~ regressors`` without an intercept.

    The solve goes through an SVD of the design, so the Gram matrix is never
    formed or inverted. Its condition number is the squared ratio of the
    extreme singular values and must stay below ``condition_cap``.

    Raises:
        UnderdeterminedError: fewer rows than regressors.
        CollinearityError: the Gram matrix is (numerically) singular.
    """
    X = _design(regressors)
    y = np.asarray(response, dtype=float).ravel()
    n, d = X.shape
    if len(y) != n:
        raise ValueError(f"response has {len(y)} rows, regressors have {n}")
    if n < d:
        raise UnderdeterminedError(f"{n} observations for {d} regressors")
    U, s, Vt = np.linalg.svd(X, full_matrices=False)
    if s[-1] <= 0.0:
        cond = np.inf
    else:
        cond = (s[0] / s[-1]) ** 2
    if not cond < condition_cap:
        raise CollinearityError(cond, condition_cap)
    coef = Vt.T @ ((U.T @ y) / s)
    resid = y - X @ coef
    dof = n - d
    resid_var = float(resid @ resid / dof) if dof > 0 else 0.0
    return OlsFit(coef, max(resid_var, 0.0), n, d)


def ols_coef_variance(error_variance: float, regressor_cov, n: int, d: int) -> np.ndarray:
    """Exact finite-sample covariance of OLS coefficients with Gaussian rows.

    With rows drawn i.i.d. from N(0, S), the inverse Gram matrix is inverse
    Wishart and the coefficient covariance is ``err_var * inv(S) / (n - d - 1)``.
    """
    if n <= d + 1:
        raise DegreesOfFreedomError(f"need n > d + 1, got n={n}, d={d}")
    S = regressor_cov.entries if isinstance(regressor_cov, CovMatrix) else np.asarray(
        regressor_cov, dtype=float
    )
    S = np.atleast_2d(S)
    return float(error_variance) * np.linalg.inv(S) / (n - d - 1)


def batch_ols(regressors: np.ndarray, response: np.ndarray) -> np.ndarray:
    """Coefficients for a stack of independent regressions.

    ``regressors`` has shape (R, n, d), ``response`` (R, n); returns (R, d).
    Used by the Monte Carlo paths, where the designs are well conditioned
    Gaussian draws and a batched normal-equation solve is accurate enough.
    """
    X = np.asarray(regressors, dtype=float)
    y = np.asarray(response, dtype=float)
    gram = np.einsum("rni,rnj->rij", X, X)
    rhs = np.einsum("rni,rn->ri", X, y)
    return np.linalg.solve(gram, rhs[..., None])[..., 0]
