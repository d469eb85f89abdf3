"""Influence-function estimators of E[Y | do(X = x*)] for a binary treatment.

All three variants evaluate the same efficient influence function of the
generalized frontdoor functional and differ only in the conditioning sets
of their nuisance models:

=============  =====================  ==================  ==============
variant        outcome mean           mediator density    propensity
=============  =====================  ==================  ==============
fulcher        E[Y | M, X, W]         f(M | X, W)         P(X | W)
restricted     E[Y | M, W]            f(M | X)            P(X | W)
frontdoor      E[Y | M, X]            f(M | X)            P(X)
=============  =====================  ==================  ==============

The restricted variant can keep X in the outcome mean (``restrict_outcome=
False``) for data where Y depends on X given (M, W).

Nuisances are linear-Gaussian for the mediator, linear for the outcome and
logistic for the propensity, so every sum over mediator values reduces to
evaluating the linear outcome mean at a conditional mediator mean.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from overid.errors import (
    DegreesOfFreedomError,
    PropensityDegenerateError,
    SchemaError,
)
from overid.regress import ols_fit
from overid.scm import Dataset

log = logging.getLogger(__name__)

PROPENSITY_CLIP = 0.01
RATIO_CAP = 100.0
MIN_ROWS = 20
_IRLS_MAX_ITER = 100
_IRLS_TOL = 1e-10
_SEPARATION_LOGIT = 30.0


class Variant(enum.Enum):
    FRONTDOOR = "frontdoor"
    FULCHER = "fulcher"
    RESTRICTED = "restricted"

    @classmethod
    def parse(cls, value: "str | Variant") -> "Variant":
        if isinstance(value, Variant):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise SchemaError(f"unknown influence-function variant {value!r}") from None


# ---------------------------------------------------------------------------
# Logistic regression
# ---------------------------------------------------------------------------


def logistic_irls(design: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Logistic regression coefficients by iteratively reweighted least squares.

    Raises:
        PropensityDegenerateError: the classes are (quasi-)separated, so the
            coefficients run off to infinity.
    """
    X = np.asarray(design, dtype=float)
    t = np.asarray(target, dtype=float)
    beta = np.zeros(X.shape[1])
    for _ in range(_IRLS_MAX_ITER):
        eta = X @ beta
        if np.max(np.abs(eta)) > _SEPARATION_LOGIT:
            raise PropensityDegenerateError(
                "logistic fit diverges: treatment is (quasi-)separated by the covariates"
            )
        p = expit(eta)
        weight = p * (1.0 - p)
        hess = X.T @ (X * weight[:, None])
        try:
            step = np.linalg.solve(hess, X.T @ (t - p))
        except np.linalg.LinAlgError:
            raise PropensityDegenerateError("singular logistic Hessian") from None
        beta = beta + step
        if np.max(np.abs(step)) < _IRLS_TOL * (1.0 + np.max(np.abs(beta))):
            return beta
    raise PropensityDegenerateError(
        f"logistic IRLS did not converge in {_IRLS_MAX_ITER} iterations"
    )


# ---------------------------------------------------------------------------
# Nuisances
# ---------------------------------------------------------------------------


def _varying_columns(w: np.ndarray) -> np.ndarray:
    """Confounder columns that are not constant (an intercept is always added)."""
    w = w[:, None] if w.ndim == 1 else w
    spread = np.ptp(w, axis=0)
    scale = np.maximum(1.0, np.max(np.abs(w), axis=0))
    return w[:, spread > 1e-12 * scale]


@dataclass(frozen=True)
class NuisanceSet:
    """Fitted nuisance models.

    Coefficient vectors start with the intercept; ``outcome_coef`` continues
    with (M, X if used, W...) and ``mediator_coef`` with (X, W... if used).
    """

    variant: Variant
    outcome_coef: np.ndarray
    outcome_uses_x: bool
    outcome_uses_w: bool
    mediator_coef: np.ndarray
    mediator_sd: float
    mediator_uses_w: bool
    propensity_coef: np.ndarray
    propensity_uses_w: bool

    @property
    def outcome_m_slope(self) -> float:
        return float(self.outcome_coef[1])

    @property
    def mediator_x_slope(self) -> float:
        return float(self.mediator_coef[1])

    def _w_part(self, coef: np.ndarray, w: np.ndarray, used: bool) -> np.ndarray:
        if not used or coef.size == 0:
            return np.zeros(len(w))
        w = np.asarray(w, float)
        return (w[:, None] if w.ndim == 1 else w) @ coef

    def outcome_mean(self, m, x, w) -> np.ndarray:
        m, x = np.asarray(m, float), np.asarray(x, float)
        coef = self.outcome_coef
        out = coef[0] + coef[1] * m
        rest = coef[2:]
        if self.outcome_uses_x:
            out = out + rest[0] * x
            rest = rest[1:]
        return out + self._w_part(rest, w, self.outcome_uses_w)

    def mediator_mean(self, x, w) -> np.ndarray:
        x = np.asarray(x, float)
        coef = self.mediator_coef
        return coef[0] + coef[1] * x + self._w_part(coef[2:], w, self.mediator_uses_w)

    def mediator_density(self, m, x, w) -> np.ndarray:
        z = (np.asarray(m, float) - self.mediator_mean(x, w)) / self.mediator_sd
        return np.exp(-0.5 * z * z) / (self.mediator_sd * math.sqrt(2.0 * math.pi))

    def propensity(self, w) -> np.ndarray:
        """Fitted P(X = 1 | W)."""
        n = len(w)
        coef = self.propensity_coef
        return expit(coef[0] + self._w_part(coef[1:], w, self.propensity_uses_w) * np.ones(n))


def _binary_treatment(x: np.ndarray) -> np.ndarray:
    if not np.all((x == 0.0) | (x == 1.0)):
        raise SchemaError("influence-function estimators need a binary {0, 1} treatment")
    if x.min() == x.max():
        raise SchemaError("treatment takes a single value; both arms are required")
    return x


def fit_nuisances(
    data: Dataset, variant="restricted", restrict_outcome: bool = True
) -> NuisanceSet:
    """Fit the outcome mean, mediator density and propensity for ``variant``.

    ``restrict_outcome`` only matters for the restricted variant; turning it
    off keeps X in the outcome regression and restricts only the mediator
    density.
    """
    variant = Variant.parse(variant)
    if not (data.has("w") and data.has("m")):
        raise SchemaError("influence-function estimators need a full (x, y, w, m) dataset")
    if data.n < MIN_ROWS:
        raise DegreesOfFreedomError(f"need at least {MIN_ROWS} rows, got {data.n}")
    x = _binary_treatment(data.x)
    w = _varying_columns(data.w)
    ones = np.ones(data.n)

    uses_w = variant is not Variant.FRONTDOOR and w.shape[1] > 0
    out_x = variant is not Variant.RESTRICTED or not restrict_outcome
    med_w = variant is Variant.FULCHER and uses_w

    cols = [ones, data.m] + ([x] if out_x else []) + ([w] if uses_w else [])
    outcome = ols_fit(np.column_stack(cols), data.y)
    cols = [ones, x] + ([w] if med_w else [])
    mediator = ols_fit(np.column_stack(cols), data.m)
    cols = [ones] + ([w] if uses_w else [])
    propensity = logistic_irls(np.column_stack(cols), x)

    return NuisanceSet(
        variant=variant,
        outcome_coef=outcome.coefficients,
        outcome_uses_x=out_x,
        outcome_uses_w=uses_w,
        mediator_coef=mediator.coefficients,
        mediator_sd=math.sqrt(mediator.residual_variance),
        mediator_uses_w=med_w,
        propensity_coef=propensity,
        propensity_uses_w=uses_w,
    )


# ---------------------------------------------------------------------------
# Estimation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ArmEstimate:
    value: float
    clipped: int
    trimmed: int
    terms: tuple[float, float, float]


def if_arm(data: Dataset, nuisances: NuisanceSet, x_star: int) -> ArmEstimate:
    """Influence-function estimate of E[Y | do(X = x_star)] with diagnostics.

    The per-row value is

        ratio * (Y - Q(M, X, W))
        + 1{X = x*} / P(x* | W) * (E_X[Q(M, X, W) | W] - eta(W))
        + E_M[Q(M, X, W) | x*, W]

    where ``ratio = f(M | x*, W) / f(M | X, W)`` and ``eta(W)`` averages
    ``Q(m, x, W)`` over ``m ~ f(. | x*, W)`` and ``x ~ P(. | W)``.
    """
    if x_star not in (0, 1):
        raise ValueError(f"x_star must be 0 or 1, got {x_star}")
    nu = nuisances
    x = _binary_treatment(data.x)
    y, m = data.y, data.m
    w = _varying_columns(data.w)
    n = data.n
    x_fixed = np.full(n, float(x_star))

    p1 = nu.propensity(w)
    p_star = p1 if x_star == 1 else 1.0 - p1
    clipped = int(np.sum((p_star < PROPENSITY_CLIP) | (p_star > 1.0 - PROPENSITY_CLIP)))
    p_star = np.clip(p_star, PROPENSITY_CLIP, 1.0 - PROPENSITY_CLIP)
    # P(X = 1 | W) used to average Q over x; keep it consistent with the clip
    p1 = p_star if x_star == 1 else 1.0 - p_star

    mu_star = nu.mediator_mean(x_fixed, w)
    mu_obs = nu.mediator_mean(x, w)
    log_ratio = ((m - mu_obs) ** 2 - (m - mu_star) ** 2) / (2.0 * nu.mediator_sd**2)
    trimmed = int(np.sum(log_ratio > math.log(RATIO_CAP)))
    ratio = np.exp(np.minimum(log_ratio, math.log(RATIO_CAP)))

    q_obs = nu.outcome_mean(m, x, w)
    # Q is linear in x, so averaging over P(x | W) plugs in P(X = 1 | W)
    q_avg_x = nu.outcome_mean(m, p1, w)
    eta = nu.outcome_mean(mu_star, p1, w)
    plug_in = nu.outcome_mean(mu_star, x, w)

    t1 = ratio * (y - q_obs)
    t2 = (x == x_star) / p_star * (q_avg_x - eta)
    psi = t1 + t2 + plug_in
    if clipped or trimmed:
        log.info("arm x*=%d: %d propensities clipped, %d ratios trimmed", x_star, clipped, trimmed)
    return ArmEstimate(
        float(np.mean(psi)),
        clipped,
        trimmed,
        (float(np.mean(t1)), float(np.mean(t2)), float(np.mean(plug_in))),
    )


def if_estimate(data: Dataset, nuisances: NuisanceSet, x_star: int) -> float:
    return if_arm(data, nuisances, x_star).value


@dataclass(frozen=True)
class IfReport:
    variant: Variant
    psi_treated: float
    psi_control: float
    clipped: int
    trimmed: int

    @property
    def ate(self) -> float:
        return self.psi_treated - self.psi_control

    def as_dict(self) -> dict:
        return {
            "variant": self.variant.value,
            "psi_treated": self.psi_treated,
            "psi_control": self.psi_control,
            "ate": self.ate,
            "propensity_clipped": self.clipped,
            "ratio_trimmed": self.trimmed,
        }


def if_ate(data: Dataset, variant="restricted", restrict_outcome: bool = True) -> IfReport:
    nu = fit_nuisances(data, variant, restrict_outcome)
    treated = if_arm(data, nu, 1)
    control = if_arm(data, nu, 0)
    return IfReport(
        nu.variant,
        treated.value,
        control.value,
        treated.clipped + control.clipped,
        treated.trimmed + control.trimmed,
    )
