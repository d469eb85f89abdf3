"""Backdoor, frontdoor and combined estimators of the effect ``a*c``.

Each estimator is a product of OLS coefficients (the backdoor estimator is a
single coefficient). The variance functions are exact finite-sample results
for the linear Gaussian model with zero-mean data, plus the asymptotic
variance of the sqrt(n)-scaled estimator. The combined estimator only has
finite-sample bounds.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from overid.errors import (
    DegreesOfFreedomError,
    DivergentThresholdError,
    InvalidParamsError,
    NoRealSolutionError,
    SchemaError,
    UndefinedIdealError,
)
from overid.regress import batch_ols, ols_fit
from overid.scm import Dataset, ScmParams

log = logging.getLogger(__name__)

SQRT3 = math.sqrt(3.0)
MIN_VARIANCE = 1e-12
SMALL_SAMPLE_WARNING_N = 10


class Method(enum.Enum):
    BACKDOOR = "backdoor"
    FRONTDOOR = "frontdoor"
    COMBINED = "combined"

    @classmethod
    def parse(cls, value: "str | Method") -> "Method":
        if isinstance(value, Method):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise SchemaError(f"unknown method {value!r}") from None


class Competitor(enum.Enum):
    BACKDOOR = "backdoor"
    FRONTDOOR = "frontdoor"


@dataclass(frozen=True)
class VarianceTheory:
    """Theoretical variance of an estimator of ``a*c``.

    ``finite_sample`` is a number, or a (lower, upper) pair when only bounds
    are known. ``asymptotic_normalized`` is the limit of n * Var.
    """

    finite_sample: float | tuple[float, float]
    asymptotic_normalized: float
    notes: tuple[str, ...] = ()

    def __post_init__(self):
        if isinstance(self.finite_sample, tuple):
            lo, hi = self.finite_sample
            if lo > hi:
                raise ValueError(f"interval lower {lo} exceeds upper {hi}")

    @property
    def is_interval(self) -> bool:
        return isinstance(self.finite_sample, tuple)

    @property
    def lower(self) -> float:
        return self.finite_sample[0] if self.is_interval else self.finite_sample

    @property
    def upper(self) -> float:
        return self.finite_sample[1] if self.is_interval else self.finite_sample

    @property
    def midpoint(self) -> float:
        return 0.5 * (self.lower + self.upper)

    def as_dict(self) -> dict:
        out = {"asymptotic_normalized": self.asymptotic_normalized}
        if self.is_interval:
            out["finite_lower"], out["finite_upper"] = self.finite_sample
        else:
            out["finite"] = self.finite_sample
        if self.notes:
            out["notes"] = list(self.notes)
        return out


@dataclass(frozen=True)
class EffectReport:
    method: Method
    estimate: float
    n: int
    theory: VarianceTheory | None = None
    components: dict[str, float] = field(default_factory=dict)

    def as_dict(self) -> dict:
        out = {"method": self.method.value, "estimate": self.estimate, "n": self.n}
        out.update(self.components)
        if self.theory is not None:
            out["theory"] = self.theory.as_dict()
        return out


# ---------------------------------------------------------------------------
# Point estimates
# ---------------------------------------------------------------------------


def _require(data: Dataset, cols: str, method: Method):
    missing = [c for c in cols if not data.has(c)]
    if missing:
        raise SchemaError(
            f"{method.value} estimator needs columns {list(cols)}; "
            f"dataset ({data.schema.value}) lacks {missing}"
        )
    if data.n < 4:
        raise DegreesOfFreedomError(f"{method.value} estimator needs n >= 4, got {data.n}")


def _coef_c(data: Dataset) -> float:
    return float(ols_fit(data.x, data.m).coefficients[0])


def backdoor_estimate(data: Dataset, params: ScmParams | None = None) -> EffectReport:
    """X-coefficient of the regression of Y on {X, W}."""
    _require(data, "xyw", Method.BACKDOOR)
    design = np.column_stack([data.x, data.w_matrix])
    est = float(ols_fit(design, data.y).coefficients[0])
    theory = backdoor_variance(params, data.n) if params is not None else None
    return EffectReport(Method.BACKDOOR, est, data.n, theory)


def frontdoor_estimate(data: Dataset, params: ScmParams | None = None) -> EffectReport:
    _require(data, "xym", Method.FRONTDOOR)
    c_hat = _coef_c(data)
    a_f = float(ols_fit(np.column_stack([data.m, data.x]), data.y).coefficients[0])
    theory = frontdoor_variance(params, data.n) if params is not None else None
    return EffectReport(
        Method.FRONTDOOR, a_f * c_hat, data.n, theory, {"a_hat": a_f, "c_hat": c_hat}
    )


def combined_estimate(data: Dataset, params: ScmParams | None = None) -> EffectReport:
    """Gaussian MLE of ``a*c`` from complete (x, y, w, m) rows.

    ``c`` comes from M ~ X and ``a`` from Y ~ {M, W}.
    """
    _require(data, "xywm", Method.COMBINED)
    c_hat = _coef_c(data)
    design = np.column_stack([data.m, data.w_matrix])
    a_c = float(ols_fit(design, data.y).coefficients[0])
    theory = combined_variance(params, data.n) if params is not None else None
    return EffectReport(
        Method.COMBINED, a_c * c_hat, data.n, theory, {"a_hat": a_c, "c_hat": c_hat}
    )


ESTIMATORS = {
    Method.BACKDOOR: backdoor_estimate,
    Method.FRONTDOOR: frontdoor_estimate,
    Method.COMBINED: combined_estimate,
}


def estimate(data: Dataset, method, params: ScmParams | None = None) -> EffectReport:
    return ESTIMATORS[Method.parse(method)](data, params)


def batch_estimates(batch: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """All three estimators on a stack of scalar-W replications.

    ``batch`` maps x, y, w, m to arrays of shape (R, n). Returns per-replication
    arrays for the three estimates and the coefficients they are built from
    (``c_hat``, ``a_f``, ``a_c``).
    """
    x, y, w, m = batch["x"], batch["y"], batch["w"], batch["m"]
    c_hat = np.einsum("rn,rn->r", x, m) / np.einsum("rn,rn->r", x, x)
    bd = batch_ols(np.stack([x, w], axis=-1), y)[:, 0]
    a_f = batch_ols(np.stack([m, x], axis=-1), y)[:, 0]
    a_c = batch_ols(np.stack([m, w], axis=-1), y)[:, 0]
    return {
        "backdoor": bd,
        "frontdoor": a_f * c_hat,
        "combined": a_c * c_hat,
        "c_hat": c_hat,
        "a_f": a_f,
        "a_c": a_c,
    }


# ---------------------------------------------------------------------------
# Variance theory
# ---------------------------------------------------------------------------


def _check_variances(p: ScmParams):
    for name in ScmParams.variance_names:
        if getattr(p, name) < MIN_VARIANCE:
            raise InvalidParamsError(
                f"{name}={getattr(p, name)} is below {MIN_VARIANCE}; "
                "variance formulas divide by it"
            )


def _notes(n: int) -> tuple[str, ...]:
    if n <= SMALL_SAMPLE_WARNING_N:
        msg = f"n={n} <= {SMALL_SAMPLE_WARNING_N}: inverse-Wishart moments are barely finite"
        log.warning(msg)
        return (msg,)
    return ()


def _var_c_hat(p: ScmParams, n: int) -> float:
    return p.var_um / ((n - 2) * p.var_x)


def _frontdoor_noise(p: ScmParams) -> float:
    # b^2 var_uw var_ux + var_uy D: D times the conditional variance of the
    # Y ~ {M, X} error given X
    return p.b**2 * p.var_uw * p.var_ux + p.var_uy * p.var_x


def backdoor_variance(params: ScmParams, n: int) -> VarianceTheory:
    _check_variances(params)
    if n <= 3:
        raise DegreesOfFreedomError(f"backdoor variance needs n >= 4, got {n}")
    num = params.a**2 * params.var_um + params.var_uy
    return VarianceTheory(
        num / ((n - 3) * params.var_ux), num / params.var_ux, _notes(n)
    )


def frontdoor_components(params: ScmParams, n: int) -> tuple[float, float]:
    """(Var(a_f hat), Var(c hat)) at sample size ``n``."""
    _check_variances(params)
    if n <= 3:
        raise DegreesOfFreedomError(f"frontdoor variance needs n >= 4, got {n}")
    D = params.var_x
    var_a = _frontdoor_noise(params) / ((n - 3) * D * params.var_um)
    return var_a, _var_c_hat(params, n)


def frontdoor_variance(params: ScmParams, n: int) -> VarianceTheory:
    var_a, var_c = frontdoor_components(params, n)
    p = params
    finite = p.c**2 * var_a + p.a**2 * var_c + 2.0 * var_a * var_c
    D = p.var_x
    asym = p.c**2 * _frontdoor_noise(p) / (D * p.var_um) + p.a**2 * p.var_um / D
    return VarianceTheory(finite, asym, _notes(n))


def combined_components(params: ScmParams, n: int) -> tuple[float, float]:
    """(Var(a_c hat), Var(c hat)) at sample size ``n``."""
    _check_variances(params)
    if n <= 3:
        raise DegreesOfFreedomError(f"combined variance needs n >= 4, got {n}")
    p = params
    var_a = p.var_uy / ((n - 3) * (p.c**2 * p.var_ux + p.var_um))
    return var_a, _var_c_hat(p, n)


def combined_asymptotic(params: ScmParams) -> float:
    p = params
    _check_variances(p)
    return p.c**2 * p.var_uy / (p.c**2 * p.var_ux + p.var_um) + p.a**2 * p.var_um / p.var_x


def combined_upper_bound(params: ScmParams, n: int) -> float:
    if n <= 5:
        raise DegreesOfFreedomError(f"combined variance bounds need n >= 6, got {n}")
    var_a, var_c = combined_components(params, n)
    p = params
    r1 = math.sqrt((n - 3) / (n - 5))
    r2 = math.sqrt((n - 2) / (n - 4))
    cross = 2.0 * abs(p.c) * var_a * math.sqrt(var_c) + SQRT3 * r2 * var_a * var_c
    return p.c**2 * var_a + p.a**2 * var_c + r1 * cross


def combined_variance(params: ScmParams, n: int) -> VarianceTheory:
    """Cramer-Rao lower bound and Cauchy-Schwarz upper bound on the variance."""
    L = combined_asymptotic(params)
    upper = combined_upper_bound(params, n)
    return VarianceTheory((L / n, upper), L, _notes(n))


def variance_theory(method, params: ScmParams, n: int) -> VarianceTheory:
    fn = {
        Method.BACKDOOR: backdoor_variance,
        Method.FRONTDOOR: frontdoor_variance,
        Method.COMBINED: combined_variance,
    }[Method.parse(method)]
    return fn(params, n)


# ---------------------------------------------------------------------------
# Ideal mediators and comparisons
# ---------------------------------------------------------------------------


def ideal_mediator_frontdoor(params: ScmParams, n: int) -> float:
    """Mediator noise variance minimizing the frontdoor finite-sample variance."""
    p = params
    if p.a == 0.0:
        raise UndefinedIdealError("a = 0: the frontdoor variance has no interior minimizer")
    if n < 4:
        raise DegreesOfFreedomError(f"need n >= 4, got {n}")
    return (
        abs(p.c)
        * math.sqrt(_frontdoor_noise(p))
        / abs(p.a)
        * math.sqrt((n - 2) / (n - 3))
    )


def ideal_mediator_combined(params: ScmParams) -> float:
    """Mediator noise variance minimizing the combined asymptotic variance."""
    p = params
    if p.a == 0.0:
        raise UndefinedIdealError("a = 0: the combined variance has no interior minimizer")
    value = abs(p.c) * math.sqrt(p.var_uy) * math.sqrt(p.var_x) / abs(p.a) - p.c**2 * p.var_ux
    return max(0.0, value)


def variance_ratio(params: ScmParams, n: int) -> float:
    """Backdoor over frontdoor finite-sample variance; > 1 favours frontdoor."""
    p = params
    _check_variances(p)
    if n <= 3:
        raise DegreesOfFreedomError(f"variance ratio needs n >= 4, got {n}")
    D = p.var_x
    E = _frontdoor_noise(p)
    num = (n - 2) * p.var_um * D**2 * (p.a**2 * p.var_um + p.var_uy)
    den = p.var_ux * (
        (n - 3) * p.a**2 * p.var_um**2 * D + (2 * p.var_um + p.c**2 * (n - 2) * D) * E
    )
    return num / den


def _backdoor_threshold_closed_form(p: ScmParams) -> float:
    D = p.var_x
    E = p.c**2 * p.var_ux + p.var_um
    F = E + (1.0 + 2.0 * SQRT3) * p.var_um
    ux, um = p.var_ux, p.var_um
    root = math.sqrt(p.c**2 * ux**3 * D**2 * (F + 2.0 * SQRT3 * um))
    num = 2.0 * (
        ux**2 * F + p.d**2 * p.var_uw * (um * D + ux * F) + p.c**2 * ux**3 * root
    )
    return num / (um * D**2)


def _frontdoor_sufficient(p: ScmParams, n: int) -> bool:
    # frontdoor minus combined-upper is at least
    #   [c^2 (K_f - K_c) - r1 K_c (2|c| sqrt(Vc) + sqrt3 r2 Vc)] / (n - 3)
    # and the bracket is increasing in n, so the first n where it is
    # nonnegative is a valid threshold.
    D = p.var_x
    K_f = _frontdoor_noise(p) / (D * p.var_um)
    K_c = p.var_uy / (p.c**2 * p.var_ux + p.var_um)
    var_c = _var_c_hat(p, n)
    r1 = math.sqrt((n - 3) / (n - 5))
    r2 = math.sqrt((n - 2) / (n - 4))
    lhs = p.c**2 * (K_f - K_c)
    rhs = r1 * K_c * (2.0 * abs(p.c) * math.sqrt(var_c) + SQRT3 * r2 * var_c)
    return lhs >= rhs


def dominance_threshold(params: ScmParams, against="backdoor") -> float:
    """Sample size N beyond which the combined upper bound beats a competitor.

    For every integer n > N (and n >= 6, where the bound is defined) the
    combined estimator's finite-sample upper bound is at most the
    competitor's exact finite-sample variance. Values below 5 are clamped to
    5 because the comparison is undefined for smaller n.

    Against the backdoor estimator N is a closed form. Against the frontdoor
    estimator N is the smallest n satisfying a monotone sufficient condition,
    located by bisection.
    """
    against = Competitor(str(getattr(against, "value", against)).lower())
    p = params
    _check_variances(p)
    if against is Competitor.BACKDOOR:
        return max(5.0, _backdoor_threshold_closed_form(p))
    if p.c == 0.0:
        raise DivergentThresholdError("c = 0: the combined bound never beats the frontdoor variance")
    lo = 6
    if _frontdoor_sufficient(p, lo):
        return 5.0
    hi = 12
    while not _frontdoor_sufficient(p, hi):
        hi *= 2
        if hi > 2**62:
            raise DivergentThresholdError("frontdoor dominance threshold overflowed")
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if _frontdoor_sufficient(p, mid):
            hi = mid
        else:
            lo = mid
    return float(hi - 1)


def equal_variance_b(params: ScmParams, n: int) -> float:
    """Nonnegative ``b`` making the backdoor and frontdoor variances equal.

    ``params.b`` is ignored.
    """
    p = params
    _check_variances(p)
    if n <= 2:
        raise DegreesOfFreedomError(f"need n > 2, got {n}")
    D = p.var_x
    slack = 1.0 - 2.0 * p.var_ux / ((n - 2) * D)
    bound = math.sqrt(p.var_um / p.var_ux) * math.sqrt(max(slack, 0.0))
    if slack < 0.0 or abs(p.c) > bound:
        raise NoRealSolutionError(abs(p.c), bound)
    uw, ux, um, uy = p.var_uw, p.var_ux, p.var_um, p.var_uy
    E = (n - 2) * p.c**2 * ux - (n - 4) * um
    num = -D * (
        -(p.a**2) * um**2 * ((n - 2) * p.d**2 * uw + ux)
        + (-(n - 2) * p.d**2 * uw * (um - p.c**2 * ux) + ux * E) * uy
    )
    den = uw * ux**2 * (2.0 * um + (n - 2) * p.c**2 * D)
    b_sq = num / den
    if b_sq < 0.0:
        raise NoRealSolutionError(abs(p.c), bound)
    return math.sqrt(b_sq)


def combined_dominance_ratio_bound(params: ScmParams, n: int) -> float:
    """Lower bound on min(Var_bd, Var_fd) / Var_combined.

    Valid when ``b`` equalizes the backdoor and frontdoor variances (see
    :func:`equal_variance_b`); the expression itself does not involve ``b``.
    """
    p = params
    _check_variances(p)
    if n <= 5:
        raise DegreesOfFreedomError(f"need n >= 6, got {n}")
    D = p.var_x
    E = p.c**2 * p.var_ux + p.var_um
    r1 = math.sqrt((n - 3) / (n - 5))
    r2 = math.sqrt((n - 2) / (n - 4))
    F = (n - 3) * p.a**2 * p.var_um * E
    G = r1 * math.sqrt(p.var_um) / math.sqrt((n - 2) * D)
    H = r1 * r2 + abs(p.c) * (n - 2) * D * (abs(p.c) + G)
    num = (n - 2) * D * E * (p.a**2 * p.var_um + p.var_uy)
    den = p.var_ux * (F + p.var_uy * (p.var_um + SQRT3 * p.var_um * H))
    return num / den
