"""Maximum likelihood from two partially observed datasets.

One block observes (x, y, w) and the other (x, y, m). Both are zero-mean
Gaussian under the SCM, so the joint log-likelihood is a ``k``-weighted sum
of two Gaussian log-likelihoods with ``k = P / (P + Q)``. The effect enters
directly through the reparameterization ``c = e / a``.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.optimize import minimize

from overid.errors import (
    InitializationError,
    InvalidThetaError,
    ReparameterizationError,
    SchemaError,
    SingularInformationError,
)
from overid.regress import ols_fit
from overid.scm import Dataset, Schema, ScmParams

log = logging.getLogger(__name__)

THETA_NAMES = ("e", "a", "b", "d", "var_uw", "var_ux", "var_um", "var_uy")
N_THETA = len(THETA_NAMES)
_VAR_SLICE = slice(4, 8)
# rows of the full (X, Y, W, M) covariance kept by each block
P_INDEX = [0, 1, 2]
Q_INDEX = [0, 1, 3]
# the initializer's regressions run on nearly noiseless data in tests; the
# SVD solve stays accurate well past the default estimator cap
INIT_CONDITION_CAP = 1e16
SINGULAR_CONDITION = 1e12


class ThetaVec(NamedTuple):
    """Parameters with the effect ``e = a*c`` as a free coordinate."""

    e: float
    a: float
    b: float
    d: float
    var_uw: float
    var_ux: float
    var_um: float
    var_uy: float

    @property
    def c(self) -> float:
        if self.a == 0.0:
            raise ReparameterizationError("a = 0: c = e/a is undefined")
        return self.e / self.a

    @classmethod
    def from_params(cls, params: ScmParams) -> "ThetaVec":
        p = params
        return cls(p.a * p.c, p.a, p.b, p.d, p.var_uw, p.var_ux, p.var_um, p.var_uy)

    def to_params(self) -> ScmParams:
        return ScmParams(
            self.a, self.b, self.c, self.d, self.var_uw, self.var_ux, self.var_um, self.var_uy
        )

    def as_array(self) -> np.ndarray:
        return np.array(self, dtype=float)


def _validate(theta: ThetaVec) -> ThetaVec:
    theta = ThetaVec(*map(float, theta))
    if not all(math.isfinite(v) for v in theta):
        raise InvalidThetaError(f"non-finite theta {theta}")
    if theta.a == 0.0:
        raise ReparameterizationError("a = 0: c = e/a is undefined")
    bad = [n for n, v in zip(THETA_NAMES[4:], theta[4:]) if v <= 0.0]
    if bad:
        raise InvalidThetaError(f"variances must be positive: {bad}")
    return theta


@dataclass(frozen=True)
class PartialData:
    """A confounder block of P rows and a mediator block of Q rows."""

    confounder: Dataset
    mediator: Dataset

    def __post_init__(self):
        if self.confounder.schema is not Schema.CONFOUNDER_ONLY:
            raise SchemaError(
                f"confounder block must be {Schema.CONFOUNDER_ONLY.value!r}, "
                f"got {self.confounder.schema.value!r}"
            )
        if self.mediator.schema is not Schema.MEDIATOR_ONLY:
            raise SchemaError(
                f"mediator block must be {Schema.MEDIATOR_ONLY.value!r}, "
                f"got {self.mediator.schema.value!r}"
            )
        if self.confounder.w.ndim != 1:
            raise SchemaError("the partial-data likelihood needs a scalar confounder")

    @classmethod
    def split(cls, data: Dataset, p: int) -> "PartialData":
        """First ``p`` rows as the confounder block, the rest as the mediator block."""
        if not 0 < p < data.n:
            raise SchemaError(f"split point {p} must lie strictly inside 1..{data.n - 1}")
        head, tail = np.arange(p), np.arange(p, data.n)
        return cls(
            data.take(head).restrict(Schema.CONFOUNDER_ONLY),
            data.take(tail).restrict(Schema.MEDIATOR_ONLY),
        )

    @property
    def p(self) -> int:
        return self.confounder.n

    @property
    def q(self) -> int:
        return self.mediator.n

    @property
    def n(self) -> int:
        return self.p + self.q

    @property
    def k(self) -> float:
        return self.p / self.n

    def second_moments(self) -> tuple[np.ndarray, np.ndarray]:
        """Uncentered second-moment matrices of (x, y, w) and (x, y, m)."""
        zp = np.column_stack([self.confounder.x, self.confounder.y, self.confounder.w])
        zq = np.column_stack([self.mediator.x, self.mediator.y, self.mediator.m])
        return zp.T @ zp / self.p, zq.T @ zq / self.q


# ---------------------------------------------------------------------------
# Implied covariance and its derivatives
# ---------------------------------------------------------------------------


def covariance_and_derivatives(theta: ThetaVec) -> tuple[np.ndarray, np.ndarray]:
    """Full (X, Y, W, M) covariance and its partials, shape (4, 4) and (8, 4, 4)."""
    e, a, b, d, uw, ux, um, uy = _validate(theta)
    c = e / a
    vx = d * d * uw + ux
    X, Y, W, M = range(4)

    S = np.zeros((4, 4))
    S[X, X] = vx
    S[X, W] = d * uw
    S[W, W] = uw
    S[X, M] = c * vx
    S[M, M] = c * c * vx + um
    S[W, M] = c * d * uw
    S[X, Y] = e * vx + b * d * uw
    S[W, Y] = e * d * uw + b * uw
    S[M, Y] = (e * e / a) * vx + c * b * d * uw + a * um
    S[Y, Y] = e * e * vx + b * b * uw + 2 * e * b * d * uw + a * a * um + uy

    # partials of vx with respect to d, var_uw, var_ux
    dvx = {3: 2 * d * uw, 4: d * d, 5: 1.0}
    dS = np.zeros((N_THETA, 4, 4))

    def put(i, r, s, value):
        dS[i, r, s] = value

    for i, dv in dvx.items():
        put(i, X, X, dv)
        put(i, X, M, c * dv)
        put(i, M, M, c * c * dv)
    # e
    put(0, X, M, vx / a)
    put(0, M, M, 2 * c * vx / a)
    put(0, W, M, d * uw / a)
    put(0, X, Y, vx)
    put(0, W, Y, d * uw)
    put(0, M, Y, 2 * e * vx / a + b * d * uw / a)
    put(0, Y, Y, 2 * e * vx + 2 * b * d * uw)
    # a (at fixed e, c = e/a moves with a)
    dc_da = -e / (a * a)
    put(1, X, M, dc_da * vx)
    put(1, M, M, 2 * c * dc_da * vx)
    put(1, W, M, dc_da * d * uw)
    put(1, M, Y, -e * e * vx / (a * a) + dc_da * b * d * uw + um)
    put(1, Y, Y, 2 * a * um)
    # b
    put(2, X, Y, d * uw)
    put(2, W, Y, uw)
    put(2, M, Y, c * d * uw)
    put(2, Y, Y, 2 * b * uw + 2 * e * d * uw)
    # d (vx part handled above)
    put(3, X, W, uw)
    put(3, W, M, c * uw)
    put(3, X, Y, e * 2 * d * uw + b * uw)
    put(3, W, Y, e * uw)
    put(3, M, Y, (e * e / a) * 2 * d * uw + c * b * uw)
    put(3, Y, Y, e * e * 2 * d * uw + 2 * e * b * uw)
    # var_uw (vx part handled above)
    put(4, X, W, d)
    put(4, W, W, 1.0)
    put(4, W, M, c * d)
    put(4, X, Y, e * d * d + b * d)
    put(4, W, Y, e * d + b)
    put(4, M, Y, (e * e / a) * d * d + c * b * d)
    put(4, Y, Y, e * e * d * d + b * b + 2 * e * b * d)
    # var_ux (vx part handled above)
    put(5, X, Y, e)
    put(5, M, Y, e * e / a)
    put(5, Y, Y, e * e)
    # var_um
    put(6, M, M, 1.0)
    put(6, M, Y, a)
    put(6, Y, Y, a * a)
    # var_uy
    put(7, Y, Y, 1.0)

    # each off-diagonal pair was filled on one side only
    S = S + S.T - np.diag(np.diag(S))
    dS = dS + np.transpose(dS, (0, 2, 1)) - np.einsum("kii->ki", dS)[:, :, None] * np.eye(4)
    return S, dS


def _blocks(theta: ThetaVec):
    S, dS = covariance_and_derivatives(theta)
    sp = S[np.ix_(P_INDEX, P_INDEX)]
    sq = S[np.ix_(Q_INDEX, Q_INDEX)]
    dsp = dS[:, P_INDEX][:, :, P_INDEX]
    dsq = dS[:, Q_INDEX][:, :, Q_INDEX]
    return sp, dsp, sq, dsq


def _gaussian_terms(sigma: np.ndarray, moment: np.ndarray, dsigma: np.ndarray):
    """Per-sample log-likelihood of one block and its gradient in theta."""
    try:
        chol = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        raise InvalidThetaError("implied covariance is not positive definite") from None
    logdet = 2.0 * np.log(np.diag(chol)).sum()
    inv = np.linalg.inv(sigma)
    # work with moment - sigma: near the optimum it is small, and forming it
    # first avoids cancellation when sigma is ill-conditioned
    resid = moment - sigma
    ll = -0.5 * (logdet + sigma.shape[0] + np.sum(inv * resid))
    # d ll / d Sigma = inv (moment - sigma) inv / 2
    g = 0.5 * (inv @ resid @ inv)
    grad = np.einsum("ij,kji->k", g, dsigma)
    return ll, grad


def _per_sample(theta: ThetaVec, k: float, moment_p, moment_q):
    sp, dsp, sq, dsq = _blocks(theta)
    llp, gp = _gaussian_terms(sp, moment_p, dsp)
    llq, gq = _gaussian_terms(sq, moment_q, dsq)
    return k * llp + (1 - k) * llq, k * gp + (1 - k) * gq


def partial_loglik(theta: ThetaVec, data: PartialData) -> float:
    """Joint Gaussian log-likelihood of both blocks, constants dropped."""
    mp, mq = data.second_moments()
    ll, _ = _per_sample(theta, data.k, mp, mq)
    return data.n * ll


def partial_loglik_gradient(theta: ThetaVec, data: PartialData) -> np.ndarray:
    mp, mq = data.second_moments()
    _, grad = _per_sample(theta, data.k, mp, mq)
    return data.n * grad


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


def _pair_bootstrap_var(products: np.ndarray, solve, reps: int, rng) -> float:
    """Variance of a statistic over pairs-bootstrap resamples.

    ``products`` holds per-row cross products so a resample's sufficient
    statistics are count-weighted sums; ``solve`` maps summed products to the
    estimate.
    """
    n = len(products)
    stats = np.empty(reps)
    for r in range(reps):
        counts = np.bincount(rng.integers(0, n, size=n), minlength=n)
        stats[r] = solve(counts @ products)
    return float(np.var(stats, ddof=1))


def _solve2(gxx, gxz, gzz, rx, rz):
    # first coefficient of a two-regressor normal-equation solve
    det = gxx * gzz - gxz * gxz
    return (gzz * rx - gxz * rz) / det


def init_theta(data: PartialData, bootstrap_reps: int = 100, seed: int = 0) -> ThetaVec:
    """Data-driven starting point for the likelihood search.

    The confounder block gives the W marginal, X ~ W and Y ~ {X, W}; the
    mediator block gives M ~ X and Y ~ {M, X}. The effect starts at whichever
    of the backdoor and frontdoor estimates has the lower pairs-bootstrap
    variance.
    """
    if data.p < 8 or data.q < 8:
        raise InitializationError(f"each block needs >= 8 rows, got P={data.p}, Q={data.q}")
    cb, mb = data.confounder, data.mediator
    fit = lambda X, y: ols_fit(X, y, condition_cap=INIT_CONDITION_CAP)  # noqa: E731
    # the likelihood's variance estimates divide by n, not n - d
    mle_var = lambda f: f.residual_variance * f.residual_dof / f.n  # noqa: E731
    try:
        var_uw = float(np.mean(cb.w**2))
        xw = fit(cb.w, cb.x)
        d = float(xw.coefficients[0])
        var_ux = mle_var(xw)
        yxw = fit(np.column_stack([cb.x, cb.w]), cb.y)
        e_bd, b = map(float, yxw.coefficients)
        mx = fit(mb.x, mb.m)
        c_hat = float(mx.coefficients[0])
        var_um = mle_var(mx)
        ymx = fit(np.column_stack([mb.m, mb.x]), mb.y)
        a_f = float(ymx.coefficients[0])
    except Exception as exc:
        raise InitializationError(f"degenerate block: {exc}") from exc
    if min(var_uw, var_ux, var_um) <= 0.0:
        raise InitializationError("a block has zero residual variance")
    e_fd = a_f * c_hat

    rng = np.random.default_rng(seed)
    x, y, w = cb.x, cb.y, cb.w
    prod_p = np.column_stack([x * x, x * w, w * w, x * y, w * y])
    var_bd = _pair_bootstrap_var(
        prod_p, lambda s: _solve2(s[0], s[1], s[2], s[3], s[4]), bootstrap_reps, rng
    )
    x, y, m = mb.x, mb.y, mb.m
    prod_q = np.column_stack([m * m, m * x, x * x, m * y, x * y])
    var_fd = _pair_bootstrap_var(
        prod_q,
        lambda s: _solve2(s[0], s[1], s[2], s[3], s[4]) * s[1] / s[2],
        bootstrap_reps,
        rng,
    )
    e = e_bd if var_bd <= var_fd else e_fd
    log.debug("init: bootstrap var backdoor=%g frontdoor=%g", var_bd, var_fd)

    if abs(c_hat) > 1e-8 * math.sqrt(var_um / max(var_ux, 1e-300)):
        a = e / c_hat
    else:
        a = a_f
        e = a * c_hat
    if a == 0.0:
        raise InitializationError("initial a is exactly zero")

    # Y ~ {M, X} leaves u_y plus b * (W given X); Y ~ {X, W} leaves a u_m + u_y
    vx = d * d * var_uw + var_ux
    candidates = (
        mle_var(ymx) - b * b * var_uw * var_ux / vx,
        mle_var(yxw) - a * a * var_um,
    )
    var_uy = next((v for v in candidates if v > 0.0), 1e-3 * mle_var(yxw))
    if var_uy <= 0.0:
        raise InitializationError("cannot initialize the outcome noise variance")
    return ThetaVec(e, a, b, d, var_uw, var_ux, var_um, var_uy)


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MleConfig:
    tol: float = 1e-8
    max_iter: int = 500
    bootstrap_reps: int = 100
    seed: int = 0
    multi_start: int = 0
    jitter: float = 0.1


@dataclass(frozen=True)
class MleResult:
    theta: ThetaVec
    loglik: float
    init_loglik: float
    converged: bool
    iterations: int
    grad_norm: float
    init_theta: ThetaVec | None = None
    message: str = ""
    starts: tuple[float, ...] = field(default_factory=tuple)

    @property
    def effect(self) -> float:
        return self.theta.e


def _to_free(theta: ThetaVec) -> np.ndarray:
    z = np.asarray(theta, dtype=float).copy()
    z[_VAR_SLICE] = np.log(z[_VAR_SLICE])
    return z


def _from_free(z: np.ndarray) -> ThetaVec:
    t = np.asarray(z, dtype=float).copy()
    t[_VAR_SLICE] = np.exp(t[_VAR_SLICE])
    return ThetaVec(*t)


def _objective(k, mp, mq):
    def f(z):
        theta = _from_free(z)
        try:
            ll, grad = _per_sample(theta, k, mp, mq)
        except InvalidThetaError:
            return np.inf, np.zeros(N_THETA)
        grad = grad.copy()
        grad[_VAR_SLICE] *= np.asarray(theta)[_VAR_SLICE]
        return -ll, -grad

    return f


def _free_grad_norm(theta, k, mp, mq, n) -> float:
    _, grad = _per_sample(theta, k, mp, mq)
    grad = grad.copy()
    grad[_VAR_SLICE] *= np.asarray(theta)[_VAR_SLICE]
    return float(n * np.max(np.abs(grad)))


def _run_bfgs(start: ThetaVec, k, mp, mq, n, config: MleConfig):
    f = _objective(k, mp, mq)
    f0, _ = f(_to_free(start))
    # scipy works per sample; scale the LL-level tolerance accordingly
    gtol = config.tol * (1.0 / n + abs(f0))
    res = minimize(
        f,
        _to_free(start),
        jac=True,
        method="BFGS",
        options={"gtol": gtol, "maxiter": config.max_iter},
    )
    theta, ll, steps = _score_polish(_from_free(res.x), k, mp, mq, n, config.tol)
    return theta, ll, int(res.nit) + steps, str(res.message)


def _score_polish(theta: ThetaVec, k, mp, mq, n, tol, max_steps: int = 25):
    """Fisher-scoring steps from a BFGS endpoint.

    BFGS line searches stall once objective differences reach roundoff, which
    happens before the gradient criterion is met for large N. Scoring only
    needs gradients, so it can finish the job.
    """
    ll, grad = _per_sample(theta, k, mp, mq)
    steps = 0
    for _ in range(max_steps):
        if _free_grad_norm(theta, k, mp, mq, n) <= tol * (1.0 + n * abs(ll)):
            break
        try:
            step = np.linalg.solve(fisher_information(theta, k), grad)
        except np.linalg.LinAlgError:
            break
        t = 1.0
        while t > 1e-4:
            try:
                cand = _validate(ThetaVec(*(np.asarray(theta) + t * step)))
                ll_c, grad_c = _per_sample(cand, k, mp, mq)
            except InvalidThetaError:
                t *= 0.5
                continue
            # ill-conditioned covariances leave ~1e-12 relative noise in ll
            if ll_c >= ll - 1e-10 * (1.0 + abs(ll)):
                break
            t *= 0.5
        else:
            break
        theta, ll, grad = cand, ll_c, grad_c
        steps += 1
    return theta, n * ll, steps


def mle_fit(data: PartialData, config: MleConfig | None = None) -> MleResult:
    """Maximize the partial-data log-likelihood by BFGS.

    Variances are optimized on the log scale. The best iterate is returned,
    so the final log-likelihood is never below the starting value even when
    the search stalls; ``converged`` reports whether the gradient criterion
    ``max|grad| <= tol * (1 + |LL|)`` holds at the returned point.
    """
    config = config or MleConfig()
    mp, mq = data.second_moments()
    k, n = data.k, data.n
    start = init_theta(data, config.bootstrap_reps, config.seed)
    init_ll = n * _per_sample(start, k, mp, mq)[0]

    best = (start, init_ll, 0, "initial point")
    starts = []
    inits = [start]
    if config.multi_start:
        rng = np.random.default_rng([config.seed, 2])
        base = _to_free(start)
        for _ in range(config.multi_start):
            z = base + config.jitter * rng.standard_normal(N_THETA) * np.maximum(
                1.0, np.abs(base) * (np.arange(N_THETA) < 4)
            )
            inits.append(_from_free(z))
    for init in inits:
        try:
            theta, ll, nit, msg = _run_bfgs(init, k, mp, mq, n, config)
        except (InvalidThetaError, np.linalg.LinAlgError) as exc:
            log.warning("BFGS start failed: %s", exc)
            continue
        starts.append(ll)
        # ties within roundoff keep the earlier (data-driven) start
        if ll > best[1] + 1e-9 * (1.0 + abs(best[1])):
            best = (theta, ll, nit, msg)

    theta, ll, nit, msg = best
    grad_norm = _free_grad_norm(theta, k, mp, mq, n)
    converged = grad_norm <= config.tol * (1.0 + abs(ll))
    if not converged:
        log.warning("BFGS did not meet the gradient tolerance: %s", msg)
    return MleResult(theta, ll, init_ll, converged, nit, grad_norm, start, msg, tuple(starts))


# ---------------------------------------------------------------------------
# Fisher information
# ---------------------------------------------------------------------------


def _block_information(sigma: np.ndarray, dsigma: np.ndarray) -> np.ndarray:
    inv = np.linalg.inv(sigma)
    A = np.einsum("ij,kjl->kil", inv, dsigma)  # inv @ dS_k
    return 0.5 * np.einsum("kij,lji->kl", A, A)


def fisher_information(theta: ThetaVec, k: float) -> np.ndarray:
    """Per-sample Fisher information ``k I_p + (1 - k) I_q`` in theta."""
    if not 0.0 <= k <= 1.0:
        raise ValueError(f"k must lie in [0, 1], got {k}")
    sp, dsp, sq, dsq = _blocks(theta)
    info = k * _block_information(sp, dsp) + (1 - k) * _block_information(sq, dsq)
    return 0.5 * (info + info.T)


def cramer_rao_ve(theta: ThetaVec, k: float) -> float:
    """Asymptotic variance of sqrt(N) (e_hat - e)."""
    info = fisher_information(theta, k)
    eig = np.linalg.eigvalsh(info)
    if eig[0] <= eig[-1] / SINGULAR_CONDITION:
        raise SingularInformationError(
            f"Fisher information is singular at k={k} "
            f"(eigenvalue ratio {eig[0] / eig[-1]:.3e})"
        )
    return float(np.linalg.inv(info)[0, 0])


def single_dataset_variances(theta: ThetaVec, k: float) -> tuple[float, float]:
    """Asymptotic variances, on the sqrt(N) scale, of the backdoor estimator on
    the P = kN confounder rows and the frontdoor estimator on the Q rows."""
    from overid.estimators import backdoor_variance, frontdoor_variance

    p = theta.to_params()
    bd = backdoor_variance(p, 10).asymptotic_normalized / k
    fd = frontdoor_variance(p, 10).asymptotic_normalized / (1 - k)
    return bd, fd


@dataclass(frozen=True)
class KCurve:
    k_star: float
    ve_star: float
    curve: np.ndarray  # columns k, V_e; NaN where the information is singular


def optimal_k(theta: ThetaVec, grid_step: float = 0.005) -> KCurve:
    """Minimize V_e over the interior grid ``grid_step, 2*grid_step, ...``."""
    if not 0.0 < grid_step <= 0.5:
        raise ValueError(f"grid_step must lie in (0, 0.5], got {grid_step}")
    count = int(math.floor((1.0 - grid_step) / grid_step + 1e-9))
    ks = grid_step * np.arange(1, count + 1)
    ks = ks[ks <= 1.0 - grid_step + 1e-12]
    ve = np.full(len(ks), np.nan)
    for i, k in enumerate(ks):
        try:
            ve[i] = cramer_rao_ve(theta, float(k))
        except SingularInformationError:
            continue
    if np.all(np.isnan(ve)):
        raise SingularInformationError("Fisher information is singular on the whole k grid")
    i = int(np.nanargmin(ve))
    return KCurve(float(ks[i]), float(ve[i]), np.column_stack([ks, ve]))


def write_ve_curve(path, curve: KCurve) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "ve"])
        for k, ve in curve.curve:
            writer.writerow([f"{k:.10g}", f"{ve:.17g}"])
