"""Monte Carlo harness for the variance theory and estimator comparisons.

Seeds: replication ``r`` of an experiment with base seed ``s`` uses
``s + r``, where ``r`` counts replications across the whole experiment (all
parameter draws and sample sizes, in loop order). Parameter draws from the
prior use ``numpy.random.default_rng([s, 1])``. Means and variances are
numpy reductions over contiguous arrays (pairwise summation), so results do
not depend on how replications were scheduled.

Set ``OVERID_THREADS`` to a number above 1 to run the partial-data
replications in a process pool.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import os
from collections.abc import Callable, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from overid.errors import ConfigError, OverIdError, SchemaError
from overid.estimators import (
    backdoor_estimate,
    batch_estimates,
    combined_estimate,
    frontdoor_estimate,
    variance_theory,
)
from overid.partial_mle import MleConfig, PartialData, mle_fit
from overid.scm import (
    Dataset,
    Schema,
    ScmParams,
    draw_prior_params,
    sample,
    sample_batch,
    standard_normals,
)
from overid.semiparam import if_ate

log = logging.getLogger(__name__)

LINEAR_ESTIMATORS = ("backdoor", "frontdoor", "combined")
IF_ESTIMATORS = ("if-restricted", "if-fulcher", "if-frontdoor")
PARTIAL_ESTIMATORS = ("partial-backdoor", "partial-frontdoor", "partial-mle")


@dataclass(frozen=True)
class McConfig:
    """Monte Carlo settings.

    ``params`` is either a fixed :class:`ScmParams` or ``"prior"`` for
    ``draws`` independent draws from the uniform parameter prior.
    """

    reps: int
    n_values: tuple[int, ...]
    seed: int = 0
    params: ScmParams | str = "prior"
    draws: int = 50
    estimators: tuple[str, ...] = LINEAR_ESTIMATORS

    def __post_init__(self):
        object.__setattr__(self, "n_values", tuple(int(n) for n in self.n_values))
        if self.reps < 1:
            raise ConfigError(f"reps must be >= 1, got {self.reps}")
        if not self.n_values or min(self.n_values) < 6:
            raise ConfigError(f"every n must be >= 6, got {self.n_values}")
        if isinstance(self.params, str) and self.params != "prior":
            raise ConfigError(f"params must be ScmParams or 'prior', got {self.params!r}")


@dataclass(frozen=True)
class McRow:
    estimator: str
    n: int
    reps_used: int
    seed: int
    truth: float
    mean: float
    variance: float
    mse: float
    mse_se: float
    theory_variance: float | None = None
    theory_lower: float | None = None
    theory_upper: float | None = None
    mape: float | None = None
    inside: bool | None = None
    draw: int | None = None
    failures: int = 0
    label: str = ""

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


ROW_FIELDS = [f.name for f in dataclasses.fields(McRow)]


@dataclass
class McSummary:
    rows: list[McRow]
    estimates: dict[tuple[str, int], np.ndarray] = field(default_factory=dict, repr=False)
    rejected_draws: int = 0
    notes: list[str] = field(default_factory=list)

    def select(self, estimator: str, n: int | None = None) -> list[McRow]:
        return [r for r in self.rows if r.estimator == estimator and (n is None or r.n == n)]

    def row(self, estimator: str, n: int) -> McRow:
        (row,) = self.select(estimator, n)
        return row

    def mse_gap(self, better: str, worse: str, n: int) -> tuple[float, float]:
        """MSE(worse) - MSE(better) and its paired Monte Carlo standard error."""
        truth = self.row(better, n).truth
        se_b = (self.estimates[(better, n)] - truth) ** 2
        se_w = (self.estimates[(worse, n)] - truth) ** 2
        ok = np.isfinite(se_b) & np.isfinite(se_w)
        diff = se_w[ok] - se_b[ok]
        return float(diff.mean()), float(diff.std(ddof=1) / math.sqrt(diff.size))

    def mape_stats(self, estimator: str, n: int) -> tuple[float, float]:
        values = np.array([r.mape for r in self.select(estimator, n)], dtype=float)
        return float(values.mean()), float(values.std(ddof=1) if values.size > 1 else 0.0)

    def inside_fraction(self, estimator: str, n: int) -> float:
        flags = [r.inside for r in self.select(estimator, n)]
        return float(np.mean(flags))

    def write_csv(self, path) -> None:
        write_rows(path, self.rows)


def write_rows(path, rows: Sequence[McRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=ROW_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(v) for k, v in row.as_dict().items()})


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return value


def _summarize(
    name: str,
    n: int,
    values: np.ndarray,
    truth: float,
    seed: int,
    theory=None,
    draw: int | None = None,
    label: str = "",
) -> McRow:
    finite = values[np.isfinite(values)]
    failures = int(values.size - finite.size)
    used = int(finite.size)
    if used == 0:
        raise OverIdError(f"{name} failed on every replication at n={n}")
    sq = (finite - truth) ** 2
    var = float(finite.var(ddof=1)) if used > 1 else float("nan")
    row = dict(
        estimator=name,
        n=n,
        reps_used=used,
        seed=seed,
        truth=truth,
        mean=float(finite.mean()),
        variance=var,
        mse=float(sq.mean()),
        mse_se=float(sq.std(ddof=1) / math.sqrt(used)) if used > 1 else float("nan"),
        draw=draw,
        failures=failures,
        label=label,
    )
    if theory is not None:
        ref = theory.midpoint
        row.update(
            theory_variance=ref,
            theory_lower=theory.lower,
            theory_upper=theory.upper,
        )
        if used > 1:
            row["mape"] = abs(ref - var) / var * 100.0
            row["inside"] = bool(theory.lower <= var <= theory.upper) if theory.is_interval else None
    return McRow(**row)


def _scalar_reps(params: ScmParams, n: int, seeds: Sequence[int]) -> dict[str, np.ndarray]:
    return batch_estimates(sample_batch(params, n, seeds))


def _theory(name: str, params: ScmParams, n: int):
    try:
        return variance_theory(name, params, n)
    except OverIdError:
        return None


# ---------------------------------------------------------------------------
# Variance-theory validation
# ---------------------------------------------------------------------------


def mape_experiment(config: McConfig) -> McSummary:
    """Compare empirical and theoretical variances over parameter draws.

    The combined estimator only has bounds, so its MAPE is measured against
    the interval midpoint and each row records whether the empirical
    variance fell inside the interval.
    """
    if config.reps < 2:
        raise ConfigError("MAPE needs reps >= 2 (a variance from one draw is undefined)")
    rng = np.random.default_rng([config.seed, 1])
    if isinstance(config.params, ScmParams):
        draws = [(config.params, 0)] * config.draws
    else:
        draws = [draw_prior_params(rng) for _ in range(config.draws)]
    rejected = sum(r for _, r in draws)
    rows: list[McRow] = []
    offset = 0
    for j, (params, _) in enumerate(draws):
        for n in config.n_values:
            seeds = config.seed + offset + np.arange(config.reps)
            offset += config.reps
            est = _scalar_reps(params, n, seeds)
            for name in config.estimators:
                rows.append(
                    _summarize(
                        name,
                        n,
                        est[name],
                        params.true_effect,
                        config.seed,
                        _theory(name, params, n),
                        draw=j,
                    )
                )
    notes = [f"{rejected} prior draws rejected for |a| or |c| < 0.05"]
    return McSummary(rows, rejected_draws=rejected, notes=notes)


def mse_comparison(config: McConfig, params: ScmParams, label: str = "") -> McSummary:
    """MSE of the three estimators at each sample size, shared replications."""
    rows = []
    estimates = {}
    offset = 0
    for n in config.n_values:
        seeds = config.seed + offset + np.arange(config.reps)
        offset += config.reps
        est = _scalar_reps(params, n, seeds)
        for name in config.estimators:
            estimates[(name, n)] = est[name]
            rows.append(
                _summarize(
                    name, n, est[name], params.true_effect, config.seed,
                    _theory(name, params, n), label=label,
                )
            )
    return McSummary(rows, estimates)


# ---------------------------------------------------------------------------
# Partial data
# ---------------------------------------------------------------------------


def _partial_rep(args) -> tuple[float, float, float, bool]:
    params, n, seed, mle_config = args
    data = sample(params, n, seed)
    part = PartialData.split(data, n // 2)
    bd = backdoor_estimate(part.confounder).estimate
    fd = frontdoor_estimate(part.mediator).estimate
    try:
        fit = mle_fit(part, dataclasses.replace(mle_config, seed=seed))
        return bd, fd, fit.theta.e, fit.converged
    except OverIdError as exc:
        log.warning("partial MLE failed at seed %d: %s", seed, exc)
        return bd, fd, float("nan"), False


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("OVERID_THREADS", "1")))
    except ValueError:
        raise ConfigError("OVERID_THREADS must be an integer") from None


def _map(fn: Callable, items: list):
    workers = worker_count()
    if workers == 1 or len(items) < 2 * workers:
        return [fn(i) for i in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))


def partial_mse_comparison(
    config: McConfig, params: ScmParams, mle_config: MleConfig | None = None, label: str = ""
) -> McSummary:
    """Backdoor on one half, frontdoor on the other, and the joint MLE.

    Each dataset of size N is split into P = N // 2 confounder rows and
    Q = N - P mediator rows. Non-converged MLE fits are kept and counted.
    """
    mle_config = mle_config or MleConfig()
    rows = []
    estimates = {}
    notes = []
    offset = 0
    for n in config.n_values:
        seeds = config.seed + offset + np.arange(config.reps)
        offset += config.reps
        out = _map(_partial_rep, [(params, n, int(s), mle_config) for s in seeds])
        arr = np.array([o[:3] for o in out], dtype=float)
        unconverged = sum(1 for o in out if not o[3])
        if unconverged:
            notes.append(f"n={n}: {unconverged} MLE fits did not meet the gradient tolerance")
        for j, name in enumerate(PARTIAL_ESTIMATORS):
            estimates[(name, n)] = arr[:, j]
            rows.append(_summarize(name, n, arr[:, j], params.true_effect, config.seed, label=label))
    return McSummary(rows, estimates, notes=notes)


# ---------------------------------------------------------------------------
# Semi-synthetic protocol with real-looking covariates
# ---------------------------------------------------------------------------

IHDP_SETTINGS = {
    "S1": {"a": 10.0, "c": 5.0, "sd_um": 1.0},
    "S2": {"a": 10.0, "c": 1.0, "sd_um": 2.0},
}
B_VALUES = np.array([0.0, 1.0, 2.0, 3.0, 4.0])
B_PROBS = np.array([0.5, 0.2, 0.15, 0.1, 0.05])


def synthetic_covariates(
    seed: int,
    n: int = 747,
    n_continuous: int = 6,
    n_binary: int = 19,
    treated_rate: float = 0.19,
) -> tuple[np.ndarray, np.ndarray]:
    """Stand-in for the IHDP covariates: standardized columns and a treatment.

    Continuous columns are correlated Gaussians and binary columns are
    thresholded latent Gaussians with varied prevalence. Treatment is
    logistic in the covariates with the intercept tuned so the mean
    propensity equals ``treated_rate``.
    """
    rng = np.random.default_rng([seed, 3])
    k = n_continuous + n_binary
    loadings = rng.normal(0.0, 0.4, size=(k, 3))
    latent = rng.standard_normal((n, 3)) @ loadings.T + rng.standard_normal((n, k))
    cont = latent[:, :n_continuous]
    cut = rng.uniform(-1.0, 1.5, size=n_binary)
    binary = (latent[:, n_continuous:] > cut).astype(float)
    raw = np.column_stack([cont, binary])
    covariates = (raw - raw.mean(axis=0)) / raw.std(axis=0)
    beta = rng.normal(0.0, 0.25, size=k)
    score = covariates @ beta
    intercept = brentq(lambda b0: expit(b0 + score).mean() - treated_rate, -20.0, 20.0)
    treatment = (rng.uniform(size=n) < expit(intercept + score)).astype(float)
    return covariates, treatment


def _linear_on_centered(data: Dataset) -> dict[str, float]:
    centered = data.centered()
    return {
        "backdoor": backdoor_estimate(centered.restrict(Schema.CONFOUNDER_ONLY)).estimate,
        "frontdoor": frontdoor_estimate(centered.restrict(Schema.MEDIATOR_ONLY)).estimate,
        "combined": combined_estimate(centered).estimate,
    }


def ihdp_rep(covariates, treatment, setting: dict, seed: int) -> Dataset:
    """One semi-synthetic dataset: fresh b-vector, mediator and outcome."""
    rng = np.random.Generator(np.random.PCG64(seed))
    n, k = covariates.shape
    b = rng.choice(B_VALUES, size=k, p=B_PROBS)
    z = standard_normals(rng, 2 * n)
    m = setting["c"] * treatment + setting["sd_um"] * z[:n]
    y = setting["a"] * m + covariates @ b + z[n:]
    return Dataset(Schema.FULL, {"x": treatment, "y": y, "w": covariates, "m": m})


def ihdp_protocol(
    covariates: np.ndarray,
    treatment: np.ndarray,
    setting: str | dict = "S1",
    reps: int = 500,
    seed: int = 0,
    estimators: Sequence[str] = LINEAR_ESTIMATORS + IF_ESTIMATORS,
) -> McSummary:
    """Empirical MSE of every estimator on semi-synthetic outcomes.

    The covariates and treatment stay fixed; each replication draws a new
    ``b`` from {0, 1, 2, 3, 4}, then M ~ N(cX, sd_um^2) and
    Y ~ N(aM + W b, 1). Linear estimators run on centered data with all
    covariate columns as the confounder.
    """
    covariates = np.asarray(covariates, dtype=float)
    treatment = np.asarray(treatment, dtype=float)
    if not np.all((treatment == 0) | (treatment == 1)):
        raise SchemaError("treatment must be binary {0, 1}")
    if isinstance(setting, str):
        label = setting
        try:
            setting = IHDP_SETTINGS[setting.upper()]
        except KeyError:
            raise ConfigError(f"unknown setting {setting!r}; expected S1 or S2") from None
    else:
        label = "custom"
    truth = setting["a"] * setting["c"]
    values = {name: np.full(reps, np.nan) for name in estimators}
    for r in range(reps):
        data = ihdp_rep(covariates, treatment, setting, seed + r)
        for name, value in _evaluate(data, estimators, center=True).items():
            values[name][r] = value
    rows = [_summarize(name, covariates.shape[0], values[name], truth, seed, label=label)
            for name in estimators]
    return McSummary(rows, {(name, covariates.shape[0]): v for name, v in values.items()})


# ---------------------------------------------------------------------------
# Bootstrap evaluation of a fixed dataset
# ---------------------------------------------------------------------------


def _if_value(data: Dataset, variant: str, restrict_outcome: bool = True) -> float:
    return if_ate(data, variant, restrict_outcome).ate


SINGLE_ESTIMATORS: dict[str, Callable[[Dataset], float]] = {
    "backdoor": lambda d: backdoor_estimate(d).estimate,
    "frontdoor": lambda d: frontdoor_estimate(d).estimate,
    "combined": lambda d: combined_estimate(d).estimate,
    "if-restricted": lambda d: _if_value(d, "restricted"),
    "if-restricted-density": lambda d: _if_value(d, "restricted", restrict_outcome=False),
    "if-fulcher": lambda d: _if_value(d, "fulcher"),
    "if-frontdoor": lambda d: _if_value(d, "frontdoor"),
}
KNOWN_ESTIMATORS = tuple(SINGLE_ESTIMATORS) + PARTIAL_ESTIMATORS


def _evaluate(
    data: Dataset, estimators: Sequence[str], center: bool, split_rng=None, mle_seed: int = 0
) -> dict[str, float]:
    out = {}
    linear_data = data.centered() if center else data
    for name in estimators:
        if name in PARTIAL_ESTIMATORS:
            continue
        fn = SINGLE_ESTIMATORS[name]
        # IF nuisances carry intercepts; only the linear estimators need centering
        source = linear_data if name in LINEAR_ESTIMATORS else data
        try:
            out[name] = float(fn(source))
        except OverIdError as exc:
            log.debug("%s failed: %s", name, exc)
            out[name] = float("nan")
    partial = [name for name in estimators if name in PARTIAL_ESTIMATORS]
    if partial:
        order = split_rng.permutation(data.n) if split_rng is not None else np.arange(data.n)
        part = PartialData.split(linear_data.take(order), data.n // 2)
        fns = {
            "partial-backdoor": lambda: backdoor_estimate(part.confounder).estimate,
            "partial-frontdoor": lambda: frontdoor_estimate(part.mediator).estimate,
            "partial-mle": lambda: mle_fit(part, MleConfig(seed=mle_seed)).theta.e,
        }
        for name in partial:
            try:
                out[name] = float(fns[name]())
            except OverIdError as exc:
                log.debug("%s failed: %s", name, exc)
                out[name] = float("nan")
    return out


def bootstrap_eval(
    data: Dataset,
    estimators: Sequence[str] = LINEAR_ESTIMATORS,
    reps: int = 1000,
    seed: int = 0,
    truth: float | None = None,
    center: bool = False,
) -> McSummary:
    """Pairs-bootstrap variance (and MSE against ``truth``) per estimator.

    The partial-data estimators split each resample at random into a
    confounder half and a mediator half. Failed evaluations are excluded
    and counted in the row's ``failures``.
    """
    if reps < 2:
        raise ConfigError(f"bootstrap needs reps >= 2, got {reps}")
    unknown = [e for e in estimators if e not in KNOWN_ESTIMATORS]
    if unknown:
        raise ConfigError(f"unknown estimators {unknown}; known: {list(KNOWN_ESTIMATORS)}")
    rng = np.random.default_rng(seed)
    values = {name: np.full(reps, np.nan) for name in estimators}
    for b in range(reps):
        boot = data.take(rng.integers(0, data.n, size=data.n))
        for name, value in _evaluate(boot, estimators, center, rng, seed + b).items():
            values[name][b] = value
    ref = float("nan") if truth is None else float(truth)
    rows = []
    for name in estimators:
        row = _summarize(name, data.n, values[name], ref, seed, label="bootstrap")
        if truth is None:
            row = dataclasses.replace(row, mse=None, mse_se=None)
        rows.append(row)
    return McSummary(rows, {(name, data.n): v for name, v in values.items()})
