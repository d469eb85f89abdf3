"""Linear Gaussian SCM for the confounder-mediator graph.

    w = u_w
    x = d*w + u_x
    m = c*x + u_m
    y = a*m + b*w + u_y

All noises are independent, zero-mean Gaussians. The causal effect of X on Y
is ``a*c``.

Random numbers
--------------
Samples are generated with ``numpy.random.Generator(PCG64(seed))``. Standard
normals come from the inverse CDF (``scipy.special.ndtri``) applied to
open-interval uniforms ``(k + 0.5) / 2**53`` with ``k`` drawn by
``Generator.integers(0, 2**53)``. A single call draws ``4*n`` integers and
assigns them, in order, to the W, X, M and Y noises, so any implementation
that reproduces PCG64 and this mapping reproduces the datasets bit for bit.
Monte Carlo replication ``r`` of a run with base seed ``s`` uses seed
``s + r``.
"""

from __future__ import annotations

import dataclasses
import enum
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from overid.errors import EmptyDatasetError, InvalidParamsError, SchemaError

VARIABLES = ("X", "Y", "W", "M")
_TWO_53 = 2**53


@dataclass(frozen=True)
class ScmParams:
    """Structural coefficients and noise variances.

    ``a``: M -> Y, ``b``: W -> Y, ``c``: X -> M, ``d``: W -> X.
    """

    a: float
    b: float
    c: float
    d: float
    var_uw: float = 1.0
    var_ux: float = 1.0
    var_um: float = 1.0
    var_uy: float = 1.0

    def __post_init__(self):
        for name in ("a", "b", "c", "d", *self.variance_names):
            value = float(getattr(self, name))
            if not np.isfinite(value):
                raise InvalidParamsError(f"{name} must be finite, got {value}")
            object.__setattr__(self, name, value)
        for name in self.variance_names:
            if getattr(self, name) <= 0.0:
                raise InvalidParamsError(
                    f"{name} must be strictly positive, got {getattr(self, name)}"
                )

    variance_names = ("var_uw", "var_ux", "var_um", "var_uy")

    @property
    def var_x(self) -> float:
        return self.d**2 * self.var_uw + self.var_ux

    @property
    def true_effect(self) -> float:
        return self.a * self.c

    def replace(self, **changes) -> "ScmParams":
        return dataclasses.replace(self, **changes)

    def as_dict(self) -> dict[str, float]:
        return dataclasses.asdict(self)


DEFAULT_PARAMS = ScmParams(a=10.0, b=4.0, c=5.0, d=5.0)

# Named parameter sets used by the experiments and the CLI.
PRESETS: dict[str, ScmParams] = {
    "default": DEFAULT_PARAMS,
    # backdoor beats frontdoor
    "fig3a": DEFAULT_PARAMS.replace(var_ux=0.05, var_um=0.05),
    # frontdoor beats backdoor
    "fig3b": DEFAULT_PARAMS.replace(var_uw=2.0, var_ux=0.01, var_um=0.1),
    # partial-data mixes whose optimal confounder fraction is interior
    "f2-case1": DEFAULT_PARAMS.replace(b=3.7, var_um=0.64),
    "f2-case2": DEFAULT_PARAMS.replace(b=3.955, var_um=0.64),
    "f2-case3": DEFAULT_PARAMS.replace(b=4.3, var_um=0.64),
}


def true_effect(params: ScmParams) -> float:
    return params.a * params.c


def draw_prior_params(
    rng: np.random.Generator, min_abs: float = 0.05, max_tries: int = 10_000
) -> tuple[ScmParams, int]:
    """Draw parameters from the uniform prior used for the MAPE study.

    Coefficients are Unif[-10, 10] and variances Unif[0.01, 2]. Draws with
    ``|a|`` or ``|c|`` below ``min_abs`` are rejected; the number of
    rejections is returned alongside the accepted draw.
    """
    rejected = 0
    for _ in range(max_tries):
        a, b, c, d = rng.uniform(-10.0, 10.0, size=4)
        variances = rng.uniform(0.01, 2.0, size=4)
        if abs(a) < min_abs or abs(c) < min_abs:
            rejected += 1
            continue
        return ScmParams(a, b, c, d, *variances), rejected
    raise RuntimeError("prior rejection sampling did not terminate")


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


class Schema(enum.Enum):
    FULL = "full"
    CONFOUNDER_ONLY = "confounder"
    MEDIATOR_ONLY = "mediator"

    @property
    def columns(self) -> tuple[str, ...]:
        return _SCHEMA_COLUMNS[self]

    @classmethod
    def parse(cls, value: "str | Schema") -> "Schema":
        if isinstance(value, Schema):
            return value
        key = str(value).strip().lower().replace("_", "-")
        aliases = {
            "full": cls.FULL,
            "confounder": cls.CONFOUNDER_ONLY,
            "confounder-only": cls.CONFOUNDER_ONLY,
            "mediator": cls.MEDIATOR_ONLY,
            "mediator-only": cls.MEDIATOR_ONLY,
        }
        try:
            return aliases[key]
        except KeyError:
            raise SchemaError(f"unknown schema {value!r}") from None


_SCHEMA_COLUMNS = {
    Schema.FULL: ("x", "y", "w", "m"),
    Schema.CONFOUNDER_ONLY: ("x", "y", "w"),
    Schema.MEDIATOR_ONLY: ("x", "y", "m"),
}


@dataclass(frozen=True)
class Dataset:
    """Columnar samples.

    ``w`` may be two-dimensional (n, k) for multivariate confounders; all
    other columns are one-dimensional.
    """

    schema: Schema
    columns: Mapping[str, np.ndarray] = field(repr=False)

    def __post_init__(self):
        schema = Schema.parse(self.schema)
        object.__setattr__(self, "schema", schema)
        expected = set(schema.columns)
        missing = expected - set(self.columns)
        if missing:
            raise SchemaError(
                f"schema {schema.value!r} requires columns {sorted(expected)}; "
                f"missing {sorted(missing)}"
            )
        extra = set(self.columns) - expected
        if extra:
            raise SchemaError(
                f"schema {schema.value!r} does not allow columns {sorted(extra)}"
            )
        cols = {}
        for name in schema.columns:
            arr = np.asarray(self.columns[name], dtype=float)
            if arr.ndim == 0 or arr.ndim > 2 or (arr.ndim == 2 and name != "w"):
                raise SchemaError(f"column {name!r} has invalid shape {arr.shape}")
            arr.setflags(write=False)
            cols[name] = arr
        lengths = {len(v) for v in cols.values()}
        if len(lengths) != 1:
            raise SchemaError(f"columns have unequal lengths {sorted(lengths)}")
        if lengths.pop() == 0:
            raise EmptyDatasetError("dataset has no rows")
        object.__setattr__(self, "columns", cols)

    @property
    def n(self) -> int:
        return len(self.columns["x"])

    def __len__(self) -> int:
        return self.n

    def __getattr__(self, name):
        if name in ("x", "y", "w", "m"):
            try:
                return self.columns[name]
            except KeyError:
                raise SchemaError(
                    f"column {name!r} is not present in a {self.schema.value!r} dataset"
                ) from None
        raise AttributeError(name)

    def has(self, name: str) -> bool:
        return name in self.columns

    @property
    def w_matrix(self) -> np.ndarray:
        w = self.w
        return w[:, None] if w.ndim == 1 else w

    def restrict(self, schema: "Schema | str") -> "Dataset":
        return restrict(self, schema)

    def take(self, index: np.ndarray) -> "Dataset":
        return Dataset(self.schema, {k: v[index] for k, v in self.columns.items()})

    def centered(self) -> "Dataset":
        """Subtract the empirical column means.

        The variance formulas assume zero-mean data, so after centering they
        hold only approximately.
        """
        return Dataset(
            self.schema, {k: v - v.mean(axis=0) for k, v in self.columns.items()}
        )


def restrict(data: Dataset, schema: "Schema | str") -> Dataset:
    schema = Schema.parse(schema)
    missing = [c for c in schema.columns if not data.has(c)]
    if missing:
        raise SchemaError(
            f"cannot restrict a {data.schema.value!r} dataset to {schema.value!r}: "
            f"missing {missing}"
        )
    return Dataset(schema, {c: data.columns[c] for c in schema.columns})


# ---------------------------------------------------------------------------
# Covariance
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CovMatrix:
    order: tuple[str, ...]
    entries: np.ndarray = field(repr=False)

    def __post_init__(self):
        entries = np.array(self.entries, dtype=float)
        k = len(self.order)
        if entries.shape != (k, k):
            raise ValueError(f"expected a {k}x{k} matrix, got {entries.shape}")
        if not np.allclose(entries, entries.T, rtol=0.0, atol=1e-12):
            raise ValueError("covariance matrix is not symmetric")
        entries.setflags(write=False)
        object.__setattr__(self, "order", tuple(self.order))
        object.__setattr__(self, "entries", entries)

    def __getitem__(self, pair: tuple[str, str]) -> float:
        i, j = (self.order.index(_canon(v)) for v in pair)
        return float(self.entries[i, j])

    def sub(self, order: Sequence[str]) -> "CovMatrix":
        idx = [self.order.index(_canon(v)) for v in order]
        return CovMatrix(tuple(_canon(v) for v in order), self.entries[np.ix_(idx, idx)])

    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.entries)


def _canon(name: str) -> str:
    key = str(name).upper()
    if key not in VARIABLES:
        raise SchemaError(f"unknown variable {name!r}; expected one of {VARIABLES}")
    return key


def _full_covariance(p: ScmParams) -> np.ndarray:
    a, b, c, d = p.a, p.b, p.c, p.d
    vw = p.var_uw
    vx = d * d * vw + p.var_ux
    xw = d * vw
    xm = c * vx
    wm = c * xw
    mm = c * c * vx + p.var_um
    # y = a*m + b*w + u_y
    xy = a * xm + b * xw
    wy = a * wm + b * vw
    my = a * mm + b * wm
    yy = a * a * mm + b * b * vw + 2.0 * a * b * wm + p.var_uy
    return np.array(
        [
            [vx, xy, xw, xm],
            [xy, yy, wy, my],
            [xw, wy, vw, wm],
            [xm, my, wm, mm],
        ]
    )


def implied_covariance(
    params: ScmParams, order: Sequence[str] = VARIABLES
) -> CovMatrix:
    """Exact population covariance of the requested variables."""
    names = tuple(_canon(v) for v in order)
    full = _full_covariance(params)
    idx = [VARIABLES.index(v) for v in names]
    return CovMatrix(names, full[np.ix_(idx, idx)])


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def standard_normals(rng: np.random.Generator, size: int) -> np.ndarray:
    k = rng.integers(0, _TWO_53, size=size, dtype=np.int64)
    return ndtri((k + 0.5) / _TWO_53)


def _noises(n: int, seed: int) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(seed))
    return standard_normals(rng, 4 * n).reshape(4, n)


def _propagate(p: ScmParams, z: np.ndarray) -> tuple[np.ndarray, ...]:
    # z[..., 0..3, :] are standard normals for W, X, M, Y in that order
    w = np.sqrt(p.var_uw) * z[..., 0, :]
    x = p.d * w + np.sqrt(p.var_ux) * z[..., 1, :]
    m = p.c * x + np.sqrt(p.var_um) * z[..., 2, :]
    y = p.a * m + p.b * w + np.sqrt(p.var_uy) * z[..., 3, :]
    return x, y, w, m


def sample(params: ScmParams, n: int, seed: int) -> Dataset:
    """Draw ``n`` i.i.d. rows of (x, y, w, m); deterministic in ``seed``."""
    if n < 1:
        raise EmptyDatasetError(f"n must be at least 1, got {n}")
    x, y, w, m = _propagate(params, _noises(n, seed))
    return Dataset(Schema.FULL, {"x": x, "y": y, "w": w, "m": m})


def sample_batch(
    params: ScmParams, n: int, seeds: Sequence[int]
) -> dict[str, np.ndarray]:
    """Stack of replications, row ``r`` identical to ``sample(params, n, seeds[r])``.

    Returns arrays of shape (len(seeds), n) keyed by x, y, w, m.
    """
    if n < 1:
        raise EmptyDatasetError(f"n must be at least 1, got {n}")
    z = np.stack([_noises(n, int(s)) for s in seeds])
    x, y, w, m = _propagate(params, z)
    return {"x": x, "y": y, "w": w, "m": m}


def sample_binary_treatment(
    params: ScmParams, n: int, seed: int, threshold: float = 0.0
) -> Dataset:
    """Like :func:`sample` but with ``x = 1{d*w + u_x > threshold}``.

    M and Y are generated from the binary X, so the effect of switching X
    from 0 to 1 is still ``a*c``.
    """
    if n < 1:
        raise EmptyDatasetError(f"n must be at least 1, got {n}")
    z = _noises(n, seed)
    p = params
    w = np.sqrt(p.var_uw) * z[0]
    x = (p.d * w + np.sqrt(p.var_ux) * z[1] > threshold).astype(float)
    m = p.c * x + np.sqrt(p.var_um) * z[2]
    y = p.a * m + p.b * w + np.sqrt(p.var_uy) * z[3]
    return Dataset(Schema.FULL, {"x": x, "y": y, "w": w, "m": m})


def sample_intervention(params: ScmParams, x_value: float, n: int, seed: int) -> Dataset:
    """Rows from the mutilated graph where X is set to ``x_value``."""
    if n < 1:
        raise EmptyDatasetError(f"n must be at least 1, got {n}")
    z = _noises(n, seed)
    p = params
    w = np.sqrt(p.var_uw) * z[0]
    x = np.full(n, float(x_value))
    m = p.c * x + np.sqrt(p.var_um) * z[2]
    y = p.a * m + p.b * w + np.sqrt(p.var_uy) * z[3]
    return Dataset(Schema.FULL, {"x": x, "y": y, "w": w, "m": m})
