"""Effect estimation in the over-identified confounder-mediator graph."""

from overid.errors import OverIdError
from overid.scm import (
    DEFAULT_PARAMS,
    PRESETS,
    CovMatrix,
    Dataset,
    Schema,
    ScmParams,
    implied_covariance,
    restrict,
    sample,
    true_effect,
)

__all__ = [
    "DEFAULT_PARAMS",
    "PRESETS",
    "CovMatrix",
    "Dataset",
    "OverIdError",
    "Schema",
    "ScmParams",
    "implied_covariance",
    "restrict",
    "sample",
    "true_effect",
]
