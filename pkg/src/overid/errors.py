"""Exception hierarchy.

Every error carries an ``exit_code`` so the CLI can map failures onto its
documented status codes without a lookup table: 1 for configuration problems,
2 for schema mismatches, 3 for numerical failures.
"""


class OverIdError(Exception):
    exit_code = 3


class ConfigError(OverIdError):
    exit_code = 1


class SchemaError(OverIdError):
    exit_code = 2


class EmptyDatasetError(SchemaError):
    pass


class InvalidParamsError(OverIdError):
    pass


class CollinearityError(OverIdError):
    def __init__(self, condition_number: float, cap: float):
        self.condition_number = condition_number
        self.cap = cap
        super().__init__(
            f"regressor Gram matrix is near-singular: condition number "
            f"{condition_number:.3e} exceeds cap {cap:.1e}"
        )


class UnderdeterminedError(OverIdError):
    pass


class DegreesOfFreedomError(OverIdError):
    pass


class UndefinedIdealError(OverIdError):
    pass


class DivergentThresholdError(OverIdError):
    pass


class NoRealSolutionError(OverIdError):
    def __init__(self, abs_c: float, bound: float):
        self.abs_c = abs_c
        self.bound = bound
        super().__init__(
            f"no real b equalizes the variances: |c| = {abs_c:.6g} exceeds "
            f"the bound {bound:.6g}"
        )


class InvalidThetaError(OverIdError):
    pass


class ReparameterizationError(InvalidThetaError):
    pass


class InitializationError(OverIdError):
    pass


class SingularInformationError(OverIdError):
    pass


class PropensityDegenerateError(OverIdError):
    pass
