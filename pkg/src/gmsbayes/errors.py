"""Exception types shared across the package."""


class NumericalFailure(RuntimeError):
    """A factorization, eigensolve or similar numerical step failed."""


class IllConditionedDesign(NumericalFailure):
    """Collocation design matrix is rank deficient or too ill conditioned."""


class RankDeficientSensitivity(NumericalFailure):
    """Sensitivity matrix does not have full column rank."""


class ConfigError(ValueError):
    """Experiment configuration is invalid or inconsistent."""
