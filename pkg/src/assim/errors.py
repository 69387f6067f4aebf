"""Exception types shared across the package."""


class AssimError(Exception):
    """Base class for all package-specific failures."""


class FactorizationError(AssimError):
    """Covariance could not be Cholesky-factorized even after the jitter ladder."""


class ModelBlowupError(AssimError):
    """State trajectory left the finite range (names the offending step)."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite state at step {step}")


class DegenerateEnsembleError(AssimError):
    """Particle or ensemble update lost all usable members."""


class TargetDropError(AssimError):
    """Too many per-sample filter targets failed to build."""


class StepFailureError(AssimError):
    """Every iteration of a variational update was unusable."""


class StuckChainError(AssimError):
    """MCMC chain accepted nothing over the configured patience window."""


class ConfigError(AssimError):
    """Invalid run configuration (CLI exit code 2)."""
