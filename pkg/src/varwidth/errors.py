"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigurationError -> 2,
TrainingDivergenceError -> 3.
"""


class ConfigurationError(ValueError):
    """A rejected or inconsistent configuration (bad shapes, bad parameter ranges)."""


class TrainingDivergenceError(RuntimeError):
    """Training loss blew past the divergence threshold.

    Carries the loss trace recorded up to the aborting step.
    """

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace if trace is not None else []


class NonFiniteError(RuntimeError):
    """A NaN/Inf appeared where finite values are required; message names the location."""


class SlopeFitError(ValueError):
    """A power-law fit was refused (fewer than 3 usable points)."""
