"""Exception types shared across the package."""


class EmratesError(Exception):
    """Base class for all package-specific errors."""


class EvaluationError(EmratesError):
    """A coefficient or test function returned a non-finite value."""


class EllipticityError(EmratesError):
    """A diffusion matrix violated its declared ellipticity bounds."""


class SimulationError(EmratesError):
    """A scheme recursion produced a non-finite state.

    Carries the step index and the offending state so the failure can be
    located without re-running.
    """

    def __init__(self, message, step=None, state=None):
        super().__init__(message)
        self.step = step
        self.state = state


class DiscretizationError(EmratesError):
    """A PDE solve failed its residual check."""


class ConfigError(EmratesError):
    """An experiment config file could not be parsed or is inconsistent."""
