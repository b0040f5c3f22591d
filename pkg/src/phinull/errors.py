"""Exception types shared across the laboratory."""


class MeshTagError(ValueError):
    """A grid function lives on a different mesh than the operation expects."""


class DirectionError(ValueError):
    """Direction index outside 1..n."""


class InfeasibleRegionError(ValueError):
    """Control region too small to host an interior observation box."""


class ScaleLimitError(ValueError):
    """Weight parameters push exp(s*phi) outside double-precision range."""

    def __init__(self, message, offending=None):
        super().__init__(message)
        self.offending = offending


class SolveError(RuntimeError):
    """A linear solve failed its residual contract or produced non-finite values."""


class DivergenceError(RuntimeError):
    """Picard iteration failed to contract even after escalating tau."""


class GateViolation(RuntimeError):
    """A parameter gate was violated while running in strict mode."""


class ConfigError(ValueError):
    """Malformed experiment configuration."""


class ResourceCapError(RuntimeError):
    """Configured problem exceeds the desk-scale cell budget."""
