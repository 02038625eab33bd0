"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class NhtoriError(Exception):
    exit_code = 1
    reason = "error"


class ConfigError(NhtoriError, ValueError):
    exit_code = 2
    reason = "config"


class DependencyError(NhtoriError):
    """A required upstream artifact (file or lower-order coefficient) is missing."""

    exit_code = 2
    reason = "dependency"


class CertificationError(NhtoriError):
    exit_code = 3
    reason = "certification"


class NonHyperbolicError(CertificationError):
    reason = "non_hyperbolic"


class DivergenceError(CertificationError):
    reason = "divergence"


class BlowUpError(NhtoriError, FloatingPointError):
    """Integration left the admissible region; ``exit_time`` is the first bad time."""

    exit_code = 4
    reason = "blow_up"

    def __init__(self, message, exit_time=None):
        super().__init__(message)
        self.exit_time = exit_time
