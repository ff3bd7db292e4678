"""Exception hierarchy shared across the package.

Each class carries the CLI exit code it maps to.
"""


class SpherevidError(Exception):
    exit_code = 1


class ShapeError(SpherevidError, ValueError):
    """Operand extents are incompatible."""


class DomainError(SpherevidError, ValueError):
    """A value lies outside the domain of the requested operation."""


class DegenerateInputError(DomainError):
    """Input that makes an angle undefined, e.g. a zero-norm feature row."""


class ConfigError(SpherevidError, ValueError):
    """Invalid configuration, preset or channel plan."""


class InputError(SpherevidError, ValueError):
    """Empty or malformed data passed to a pipeline stage."""


class CompatibilityError(SpherevidError):
    """Checkpoint does not match the active configuration."""


class FormatError(SpherevidError, ValueError):
    """A STEN file or checkpoint manifest failed to parse."""

    exit_code = 2


class NumericError(SpherevidError, ArithmeticError):
    """NaN or Inf where finite numbers are required."""

    exit_code = 3


class VerificationError(SpherevidError):
    """A gradient check exceeded its tolerance."""

    exit_code = 4
