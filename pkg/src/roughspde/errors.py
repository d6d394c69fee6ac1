"""Exception types shared across the package."""


class RoughSpdeError(Exception):
    """Base class for library errors."""


class DomainError(RoughSpdeError, ValueError):
    """An argument lies outside the domain of the operation."""


class AliasingError(DomainError):
    """A collocation grid is too small for the requested modes."""


class NotControlledError(RoughSpdeError):
    """A path failed the remainder sanity cap of a controlled-path check."""


class BlowUpError(RoughSpdeError):
    """A fixed-point solve failed to contract even on the smallest window."""


class NumericalOnlyBracket(RoughSpdeError):
    """A Lie bracket has no closed form in the representable family."""


class ConfigError(RoughSpdeError, ValueError):
    """An experiment configuration failed validation."""
