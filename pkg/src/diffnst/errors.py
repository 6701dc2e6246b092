"""Exception types shared across the package."""


class DiffnstError(Exception):
    """Base class for all package errors."""


class ConfigurationError(DiffnstError, ValueError):
    """A config value or input shape is inconsistent with the model setup."""


class HookRegistrationError(DiffnstError, ValueError):
    """An attention hook references an unknown attention site."""


class TraceCompatibilityError(DiffnstError, ValueError):
    """A recorded trace does not match the backbone or step grid it is replayed on."""


class TraceIncompleteError(DiffnstError, LookupError):
    """A required (site, step) entry is missing from an attention trace."""


class ResolutionMismatchError(DiffnstError, ValueError):
    """Content and style token grids disagree at an attention site."""


class EncoderRegistryError(DiffnstError, ValueError):
    """Style encoder registration or lookup failed."""


class EncoderMixingError(DiffnstError, ValueError):
    """Style codes from different encoders were combined in one computation."""


class BatchConstructionError(DiffnstError, ValueError):
    """A stylization batch lacks the pairings a loss term requires."""


class NonFiniteLossError(DiffnstError, ArithmeticError):
    """A loss term evaluated to NaN or infinity."""

    def __init__(self, term: str, value: float):
        super().__init__(f"loss term {term!r} is non-finite ({value})")
        self.term = term
        self.value = value
