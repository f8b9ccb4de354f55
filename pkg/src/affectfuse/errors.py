"""Exception types shared across the package.

The CLI maps these onto exit codes: ValidationError -> 1, StructuralError
(and subclasses) -> 2, anything else -> 3.
"""


class ValidationError(ValueError):
    """An argument or value violates a stated precondition."""


class StructuralError(RuntimeError):
    """Data is inconsistent with its own declaration (shapes, rosters, alignment)."""


class LoadError(StructuralError):
    """A referenced file or blob is missing or unreadable."""


class MappingError(StructuralError):
    """A channel name has no position in the electrode layout."""
