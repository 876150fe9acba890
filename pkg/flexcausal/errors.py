"""Error taxonomy shared by every flexcausal module.

All errors derive from `RuntimeError`, so callers that only care about failure can keep catching `RuntimeError`.
The `category` attribute tells the command line which exit code to use.
"""

EXIT_CODES = {
    'usage': 1,
    'io': 2,
    'parse': 3,
    'numeric': 4,
}


class FlexCausalError(RuntimeError):
    """Base class of the library errors.

    Attributes:
        category (str): One of `usage`, `io`, `parse` or `numeric`.
    """
    category = 'usage'

    @property
    def exit_code(self):
        return EXIT_CODES[self.category]


class ConfigError(FlexCausalError):
    category = 'usage'


class ReservedMethod(FlexCausalError, NotImplementedError):
    category = 'usage'


class MalformedRow(FlexCausalError):
    category = 'parse'


class DuplicateObservation(FlexCausalError):
    category = 'parse'


class InconsistentTreatment(FlexCausalError):
    category = 'parse'


class UnknownLevel(FlexCausalError):
    category = 'usage'


class MissingPropensity(FlexCausalError):
    category = 'usage'


class ParseError(FlexCausalError):
    """Raised when a tree line or forest file can not be parsed.

    Attributes:
        offset (int): Byte offset of the offending token inside the parsed text.
        reason (str): Short description of the problem.
    """
    category = 'parse'

    def __init__(self, offset, reason):
        self.offset = offset
        self.reason = reason
        super().__init__(f'parse error at byte {offset}: {reason}')


class DimensionMismatch(FlexCausalError):
    category = 'usage'


class EmptyChild(FlexCausalError):
    category = 'numeric'


class NotPrunable(FlexCausalError):
    category = 'usage'


class DegenerateOutcome(FlexCausalError):
    category = 'numeric'


class NoTreatedRows(FlexCausalError):
    category = 'numeric'


class SingleClass(FlexCausalError):
    category = 'numeric'


class EmptySubgroup(FlexCausalError):
    category = 'numeric'


class EmptyCell(FlexCausalError):
    category = 'numeric'


class LengthMismatch(FlexCausalError):
    category = 'usage'


class ZeroBaselineLength(FlexCausalError):
    category = 'numeric'


class SeparationWarning(UserWarning):
    """Emitted when a logistic coefficient grows past the separation threshold."""


__all__ = [
    'EXIT_CODES', 'FlexCausalError', 'ConfigError', 'ReservedMethod', 'MalformedRow', 'DuplicateObservation',
    'InconsistentTreatment', 'UnknownLevel', 'MissingPropensity', 'ParseError', 'DimensionMismatch', 'EmptyChild',
    'NotPrunable', 'DegenerateOutcome', 'NoTreatedRows', 'SingleClass', 'EmptySubgroup', 'EmptyCell',
    'LengthMismatch', 'ZeroBaselineLength', 'SeparationWarning',
]
