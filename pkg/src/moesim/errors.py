"""Exception hierarchy for moesim.

Every error raised on a documented failure path derives from MoesimError so
callers (and the CLI) can distinguish domain failures from programming bugs.
"""


class MoesimError(Exception):
    """Base class for all moesim domain errors."""


class TraceParseError(MoesimError):
    """A trace file line could not be parsed; message names the line."""


class ShapeMismatchError(MoesimError):
    """A vector/matrix dimension does not match the declared model shape."""


class NormalizationError(MoesimError):
    """A score vector does not sum to one within tolerance."""


class EmptyPhaseError(MoesimError):
    """An operation requested a phase that contains no tokens."""


class TooShortSequenceError(MoesimError):
    """Decode sequence too short for the requested window analysis."""


class PredictionMissingError(MoesimError):
    """A token record lacks predicted scores required by the operation."""


class GeneratorTargetError(MoesimError):
    """Requested trace statistics are unreachable for the configuration."""


class BudgetError(MoesimError):
    """The expert cache budget cannot satisfy structural minimums."""


class ConfigError(MoesimError):
    """Invalid experiment or CLI configuration."""
