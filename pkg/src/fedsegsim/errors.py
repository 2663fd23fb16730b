"""Exception taxonomy shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(ValueError):
    """A caller violated an operation's preconditions."""


class FormatError(ValueError):
    """A serialized payload is corrupt or mismatches its manifest."""


class NumericFaultError(FloatingPointError):
    """A forward value became NaN/Inf, or a norm degenerated to zero."""


class TapeError(RuntimeError):
    """Gradient tape misuse (backward on a consumed or disconnected node)."""


class DegenerateExemplarError(ValueError):
    """An exemplar has no active pixels left after pooling/masking."""


class EmptyPrototypeError(ValueError):
    """No class has any exemplar, so no prototype can be built."""


class UndefinedMetricError(ValueError):
    """A metric has no defined value (e.g. empty confusion matrix)."""


class SetupError(RuntimeError):
    """Federation setup could not complete (e.g. a client without exemplars)."""


class ConfigError(ValueError):
    """Experiment configuration is invalid; message is line-anchored when possible."""
