"""Exception hierarchy shared by every module."""


class InterFormerError(Exception):
    """Base class for all package errors."""


class DimensionError(InterFormerError, ValueError):
    pass


class NonFiniteError(InterFormerError, ValueError):
    pass


class ContractError(InterFormerError, ValueError):
    pass


class ConfigError(InterFormerError, ValueError):
    pass


class SchemaError(InterFormerError, ValueError):
    pass


class IngestionError(InterFormerError, ValueError):
    pass


class ParseError(InterFormerError, ValueError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class DataError(InterFormerError, ValueError):
    pass


class DegenerateAttentionError(InterFormerError, ValueError):
    """A query row has no valid key to attend to."""


class UndefinedMetricError(InterFormerError, ValueError):
    pass


class OptimizerError(InterFormerError, ValueError):
    pass


class AssemblyError(InterFormerError, ValueError):
    """Parameters, checkpoint contents and config disagree."""


class CorruptionError(InterFormerError):
    pass


class VersionError(InterFormerError):
    pass
