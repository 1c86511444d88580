"""Exception types raised across the package."""


class StreetKrigError(Exception):
    """Base class for all package errors."""


class DimensionError(StreetKrigError, ValueError):
    pass


class DomainError(StreetKrigError, ValueError):
    """A numeric argument falls outside the domain of an operation."""


class ContractError(StreetKrigError, ValueError):
    pass


class StaleTapeError(StreetKrigError, RuntimeError):
    """Backward was requested on a tensor whose tape has been cleared."""


class ParameterError(StreetKrigError, ValueError):
    pass


class NodeReferenceError(StreetKrigError, KeyError):
    """Unknown node identifier."""

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class IngestionError(StreetKrigError, ValueError):
    pass


class ParseError(StreetKrigError, ValueError):
    pass


class SplitError(StreetKrigError, ValueError):
    pass


class SamplingError(StreetKrigError, ValueError):
    pass


class UndefinedLossError(StreetKrigError, ValueError):
    pass


class UndefinedMetricError(StreetKrigError, ValueError):
    pass


class ConfigError(StreetKrigError, ValueError):
    pass


class SchemaError(StreetKrigError, ValueError):
    pass


class DivergenceError(StreetKrigError, RuntimeError):
    pass
