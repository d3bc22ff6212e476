"""Exception types shared across the toolkit."""


class PruneError(Exception):
    """Base class for every error raised by attrprune."""


class ConfigurationError(PruneError, ValueError):
    pass


class DimensionError(PruneError, ValueError):
    pass


class StateError(PruneError, RuntimeError):
    pass


class InputError(PruneError, ValueError):
    pass


class NumericError(PruneError, ArithmeticError):
    def __init__(self, message, components=None):
        super().__init__(message)
        self.components = dict(components or {})


class PlanMismatchError(PruneError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""
