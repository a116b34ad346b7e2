"""Exception types raised across the package."""


class EvlabError(Exception):
    """Base class for all package errors."""


class ConfigError(EvlabError, ValueError):
    """A configuration value is out of its allowed range."""


class ParseError(EvlabError, ValueError):
    """A file could not be parsed. ``line`` is 1-based when known."""

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f"{':' if where else 'line '}{line}"
        super().__init__(f"{where}: {message}" if where else message)


class ModelFormatError(EvlabError, ValueError):
    """A serialized model is truncated, of the wrong kind, or of an unknown version."""


class DimensionError(EvlabError, ValueError):
    """Input width does not match the fitted feature space."""


class TrainingError(EvlabError, ValueError):
    pass


class AttributionError(EvlabError, ValueError):
    pass


class SelectionError(EvlabError, ValueError):
    pass


class EvaluationError(EvlabError, ValueError):
    pass
