class CosmosError(Exception):
    """Base class for errors raised by cosmosfl."""


class ParameterError(CosmosError, ValueError):
    pass


class ParseError(CosmosError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class ValidationError(CosmosError, ValueError):
    pass


class EmptyDatasetError(CosmosError, ValueError):
    pass


class ConfigError(CosmosError, ValueError):
    pass
