class ConfigError(ValueError):
    """Invalid configuration, arguments or input shapes."""


class ParseError(ConfigError):
    """Malformed input file. Carries the file path and 1-based line number."""

    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        super().__init__(f"{self.path}:{line}: {message}")
