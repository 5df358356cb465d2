class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending field."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


class DivergenceError(ArithmeticError):
    """A loss term went non-finite."""

    def __init__(self, message: str, components: dict | None = None):
        self.components = components or {}
        super().__init__(message)
