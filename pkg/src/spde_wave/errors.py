class NumericalInstability(FloatingPointError):
    """A trajectory or transform produced NaN/Inf."""

    def __init__(self, message, step=None, mode=None):
        super().__init__(message)
        self.step = step
        self.mode = mode


class IndefiniteCovariance(ValueError):
    pass


class ConfigError(ValueError):
    """Invalid experiment or CLI configuration; ``field`` names the offender."""

    def __init__(self, message, field=None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field
