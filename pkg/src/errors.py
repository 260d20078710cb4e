class MDFError(Exception):
    """Base class for every error raised by this package"""


class DimensionError(MDFError, ValueError):
    pass


class ConfigError(MDFError, ValueError):
    pass


class NumericError(MDFError, ArithmeticError):
    pass


class StaleRecordError(MDFError, RuntimeError):
    pass


class ManifestError(MDFError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class SplitError(MDFError, ValueError):
    pass


class CheckpointError(MDFError):
    pass


class StageError(MDFError):
    """A pipeline stage was started before the stages it depends on"""


class DivergenceError(MDFError, ArithmeticError):
    pass


class MaskError(MDFError, ValueError):
    pass
