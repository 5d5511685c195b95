"""
Exception hierarchy for the TRG toolkit
"""


class TrgError(Exception):
    """Base class for every error raised by the toolkit"""


class DimensionError(TrgError, ValueError):
    """Shapes do not agree"""


class ConfigurationError(TrgError, ValueError):
    """A configuration value violates a precondition"""


class ConvConfigError(ConfigurationError):
    """Unsupported kernel / padding / stride combination"""


class GrammarError(ConfigurationError):
    """Event grammar is inconsistent"""


class RunConfigError(ConfigurationError):
    """Run configuration file is invalid"""


class NumericError(TrgError, ArithmeticError):
    """An op produced NaN or Inf"""


class ContractError(TrgError):
    """An API was called outside its contract"""


class DegenerateStatisticsError(TrgError):
    """Batch statistics cannot be computed from a single element"""


class LabelError(TrgError, ValueError):
    """Label out of range or not binary"""


class SamplingError(TrgError, ValueError):
    """Requested clip does not fit in the raw sequence"""


class DatasetFormatError(TrgError):
    """Base class for TRGD file problems"""


class MagicError(DatasetFormatError):
    pass


class VersionError(DatasetFormatError):
    pass


class TruncatedDataError(DatasetFormatError):
    def __init__(self, expected: int, actual: int, what: str = "payload"):
        super().__init__(f"truncated {what}: expected {expected} bytes, found {actual}")
        self.expected = expected
        self.actual = actual


class TrailingDataError(DatasetFormatError):
    def __init__(self, expected: int, actual: int):
        super().__init__(f"unexpected trailing bytes: expected {expected} bytes, found {actual}")
        self.expected = expected
        self.actual = actual


class CheckpointFormatError(TrgError):
    """TRGW checkpoint cannot be parsed or does not match the model"""


class DivergenceError(TrgError):
    def __init__(self, epoch: int, step: int, loss: float, detail: str = ""):
        message = f"training diverged at epoch {epoch}, step {step} (loss={loss})"
        if detail:
            message += f": {detail}"
        super().__init__(message)
        self.epoch = epoch
        self.step = step
        self.loss = loss


class MetricError(TrgError, ValueError):
    """Metric is undefined for the given input"""


class CsvParseError(TrgError, ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class InspectionError(TrgError, ValueError):
    """Requested inspection target does not exist"""
