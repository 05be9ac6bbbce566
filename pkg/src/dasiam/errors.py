"""Exception hierarchy shared by all subpackages."""


class DasiamError(Exception):
    """Base class for every error raised by the package."""


class DimensionError(DasiamError, ValueError):
    pass


class ConfigurationError(DasiamError, ValueError):
    pass


class ContractError(DasiamError, RuntimeError):
    pass


class PairingError(DasiamError, ValueError):
    pass


class GenerationError(DasiamError, RuntimeError):
    pass


class SpecError(DasiamError, ValueError):
    pass


class ParseError(DasiamError, ValueError):
    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


class IntegrityError(DasiamError, ValueError):
    pass


class FormatError(DasiamError, ValueError):
    pass


class ProtocolError(DasiamError, ValueError):
    pass


class ComparisonError(DasiamError, ValueError):
    pass


class EstimationError(DasiamError, ValueError):
    pass


class PoolingError(DasiamError, ValueError):
    pass


class InitializationError(DasiamError, ValueError):
    pass


class TrainingError(DasiamError, RuntimeError):
    pass
