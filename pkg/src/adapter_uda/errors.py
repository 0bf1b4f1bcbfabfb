"""Exception hierarchy shared by every module of the package."""


class AdapterUDAError(Exception):
    """Base class for all package errors."""


class ShapeError(AdapterUDAError, ValueError):
    pass


class ContractError(AdapterUDAError, ValueError):
    """A caller broke an operation's precondition."""


class ConfigError(AdapterUDAError, ValueError):
    pass


class DataError(AdapterUDAError, ValueError):
    pass


class EmptyLossError(AdapterUDAError, ValueError):
    pass


class NonFiniteError(AdapterUDAError, FloatingPointError):
    pass


class FreezingViolation(AdapterUDAError, RuntimeError):
    """A frozen tensor was about to be (or was) updated."""


class SchemaError(AdapterUDAError, ValueError):
    pass


class FingerprintMismatch(AdapterUDAError, ValueError):
    def __init__(self, expected: str, actual: str):
        super().__init__(
            f"adapter bundle was trained against backbone {expected}, "
            f"but the supplied backbone has fingerprint {actual}"
        )
        self.expected = expected
        self.actual = actual


class ChecksumError(AdapterUDAError, ValueError):
    pass
