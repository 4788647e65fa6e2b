"""Exception classes shared across the package.

Each class carries the process exit code the CLI maps it to.
"""


class RefAnimateError(Exception):
    exit_code = 1


class InvalidArgument(RefAnimateError, ValueError):
    exit_code = 3


class ConfigError(RefAnimateError):
    exit_code = 4

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class DataIOError(RefAnimateError, OSError):
    exit_code = 5

    def __init__(self, path, message="I/O failure"):
        self.path = str(path)
        super().__init__(f"{message}: {self.path}")


class PreconditionError(RefAnimateError):
    exit_code = 6


EXIT_CODES = {
    "ok": 0,
    "error": RefAnimateError.exit_code,
    "usage": 2,
    "invalid-argument": InvalidArgument.exit_code,
    "config-error": ConfigError.exit_code,
    "io-error": DataIOError.exit_code,
    "precondition-error": PreconditionError.exit_code,
}
