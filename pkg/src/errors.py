"""
Error Types
Exception hierarchy shared by every module, with CLI exit-code mapping
"""
from src.config import EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC


class XAIGuardError(Exception):
    """Base class for all toolkit errors"""
    exit_code = 1


class ConfigError(XAIGuardError):
    """Invalid run configuration, attack configuration or architecture spec"""
    exit_code = EXIT_CONFIG


class DataError(XAIGuardError):
    """Dataset parse failures and empty or malformed inputs"""
    exit_code = EXIT_DATA


class SnapshotError(DataError):
    """Weight snapshot could not be decoded or does not match its architecture"""


class NumericError(XAIGuardError):
    """Non-finite values or training divergence"""
    exit_code = EXIT_NUMERIC


class ShapeError(NumericError, ValueError):
    """Operand shapes are incompatible"""


class TapeError(NumericError):
    """Misuse of the autodiff tape"""


def exit_code_for(exc: BaseException) -> int:
    """Map an exception to the CLI exit code"""
    if isinstance(exc, XAIGuardError):
        return exc.exit_code
    return 1
