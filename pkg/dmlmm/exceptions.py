"""
Error types shared by every app.

Each error carries a stable code so the command line can report failures as
machine-readable JSON and map them onto exit codes.
"""
from enum import Enum
from typing import Any, Dict, Optional


class ErrorCode(str, Enum):
    CONTRACT_VIOLATION = 'contract_violation'
    INVALID_CONFIG = 'invalid_config'
    INVALID_INPUT = 'invalid_input'
    UNKNOWN_SUBJECT = 'unknown_subject'
    NO_HOLDOUTS = 'no_holdouts'
    UNKNOWN_GENERATOR = 'unknown_generator'
    NUMERICAL_FAILURE = 'numerical_failure'


EXIT_CODES = {
    ErrorCode.CONTRACT_VIOLATION: 2,
    ErrorCode.INVALID_CONFIG: 2,
    ErrorCode.INVALID_INPUT: 2,
    ErrorCode.UNKNOWN_SUBJECT: 2,
    ErrorCode.NO_HOLDOUTS: 2,
    ErrorCode.UNKNOWN_GENERATOR: 2,
    ErrorCode.NUMERICAL_FAILURE: 3,
}


class DmlmmError(Exception):
    """Base class for library errors."""

    code = ErrorCode.CONTRACT_VIOLATION

    def __init__(self, message: str, code: Optional[ErrorCode] = None, **detail: Any):
        super().__init__(message)
        if code is not None:
            self.code = code
        self.message = message
        self.detail: Dict[str, Any] = detail

    @property
    def exit_code(self) -> int:
        return EXIT_CODES[self.code]

    def as_dict(self) -> Dict[str, Any]:
        detail = {
            key: value for key, value in self.detail.items()
            if isinstance(value, (str, int, float, bool, list, type(None)))
        }
        return {'error': self.code.value, 'message': self.message, 'detail': detail}


class ContractViolation(DmlmmError, ValueError):
    """A precondition of an operation does not hold."""

    code = ErrorCode.CONTRACT_VIOLATION


class InputError(DmlmmError):
    """Malformed input files or configuration."""

    code = ErrorCode.INVALID_INPUT


class NumericalFailure(DmlmmError, ArithmeticError):
    """A factorization or objective evaluation failed after repair attempts."""

    code = ErrorCode.NUMERICAL_FAILURE

    def __init__(self, message: str, label: Optional[str] = None, snapshot: Any = None, **detail: Any):
        super().__init__(message, label=label, **detail)
        self.label = label
        self.snapshot = snapshot
