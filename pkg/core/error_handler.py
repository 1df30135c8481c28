"""
Error handling module.

This module provides the exception hierarchy used across the toolkit and the
functionality for turning failures into logged, exit-coded command results.
"""

import logging
import traceback
from typing import Any, Dict, Optional

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


class EvolQError(Exception):
    """Base class for every error raised by the toolkit."""

    exit_code: int = EXIT_UNEXPECTED


class ConfigError(EvolQError):
    """Run configuration failed schema validation or is inconsistent."""

    exit_code = EXIT_CONFIG


class DataFormatError(EvolQError):
    """A binary container (EVQD/EVQM) is malformed or truncated."""

    exit_code = EXIT_IO

    def __init__(self, message: str, offset: Optional[int] = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class NumericError(EvolQError):
    """A computation produced non-finite values."""

    exit_code = EXIT_NUMERIC


class ParameterError(EvolQError, ValueError):
    """An argument violates a documented precondition."""

    exit_code = EXIT_CONFIG


class DimensionError(ParameterError):
    """Tensor shapes or vector lengths do not agree."""


class QuantParamError(ParameterError):
    """Quantization parameters are invalid (non-positive scale, bad bitwidth...)."""


class DomainError(ParameterError):
    """Input lies outside the domain of an operation (e.g. negative log2 input)."""


class NormalizationError(ParameterError):
    """A vector that must be L2-normalized has zero norm."""


class CalibrationError(ParameterError):
    """A calibration set is empty or yields no full batch."""


class ErrorHandler:
    """
    Handles errors raised while running commands.

    Features:
    - Standardized command results
    - Error logging with context
    - Exit-code mapping
    """

    @staticmethod
    def log_error(error: Exception, context: Optional[str] = None) -> None:
        """
        Log an error with context.

        Args:
            error: The exception object that was raised.
            context: Optional string describing where the error occurred.
        """
        error_message = f"{context + ': ' if context else ''}{str(error)}"
        logger.error(error_message)
        logger.debug(traceback.format_exc())

    @staticmethod
    def get_exit_code(error: BaseException) -> int:
        """
        Map an exception to the process exit code.

        Args:
            error: The exception to classify.

        Returns:
            2 for configuration errors, 3 for I/O errors, 4 for numeric
            failures and 1 for anything unexpected.
        """
        if isinstance(error, EvolQError):
            return error.exit_code
        if isinstance(error, OSError):
            return EXIT_IO
        return EXIT_UNEXPECTED

    @staticmethod
    def _get_error_message(error_key: str, error_details: str = "") -> str:
        """
        Internal helper to get a pre-defined error message.

        Args:
            error_key: The key identifying the error message.
            error_details: Optional specific details to include in the message.

        Returns:
            The formatted error message string.
        """
        messages = {
            "errors.config": f"Invalid configuration: {error_details}",
            "errors.io": f"Input/output failure: {error_details}",
            "errors.numeric": f"Numeric failure: {error_details}",
            "errors.unexpected": f"An unexpected error occurred: {error_details}",
        }
        return messages.get(
            error_key, f"Unknown error: {error_key}. Details: {error_details}"
        )

    @staticmethod
    def handle_command_error(error: Exception, command: str) -> Dict[str, Any]:
        """
        Handles an error raised by a command, logs it and prepares a result.

        Args:
            error: The exception that occurred.
            command: The name of the command that failed.

        Returns:
            A dictionary with the failure message, error text and exit code.
        """
        ErrorHandler.log_error(error, f"Error in {command} command")

        exit_code = ErrorHandler.get_exit_code(error)
        key = {
            EXIT_CONFIG: "errors.config",
            EXIT_IO: "errors.io",
            EXIT_NUMERIC: "errors.numeric",
        }.get(exit_code, "errors.unexpected")

        return {
            "success": False,
            "message": ErrorHandler._get_error_message(key, str(error)),
            "error": str(error),
            "exit_code": exit_code,
        }
