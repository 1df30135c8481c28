"""
Logging module.

This module provides functionality for logging experiment events.
"""

import logging
from typing import Optional

logger = logging.getLogger(__name__)


class ExperimentLogger:
    """
    Handles logging of experiment events.

    Features:
    - Consistent log formatting
    - Run identifiers shortened to eight characters
    - Multi-level logging
    """

    @staticmethod
    def format_event(event: str, details: str = "", run_id: Optional[str] = None) -> str:
        message_parts = [f"Event: {event}"]
        if details:
            message_parts.append(f"Details: {details}")
        if run_id:
            message_parts.append(f"Run: {run_id[:8]}")
        return " | ".join(message_parts)

    @staticmethod
    def log_event(
        event: str,
        details: str = "",
        run_id: Optional[str] = None,
        level: str = "info",
    ) -> None:
        """
        Log an experiment event with consistent formatting.

        Args:
            event: The event name (e.g. "search_started").
            details: Additional details about the event.
            run_id: Optional run identifier (e.g. a config digest).
            level: Log level ('debug', 'info', 'warning', 'error', 'critical').
        """
        log_method = getattr(logger, level.lower(), logger.info)
        log_method(ExperimentLogger.format_event(event, details, run_id))
