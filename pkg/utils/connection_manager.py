"""
Connection manager for retrying failed HTTP requests.

This module provides:
1. Classification of failures into retryable and terminal ones
2. Exponential backoff between attempts (0.5s, 1s, 2s by default)
3. Attempt counting so callers can report how often a request was tried
"""
import time
from typing import Callable, Optional, Sequence

import requests

from exceptions import TransportError
from utils.logger import setup_logger

logger = setup_logger("connection_manager")

# HTTP statuses worth retrying: throttling and server-side failures
RETRYABLE_STATUSES = frozenset({429, 500, 502, 503, 504})


class ConnectionManager:
    """
    Retry bookkeeping for an HTTP transport.

    The manager runs a request callable, sleeps with exponential backoff
    between attempts, and raises TransportError carrying the number of
    attempts once retries are exhausted or the failure is terminal.
    """

    def __init__(self,
                 max_retries: int = 3,
                 backoff_delays: Sequence[float] = (0.5, 1.0, 2.0),
                 sleep: Callable[[float], None] = time.sleep):
        """
        Initialize the connection manager.

        Args:
            max_retries: Retries after the first attempt
            backoff_delays: Delay in seconds before retry 1, 2, 3, ...
            sleep: Sleep function (injectable for tests)
        """
        self.max_retries = max_retries
        self.backoff_delays = tuple(backoff_delays)
        self.sleep = sleep
        self.reconnect_attempts = 0

    def backoff_delay(self, retry_number: int) -> float:
        """Delay before the given retry (1-based); the last delay doubles beyond the table."""
        if retry_number <= len(self.backoff_delays):
            return self.backoff_delays[retry_number - 1]
        overflow = retry_number - len(self.backoff_delays)
        return self.backoff_delays[-1] * (2 ** overflow)

    @staticmethod
    def is_retryable_status(status: int) -> bool:
        return status in RETRYABLE_STATUSES

    def handle_connection_failure(self, error: Optional[Exception] = None) -> bool:
        """
        Handle a failed attempt.

        Args:
            error: Exception or status description that caused the failure

        Returns:
            True if another attempt should be made (after sleeping), False otherwise
        """
        self.reconnect_attempts += 1

        if self.reconnect_attempts > self.max_retries:
            logger.warning(f"Giving up after {self.reconnect_attempts} attempts: {error}")
            return False

        delay = self.backoff_delay(self.reconnect_attempts)
        logger.info(f"Retry {self.reconnect_attempts}/{self.max_retries} in {delay}s after: {error}")
        self.sleep(delay)
        return True

    def reset_reconnect_attempts(self):
        """Reset the retry counter."""
        self.reconnect_attempts = 0

    def run(self, request: Callable[[], "requests.Response"], description: str = "request"):
        """
        Run ``request`` until it succeeds, fails terminally or retries run out.

        Args:
            request: Callable returning a requests.Response (or an object with status_code)
            description: Text used in log and error messages

        Returns:
            The successful response
        """
        self.reset_reconnect_attempts()

        while True:
            attempts = self.reconnect_attempts + 1
            try:
                response = request()
            except requests.RequestException as e:
                if not self.handle_connection_failure(e):
                    raise TransportError(f"{description} failed: {e}", attempts=attempts) from e
                continue

            status = response.status_code
            if status < 400:
                return response

            if not self.is_retryable_status(status):
                raise TransportError(f"{description} failed with HTTP {status}",
                                     attempts=attempts, status=status)

            if not self.handle_connection_failure(f"HTTP {status}"):
                raise TransportError(f"{description} failed with HTTP {status}",
                                     attempts=attempts, status=status)
