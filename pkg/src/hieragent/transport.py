"""Retry plumbing shared by the HTTP policy and search clients."""

from __future__ import annotations

import logging
import time
from typing import Callable, TypeVar

log = logging.getLogger(__name__)

T = TypeVar("T")


class TransportError(RuntimeError):
    """An endpoint stayed unreachable after all retries."""


def _transient(exc: BaseException) -> bool:
    if isinstance(exc, TransportError):
        return True
    try:
        import requests
    except ImportError:  # pragma: no cover
        return isinstance(exc, (ConnectionError, TimeoutError))
    return isinstance(exc, (requests.ConnectionError, requests.Timeout, ConnectionError,
                            TimeoutError))


def with_retries(fn: Callable[[], T], attempts: int = 3, backoff: float = 0.5,
                 sleep: Callable[[float], None] = time.sleep) -> T:
    """Call ``fn`` up to ``attempts`` times with exponential backoff on transient errors."""
    delay = backoff
    for attempt in range(1, attempts + 1):
        try:
            return fn()
        except Exception as exc:
            if not _transient(exc):
                raise
            if attempt == attempts:
                raise TransportError(f"giving up after {attempts} attempts: {exc}") from exc
            log.warning("transport failure (attempt %d/%d): %s; retrying in %.2fs",
                        attempt, attempts, exc, delay)
            sleep(delay)
            delay *= 2
    raise AssertionError("unreachable")
