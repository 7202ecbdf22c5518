"""Domain error type shared across the package."""

from __future__ import annotations


class OwrError(Exception):
    """Raised for invalid inputs, malformed files, and violated contracts.

    Messages carry enough context (row indices, iteration counts, file
    offsets) to locate the offending input without a debugger.
    """
