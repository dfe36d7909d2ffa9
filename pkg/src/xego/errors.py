"""Shared exception types."""


class XegoError(Exception):
    """Base class for package errors."""


class DomainError(XegoError, ValueError):
    """An argument violates an operation's stated preconditions."""
