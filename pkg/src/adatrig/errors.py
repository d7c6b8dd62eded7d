"""Exception types shared across the package."""


class AdatrigError(Exception):
    """Base class for all package errors."""


class ValidationError(AdatrigError):
    """Input violates a documented contract (bad config, bad data, bad shape)."""


class ParseError(ValidationError):
    """A file could not be parsed; carries file/line context in the message."""
