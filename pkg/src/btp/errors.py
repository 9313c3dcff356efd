"""Exception types shared across the engine."""


class BtpError(Exception):
    """Base class for all engine errors."""


class ValidationError(BtpError, ValueError):
    """Arguments or domain invariants are inconsistent."""


class TraceError(BtpError, ValueError):
    """A trace directory, manifest, or tensor payload is malformed."""
