"""Exception taxonomy for the codec."""


class CodecError(Exception):
    """Base class for all codec failures."""


class ImageIOError(CodecError):
    """Unreadable or unsupported image file."""


class WeightsError(CodecError):
    """Missing, corrupt, or mismatched weights file."""


class DecodeError(CodecError):
    """Corrupt or truncated bitstream. Carries the byte offset when known."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class SelftestFailure(CodecError):
    """One or more selftest checks failed."""
