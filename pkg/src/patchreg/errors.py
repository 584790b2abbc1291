"""Exception types shared across the package."""


class PatchRegError(Exception):
    """Base class for package errors."""


class FileFormatError(PatchRegError):
    """Base class for binary file format problems."""


class BadMagicError(FileFormatError):
    """File does not start with the expected magic bytes."""


class UnsupportedVersionError(FileFormatError):
    """File carries a format version this build cannot read."""


class TruncatedFileError(FileFormatError):
    """File ended before the declared payload was complete."""


class DescriptorMismatchError(FileFormatError):
    """Stored payload is inconsistent with its own descriptor."""


class OutOfBoundsError(PatchRegError):
    """A sampling lattice leaves the volume it must stay inside."""


class NoAnatomyError(PatchRegError):
    """Rejection sampling failed to find an acceptable patch center."""


class PhantomGenerationError(PatchRegError):
    """Phantom generation could not satisfy its occupancy constraint."""


class InvalidStartError(PatchRegError):
    """Optimizer objective is not finite at the starting point."""
