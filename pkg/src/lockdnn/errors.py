"""Exception hierarchy shared across the package.

Every error carries a short machine-readable ``code`` (stable across
releases, used by the CLI's JSON error output) and an exit category:
``data`` errors map to exit code 3, ``invariant`` violations to exit
code 4. Usage errors are left to argparse (exit code 2).
"""


class LockDNNError(Exception):
    code = "Error"
    category = "data"


class ManifestError(LockDNNError):
    code = "MalformedManifest"


class BlobLengthMismatch(LockDNNError):
    code = "BlobLengthMismatch"


class ShapeMismatch(LockDNNError):
    code = "ShapeMismatch"


class KeyParamsError(LockDNNError):
    code = "InconsistentKeyParams"
    category = "invariant"


class SegmentWidthError(LockDNNError):
    code = "SegmentWidthOutOfRange"


class CodecStreamError(LockDNNError):
    """Truncated, overlong, or otherwise undecodable compressed payload."""

    code = "CorruptStream"


class FlagExtentMismatch(LockDNNError):
    code = "FlagExtentMismatch"


class EmptyMap(LockDNNError):
    code = "EmptyMap"


class AlreadyObfuscated(LockDNNError):
    code = "DoubleObfuscation"
    category = "invariant"


class GroupCoverageError(LockDNNError):
    code = "GroupCoverageMismatch"
    category = "invariant"


class ArchitectureMismatch(LockDNNError):
    code = "ArchitectureMismatch"


class AllocationError(LockDNNError):
    code = "KeyAllocationError"
    category = "invariant"


class TrainingDiverged(LockDNNError):
    code = "TrainingDiverged"


class QuantizationGap(LockDNNError):
    """Fixed-point accuracy fell more than the allowed margin below float."""

    code = "QuantizationGap"
    category = "invariant"
