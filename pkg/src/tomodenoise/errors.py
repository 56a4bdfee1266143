"""Exception hierarchy shared by all pipeline stages.

Every error carries a short machine-readable ``code`` so the CLI can emit a
single parseable line (``code: message``) and map it to an exit status.
"""


class ToolError(Exception):
    """Base class for all errors raised by this package."""

    code = "error"

    def __init__(self, message):
        super().__init__(message)
        self.message = message

    def oneline(self):
        return f"{self.code}: {self.message}"


class InvalidSpecError(ToolError):
    """A parameter object violates its invariants (bad grid, radius, factor...)."""

    code = "invalid-spec"


class GeometryError(ToolError):
    """Input geometry is unusable (non-square slice, detector mismatch)."""

    code = "geometry"


class WrongKindError(ToolError):
    """A sinogram of the wrong kind (counts vs line integrals) was supplied."""

    code = "wrong-kind"


class ShapeError(ToolError):
    """Array dimensions do not satisfy an operation's shape rule."""

    code = "shape"


class NumericalError(ToolError):
    """A computation produced non-finite values or diverged."""

    code = "numerical-failure"


class ConfigurationError(ToolError):
    """Missing or inconsistent run configuration (weights file, depth mismatch)."""

    code = "configuration"


class LookupTagError(ToolError):
    """An unknown layer tag or named entity was requested."""

    code = "lookup"


class ProtocolError(ToolError):
    """A streaming contract was violated (out-of-order slices)."""

    code = "protocol"


class CorruptFileError(ToolError):
    """A stored artifact failed its digest or structural check."""

    code = "corrupt-file"


class IncompatibleCheckpointError(ToolError):
    """Checkpoint tensors do not match the expected layer table."""

    code = "incompatible-checkpoint"


class UsageError(ToolError):
    """Bad command line or config file."""

    code = "usage"


class IOFailureError(ToolError):
    """Missing input file, unwritable output, or locked directory."""

    code = "io"


class IndexRangeError(ToolError, IndexError):
    """A row/column selection falls outside the image bounds."""

    code = "index"
