"""Exception types shared across the package."""


class AfnetError(Exception):
    """Base class for all package-specific errors."""


class DimensionMismatchError(AfnetError, ValueError):
    """Operand shapes are incompatible (names the offending axis)."""


class GeometryError(AfnetError, ValueError):
    """A spatial operation cannot produce a valid output geometry."""


class ContractError(AfnetError, ValueError):
    """A caller violated an operation precondition."""


class DegenerateInputError(AfnetError, ValueError):
    """Input is empty or statistically degenerate for the operation."""


class MissingGraphError(AfnetError, RuntimeError):
    """backward() was asked to differentiate a tensor with no graph."""


class ValidationError(AfnetError, ValueError):
    """Configuration or label validation failed; message lists all problems."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class RasterParseError(AfnetError, ValueError):
    """A raster file is malformed; message includes the byte offset."""


class RasterFormatError(AfnetError, ValueError):
    """A raster file uses an unsupported encoding (e.g. maxval != 255)."""


class PaletteDecodeError(AfnetError, ValueError):
    """A color raster contains a pixel outside the label palette."""


class CheckpointMismatchError(AfnetError, ValueError):
    """A checkpoint does not match the requested model configuration."""
