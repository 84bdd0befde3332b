"""Exception types shared across the package."""


class FlowSplatError(Exception):
    """Base class for all package-specific errors."""


class DepthBehindCamera(FlowSplatError):
    """A point projected with camera-frame depth at or behind the near plane."""


class InvalidDepth(FlowSplatError):
    """Unprojection received a non-positive or non-finite depth."""


class DegenerateBaseline(FlowSplatError):
    """Relative translation too small to define epipolar geometry."""


class DimensionMismatch(FlowSplatError):
    """Two per-pixel arrays do not share the same shape."""


class EmptyScene(FlowSplatError):
    """Rendering was requested for a cloud with no Gaussians."""


class EmptyInit(FlowSplatError):
    """Depth-based initialization found no valid-depth pixels."""


class StaleRenderState(FlowSplatError):
    """Blend records passed to the backward pass do not match the inputs."""


class InsufficientValidPixels(FlowSplatError):
    """A loss required more valid pixels than were available."""


class LengthMismatch(FlowSplatError):
    """Two trajectories to compare have different lengths."""


class FormatError(FlowSplatError):
    """A serialized file failed to parse.

    Carries the byte offset at which parsing failed when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class PipelineError(FlowSplatError):
    """Reconstruction aborted; carries the frame index when known."""

    def __init__(self, message, frame_index=None):
        if frame_index is not None:
            message = f"{message} (frame {frame_index})"
        super().__init__(message)
        self.frame_index = frame_index
