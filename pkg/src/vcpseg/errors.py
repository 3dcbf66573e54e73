"""Exception hierarchy shared by every vcpseg module."""


class VCPError(Exception):
    """Base class for all vcpseg errors."""


class ConfigError(VCPError, ValueError):
    pass


class OverlongPrompt(VCPError, ValueError):
    pass


class TokenizerError(VCPError, ValueError):
    pass


class InvalidLayer(VCPError, IndexError):
    pass


class ShapeMismatch(VCPError, ValueError):
    pass


class CheckpointError(VCPError):
    """Raised for missing or mis-shaped tensors; ``tensor`` names the culprit."""

    def __init__(self, tensor: str, detail: str = ""):
        self.tensor = tensor
        super().__init__(f"{tensor}: {detail}" if detail else tensor)


class InvalidTemperature(VCPError, ValueError):
    pass


class InvalidMask(VCPError, ValueError):
    pass


class DegenerateEmbedding(VCPError, ValueError):
    pass


class DataError(VCPError):
    pass


class UndefinedMetric(VCPError, ValueError):
    pass


class DivergedError(VCPError):
    """Training produced a non-finite loss. ``state`` holds the last finite parameters."""

    def __init__(self, message: str, state=None, step: int | None = None):
        super().__init__(message)
        self.state = state
        self.step = step
