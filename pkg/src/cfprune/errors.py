"""Exception hierarchy shared across the toolkit.

Every error raised on a user-facing path derives from CfpruneError so the
CLI can map failures to exit codes (config errors vs. data/model errors).
"""


class CfpruneError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(CfpruneError):
    """Invalid run configuration (bad rate, missing seed, unknown strategy)."""


class ShapeError(CfpruneError):
    """Tensor shapes incompatible with the requested operation."""

    def __init__(self, message, *, expected=None, actual=None):
        if expected is not None or actual is not None:
            message = f"{message} (expected {expected}, got {actual})"
        super().__init__(message)
        self.expected = expected
        self.actual = actual


class ModelFormatError(CfpruneError):
    """Malformed model manifest or weight blob."""


class ChecksumError(ModelFormatError):
    """Weight blob does not match the CRC-32 recorded in the manifest."""


class CyclicGraphError(ModelFormatError):
    """The node graph contains a cycle."""


class UnsupportedTopologyError(CfpruneError):
    """Channel mapping through the graph is ambiguous for pruning."""

    def __init__(self, message, node_id=None):
        if node_id is not None:
            message = f"{message} (blocking node: {node_id})"
        super().__init__(message)
        self.node_id = node_id


class DataFormatError(CfpruneError):
    """Calibration data file cannot be parsed."""
