"""Error hierarchy shared by every module.

Library code raises these; only the command-line entry point turns them into
process exit codes.
"""
from typing import Optional


class PrunerError(Exception):
    exit_code = 1


class ConfigError(PrunerError):
    exit_code = 2


class ShapeError(PrunerError, ValueError):
    exit_code = 2

    def __init__(self, message: str, layer_index: Optional[int] = None):
        if layer_index is not None:
            message = f"layer {layer_index}: {message}"
        super().__init__(message)
        self.layer_index = layer_index


class ArchitectureError(ConfigError):
    pass


class StaleCacheError(PrunerError):
    pass


class DataError(PrunerError):
    exit_code = 3


class IdxFormatError(DataError):
    def __init__(self, path, offset: int, message: str):
        super().__init__(f"{path} (offset {offset}): {message}")
        self.path = path
        self.offset = offset


class CheckpointError(DataError):
    pass


class NumericError(PrunerError):
    exit_code = 4


class DivergenceError(NumericError):
    pass
