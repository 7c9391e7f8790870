# src/utils/errors.py

from typing import Optional


class PipelineError(Exception):
    """Base class for every error raised by the feature-extraction engine."""


class FormatError(PipelineError):
    def __init__(
        self,
        message: str,
        path: Optional[str] = None,
        record_index: Optional[int] = None,
        line_number: Optional[int] = None,
    ):
        self.path = str(path) if path is not None else None
        self.record_index = record_index
        self.line_number = line_number
        where = []
        if self.path:
            where.append(self.path)
        if line_number is not None:
            where.append(f"line {line_number}")
        if record_index is not None:
            where.append(f"record {record_index}")
        prefix = f"{': '.join(where)}: " if where else ""
        super().__init__(prefix + message)


class MissingCalibError(FormatError):
    def __init__(self, key: str, path: Optional[str] = None):
        self.key = key
        super().__init__(f"missing calibration key '{key}'", path=path)


class BehindCameraError(PipelineError):
    pass


class OutOfBoundsError(PipelineError):
    pass


class ShapeError(PipelineError, ValueError):
    pass


class BundleError(PipelineError, KeyError):
    def __str__(self) -> str:
        # KeyError quotes its argument; keep the plain message
        return str(self.args[0]) if self.args else ""


class ConfigError(PipelineError):
    pass
