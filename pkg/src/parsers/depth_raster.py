# src/parsers/depth_raster.py

import os
from dataclasses import dataclass

import numpy as np

from src.utils.errors import FormatError

MAGIC = b"DPR1"
_HEADER = np.dtype([("magic", "S4"), ("width", "<u4"), ("height", "<u4")])
_FLOAT_LE = np.dtype("<f4")


@dataclass(frozen=True)
class DepthRaster:
    """
    Monocular depth prior on the image grid, row-major: data[v, u].
    Values are model-relative, finite and nonnegative.
    """
    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float32)
        if arr.ndim != 2 or arr.size == 0:
            raise ValueError(f"depth raster must be a non-empty 2-D array, got shape {arr.shape}")
        if not np.isfinite(arr).all() or (arr < 0).any():
            raise ValueError("depth raster values must be finite and >= 0")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def width(self) -> int:
        return int(self.data.shape[1])

    @property
    def height(self) -> int:
        return int(self.data.shape[0])


def read_depth_raster(path: str) -> DepthRaster:
    """Read "DPR1" + u32 LE width + u32 LE height + width*height f32 LE values."""
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < _HEADER.itemsize:
        raise FormatError("truncated header", path=path)
    header = np.frombuffer(buf, dtype=_HEADER, count=1)[0]
    if header["magic"] != MAGIC:
        raise FormatError(f"bad magic {bytes(header['magic'])!r}, expected {MAGIC!r}", path=path)
    width, height = int(header["width"]), int(header["height"])
    expected = width * height * _FLOAT_LE.itemsize
    payload = buf[_HEADER.itemsize:]
    if len(payload) != expected:
        raise FormatError(
            f"payload is {len(payload)} bytes, {width}x{height} raster needs {expected}", path=path
        )
    data = np.frombuffer(payload, dtype=_FLOAT_LE).reshape(height, width)
    try:
        return DepthRaster(data)
    except ValueError as e:
        raise FormatError(str(e), path=path)


def write_depth_raster(path: str, raster: DepthRaster) -> None:
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    header = np.array([(MAGIC, raster.width, raster.height)], dtype=_HEADER)
    with open(path, "wb") as f:
        f.write(header.tobytes())
        f.write(np.ascontiguousarray(raster.data, dtype=_FLOAT_LE).tobytes())
