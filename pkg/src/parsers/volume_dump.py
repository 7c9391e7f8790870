# src/parsers/volume_dump.py

import os

import numpy as np

from src.roi.pooling import FeatureVolume, VolumeTag
from src.utils.errors import FormatError

MAGIC = "FVOL1"
_FLOAT_LE = np.dtype("<f4")


def write_volume(path: str, volume: FeatureVolume) -> None:
    """One text line "FVOL1 <tag> <C> <g>" then C*g^3 f32 LE values in [c, ix, iy, iz] order."""
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    header = f"{MAGIC} {volume.tag.value} {volume.channels} {volume.grid}\n"
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(np.ascontiguousarray(volume.data, dtype=_FLOAT_LE).tobytes())


def read_volume(path: str) -> FeatureVolume:
    with open(path, "rb") as f:
        buf = f.read()
    cut = buf.find(b"\n")
    if cut < 0:
        raise FormatError("missing header line", path=path)
    parts = buf[:cut].decode("ascii", errors="replace").split()
    if len(parts) != 4 or parts[0] != MAGIC:
        raise FormatError(f"not a feature volume (header {parts})", path=path, line_number=1)
    try:
        tag = VolumeTag(parts[1])
        channels, grid = int(parts[2]), int(parts[3])
    except ValueError as e:
        raise FormatError(f"bad header field: {e}", path=path, line_number=1)
    if channels < 1 or grid < 1:
        raise FormatError(f"nonpositive volume shape ({channels}, {grid})", path=path, line_number=1)

    payload = buf[cut + 1:]
    expected = channels * grid ** 3 * _FLOAT_LE.itemsize
    if len(payload) != expected:
        raise FormatError(f"payload is {len(payload)} bytes, expected {expected}", path=path)
    data = np.frombuffer(payload, dtype=_FLOAT_LE).reshape(channels, grid, grid, grid)
    try:
        return FeatureVolume(data, tag)
    except ValueError as e:
        raise FormatError(str(e), path=path)
