# src/nn/bundle.py
"""
Named forward-only weights.

File layout: a UTF-8 text header, then the float32 little-endian payloads of
every tensor in header order.

    WEIGHTBUNDLE 1
    gfe.stage1.W1 f32 32x8
    gfe.stage1.b1 f32 32
    ...
    END

Seeded initialisation is platform independent: raw 64-bit words come from
numpy's PCG64 bit generator seeded with the integer seed, each word w maps to
u = (w >> 11) * 2**-53 in [0, 1), and the value is s * (2u - 1) with
s = 1 / sqrt(fan_in), rounded to float32. Tensors draw consecutive words in
manifest order.
"""

import os
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from src.utils.errors import BundleError, FormatError

FORMAT_VERSION = 1
_MAGIC = "WEIGHTBUNDLE"
_END = "END"
_FLOAT_LE = np.dtype("<f4")


@dataclass(frozen=True)
class TensorSpec:
    name: str
    shape: Tuple[int, ...]
    fan_in: Optional[int] = None

    @property
    def scale_fan_in(self) -> int:
        if self.fan_in is not None:
            return self.fan_in
        if len(self.shape) >= 2:
            return int(np.prod(self.shape[1:]))
        return int(self.shape[0]) if self.shape else 1


class WeightBundle:
    """Immutable name -> float32 tensor mapping with its shape manifest."""

    def __init__(self, tensors: Dict[str, np.ndarray], version: int = FORMAT_VERSION):
        self.version = version
        self._tensors: Dict[str, np.ndarray] = {}
        for name, value in tensors.items():
            if not name or any(ch.isspace() for ch in name):
                raise BundleError(f"invalid tensor name {name!r}")
            arr = np.array(value, dtype=np.float32)
            if not np.isfinite(arr).all():
                raise BundleError(f"tensor {name} has non-finite values")
            arr.setflags(write=False)
            self._tensors[name] = arr

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> List[str]:
        return list(self._tensors)

    def manifest(self) -> List[Tuple[str, Tuple[int, ...]]]:
        return [(name, arr.shape) for name, arr in self._tensors.items()]

    def get(self, name: str, shape: Optional[Tuple[int, ...]] = None) -> np.ndarray:
        if name not in self._tensors:
            raise BundleError(f"weight bundle has no tensor '{name}'")
        arr = self._tensors[name]
        if shape is not None and arr.shape != tuple(shape):
            raise BundleError(f"tensor '{name}' has shape {arr.shape}, expected {tuple(shape)}")
        return arr

    def merged(self, other: "WeightBundle") -> "WeightBundle":
        tensors = dict(self._tensors)
        tensors.update(other._tensors)
        return WeightBundle(tensors, self.version)

    def equals(self, other: "WeightBundle") -> bool:
        if self.names() != other.names():
            return False
        return all(np.array_equal(self._tensors[n], other._tensors[n]) for n in self.names())


def _unit_uniform(bitgen: np.random.PCG64, count: int) -> np.ndarray:
    words = bitgen.random_raw(count)
    return (np.asarray(words, dtype=np.uint64) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53


def seeded_init(seed: int, manifest: Iterable[TensorSpec]) -> WeightBundle:
    bitgen = np.random.PCG64(seed)
    tensors: Dict[str, np.ndarray] = {}
    for spec in manifest:
        if spec.name in tensors:
            raise BundleError(f"duplicate tensor name '{spec.name}' in manifest")
        count = int(np.prod(spec.shape)) if spec.shape else 1
        s = 1.0 / np.sqrt(spec.scale_fan_in)
        u = _unit_uniform(bitgen, count) if count else np.zeros(0)
        tensors[spec.name] = (s * (2.0 * u - 1.0)).reshape(spec.shape).astype(np.float32)
    return WeightBundle(tensors)


def zero_bundle(manifest: Iterable[TensorSpec]) -> WeightBundle:
    return WeightBundle({spec.name: np.zeros(spec.shape, dtype=np.float32) for spec in manifest})


# ─── Bundle files ──────────────────────────────────────────────────────────────

def write_bundle(path: str, bundle: WeightBundle) -> None:
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    lines = [f"{_MAGIC} {bundle.version}"]
    for name, shape in bundle.manifest():
        dims = "x".join(str(d) for d in shape) if shape else "scalar"
        lines.append(f"{name} f32 {dims}")
    lines.append(_END)
    with open(path, "wb") as f:
        f.write(("\n".join(lines) + "\n").encode("utf-8"))
        for name in bundle.names():
            f.write(np.ascontiguousarray(bundle.get(name), dtype=_FLOAT_LE).tobytes())


def read_bundle(path: str) -> WeightBundle:
    with open(path, "rb") as f:
        buf = f.read()
    marker = f"\n{_END}\n".encode("utf-8")
    cut = buf.find(marker)
    if cut < 0:
        raise FormatError("missing END line in bundle header", path=path)
    header = buf[:cut].decode("utf-8").splitlines()
    payload = memoryview(buf)[cut + len(marker):]

    head = header[0].split() if header else []
    if len(head) != 2 or head[0] != _MAGIC:
        raise FormatError(f"not a weight bundle (header {header[:1]})", path=path)
    version = int(head[1])
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported bundle version {version}", path=path)

    tensors: Dict[str, np.ndarray] = {}
    offset = 0
    for line_number, line in enumerate(header[1:], start=2):
        parts = line.split()
        if len(parts) != 3 or parts[1] != "f32":
            raise FormatError(f"bad manifest entry {line!r}", path=path, line_number=line_number)
        name, _, dims = parts
        shape = () if dims == "scalar" else tuple(int(d) for d in dims.split("x"))
        nbytes = int(np.prod(shape)) * _FLOAT_LE.itemsize if shape else _FLOAT_LE.itemsize
        if offset + nbytes > len(payload):
            raise FormatError(f"payload truncated at tensor '{name}'", path=path)
        if name in tensors:
            raise FormatError(f"duplicate tensor '{name}'", path=path, line_number=line_number)
        tensors[name] = np.frombuffer(payload[offset:offset + nbytes], dtype=_FLOAT_LE).reshape(shape)
        offset += nbytes
    if offset != len(payload):
        raise FormatError(f"{len(payload) - offset} trailing payload bytes", path=path)
    return WeightBundle(tensors, version)
