"""
File format tools: `.f32r` rasters, AHPC checkpoints, PNG previews and CSV.

`.f32r`: b"F32R", u32 width, u32 height, then width*height little-endian
float32 values, row-major.

Checkpoint: b"AHPC", u32 version, u32 tensor count, then per tensor a u16
name length, the UTF-8 name, a u8 rank, rank x u32 dims and the
little-endian float32 payload. All integers are little-endian.
"""

import csv
import logging
import struct
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Sequence, Tuple, Union

import numpy as np
from PIL import Image

from utils.constants import CHECKPOINT_MAGIC, CHECKPOINT_VERSION, HU_WINDOW, RASTER_MAGIC, WATER_ATTENUATION
from utils.error_handling import FileFormatError
from utils.validation import require_ndim

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
_F32 = np.dtype("<f4")


def encode_raster(image: np.ndarray) -> bytes:
    image = require_ndim("raster", image, 2)
    height, width = image.shape
    header = RASTER_MAGIC + struct.pack("<II", width, height)
    return header + np.ascontiguousarray(image, dtype=_F32).tobytes()


def decode_raster(data: bytes, path: str = "<bytes>") -> np.ndarray:
    if len(data) < 12 or data[:4] != RASTER_MAGIC:
        raise FileFormatError(f"{path} is not an F32R raster", path=path)
    width, height = struct.unpack("<II", data[4:12])
    expected = 12 + 4 * width * height
    if len(data) != expected:
        raise FileFormatError(
            f"{path} holds {len(data)} bytes, expected {expected} for {width}x{height}",
            path=path,
        )
    return np.frombuffer(data, dtype=_F32, offset=12).reshape(height, width).copy()


def write_raster(path: PathLike, image: np.ndarray) -> Path:
    """Write a 2D array as `.f32r`."""
    path = Path(path)
    path.write_bytes(encode_raster(image))
    return path


def read_raster(path: PathLike) -> np.ndarray:
    """Read a `.f32r` file into a (height, width) float32 array."""
    path = Path(path)
    return decode_raster(path.read_bytes(), str(path))


def encode_checkpoint(tensors: Mapping[str, np.ndarray]) -> bytes:
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name, value in tensors.items():
        raw_name = name.encode("utf-8")
        value = np.asarray(value)
        chunks.append(struct.pack("<H", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<B", value.ndim))
        chunks.append(struct.pack(f"<{value.ndim}I", *value.shape))
        chunks.append(np.ascontiguousarray(value, dtype=_F32).tobytes())
    return b"".join(chunks)


def decode_checkpoint(data: bytes, path: str = "<bytes>") -> Dict[str, np.ndarray]:
    if data[:4] != CHECKPOINT_MAGIC:
        raise FileFormatError(f"{path} is not an AHPC checkpoint", path=path)
    try:
        version, count = struct.unpack_from("<II", data, 4)
        if version != CHECKPOINT_VERSION:
            raise FileFormatError(f"{path} has unsupported checkpoint version {version}", path=path)
        offset = 12
        tensors: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", data, offset)
            offset += 2
            name = data[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<B", data, offset)
            offset += 1
            dims = struct.unpack_from(f"<{rank}I", data, offset)
            offset += 4 * rank
            size = int(np.prod(dims, dtype=np.int64))
            if offset + 4 * size > len(data):
                raise FileFormatError(f"{path} is truncated in tensor '{name}'", path=path)
            tensors[name] = np.frombuffer(data, dtype=_F32, count=size, offset=offset).reshape(dims).copy()
            offset += 4 * size
    except struct.error as e:
        raise FileFormatError(f"{path} is truncated", path=path, original_error=e) from e
    if offset != len(data):
        raise FileFormatError(f"{path} has {len(data) - offset} trailing bytes", path=path)
    return tensors


def write_checkpoint(path: PathLike, tensors: Mapping[str, np.ndarray]) -> Path:
    """Write named tensors (insertion order kept) as an AHPC checkpoint."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(tensors))
    logger.info(f"Checkpoint with {len(tensors)} tensors written to {path}")
    return path


def read_checkpoint(path: PathLike) -> Dict[str, np.ndarray]:
    path = Path(path)
    return decode_checkpoint(path.read_bytes(), str(path))


def attenuation_to_hu(image: np.ndarray, water: float = WATER_ATTENUATION) -> np.ndarray:
    return 1000.0 * (np.asarray(image, dtype=np.float64) - water) / water


def window_to_uint8(image: np.ndarray, window: Tuple[float, float] = HU_WINDOW) -> np.ndarray:
    """Map attenuation to 8-bit gray through a clamped HU window."""
    low, high = window
    hu = attenuation_to_hu(image)
    scaled = (np.clip(hu, low, high) - low) / (high - low)
    return np.rint(255.0 * scaled).astype(np.uint8)


def export_png(path: PathLike, image: np.ndarray, window: Tuple[float, float] = HU_WINDOW) -> Path:
    """Save an attenuation image as a windowed 8-bit grayscale PNG."""
    path = Path(path)
    image = require_ndim("image", image, 2)
    Image.fromarray(window_to_uint8(image, window)).save(path, format="PNG")
    return path


def write_csv(path: PathLike, header: Sequence[str], rows: Iterable[Sequence[object]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)
    return path


def read_csv(path: PathLike) -> List[Dict[str, str]]:
    with open(path, "r", newline="") as f:
        return list(csv.DictReader(f))
