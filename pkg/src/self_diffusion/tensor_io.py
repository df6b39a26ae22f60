"""
Reading and writing tensors, images and 1D signals.

Raw tensor container (`.sdt`), all integers little-endian:

    offset  size        field
    0       4           magic b"SDTN"
    4       1           version (1)
    5       1           dtype code (1 = float64, 2 = float32, 3 = uint8)
    6       4           rank r (uint32)
    10      8 * r       dims (uint64 each)
    10+8r   ...         payload, C order, little-endian

PGM (`.pgm`): binary P5 grayscale. maxval <= 255 stores one byte per pixel,
maxval > 255 two bytes big-endian. Reading divides by maxval, so an 8-bit
value v becomes v / 255; writing clips to [0, 1] and rounds to the nearest
level.

CSV (`.csv`): one value per line, written with 17 significant digits.
"""

from pathlib import Path
from typing import Any

import logging
import re
import struct

import numpy as np
from numpy.typing import NDArray

logger = logging.getLogger(__name__)

MAGIC = b"SDTN"
VERSION = 1
DTYPE_CODES: dict[int, np.dtype[Any]] = {
    1: np.dtype("<f8"),
    2: np.dtype("<f4"),
    3: np.dtype("u1"),
}
HEADER_PREFIX = struct.Struct("<4sBBI")


class TensorFormatError(ValueError):
    def __init__(self, path: Path | str, offset: int, message: str):
        super().__init__(f"{path}: {message} (byte offset {offset})")
        self.path = path
        self.offset = offset


def _dtype_code(dtype: np.dtype[Any]) -> int:
    for code, candidate in DTYPE_CODES.items():
        if candidate.kind == dtype.kind and candidate.itemsize == dtype.itemsize:
            return code
    raise ValueError(f"Unsupported tensor dtype for the raw container: {dtype}")


def encode_tensor(array: NDArray[Any]) -> bytes:
    code = _dtype_code(array.dtype)
    header = HEADER_PREFIX.pack(MAGIC, VERSION, code, array.ndim)
    dims = struct.pack(f"<{array.ndim}Q", *array.shape)
    payload = np.ascontiguousarray(array, dtype=DTYPE_CODES[code]).tobytes()
    return header + dims + payload


def decode_tensor(raw: bytes, source: Path | str = "<bytes>") -> NDArray[Any]:
    if len(raw) < HEADER_PREFIX.size:
        raise TensorFormatError(source, len(raw), "truncated header")
    magic, version, code, rank = HEADER_PREFIX.unpack_from(raw, 0)
    if magic != MAGIC:
        raise TensorFormatError(source, 0, f"bad magic {magic!r}")
    if version != VERSION:
        raise TensorFormatError(source, 4, f"unsupported version {version}")
    if code not in DTYPE_CODES:
        raise TensorFormatError(source, 5, f"unknown dtype code {code}")
    dims_offset = HEADER_PREFIX.size
    payload_offset = dims_offset + 8 * rank
    if len(raw) < payload_offset:
        raise TensorFormatError(source, len(raw), f"truncated dims for rank {rank}")
    shape = struct.unpack_from(f"<{rank}Q", raw, dims_offset)
    dtype = DTYPE_CODES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(raw) - payload_offset != expected:
        raise TensorFormatError(
            source,
            payload_offset,
            f"payload has {len(raw) - payload_offset} bytes, shape {shape} needs {expected}",
        )
    return np.frombuffer(raw, dtype=dtype, offset=payload_offset).reshape(shape).copy()


def write_tensor(path: Path, array: NDArray[Any]) -> None:
    path.write_bytes(encode_tensor(array))


def read_tensor(path: Path) -> NDArray[Any]:
    return decode_tensor(path.read_bytes(), path)


_PGM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def read_pgm(path: Path) -> NDArray[np.float64]:
    raw = path.read_bytes()
    fields: list[int] = []
    offset = 0
    for index in range(4):
        match = _PGM_TOKEN.match(raw, offset)
        if match is None:
            raise TensorFormatError(path, offset, "truncated PGM header")
        token = match.group(1)
        if index == 0:
            if token != b"P5":
                raise TensorFormatError(path, match.start(1), f"bad PGM magic {token!r}")
        else:
            if not token.isdigit():
                raise TensorFormatError(path, match.start(1), f"bad PGM field {token!r}")
            fields.append(int(token))
        offset = match.end(1)
    width, height, maxval = fields
    if not 0 < maxval < 65536:
        raise TensorFormatError(path, offset, f"PGM maxval {maxval} out of range")
    if offset >= len(raw) or not raw[offset : offset + 1].isspace():
        raise TensorFormatError(path, offset, "missing whitespace after PGM header")
    offset += 1
    dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    expected = width * height * dtype.itemsize
    if len(raw) - offset < expected:
        raise TensorFormatError(
            path, offset, f"raster has {len(raw) - offset} bytes, needs {expected}"
        )
    pixels = np.frombuffer(raw, dtype=dtype, count=width * height, offset=offset)
    return pixels.reshape(height, width).astype(np.float64) / maxval


def write_pgm(path: Path, image: NDArray[Any], maxval: int = 255) -> None:
    assert image.ndim == 2, f"PGM images are 2D, got shape {image.shape}"
    assert 0 < maxval < 65536
    levels = np.rint(np.clip(image, 0.0, 1.0) * maxval)
    dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    height, width = image.shape
    header = f"P5\n{width} {height}\n{maxval}\n".encode("ascii")
    path.write_bytes(header + levels.astype(dtype).tobytes())


def read_csv_signal(path: Path) -> NDArray[np.float64]:
    values: list[float] = []
    for lineno, line in enumerate(path.read_text().splitlines()):
        stripped = line.strip()
        if not stripped:
            continue
        try:
            values.append(float(stripped.split(",")[0]))
        except ValueError:
            raise TensorFormatError(path, lineno, f"line {lineno + 1} is not a number")
    return np.asarray(values, dtype=np.float64)


def write_csv_signal(path: Path, signal: NDArray[Any]) -> None:
    path.write_text("".join(f"{float(v):.17g}\n" for v in np.ravel(signal)))


def image_read(path: Path) -> NDArray[Any]:
    match path.suffix.lower():
        case ".sdt":
            return read_tensor(path)
        case ".pgm":
            return read_pgm(path)
        case ".csv":
            return read_csv_signal(path)
        case _:
            raise ValueError(f"Unsupported file type: {path}")


def image_write(path: Path, array: NDArray[Any]) -> None:
    logger.debug(f"Writing {array.shape} array to {path}")
    match path.suffix.lower():
        case ".sdt":
            write_tensor(path, array)
        case ".pgm":
            write_pgm(path, array)
        case ".csv":
            write_csv_signal(path, array)
        case _:
            raise ValueError(f"Unsupported file type: {path}")
