"""
MFLW weight format, shared by model files and federation frames

Layout (all integers little-endian):

    "MFLW" | version u16 | tensor count u32
    per tensor: name length u16 | UTF-8 name | dtype u8 | rank u8 | dims u32 * rank | payload
    CRC32 u32 over every preceding byte
"""

import logging
import struct
import zlib
from pathlib import Path
from typing import Union

import numpy as np

from .exceptions import (
    ErrorCode, FileError, FormatError,
    create_crc_mismatch_error, create_file_not_found_error
)
from .tensor_nn import ModelWeights

logger = logging.getLogger(__name__)

MAGIC = b"MFLW"
VERSION = 1

DTYPE_CODES = {
    0x00: np.dtype("<f4"),
    0x01: np.dtype("<f8"),  # gradient-check dumps only
}
_CODE_FOR_DTYPE = {np.dtype(np.float32): 0x00, np.dtype(np.float64): 0x01}

_HEADER = struct.Struct("<4sHI")
_CRC = struct.Struct("<I")


def _format_error(message: str, code: ErrorCode = ErrorCode.MALFORMED_HEADER) -> FormatError:
    return FormatError(message, code, format_name="MFLW")


def encode_weights(weights: ModelWeights) -> bytes:
    """
    Serialise weights to an MFLW blob

    Args:
        weights: Weights in canonical order

    Returns:
        Bytes including the trailing CRC32
    """
    parts = [_HEADER.pack(MAGIC, VERSION, len(weights))]
    for name, array in weights.items():
        code = _CODE_FOR_DTYPE.get(np.dtype(array.dtype))
        if code is None:
            raise _format_error(f"Unsupported dtype {array.dtype} for '{name}'", ErrorCode.UNSUPPORTED_FORMAT)
        encoded_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded_name)))
        parts.append(encoded_name)
        parts.append(struct.pack("<BB", code, array.ndim))
        parts.append(struct.pack(f"<{array.ndim}I", *array.shape))
        parts.append(np.ascontiguousarray(array, dtype=DTYPE_CODES[code]).tobytes())
    body = b"".join(parts)
    return body + _CRC.pack(zlib.crc32(body) & 0xFFFFFFFF)


def decode_weights(blob: bytes) -> ModelWeights:
    """
    Parse an MFLW blob

    Raises:
        FormatError: Bad magic, unsupported version or dtype, truncation,
            trailing bytes, or CRC mismatch
    """
    data = memoryview(blob)
    if len(data) < _HEADER.size + _CRC.size:
        raise _format_error("Blob shorter than the MFLW header", ErrorCode.TRUNCATED_PAYLOAD)
    stored_crc = _CRC.unpack_from(data, len(data) - _CRC.size)[0]
    actual_crc = zlib.crc32(data[:-_CRC.size]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise create_crc_mismatch_error(stored_crc, actual_crc)

    magic, version, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise _format_error(f"Bad magic {bytes(magic)!r}")
    if version != VERSION:
        raise _format_error(f"Unsupported MFLW version {version}", ErrorCode.UNSUPPORTED_FORMAT)

    end = len(data) - _CRC.size
    pos = _HEADER.size

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > end:
            raise _format_error("Tensor record runs past the end of the blob", ErrorCode.TRUNCATED_PAYLOAD)
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    entries = {}
    for _ in range(count):
        (name_length,) = struct.unpack("<H", take(2))
        try:
            name = bytes(take(name_length)).decode("utf-8")
        except UnicodeDecodeError as e:
            raise _format_error(f"Tensor name is not UTF-8: {e}")
        code, rank = struct.unpack("<BB", take(2))
        if code not in DTYPE_CODES:
            raise _format_error(f"Unknown dtype byte {code:#04x} for '{name}'", ErrorCode.UNSUPPORTED_FORMAT)
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        dtype = DTYPE_CODES[code]
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = take(size * dtype.itemsize)
        if name in entries:
            raise _format_error(f"Duplicate tensor name '{name}'")
        entries[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
    if pos != end:
        raise _format_error(f"{end - pos} trailing bytes after the last tensor")
    return ModelWeights(entries)


def save_weights(weights: ModelWeights, path: Union[str, Path]) -> Path:
    """Write weights to an .mflw file"""
    target = Path(path)
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(encode_weights(weights))
    except OSError as e:
        raise FileError(f"Error writing weights to {target}: {e}", ErrorCode.FILE_ERROR, file_path=str(target))
    logger.debug(f"Saved {len(weights)} tensors to {target}")
    return target


def load_weights(path: Union[str, Path]) -> ModelWeights:
    """Read weights from an .mflw file"""
    source = Path(path)
    if not source.exists():
        raise create_file_not_found_error(str(source))
    return decode_weights(source.read_bytes())
