"""
Tests for the MFLW weight format
"""

import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np
import pytest

from src.exceptions import ErrorCode, FileError, FormatError
from src.serialization import MAGIC, decode_weights, encode_weights, load_weights, save_weights
from src.tensor_nn import ModelWeights, UNetConfig, init_weights
from src.utils import make_rng


def _reseal(body: bytes) -> bytes:
    """Attach a valid CRC to a hand-edited body"""
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def _small_weights() -> ModelWeights:
    return ModelWeights({
        "a.bias": np.array([0.5, -1.25], dtype=np.float32),
        "a.weight": np.arange(6, dtype=np.float32).reshape(1, 2, 3),
    })


class TestEncodeDecode:
    """Test blob encoding"""

    def test_round_trip_is_bit_exact(self):
        """Test decode(encode(w)) reproduces names, dtypes and bytes"""
        weights = init_weights(UNetConfig(input_size=16, levels=2, base_channels=2), make_rng(9, "init"))
        assert decode_weights(encode_weights(weights)).bit_equal(weights)

    def test_float64_round_trip(self):
        """Test float64 tensors keep their dtype"""
        weights = ModelWeights({"w": np.array([1.0, 2.0], dtype=np.float64)})
        decoded = decode_weights(encode_weights(weights))
        assert decoded["w"].dtype == np.float64
        assert decoded.bit_equal(weights)

    def test_layout_header(self):
        """Test magic, version and tensor count lead the blob"""
        blob = encode_weights(_small_weights())
        assert blob[:4] == MAGIC
        assert struct.unpack("<HI", blob[4:10]) == (1, 2)
        # name length of the first (lexicographically smallest) tensor
        assert struct.unpack("<H", blob[10:12]) == (6,)
        assert blob[12:18] == b"a.bias"

    def test_encoding_is_deterministic(self):
        """Test equal weights encode to equal bytes"""
        assert encode_weights(_small_weights()) == encode_weights(_small_weights())

    def test_unsupported_dtype(self):
        """Test integer tensors are refused"""
        with pytest.raises(FormatError) as exc_info:
            encode_weights(ModelWeights({"w": np.array([1, 2], dtype=np.int32)}))
        assert exc_info.value.error_code == ErrorCode.UNSUPPORTED_FORMAT


class TestCorruption:
    """Test that damaged blobs are rejected"""

    def test_every_single_byte_flip_is_detected(self):
        """Test flipping any byte raises FormatError"""
        blob = encode_weights(_small_weights())
        for position in range(len(blob)):
            damaged = bytearray(blob)
            damaged[position] ^= 0xFF
            with pytest.raises(FormatError):
                decode_weights(bytes(damaged))

    def test_crc_mismatch_code(self):
        """Test a payload flip reports CRC_MISMATCH"""
        damaged = bytearray(encode_weights(_small_weights()))
        damaged[-6] ^= 0x01
        with pytest.raises(FormatError) as exc_info:
            decode_weights(bytes(damaged))
        assert exc_info.value.error_code == ErrorCode.CRC_MISMATCH

    def test_too_short(self):
        """Test a blob shorter than header plus CRC"""
        with pytest.raises(FormatError) as exc_info:
            decode_weights(b"MFLW")
        assert exc_info.value.error_code == ErrorCode.TRUNCATED_PAYLOAD

    def test_bad_magic(self):
        """Test a resealed blob with the wrong magic"""
        body = encode_weights(_small_weights())[:-4]
        with pytest.raises(FormatError) as exc_info:
            decode_weights(_reseal(b"XXXX" + body[4:]))
        assert exc_info.value.error_code == ErrorCode.MALFORMED_HEADER

    def test_unknown_version(self):
        """Test a resealed blob with version 2"""
        body = encode_weights(_small_weights())[:-4]
        with pytest.raises(FormatError) as exc_info:
            decode_weights(_reseal(body[:4] + struct.pack("<H", 2) + body[6:]))
        assert exc_info.value.error_code == ErrorCode.UNSUPPORTED_FORMAT

    def test_count_larger_than_records(self):
        """Test a tensor count that runs past the payload"""
        body = encode_weights(_small_weights())[:-4]
        with pytest.raises(FormatError) as exc_info:
            decode_weights(_reseal(body[:6] + struct.pack("<I", 3) + body[10:]))
        assert exc_info.value.error_code == ErrorCode.TRUNCATED_PAYLOAD

    def test_trailing_bytes(self):
        """Test extra bytes before the CRC"""
        body = encode_weights(_small_weights())[:-4]
        with pytest.raises(FormatError) as exc_info:
            decode_weights(_reseal(body + b"\x00\x00"))
        assert exc_info.value.error_code == ErrorCode.MALFORMED_HEADER


class TestWeightFiles:
    """Test file persistence"""

    def setup_method(self):
        self.temp_dir = tempfile.mkdtemp()

    def teardown_method(self):
        import shutil
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_save_and_load(self):
        """Test weights survive a file round trip and parents are created"""
        path = Path(self.temp_dir) / "nested" / "breast.mflw"
        save_weights(_small_weights(), path)
        assert path.exists()
        assert load_weights(path) == _small_weights()

    def test_load_missing(self):
        """Test a missing file raises FILE_NOT_FOUND"""
        with pytest.raises(FileError) as exc_info:
            load_weights(Path(self.temp_dir) / "missing.mflw")
        assert exc_info.value.error_code == ErrorCode.FILE_NOT_FOUND
