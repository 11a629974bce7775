"""TFRecord stream reading.

Each record is framed as: u64 LE payload length, u32 LE masked CRC32C of
those 8 length bytes, the payload, u32 LE masked CRC32C of the payload.
Both checksums are verified; any mismatch or truncation raises
SourceFormatError with the byte offset.
"""

import struct

from .errors import SourceFormatError

_CRC_POLY = 0x82F63B78  # CRC32C (Castagnoli), reflected
_MASK_DELTA = 0xA282EAD8


def _make_table():
    table = []
    for i in range(256):
        crc = i
        for _ in range(8):
            crc = (crc >> 1) ^ _CRC_POLY if crc & 1 else crc >> 1
        table.append(crc)
    return table


_TABLE = _make_table()


def crc32c(data: bytes) -> int:
    crc = 0xFFFFFFFF
    for b in data:
        crc = (crc >> 8) ^ _TABLE[(crc ^ b) & 0xFF]
    return crc ^ 0xFFFFFFFF


def masked_crc32c(data: bytes) -> int:
    crc = crc32c(data)
    return (((crc >> 15) | (crc << 17)) + _MASK_DELTA) & 0xFFFFFFFF


def read_records(path):
    """Yield each record's payload bytes, validating framing and checksums."""
    with open(path, "rb") as f:
        data = f.read()
    pos = 0
    index = 0
    while pos < len(data):
        header = data[pos:pos + 12]
        if len(header) < 12:
            raise SourceFormatError(
                f"{path}: record {index}: truncated length header at byte {pos}"
            )
        (length,) = struct.unpack("<Q", header[:8])
        (len_crc,) = struct.unpack("<I", header[8:12])
        if len_crc != masked_crc32c(header[:8]):
            raise SourceFormatError(
                f"{path}: record {index}: length checksum mismatch at byte {pos}"
            )
        payload = data[pos + 12:pos + 12 + length]
        if len(payload) < length:
            raise SourceFormatError(
                f"{path}: record {index}: payload truncated at byte {pos + 12} "
                f"(expected {length} bytes, file has {len(payload)})"
            )
        foot = data[pos + 12 + length:pos + 16 + length]
        if len(foot) < 4:
            raise SourceFormatError(
                f"{path}: record {index}: missing payload checksum at byte "
                f"{pos + 12 + length}"
            )
        (data_crc,) = struct.unpack("<I", foot)
        if data_crc != masked_crc32c(payload):
            raise SourceFormatError(
                f"{path}: record {index}: payload checksum mismatch at byte "
                f"{pos + 12 + length}"
            )
        yield payload
        pos += 16 + length
        index += 1
