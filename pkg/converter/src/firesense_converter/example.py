"""Minimal decoding of serialized tf.train.Example protos.

Only the shape this converter needs is understood: Example{1: Features},
Features{1: repeated map entry {1: key, 2: Feature}}, Feature{2:
FloatList{1: floats}}. Float payloads may be packed (one length-delimited
blob) or unpacked (repeated fixed32). Unknown fields and non-float
features are skipped; all floats come back as little-endian float32.
"""

import numpy as np

from .errors import SourceFormatError

_VARINT, _FIXED64, _LENGTH, _FIXED32 = 0, 1, 2, 5


def _varint(buf: bytes, pos: int) -> tuple[int, int]:
    result = 0
    shift = 0
    while True:
        if pos >= len(buf):
            raise SourceFormatError(f"varint runs past end of buffer at byte {pos}")
        b = buf[pos]
        pos += 1
        result |= (b & 0x7F) << shift
        if not b & 0x80:
            return result, pos
        shift += 7
        if shift > 63:
            raise SourceFormatError(f"varint longer than 10 bytes at byte {pos}")


def _fields(buf: bytes):
    """Yield (field_number, wire_type, value) over one message's fields.

    value is the varint for wire type 0, raw bytes for types 1/2/5.
    """
    pos = 0
    while pos < len(buf):
        tag, pos = _varint(buf, pos)
        field, wire = tag >> 3, tag & 0x7
        if wire == _VARINT:
            value, pos = _varint(buf, pos)
        elif wire == _FIXED64:
            value, pos = buf[pos:pos + 8], pos + 8
        elif wire == _LENGTH:
            length, pos = _varint(buf, pos)
            value, pos = buf[pos:pos + length], pos + length
            if len(value) < length:
                raise SourceFormatError(f"field {field} truncated at byte {pos}")
        elif wire == _FIXED32:
            value, pos = buf[pos:pos + 4], pos + 4
        else:
            raise SourceFormatError(f"unsupported wire type {wire} for field {field}")
        if wire in (_FIXED64, _FIXED32) and len(value) < (8 if wire == _FIXED64 else 4):
            raise SourceFormatError(f"field {field} truncated at byte {pos}")
        yield field, wire, value


def _float_list(buf: bytes) -> np.ndarray:
    packed = []
    for field, wire, value in _fields(buf):
        if field != 1:
            continue
        if wire == _LENGTH:
            if len(value) % 4:
                raise SourceFormatError(
                    f"packed float blob of {len(value)} bytes is not a multiple of 4"
                )
            packed.append(np.frombuffer(value, dtype="<f4"))
        elif wire == _FIXED32:
            packed.append(np.frombuffer(value, dtype="<f4"))
    if not packed:
        return np.zeros(0, dtype=np.float32)
    return np.concatenate(packed)


def parse_example(payload: bytes) -> dict:
    """Map feature key -> float32 array for every float feature in the record."""
    features = b""
    for field, wire, value in _fields(payload):
        if field == 1 and wire == _LENGTH:
            features = value
    out = {}
    for field, wire, value in _fields(features):
        if field != 1 or wire != _LENGTH:
            continue
        key, feature = None, b""
        for efield, ewire, evalue in _fields(value):
            if efield == 1 and ewire == _LENGTH:
                key = evalue.decode("utf-8")
            elif efield == 2 and ewire == _LENGTH:
                feature = evalue
        if key is None:
            raise SourceFormatError("feature map entry without a key")
        for ffield, fwire, fvalue in _fields(feature):
            if ffield == 2 and fwire == _LENGTH:  # FloatList; bytes/int64 skipped
                out[key] = _float_list(fvalue)
    return out
