from .convert import EXPECTED_KEYS, RASTER_SIDE, TARGET_KEY, convert, convert_record, summarize
from .errors import SourceFormatError
from .example import parse_example
from .records import crc32c, masked_crc32c, read_records

__all__ = [
    "EXPECTED_KEYS", "RASTER_SIDE", "TARGET_KEY", "convert", "convert_record",
    "summarize", "SourceFormatError", "parse_example", "crc32c",
    "masked_crc32c", "read_records",
]
